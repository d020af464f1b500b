//! Character to pinyin mapping, syllable decomposition and phonological
//! confusion sets.

pub mod inventory;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub use inventory::{FINALS, INITIALS, ZERO_INITIAL};

/// The pinyin table shipped with the crate (CJK Unified Ideographs block).
pub const BUNDLED_TABLE: &str = include_str!("../../data/pinyin_table.tsv");

/// A pinyin syllable split into initial, final and tone (0 = neutral).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Syllable {
    pub initial: &'static str,
    pub rime: &'static str,
    pub tone: u8,
}

impl Syllable {
    /// The (initial, final) pair that determines phonological similarity.
    pub fn key(&self) -> (&'static str, &'static str) {
        (self.initial, self.rime)
    }

    /// Toneless written form.
    pub fn toneless(&self) -> String {
        if self.initial == ZERO_INITIAL {
            self.rime.to_string()
        } else {
            format!("{}{}", self.initial, self.rime)
        }
    }
}

impl fmt::Display for Syllable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.toneless(), self.tone)
    }
}

/// Splits a written syllable such as `zhuang1`, `lv4` or `an` into its parts.
///
/// `v` is accepted for `ü`; a missing tone digit means neutral tone.
pub fn decompose(text: &str) -> Result<Syllable> {
    let err = |reason| Error::Syllable {
        text: text.to_string(),
        reason,
    };
    let lowered = text.trim().to_lowercase().replace("u\u{308}", "ü").replace('v', "ü");

    let (body, tone) = match lowered.char_indices().last() {
        Some((i, c)) if c.is_ascii_digit() => {
            let tone = c.to_digit(10).unwrap() as u8;
            if tone > 4 {
                return Err(err("tone digit must be 0-4"));
            }
            (&lowered[..i], tone)
        }
        Some(_) => (lowered.as_str(), 0),
        None => return Err(err("empty syllable")),
    };
    if body.is_empty() {
        return Err(err("empty syllable"));
    }
    if !body.chars().all(|c| c.is_ascii_lowercase() || c == 'ü') {
        return Err(err("unexpected character"));
    }

    let initial = ["zh", "ch", "sh"]
        .into_iter()
        .chain(INITIALS.iter().copied().filter(|i| i.len() == 1))
        .find(|i| body.starts_with(i));
    let (initial, rest) = match initial {
        Some(i) => (i, &body[i.len()..]),
        None => (ZERO_INITIAL, body),
    };
    if rest.is_empty() {
        return Err(err("empty final"));
    }
    let rime = inventory::intern_final(rest).ok_or_else(|| err("unknown final"))?;
    if !inventory::is_legal(initial, rime) {
        return Err(err("not a legal initial/final combination"));
    }
    Ok(Syllable {
        initial: inventory::intern_initial(initial).unwrap(),
        rime,
        tone,
    })
}

/// Whether `ch` is a CJK ideograph (the characters that carry pinyin and
/// take part in corruption).
pub fn is_chinese(ch: char) -> bool {
    matches!(ch as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF | 0x3007)
}

/// Character readings plus a reverse index over default readings.
#[derive(Debug, Clone, Default)]
pub struct PinyinTable {
    readings: HashMap<char, Vec<Syllable>>,
    by_key: BTreeMap<(&'static str, &'static str), BTreeSet<char>>,
}

impl PinyinTable {
    pub fn from_entries(entries: impl IntoIterator<Item = (char, Vec<Syllable>)>) -> Result<Self> {
        let mut table = PinyinTable::default();
        for (ch, readings) in entries {
            table.insert(ch, readings).map_err(|e| Error::Encoding(e.to_string()))?;
        }
        Ok(table)
    }

    fn insert(&mut self, ch: char, readings: Vec<Syllable>) -> std::result::Result<(), String> {
        let Some(default) = readings.first().copied() else {
            return Err(format!("character {ch:?} has no readings"));
        };
        if self.readings.contains_key(&ch) {
            return Err(format!("duplicate character {ch:?}"));
        }
        self.readings.insert(ch, readings);
        self.by_key.entry(default.key()).or_default().insert(ch);
        Ok(())
    }

    /// Parses the `<char>\t<reading>[,<reading>...]` format.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut table = PinyinTable::default();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (ch, readings) = line
                .split_once('\t')
                .ok_or_else(|| Error::load(origin, lineno, "missing tab separator"))?;
            let mut chars = ch.chars();
            let (Some(ch), None) = (chars.next(), chars.next()) else {
                return Err(Error::load(origin, lineno, "first field must be one character"));
            };
            let readings = readings
                .split(',')
                .map(|r| decompose(r).map_err(|e| Error::load(origin, lineno, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            table.insert(ch, readings).map_err(|m| Error::load(origin, lineno, m))?;
        }
        if table.readings.is_empty() {
            return Err(Error::EmptyInput(origin.display().to_string()));
        }
        Ok(table)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TABLE, Path::new("<bundled pinyin table>")).expect("bundled pinyin table is well formed")
    }

    /// Serializes back into the table file format, ordered by code point.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ch in self.characters() {
            let readings: Vec<String> = self.readings[&ch].iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("{ch}\t{}\n", readings.join(",")));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    /// Every character in the table, in code point order.
    pub fn characters(&self) -> Vec<char> {
        let mut chars: Vec<_> = self.readings.keys().copied().collect();
        chars.sort_unstable();
        chars
    }

    pub fn contains(&self, ch: char) -> bool {
        self.readings.contains_key(&ch)
    }

    pub fn readings(&self, ch: char) -> Option<&[Syllable]> {
        self.readings.get(&ch).map(Vec::as_slice)
    }

    /// Default (first-listed) reading; `None` for characters outside the table.
    pub fn char_to_syllable(&self, ch: char) -> Option<Syllable> {
        self.readings.get(&ch).map(|r| r[0])
    }

    /// Characters whose default reading has the given (initial, final).
    pub fn characters_with(&self, key: (&'static str, &'static str)) -> Vec<char> {
        self.by_key
            .get(&key)
            .map(|set| set.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Characters sharing `ch`'s default (initial, final), tones ignored,
    /// excluding `ch`, in code point order.
    pub fn confusion_candidates(&self, ch: char) -> Result<Vec<char>> {
        let syl = self.char_to_syllable(ch).ok_or(Error::UnknownCharacter(ch))?;
        Ok(self.by_key[&syl.key()].iter().copied().filter(|&c| c != ch).collect())
    }
}

pub fn load_pinyin_table(path: impl AsRef<Path>) -> Result<PinyinTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PinyinTable::parse(&text, path)
}

//! Vocabularies, phonetics-aware sequence assembly and the separation mask.
//!
//! A sentence of `n` characters becomes a sequence of `2n` slots: the
//! characters first, then one (initial, final) pinyin slot per character.
//! Slot `i` and slot `i + n` share position id `i + 1`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::CorrectionExample;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::pinyin::{inventory, PinyinTable};
use crate::scalar::Scalar;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const NOPY: &str = "[NOPY]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NOPY_ID: usize = 1;

const RESERVED: usize = 2;

/// Character vocabulary. Ids 0 and 1 are `[PAD]` and `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    /// Vocabulary over `chars` in the given order, after the reserved ids.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + RESERVED).is_some() {
                return Err(Error::Encoding(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        Ok(CharVocab { chars, index })
    }

    /// Characters with count at least `min_count`, most frequent first and
    /// ties broken by code point.
    pub fn from_counts(counts: &HashMap<char, usize>, min_count: usize) -> Result<Self> {
        let mut kept: Vec<(char, usize)> = counts
            .iter()
            .filter(|&(_, &n)| n >= min_count.max(1))
            .map(|(&c, &n)| (c, n))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::from_chars(kept.into_iter().map(|(c, _)| c))
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    /// Id of `ch`, or `[UNK]`.
    pub fn id(&self, ch: char) -> usize {
        self.get(ch).unwrap_or(UNK_ID)
    }

    /// Character for a non-reserved id.
    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn token(&self, id: usize) -> Option<String> {
        match id {
            PAD_ID => Some(PAD.to_string()),
            UNK_ID => Some(UNK.to_string()),
            _ => self.char_of(id).map(String::from),
        }
    }

    /// Non-reserved characters in id order.
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Inverse of `encode` for in-vocabulary characters. Reserved ids decode
    /// to `fallback`.
    pub fn decode(&self, ids: &[usize], fallback: char) -> String {
        ids.iter().map(|&id| self.char_of(id).unwrap_or(fallback)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::with_capacity(self.chars.len() * 4 + 16);
        out.push_str(PAD);
        out.push('\n');
        out.push_str(UNK);
        out.push('\n');
        for &c in &self.chars {
            out.push(c);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        for expected in [PAD, UNK] {
            match lines.next() {
                Some((_, l)) if l == expected => {}
                Some((i, _)) => return Err(Error::load(origin, i + 1, format!("expected {expected}"))),
                None => return Err(Error::EmptyInput(origin.display().to_string())),
            }
        }
        let mut chars = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let mut it = line.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return Err(Error::load(origin, i + 1, "vocabulary line must hold one character"));
            };
            if !seen.insert(c) {
                return Err(Error::load(origin, i + 1, format!("duplicate entry {c:?}")));
            }
            chars.push(c);
        }
        Self::from_chars(chars)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn count_chars(text: &str, counts: &mut HashMap<char, usize>) {
    for c in text.chars().filter(|c| !c.is_whitespace() && !c.is_control()) {
        *counts.entry(c).or_insert(0) += 1;
    }
}

/// Counts every non-whitespace character across the files.
pub fn build_char_vocab<P: AsRef<Path>>(corpus_paths: &[P], min_count: usize) -> Result<CharVocab> {
    let mut counts = HashMap::new();
    for p in corpus_paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        count_chars(&text, &mut counts);
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("corpus".into()));
    }
    CharVocab::from_counts(&counts, min_count)
}

/// Vocabulary over both sides of a set of examples.
pub fn char_vocab_from_examples(examples: &[CorrectionExample], min_count: usize) -> Result<CharVocab> {
    let mut counts = HashMap::new();
    for ex in examples {
        for &c in ex.source.iter().chain(&ex.target) {
            if !c.is_whitespace() && !c.is_control() {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("examples".into()));
    }
    CharVocab::from_counts(&counts, min_count)
}

/// Index spaces for initials and finals. Both start with `[PAD]`, `[NOPY]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeVocab {
    initials: Vec<&'static str>,
    finals: Vec<&'static str>,
    initial_index: BTreeMap<&'static str, usize>,
    final_index: BTreeMap<&'static str, usize>,
}

impl Default for PhonemeVocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl PhonemeVocab {
    /// `[PAD] [NOPY] ∅ b p m ...` and `[PAD] [NOPY] a o e ...`.
    pub fn standard() -> Self {
        let mut initials = vec![PAD, NOPY, inventory::ZERO_INITIAL];
        initials.extend(inventory::INITIALS);
        let mut finals = vec![PAD, NOPY];
        finals.extend(inventory::FINALS);
        let index = |v: &[&'static str]| v.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        PhonemeVocab {
            initial_index: index(&initials),
            final_index: index(&finals),
            initials,
            finals,
        }
    }

    pub fn num_initials(&self) -> usize {
        self.initials.len()
    }

    pub fn num_finals(&self) -> usize {
        self.finals.len()
    }

    pub fn initial_id(&self, initial: &str) -> Option<usize> {
        self.initial_index.get(initial).copied()
    }

    pub fn final_id(&self, fin: &str) -> Option<usize> {
        self.final_index.get(fin).copied()
    }

    pub fn initial(&self, id: usize) -> Option<&'static str> {
        self.initials.get(id).copied()
    }

    pub fn final_(&self, id: usize) -> Option<&'static str> {
        self.finals.get(id).copied()
    }

    /// (initial id, final id) of a character's default reading, or
    /// `([NOPY], [NOPY])` when it has none.
    pub fn ids_for(&self, ch: char, table: &PinyinTable) -> (usize, usize) {
        table
            .char_to_syllable(ch)
            .and_then(|s| Some((self.initial_id(s.initial)?, self.final_id(s.rime)?)))
            .unwrap_or((NOPY_ID, NOPY_ID))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.initials.iter().chain([&"\u{0}"]).chain(&self.finals) {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// The additive mask over `2n` slots that hides text keys from pinyin
/// queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeparationMask {
    n: usize,
}

impl SeparationMask {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Whether entry `(i, j)` (zero-based) carries the mask value.
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        i >= self.n && j < self.n
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let t = 2 * self.n;
        let mut m = Tensor::zeros(&[t, t]);
        let data = m.data_mut();
        for i in self.n..t {
            data[i * t..i * t + self.n].fill(T::mask_value());
        }
        m
    }
}

pub fn build_separation_mask(n: usize) -> Result<SeparationMask> {
    if n == 0 {
        return Err(Error::EmptyInput("sequence".into()));
    }
    Ok(SeparationMask { n })
}

/// One encoded sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneticsAwareBatch {
    pub char_ids: Vec<usize>,
    pub initial_ids: Vec<usize>,
    pub final_ids: Vec<usize>,
    /// `2n` entries; slot `i` and `i + n` both hold `i + 1`.
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: SeparationMask,
    /// Target ids repeated twice, one copy per half.
    pub labels_z: Option<Vec<usize>>,
}

impl PhoneticsAwareBatch {
    pub fn n(&self) -> usize {
        self.char_ids.len()
    }
}

/// Encodes one sentence. Characters outside the vocabulary become `[UNK]`
/// and get `[NOPY]` phonemes, as do characters without a reading.
pub fn encode_example(
    ex: &CorrectionExample,
    cv: &CharVocab,
    pv: &PhonemeVocab,
    table: &PinyinTable,
    with_labels: bool,
    max_len: usize,
) -> Result<PhoneticsAwareBatch> {
    let n = ex.source.len();
    if with_labels && ex.target.len() != n {
        return Err(Error::Encoding(format!(
            "source has {n} characters but target has {}",
            ex.target.len()
        )));
    }
    if n > max_len {
        return Err(Error::TooLong { len: n, max_len });
    }
    let mask = build_separation_mask(n)?;
    let char_ids: Vec<usize> = ex.source.iter().map(|&c| cv.id(c)).collect();
    let (initial_ids, final_ids) = ex
        .source
        .iter()
        .zip(&char_ids)
        .map(|(&c, &id)| {
            if id == UNK_ID {
                (NOPY_ID, NOPY_ID)
            } else {
                pv.ids_for(c, table)
            }
        })
        .unzip();
    let positions = (1..=n).chain(1..=n).collect();
    let segments = std::iter::repeat_n(0, n).chain(std::iter::repeat_n(1, n)).collect();
    let labels_z = with_labels.then(|| {
        let y: Vec<usize> = ex.target.iter().map(|&c| cv.id(c)).collect();
        [y.as_slice(), y.as_slice()].concat()
    });
    Ok(PhoneticsAwareBatch {
        char_ids,
        initial_ids,
        final_ids,
        positions,
        segments,
        mask,
        labels_z,
    })
}

/// Several encoded sentences padded to a common length `n`.
///
/// Per-example layouts are `[n]` for the text and raw passes and `[2n]` for
/// the phonetics-aware pass: text slots `[0, n)` then pinyin slots `[n, 2n)`.
/// Padded slots use id 0 and position 0 and are masked as keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub n: usize,
    pub lengths: Vec<usize>,
    pub char_ids: Vec<usize>,
    pub initial_ids: Vec<usize>,
    pub final_ids: Vec<usize>,
    /// Target ids per text slot; `None` at padding.
    pub labels: Option<Vec<Option<usize>>>,
}

impl Batch {
    pub fn collate(items: &[PhoneticsAwareBatch]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("batch".into()));
        }
        let n = items.iter().map(PhoneticsAwareBatch::n).max().unwrap_or(0);
        let with_labels = items[0].labels_z.is_some();
        let b = items.len();
        let mut batch = Batch {
            n,
            lengths: Vec::with_capacity(b),
            char_ids: vec![PAD_ID; b * n],
            initial_ids: vec![PAD_ID; b * n],
            final_ids: vec![PAD_ID; b * n],
            labels: with_labels.then(|| vec![None; b * n]),
        };
        for (k, it) in items.iter().enumerate() {
            let len = it.n();
            let row = k * n..k * n + len;
            batch.lengths.push(len);
            batch.char_ids[row.clone()].copy_from_slice(&it.char_ids);
            batch.initial_ids[row.clone()].copy_from_slice(&it.initial_ids);
            batch.final_ids[row.clone()].copy_from_slice(&it.final_ids);
            match (&mut batch.labels, &it.labels_z) {
                (Some(labels), Some(z)) => {
                    for (dst, &y) in labels[row].iter_mut().zip(&z[..len]) {
                        *dst = Some(y);
                    }
                }
                (None, None) => {}
                _ => return Err(Error::Encoding("batch mixes labeled and unlabeled examples".into())),
            }
        }
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// `[B * n]` position ids for a single sub-sequence.
    pub fn half_positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.size() * self.n];
        for (k, &len) in self.lengths.iter().enumerate() {
            for i in 0..len {
                out[k * self.n + i] = i + 1;
            }
        }
        out
    }

    /// `[B * n]`: whether each text slot holds a real character.
    pub fn valid(&self) -> Vec<bool> {
        let mut out = vec![false; self.size() * self.n];
        for (k, &len) in self.lengths.iter().enumerate() {
            out[k * self.n..k * self.n + len].fill(true);
        }
        out
    }

    /// `[B, 2n, 2n]` mask for the phonetics-aware pass.
    pub fn phonetic_mask<T: Scalar>(&self) -> Tensor<T> {
        let (n, t) = (self.n, 2 * self.n);
        let mut m = Tensor::zeros(&[self.size(), t, t]);
        let data = m.data_mut();
        for (k, &len) in self.lengths.iter().enumerate() {
            let block = &mut data[k * t * t..(k + 1) * t * t];
            for i in 0..t {
                let row = &mut block[i * t..(i + 1) * t];
                row[len..n].fill(T::mask_value());
                row[n + len..].fill(T::mask_value());
                if i >= n {
                    row[..n].fill(T::mask_value());
                }
            }
        }
        m
    }

    /// `[B, n, n]` padding-only mask for a single sub-sequence.
    pub fn half_mask<T: Scalar>(&self) -> Tensor<T> {
        let n = self.n;
        let mut m = Tensor::zeros(&[self.size(), n, n]);
        let data = m.data_mut();
        for (k, &len) in self.lengths.iter().enumerate() {
            for i in 0..n {
                data[(k * n + i) * n + len..(k * n + i + 1) * n].fill(T::mask_value());
            }
        }
        m
    }

    /// The labels of the text slots, or an error for an unlabeled batch.
    pub fn labels(&self) -> Result<&[Option<usize>]> {
        self.labels.as_deref().ok_or(Error::NoTargets)
    }
}

/// Human-readable listing of a batch, one slot per line.
pub fn describe(item: &PhoneticsAwareBatch, cv: &CharVocab, pv: &PhonemeVocab) -> String {
    let mut out = String::new();
    let n = item.n();
    for s in 0..2 * n {
        let token = if s < n {
            cv.token(item.char_ids[s]).unwrap_or_default()
        } else {
            let i = s - n;
            format!(
                "{}+{}",
                pv.initial(item.initial_ids[i]).unwrap_or("?"),
                pv.final_(item.final_ids[i]).unwrap_or("?")
            )
        };
        let _ = writeln!(out, "{}\t{}\t{}", item.positions[s], item.segments[s], token);
    }
    out
}

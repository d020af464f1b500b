use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_fragment, write_dataset, Branch, CorrectionExample, CorruptionPolicy};
use crate::error::{Error, Result};
use crate::pinyin::{decompose, inventory, is_chinese, PinyinTable, Syllable};

pub const MAX_FRAGMENT: usize = 256;

const SENTENCE_END: &[char] = &['。', '！', '？', '!', '?', '；', ';', '…'];

/// Splits a paragraph into pieces of at most `max` characters, cutting after
/// the last sentence-final mark inside each window when there is one.
pub fn split_fragments(text: &[char], max: usize) -> Vec<Vec<char>> {
    let max = max.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < text.len() {
        let end = (start + max).min(text.len());
        let cut = if end == text.len() {
            end
        } else {
            text[start..end]
                .iter()
                .rposition(|c| SENTENCE_END.contains(c))
                .map_or(end, |i| start + i + 1)
        };
        out.push(text[start..cut].to_vec());
        start = cut;
    }
    out
}

/// Counters gathered while corrupting a corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorruptionStats {
    pub fragments: usize,
    pub chinese_chars: usize,
    pub selected: usize,
    pub changed: usize,
    /// Applied branch counts.
    pub confusion: usize,
    pub random: usize,
    pub keep: usize,
}

impl CorruptionStats {
    pub fn selected_fraction(&self) -> f64 {
        ratio(self.selected, self.chinese_chars)
    }

    /// (confusion, random, keep) as fractions of the selected positions.
    pub fn branch_fractions(&self) -> (f64, f64, f64) {
        (
            ratio(self.confusion, self.selected),
            ratio(self.random, self.selected),
            ratio(self.keep, self.selected),
        )
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Cuts every non-empty line of `texts` into fragments and corrupts each
/// with its own generator stream, numbered in reading order.
pub fn make_pretrain_corpus(
    texts: &[String],
    max_fragment: usize,
    policy: &CorruptionPolicy,
    table: &PinyinTable,
    random_pool: &[char],
) -> Result<(Vec<CorrectionExample>, CorruptionStats)> {
    policy.validate()?;
    let mut examples = Vec::new();
    let mut stats = CorruptionStats::default();
    for text in texts {
        for line in text.lines() {
            let chars: Vec<char> = line.chars().filter(|c| !c.is_control()).collect();
            let trimmed: Vec<char> = {
                let s: String = chars.iter().collect();
                s.trim().chars().collect()
            };
            for frag in split_fragments(&trimmed, max_fragment) {
                let mut rng = policy.fragment_rng(examples.len() as u64);
                let c = corrupt_fragment(&frag, policy, table, random_pool, &mut rng)?;
                stats.fragments += 1;
                stats.chinese_chars += frag.iter().filter(|&&ch| is_chinese(ch)).count();
                stats.selected += c.selections.len();
                stats.changed += c.example.error_positions().len();
                for s in &c.selections {
                    match s.applied {
                        Branch::Confusion => stats.confusion += 1,
                        Branch::Random => stats.random += 1,
                        Branch::Keep => stats.keep += 1,
                    }
                }
                examples.push(c.example);
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput("pretraining text".into()));
    }
    Ok((examples, stats))
}

/// Reads raw text files and writes the corrupted fragments to `out`.
pub fn write_pretrain_corpus<P: AsRef<Path>>(
    inputs: &[P],
    out: impl AsRef<Path>,
    max_fragment: usize,
    policy: &CorruptionPolicy,
    table: &PinyinTable,
    random_pool: &[char],
) -> Result<CorruptionStats> {
    let texts = inputs
        .iter()
        .map(|p| std::fs::read_to_string(p.as_ref()).map_err(|e| Error::io(p.as_ref(), e)))
        .collect::<Result<Vec<_>>>()?;
    let (examples, stats) = make_pretrain_corpus(&texts, max_fragment, policy, table, random_pool)?;
    write_dataset(out, &examples)?;
    Ok(stats)
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub vocab_size: usize,
    pub examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(vocab_size: usize, examples: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        ToySpec {
            vocab_size,
            examples,
            min_len,
            max_len,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.examples == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("invalid toy corpus parameters {self:?}")));
        }
        if self.vocab_size > 20_000 {
            return Err(Error::Config("toy vocabulary is limited to 20000 characters".into()));
        }
        Ok(())
    }
}

/// Sidecar describing how a toy corpus was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub spec: ToySpec,
    pub policy: CorruptionPolicy,
    /// Character to toned syllable, e.g. `"丁": "bo2"`.
    pub syllables: BTreeMap<char, String>,
}

/// A synthetic language: characters grouped four to a syllable (tones
/// 1-4), sentences from a sparse Markov chain, corrupted with the default
/// policy.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub examples: Vec<CorrectionExample>,
    pub chars: Vec<char>,
    pub table: PinyinTable,
    pub manifest: ToyManifest,
}

const TOY_SUCCESSORS: usize = 3;

pub fn make_toy_corpus(spec: ToySpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let policy = CorruptionPolicy::with_seed(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let syllables = inventory::all_syllables();
    // A fixed stride spreads consecutive groups over different initials.
    let stride = 37;
    let mut chars = Vec::with_capacity(spec.vocab_size);
    let mut entries: Vec<(char, Vec<Syllable>)> = Vec::with_capacity(spec.vocab_size);
    for i in 0..spec.vocab_size {
        let group = i / 4;
        let base = &syllables[(group * stride) % syllables.len()];
        let tone = (i % 4) as u8 + 1;
        let ch = char::from_u32(0x4E00 + i as u32).expect("CJK range");
        chars.push(ch);
        entries.push((ch, vec![decompose(&format!("{base}{tone}"))?]));
    }
    let table = PinyinTable::from_entries(entries.clone())?;

    let successors: Vec<Vec<usize>> = (0..spec.vocab_size)
        .map(|_| {
            (0..TOY_SUCCESSORS)
                .map(|_| rng.random_range(0..spec.vocab_size))
                .collect()
        })
        .collect();
    let mut examples = Vec::with_capacity(spec.examples);
    for k in 0..spec.examples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = rng.random_range(0..spec.vocab_size);
        let mut clean = Vec::with_capacity(len);
        for _ in 0..len {
            clean.push(chars[cur]);
            cur = successors[cur][rng.random_range(0..TOY_SUCCESSORS)];
        }
        let c = corrupt_fragment(&clean, &policy, &table, &chars, &mut policy.fragment_rng(k as u64))?;
        examples.push(c.example);
    }

    let manifest = ToyManifest {
        spec,
        policy,
        syllables: entries.iter().map(|(c, s)| (*c, s[0].to_string())).collect(),
    };
    Ok(ToyCorpus {
        examples,
        chars,
        table,
        manifest,
    })
}

impl ToyCorpus {
    /// Writes `<stem>.tsv`, `<stem>.pinyin.tsv` and `<stem>.manifest.json`
    /// into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_dataset(dir.join(format!("{stem}.tsv")), &self.examples)?;
        let table = dir.join(format!("{stem}.pinyin.tsv"));
        std::fs::write(&table, self.table.to_tsv()).map_err(|e| Error::io(&table, e))?;
        let manifest = dir.join(format!("{stem}.manifest.json"));
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Encoding(e.to_string()))?;
        std::fs::write(&manifest, json + "\n").map_err(|e| Error::io(&manifest, e))
    }
}

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CorrectionExample;
use crate::error::{Error, Result};
use crate::pinyin::{is_chinese, PinyinTable};

/// How clean text is turned into training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPolicy {
    /// Fraction of Chinese characters selected per fragment.
    pub select_rate: f64,
    pub p_confusion: f64,
    pub p_random: f64,
    pub p_keep: f64,
    pub seed: u64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        CorruptionPolicy {
            select_rate: 0.15,
            p_confusion: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
            seed: 0,
        }
    }
}

impl CorruptionPolicy {
    pub fn with_seed(seed: u64) -> Self {
        CorruptionPolicy {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("select_rate", self.select_rate),
            ("p_confusion", self.p_confusion),
            ("p_random", self.p_random),
            ("p_keep", self.p_keep),
        ];
        for (name, v) in all {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        let sum = self.p_confusion + self.p_random + self.p_keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("branch probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Number of positions selected among `n` candidates: `⌈rate · n⌉`.
    pub fn selection_count(&self, n: usize) -> usize {
        // The tolerance keeps 0.15 * 20 = 3.0000000000000004 from rounding up to 4.
        let k = (self.select_rate * n as f64 - 1e-9).ceil().max(0.0) as usize;
        k.min(n)
    }

    /// Independent generator for fragment `index`, so fragments can be
    /// corrupted in any order with identical results.
    pub fn fragment_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Confusion,
    Random,
    Keep,
}

/// One selected position and what happened to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub position: usize,
    /// The branch drawn from the policy.
    pub drawn: Branch,
    /// The branch applied after fall-through (an empty confusion set falls
    /// to the random branch; an empty random pool keeps the character).
    pub applied: Branch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub example: CorrectionExample,
    pub selections: Vec<Selection>,
}

fn draw_branch(policy: &CorruptionPolicy, rng: &mut impl Rng) -> Branch {
    let u: f64 = rng.random();
    if u < policy.p_confusion {
        Branch::Confusion
    } else if u < policy.p_confusion + policy.p_random {
        Branch::Random
    } else {
        Branch::Keep
    }
}

/// Uniform draw from `pool` excluding `avoid`.
fn pick_other(pool: &[char], avoid: char, rng: &mut impl Rng) -> Option<char> {
    let others = pool.iter().filter(|&&c| c != avoid).count();
    if others == 0 {
        return None;
    }
    let k = rng.random_range(0..others);
    pool.iter().copied().filter(|&c| c != avoid).nth(k)
}

/// Corrupts the Chinese characters of `clean`; the target is `clean`.
///
/// `random_pool` is the set of characters for the random branch. A
/// fragment without Chinese characters comes back unchanged.
pub fn corrupt_fragment(
    clean: &[char],
    policy: &CorruptionPolicy,
    table: &PinyinTable,
    random_pool: &[char],
    rng: &mut impl Rng,
) -> Result<Corruption> {
    policy.validate()?;
    let candidates: Vec<usize> = (0..clean.len()).filter(|&i| is_chinese(clean[i])).collect();
    let k = policy.selection_count(candidates.len());
    let mut chosen: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();

    let mut source = clean.to_vec();
    let mut selections = Vec::with_capacity(k);
    for position in chosen {
        let original = clean[position];
        let drawn = draw_branch(policy, rng);
        let mut applied = drawn;
        if applied == Branch::Confusion {
            let set = table.confusion_candidates(original).unwrap_or_default();
            if set.is_empty() {
                applied = Branch::Random;
            } else {
                source[position] = set[rng.random_range(0..set.len())];
            }
        }
        if applied == Branch::Random {
            match pick_other(random_pool, original, rng) {
                Some(c) => source[position] = c,
                None => applied = Branch::Keep,
            }
        }
        selections.push(Selection {
            position,
            drawn,
            applied,
        });
    }
    Ok(Corruption {
        example: CorrectionExample {
            source,
            target: clean.to_vec(),
        },
        selections,
    })
}

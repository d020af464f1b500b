//! The four loss terms and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_phonetics, forward_raw, BoundParams, ModelConfig, Noise};
use crate::numeric::{self, Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::textcodec::Batch;

/// Coefficients of the pinyin, KL and raw-text terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.2,
            gamma: 0.97,
        }
    }
}

impl LossWeights {
    /// Pretraining drops the self-distillation terms.
    pub fn pretrain(alpha: f64) -> Self {
        LossWeights {
            alpha,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Whether the raw-text pass contributes to the loss.
    pub fn needs_raw_pass(&self) -> bool {
        self.beta != 0.0 || self.gamma != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_text: f64,
    pub l_pinyin: f64,
    pub l_kl: f64,
    pub l_raw: f64,
    pub l_joint: f64,
}

/// Mean `-log P(y_i | S)` over labeled text positions.
pub fn loss_text<T: Scalar>(text_logits: &Tensor<T>, labels: &[Option<usize>]) -> Result<T> {
    numeric::cross_entropy(text_logits, labels)
}

/// Mean `-log P(z_i | S)` over labeled pinyin positions; the labels are the
/// second half of the duplicated targets.
pub fn loss_pinyin<T: Scalar>(pinyin_logits: &Tensor<T>, labels: &[Option<usize>]) -> Result<T> {
    numeric::cross_entropy(pinyin_logits, labels)
}

/// Mean symmetric KL between the two passes over included text positions.
pub fn loss_selfdistill<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>, include: Option<&[bool]>) -> Result<T> {
    numeric::bidirectional_kl(p_logits, q_logits, include)
}

/// Mean `-log P(y_i | X)` from the raw-text pass.
pub fn loss_raw<T: Scalar>(raw_logits: &Tensor<T>, labels: &[Option<usize>]) -> Result<T> {
    numeric::cross_entropy(raw_logits, labels)
}

/// Combines the components as `text + α·pinyin + β·kl + γ·raw`.
pub fn loss_joint(l_text: f64, l_pinyin: f64, l_kl: f64, l_raw: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_text", l_text),
        ("l_pinyin", l_pinyin),
        ("l_kl", l_kl),
        ("l_raw", l_raw),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_text,
        l_pinyin,
        l_kl,
        l_raw,
        l_joint: l_text + w.alpha * l_pinyin + w.beta * l_kl + w.gamma * l_raw,
    })
}

/// The joint loss recorded on a graph.
pub struct JointLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Runs both passes on a labeled batch and records the joint loss.
///
/// When `β = γ = 0` the raw-text pass contributes nothing and is skipped;
/// `l_kl` and `l_raw` are then reported as 0.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    w: &LossWeights,
    noise: &mut Noise<'_>,
) -> Result<JointLoss> {
    w.validate()?;
    let labels = batch.labels()?;
    let out = forward_phonetics(g, p, cfg, batch, noise, None)?;
    let text = g.cross_entropy(out.text_logits, labels)?;
    let pinyin = g.cross_entropy(out.pinyin_logits, labels)?;
    let mut terms = vec![(text, T::one()), (pinyin, T::of(w.alpha))];
    let (mut kl_value, mut raw_value) = (0.0, 0.0);
    if w.needs_raw_pass() {
        let raw_logits = forward_raw(g, p, cfg, batch, noise)?;
        let kl = g.bidirectional_kl(out.text_logits, raw_logits, &batch.valid())?;
        let raw = g.cross_entropy(raw_logits, labels)?;
        kl_value = g.value(kl).item().as_f64();
        raw_value = g.value(raw).item().as_f64();
        terms.push((kl, T::of(w.beta)));
        terms.push((raw, T::of(w.gamma)));
    }
    let breakdown = loss_joint(
        g.value(text).item().as_f64(),
        g.value(pinyin).item().as_f64(),
        kl_value,
        raw_value,
        w,
    )?;
    let total = g.weighted_sum(&terms)?;
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFinite(format!("l_joint ({breakdown:?})")));
    }
    Ok(JointLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_ce(logits: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (row, label) in logits.iter().zip(labels) {
            let Some(y) = label else { continue };
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[*y].exp() / z).ln();
            count += 1;
        }
        total / count as f64
    }

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn cross_entropy_terms_known_values() {
        let confident = Tensor::from_f64(&[2, 3], &[50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
        let labels = [Some(0), Some(2)];
        for f in [loss_text::<f64>, loss_pinyin::<f64>, loss_raw::<f64>] {
            assert!(f(&confident, &labels).unwrap() < 1e-12);
            let uniform = Tensor::zeros(&[3, 4]);
            let v = f(&uniform, &[Some(1), Some(3), Some(0)]).unwrap();
            assert!((v - 4f64.ln()).abs() < 1e-12);
            assert!(matches!(f(&uniform, &[None, None, None]), Err(Error::NoTargets)));
        }
    }

    #[test]
    fn cross_entropy_terms_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let rows = rng.random_range(1..8);
            let cols = rng.random_range(2..7);
            let logits = random_rows(&mut rng, rows, cols);
            let mut labels: Vec<Option<usize>> = (0..rows)
                .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..cols)))
                .collect();
            labels[0] = Some(0);
            let expect = naive_ce(&logits, &labels);
            let t = tensor(&logits);
            for v in [loss_text(&t, &labels), loss_pinyin(&t, &labels), loss_raw(&t, &labels)] {
                assert!((v.unwrap() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selfdistill_values() {
        let (pp, qq) = ([0.8f64, 0.2], [0.6f64, 0.4]);
        let p = Tensor::from_f64(&[1, 2], &[pp[0].ln(), pp[1].ln()]).unwrap();
        let q = Tensor::from_f64(&[1, 2], &[qq[0].ln(), qq[1].ln()]).unwrap();
        assert_eq!(loss_selfdistill(&p, &p, None).unwrap(), 0.0);
        let pq: f64 = loss_selfdistill(&p, &q, None).unwrap();
        assert_eq!(pq, loss_selfdistill(&q, &p, None).unwrap());
        let oracle: f64 = 0.5
            * (0..2)
                .map(|i| pp[i] * (pp[i] / qq[i]).ln() + qq[i] * (qq[i] / pp[i]).ln())
                .sum::<f64>();
        assert!((pq - oracle).abs() < 1e-12);
        assert!((pq - 0.0981).abs() < 1e-3, "{pq}");
        assert_eq!(loss_selfdistill(&p, &q, Some(&[false])).unwrap(), 0.0);
    }

    #[test]
    fn joint_combination() {
        let b = loss_joint(1.0, 0.5, 0.2, 1.0, &LossWeights::default()).unwrap();
        assert!((b.l_joint - 2.71).abs() < 1e-12, "{}", b.l_joint);
        let b = loss_joint(1.0, 0.5, 0.2, 1.0, &LossWeights::pretrain(1.0)).unwrap();
        assert_eq!(b.l_joint, 1.5);
        let e = loss_joint(1.0, f64::NAN, 0.2, 1.0, &LossWeights::default()).unwrap_err();
        assert!(e.to_string().contains("l_pinyin"), "{e}");
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn joint_is_monotone_in_each_component(
            base in prop::array::uniform4(0.0f64..5.0),
            bump in 0.0f64..3.0,
            which in 0usize..4,
            w in prop::array::uniform3(0.0f64..3.0),
        ) {
            let w = LossWeights { alpha: w[0], beta: w[1], gamma: w[2] };
            let before = loss_joint(base[0], base[1], base[2], base[3], &w).unwrap();
            let mut c = base;
            c[which] += bump;
            let after = loss_joint(c[0], c[1], c[2], c[3], &w).unwrap();
            prop_assert!(after.l_joint >= before.l_joint);
            prop_assert_eq!(
                before.l_joint,
                before.l_text + w.alpha * before.l_pinyin + w.beta * before.l_kl + w.gamma * before.l_raw
            );
        }

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..1000, rows in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_rows(&mut rng, rows, 4);
            let b = random_rows(&mut rng, rows, 4);
            let labels: Vec<Option<usize>> = (0..rows).map(|i| Some(i % 4)).collect();
            let mut order: Vec<usize> = (0..rows).collect();
            order.rotate_left(1);
            let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
            let pb: Vec<_> = order.iter().map(|&i| b[i].clone()).collect();
            let pl: Vec<_> = order.iter().map(|&i| labels[i]).collect();
            let ce = loss_text(&tensor(&a), &labels).unwrap();
            prop_assert!((ce - loss_text(&tensor(&pa), &pl).unwrap()).abs() < 1e-12);
            let kl = loss_selfdistill(&tensor(&a), &tensor(&b), None).unwrap();
            prop_assert!((kl - loss_selfdistill(&tensor(&pa), &tensor(&pb), None).unwrap()).abs() < 1e-12);
        }
    }
}

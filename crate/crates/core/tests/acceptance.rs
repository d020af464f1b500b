//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails. `DORM_ACCEPTANCE=1,4` restricts the run to a subset.
//!
//! Criterion 9 needs the converted SIGHAN test sets, given as
//! `DORM_SIGHAN15_TEST` and `DORM_SIGHAN13_TEST`; it is skipped otherwise.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dorm::data::{
    dataset_stats, make_pretrain_corpus, make_toy_corpus, read_dataset, CorrectionExample, CorruptionPolicy, ToyCorpus,
    ToySpec,
};
use dorm::evaluator::{evaluate, token_accuracy, EvalReport, Prf, SIGHAN13_IGNORED};
use dorm::model::BoundParams;
use dorm::model::{dump_attention, Codec, Model, ModelConfig, Noise};
use dorm::numeric::{bidirectional_kl, check_gradients, GradCheckOptions, Tensor};
use dorm::objective::{joint_loss, LossWeights};
use dorm::pinyin::{decompose, inventory, PinyinTable};
use dorm::textcodec::{Batch, CharVocab, PhonemeVocab};
use dorm::trainer::{run_training, RunOptions, TrainConfig, TrainLogRecord, TrainOutcome};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Verdict,
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        name: "separation-mask isolation",
        limit: Some(Duration::from_secs(60)),
        run: separation_isolation,
    },
    Criterion {
        id: 2,
        name: "pinyin-only equivalence",
        limit: Some(Duration::from_secs(60)),
        run: pinyin_only_equivalence,
    },
    Criterion {
        id: 3,
        name: "gradient correctness",
        limit: Some(Duration::from_secs(120)),
        run: gradient_correctness,
    },
    Criterion {
        id: 4,
        name: "overfit smoke test",
        limit: Some(Duration::from_secs(300)),
        run: overfit_smoke,
    },
    Criterion {
        id: 5,
        name: "self-distillation effect",
        limit: None,
        run: selfdistill_effect,
    },
    Criterion {
        id: 6,
        name: "corruption statistics",
        limit: Some(Duration::from_secs(60)),
        run: corruption_statistics,
    },
    Criterion {
        id: 7,
        name: "metric oracle equivalence",
        limit: None,
        run: metric_oracle,
    },
    Criterion {
        id: 8,
        name: "pinyin parser totality",
        limit: None,
        run: parser_totality,
    },
    Criterion {
        id: 9,
        name: "data-statistics reproduction",
        limit: None,
        run: data_statistics,
    },
    Criterion {
        id: 10,
        name: "KL unit values",
        limit: None,
        run: kl_values,
    },
];

fn main() {
    let only: Option<HashSet<u32>> = std::env::var("DORM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in CRITERIA
        .iter()
        .filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id)))
    {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Verdict::Pass(d), Some(limit)) if elapsed > limit => {
                Verdict::Fail(format!("{d}; exceeded the {}s budget", limit.as_secs()))
            }
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!(
            "criterion {:>2} {:<30} {tag}  {detail} [{:.1}s]",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

/// Groups of at least two bundled characters sharing (initial, final).
fn homophone_groups() -> &'static (PinyinTable, Vec<Vec<char>>) {
    static G: OnceLock<(PinyinTable, Vec<Vec<char>>)> = OnceLock::new();
    G.get_or_init(|| {
        let table = PinyinTable::bundled();
        let mut groups = Vec::new();
        for s in inventory::all_syllables() {
            let key = decompose(&s).unwrap().key();
            let mut chars = table.characters_with(key);
            chars.sort_unstable();
            if chars.len() >= 2 {
                groups.push(chars);
            }
        }
        (table, groups)
    })
}

struct RandomSetup {
    chars: CharVocab,
    phonemes: PhonemeVocab,
    groups: Vec<Vec<char>>,
}

/// A vocabulary of up to four characters from each of 60 homophone groups.
fn random_setup() -> &'static RandomSetup {
    static S: OnceLock<RandomSetup> = OnceLock::new();
    S.get_or_init(|| {
        let (_, all) = homophone_groups();
        let groups: Vec<Vec<char>> = all
            .iter()
            .take(60)
            .map(|g| g.iter().take(4).copied().collect())
            .collect();
        let chars = CharVocab::from_chars(groups.iter().flatten().copied()).unwrap();
        RandomSetup {
            chars,
            phonemes: PhonemeVocab::standard(),
            groups,
        }
    })
}

fn random_codec() -> Codec<'static> {
    let s = random_setup();
    Codec {
        chars: &s.chars,
        phonemes: &s.phonemes,
        table: &homophone_groups().0,
    }
}

fn random_config(rng: &mut ChaCha8Rng, vocab_size: usize) -> ModelConfig {
    let heads = *[1usize, 2, 4].choose(rng).unwrap();
    let d_model = heads * *[4usize, 8, 16].choose(rng).unwrap();
    ModelConfig {
        layers: rng.random_range(1..=3),
        heads,
        d_model,
        ffn: 2 * d_model,
        dropout: 0.1,
        vocab_size,
        num_initials: random_setup().phonemes.num_initials(),
        num_finals: random_setup().phonemes.num_finals(),
        max_len: 24,
    }
}

/// Random sentences as (group, member) index pairs.
fn random_sentences(rng: &mut ChaCha8Rng, groups: &[Vec<char>]) -> Vec<Vec<(usize, usize)>> {
    let batch = rng.random_range(1..=3);
    (0..batch)
        .map(|_| {
            let len = rng.random_range(1..=16);
            (0..len)
                .map(|_| {
                    let g = rng.random_range(0..groups.len());
                    (g, rng.random_range(0..groups[g].len()))
                })
                .collect()
        })
        .collect()
}

fn render(sentences: &[Vec<(usize, usize)>], groups: &[Vec<char>]) -> Vec<CorrectionExample> {
    sentences
        .iter()
        .map(|s| {
            let text: String = s.iter().map(|&(g, m)| groups[g][m]).collect();
            CorrectionExample::clean(&text)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1

fn separation_isolation() -> Verdict {
    let setup = random_setup();
    let codec = random_codec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 120;
    let mut changed_text = 0;
    for trial in 0..trials {
        let cfg = random_config(&mut rng, setup.chars.len());
        let model = Model::<f32>::new(cfg, rng.random()).unwrap();
        let sentences = random_sentences(&mut rng, &setup.groups);
        let mut perturbed = sentences.clone();
        let k = rng.random_range(0..perturbed.len());
        let i = rng.random_range(0..perturbed[k].len());
        let (g, m) = perturbed[k][i];
        perturbed[k][i] = (
            g,
            (m + rng.random_range(1..setup.groups[g].len())) % setup.groups[g].len(),
        );

        let a = codec.batch(&render(&sentences, &setup.groups), false, 24).unwrap();
        let b = codec.batch(&render(&perturbed, &setup.groups), false, 24).unwrap();
        if a.char_ids == b.char_ids || a.initial_ids != b.initial_ids || a.final_ids != b.final_ids {
            return Verdict::Fail(format!(
                "trial {trial}: perturbation did not isolate a character change"
            ));
        }
        let (ta, pa) = model.phonetics_logits(&a).unwrap();
        let (tb, pb) = model.phonetics_logits(&b).unwrap();
        if pa.data() != pb.data() {
            return Verdict::Fail(format!(
                "trial {trial}: pinyin logits moved by {}",
                pa.max_abs_diff(&pb)
            ));
        }
        changed_text += usize::from(ta.data() != tb.data());

        let sentence = render(&sentences[..1], &setup.groups)[0].source_text();
        let dump = dump_attention(&model, &sentence, codec).unwrap();
        let n = sentence.chars().count();
        for l in 0..model.config.layers {
            for h in 0..model.config.heads {
                let t = dump.get(&format!("layer{l}.head{h}")).unwrap();
                for row in n..2 * n {
                    if t.row(row)[..n].iter().any(|&w| w != 0.0) {
                        return Verdict::Fail(format!("trial {trial}: layer {l} head {h} row {row} attends to text"));
                    }
                }
            }
        }
    }
    verdict(
        changed_text > 0,
        format!("{trials} trials, pinyin logits bit-identical, pinyin->text attention exactly 0; text logits changed in {changed_text}"),
    )
}

// ---------------------------------------------------------------------------
// 2

fn pinyin_only_equivalence() -> Verdict {
    let setup = random_setup();
    let codec = random_codec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 40;
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let cfg = random_config(&mut rng, setup.chars.len());
        let d = cfg.d_model;
        let model = Model::<f32>::new(cfg, rng.random()).unwrap();
        let batch = codec
            .batch(
                &render(&random_sentences(&mut rng, &setup.groups), &setup.groups),
                false,
                24,
            )
            .unwrap();
        let full = model.phonetic_hidden(&batch).unwrap();
        let only = model.pinyin_only_hidden(&batch).unwrap();
        for (k, &len) in batch.lengths.iter().enumerate() {
            for i in 0..len {
                for j in 0..d {
                    worst = worst.max((full.get(&[k, batch.n + i, j]) - only.get(&[k, i, j])).abs());
                }
            }
        }
    }
    verdict(
        worst <= 1e-5,
        format!("{trials} trials, max |diff| = {worst:.3e} (limit 1e-5)"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn gradient_correctness() -> Verdict {
    let table = PinyinTable::bundled();
    let text = "我真户秃糊涂不记的得现在什么事都了忘";
    let chars = CharVocab::from_chars(text.chars()).unwrap();
    let phonemes = PhonemeVocab::standard();
    if chars.len() != 20 {
        return Verdict::Fail(format!("fixture vocabulary has {} entries, expected 20", chars.len()));
    }
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        ffn: 32,
        dropout: 0.0,
        vocab_size: chars.len(),
        num_initials: phonemes.num_initials(),
        num_finals: phonemes.num_finals(),
        max_len: 6,
    };
    let codec = Codec {
        chars: &chars,
        phonemes: &phonemes,
        table: &table,
    };
    let examples = [
        CorrectionExample::new("我真户秃", "我真糊涂").unwrap(),
        CorrectionExample::new("不记的", "不记得").unwrap(),
    ];
    let batch: Batch = codec.batch(&examples, true, cfg.max_len).unwrap();
    let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let mut params: Vec<Tensor<f64>> = model.params.tensors().to_vec();
    let weights = LossWeights::default();
    let mut run = |step: f64| {
        check_gradients(&mut params, GradCheckOptions { step, floor: 1e-6 }, |g, vars| {
            let p = BoundParams::new(vars.to_vec());
            Ok(joint_loss(g, &p, &cfg, &batch, &weights, &mut Noise::Off)?.total)
        })
        .unwrap()
    };
    let report = run(1e-3);
    // Reported only: a hundredfold drop at h/10 marks central-difference
    // truncation rather than a wrong analytic gradient.
    let finer = run(1e-4);
    verdict(
        report.max_rel_err < 1e-3,
        format!(
            "{} elements, max relative error {:.3e} at h=1e-3 (limit 1e-3), worst {:?}; {:.3e} at h=1e-4",
            report.checked, report.max_rel_err, report.worst, finer.max_rel_err
        ),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5

struct Toy {
    corpus: ToyCorpus,
    chars: CharVocab,
    phonemes: PhonemeVocab,
}

fn toy() -> &'static Toy {
    static T: OnceLock<Toy> = OnceLock::new();
    T.get_or_init(|| {
        let corpus = make_toy_corpus(ToySpec::new(100, 64, 8, 16, 2024)).unwrap();
        let chars = CharVocab::from_chars(corpus.chars.iter().copied()).unwrap();
        Toy {
            corpus,
            chars,
            phonemes: PhonemeVocab::standard(),
        }
    })
}

fn toy_codec() -> Codec<'static> {
    let t = toy();
    Codec {
        chars: &t.chars,
        phonemes: &t.phonemes,
        table: &t.corpus.table,
    }
}

const TOY_STEPS: usize = 500;

/// Desk-scale configuration for the toy runs. The learning rate is raised
/// from the full-scale 75e-6 because the model starts from scratch.
fn toy_config(beta: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        peak_lr: 2e-3,
        max_steps: Some(TOY_STEPS),
        seed: 7,
        weights: LossWeights {
            beta,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    }
}

fn toy_run(beta: f64) -> (TrainOutcome<f32>, Duration) {
    let t = toy();
    let cfg = toy_config(beta);
    let model_cfg = cfg.model.model_config(t.chars.len(), &t.phonemes);
    let model = Model::<f32>::new(model_cfg, 7).unwrap();
    let start = Instant::now();
    let out = run_training(
        model,
        &t.corpus.examples,
        None,
        toy_codec(),
        &cfg,
        &RunOptions::default(),
    )
    .unwrap();
    (out, start.elapsed())
}

fn default_toy_run() -> &'static (TrainOutcome<f32>, Duration) {
    static R: OnceLock<(TrainOutcome<f32>, Duration)> = OnceLock::new();
    R.get_or_init(|| toy_run(LossWeights::default().beta))
}

fn overfit_smoke() -> Verdict {
    let (out, took) = default_toy_run();
    let t = toy();
    let predictions = toy_codec()
        .predict_examples(&out.model, &t.corpus.examples, 64)
        .unwrap();
    let acc = token_accuracy(&t.corpus.examples, &predictions).unwrap();
    let report = evaluate(&t.corpus.examples, &predictions, false).unwrap();
    let ok = out.step == TOY_STEPS && acc >= 0.99 && report.correction.f1 >= 0.95 && took.as_secs() < 300;
    verdict(
        ok,
        format!(
            "{} steps in {:.1}s: token accuracy {acc:.4} (>= 0.99), correction F1 {:.4} (>= 0.95)",
            out.step,
            took.as_secs_f64(),
            report.correction.f1
        ),
    )
}

fn tail_mean(records: &[TrainLogRecord], f: impl Fn(&TrainLogRecord) -> f64) -> f64 {
    let tail = &records[records.len() - 50..];
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Means over consecutive non-overlapping windows.
fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

fn strictly_decreasing(v: &[f64]) -> Option<usize> {
    v.windows(2).position(|w| w[1] >= w[0])
}

fn selfdistill_effect() -> Verdict {
    let (strong, _) = toy_run(10.0);
    let (none, _) = toy_run(0.0);
    let kl_strong = tail_mean(&strong.records, |r| r.loss.l_kl);
    let kl_none = tail_mean(&none.records, |r| r.loss.l_kl);

    let (base, _) = default_toy_run();
    let text: Vec<f64> = base.records.iter().map(|r| r.loss.l_text).collect();
    let raw: Vec<f64> = base.records.iter().map(|r| r.loss.l_raw).collect();
    let (text_w, raw_w) = (window_means(&text, 20), window_means(&raw, 20));
    let text_bad = strictly_decreasing(&text_w);
    let raw_bad = strictly_decreasing(&raw_w);
    let ok = kl_strong < kl_none && text_bad.is_none() && raw_bad.is_none();
    verdict(
        ok,
        format!(
            "mean l_kl over last 50 steps: beta=10 {kl_strong:.4e} vs beta=0 {kl_none:.4e}; beta=1.2 window-20 means of l_text {} and l_raw {}",
            text_bad.map_or("decrease".to_string(), |i| format!("rise at window {}", i + 1)),
            raw_bad.map_or("decrease".to_string(), |i| format!("rise at window {}", i + 1)),
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn corruption_statistics() -> Verdict {
    let (table, groups) = homophone_groups();
    let pool: Vec<char> = groups.iter().flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut lines = Vec::new();
    let mut total = 0;
    while total < 100_000 {
        let mut line = String::new();
        for _ in 0..rng.random_range(4..12) {
            let len = rng.random_range(8..30);
            line.extend((0..len).map(|_| *pool.choose(&mut rng).unwrap()));
            line.push('。');
            total += len;
        }
        lines.push(line);
    }
    let text = lines.join("\n");
    let policy = CorruptionPolicy::with_seed(6);
    let (_, stats) = make_pretrain_corpus(&[text], 256, &policy, table, &pool).unwrap();
    let selected = stats.selected_fraction();
    let (c, r, k) = stats.branch_fractions();
    let ok = (selected - 0.15).abs() <= 0.01
        && (c - 0.8).abs() <= 0.02
        && (r - 0.1).abs() <= 0.02
        && (k - 0.1).abs() <= 0.02;
    verdict(
        ok,
        format!(
            "{} characters in {} fragments: selected {selected:.4} (0.15 +- 0.01); branches {c:.4}/{r:.4}/{k:.4} (0.8/0.1/0.1 +- 0.02)",
            stats.chinese_chars, stats.fragments
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

/// Brute-force scorer written from the metric definitions.
fn oracle(examples: &[CorrectionExample], predictions: &[Vec<char>], postproc13: bool) -> EvalReport {
    let mut r = EvalReport {
        sentences: examples.len(),
        ..Default::default()
    };
    for (ex, pred) in examples.iter().zip(predictions) {
        let pred: Vec<char> = if postproc13 {
            (0..pred.len())
                .map(|i| {
                    if SIGHAN13_IGNORED.contains(&ex.source[i]) {
                        ex.source[i]
                    } else {
                        pred[i]
                    }
                })
                .collect()
        } else {
            pred.clone()
        };
        let gold: BTreeSet<usize> = (0..ex.source.len()).filter(|&i| ex.source[i] != ex.target[i]).collect();
        let flagged: BTreeSet<usize> = (0..ex.source.len()).filter(|&i| ex.source[i] != pred[i]).collect();
        if !gold.is_empty() {
            r.with_errors += 1;
            if gold == flagged {
                r.detection_tp += 1;
            }
            if pred == ex.target {
                r.correction_tp += 1;
            }
        }
        if !flagged.is_empty() {
            r.predicted_positive += 1;
        }
        for (i, &p) in pred.iter().enumerate() {
            if p != ex.target[i] {
                if gold.contains(&i) {
                    r.undercorrections += 1;
                } else {
                    r.overcorrections += 1;
                }
            }
        }
    }
    let prf = |tp: usize| {
        let p = if r.predicted_positive > 0 {
            tp as f64 / r.predicted_positive as f64
        } else {
            0.0
        };
        let rc = if r.with_errors > 0 {
            tp as f64 / r.with_errors as f64
        } else {
            0.0
        };
        let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        Prf {
            precision: p,
            recall: rc,
            f1: f,
        }
    };
    r.detection = prf(r.detection_tp);
    r.correction = prf(r.correction_tp);
    r
}

fn metric_oracle() -> Verdict {
    let alphabet = ['的', '得', '地', '我', '他', '好'];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut zero_denominators = 0;
    let mut with_rule = 0;
    for set in 0..1000 {
        // Low error rates make empty-denominator sets common.
        let p_err = [0.0, 0.1, 0.4][set % 3];
        let p_edit = [0.0, 0.2, 0.5][(set / 3) % 3];
        let size = rng.random_range(0..6);
        let mut examples = Vec::new();
        let mut predictions = Vec::new();
        for _ in 0..size {
            let len = rng.random_range(1..6);
            let target: Vec<char> = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
            let source: Vec<char> = target
                .iter()
                .map(|&c| {
                    if rng.random_bool(p_err) {
                        *alphabet.choose(&mut rng).unwrap()
                    } else {
                        c
                    }
                })
                .collect();
            let pred: Vec<char> = (0..len)
                .map(|i| {
                    if rng.random_bool(p_edit) {
                        *[target[i], *alphabet.choose(&mut rng).unwrap()]
                            .choose(&mut rng)
                            .unwrap()
                    } else {
                        source[i]
                    }
                })
                .collect();
            examples.push(CorrectionExample { source, target });
            predictions.push(pred);
        }
        let postproc = rng.random_bool(0.5);
        with_rule += usize::from(postproc);
        let got = evaluate(&examples, &predictions, postproc).unwrap();
        let want = oracle(&examples, &predictions, postproc);
        if got.predicted_positive == 0 || got.with_errors == 0 {
            zero_denominators += 1;
        }
        if got != want {
            return Verdict::Fail(format!("set {set}: evaluator {got:?} vs oracle {want:?}"));
        }
    }
    verdict(
        zero_denominators > 0 && with_rule > 0,
        format!("1000 sets identical ({zero_denominators} with a zero denominator, {with_rule} with the 13 rule)"),
    )
}

// ---------------------------------------------------------------------------
// 8

fn parser_totality() -> Verdict {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/syllables.txt");
    let golden: Vec<String> = std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let golden_set: HashSet<&str> = golden.iter().map(String::as_str).collect();
    let mut failures = Vec::new();
    for s in &golden {
        for tone in ["", "1", "2", "3", "4", "0"] {
            let text = format!("{s}{tone}");
            match decompose(&text) {
                Ok(syl) if syl.toneless() == *s => {}
                Ok(syl) => failures.push(format!("{text} -> {}", syl.toneless())),
                Err(e) => failures.push(e.to_string()),
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let letters: Vec<char> = "abcdefghijklmnopqrstuwxyzü".chars().collect();
    let mut negatives: BTreeSet<String> = BTreeSet::new();
    for s in &golden {
        let chars: Vec<char> = s.chars().collect();
        negatives.insert(format!("{s}5"));
        negatives.insert(format!("{s}9"));
        negatives.insert(format!("{s}-"));
        negatives.insert(format!("1{s}"));
        for _ in 0..3 {
            let mut m = chars.clone();
            match rng.random_range(0..3) {
                0 => m.insert(rng.random_range(0..=m.len()), *letters.choose(&mut rng).unwrap()),
                1 if m.len() > 1 => {
                    m.remove(rng.random_range(0..m.len()));
                }
                _ => {
                    let i = rng.random_range(0..m.len());
                    m[i] = *letters.choose(&mut rng).unwrap();
                }
            }
            negatives.insert(m.into_iter().collect());
        }
    }
    for _ in 0..2000 {
        let len = rng.random_range(1..8);
        negatives.insert((0..len).map(|_| *letters.choose(&mut rng).unwrap()).collect());
    }
    negatives.extend(["", " ", "1", "ü", "ng", "hm", "ê", "zh", "a1b"].map(String::from));
    negatives.retain(|n| !golden_set.contains(n.as_str()));
    let accepted: Vec<&String> = negatives.iter().filter(|n| decompose(n).is_ok()).collect();
    verdict(
        failures.is_empty() && accepted.is_empty() && golden.len() >= 400,
        format!(
            "{} golden syllables x 6 tone forms, {} failures; {} fuzzed negatives, {} accepted{}",
            golden.len(),
            failures.len(),
            negatives.len(),
            accepted.len(),
            match (failures.first(), accepted.first()) {
                (Some(f), _) => format!(" (first failure: {f})"),
                (None, Some(a)) => format!(" (first accepted: {a:?})"),
                _ => String::new(),
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn data_statistics() -> Verdict {
    let sets = [("DORM_SIGHAN15_TEST", 1100, 703), ("DORM_SIGHAN13_TEST", 1000, 1224)];
    let mut details = Vec::new();
    let mut ok = true;
    let mut seen = 0;
    for (var, sentences, errors) in sets {
        let Ok(path) = std::env::var(var) else {
            details.push(format!("{var} unset"));
            continue;
        };
        seen += 1;
        match read_dataset(&path) {
            Ok(examples) => {
                let s = dataset_stats(&examples);
                ok &= s.sentences == sentences && s.errors == errors;
                details.push(format!(
                    "{var}: {} / {} (expected {sentences} / {errors})",
                    s.sentences, s.errors
                ));
            }
            Err(e) => {
                ok = false;
                details.push(format!("{var}: {e}"));
            }
        }
    }
    if seen == 0 {
        return Verdict::Skip(format!("optional; {}", details.join(", ")));
    }
    verdict(ok, details.join("; "))
}

// ---------------------------------------------------------------------------
// 10

fn kl_values() -> Verdict {
    let (p, q) = ([0.8f64, 0.2], [0.6f64, 0.4]);
    let logits = |v: [f64; 2]| Tensor::from_f64(&[1, 2], &[v[0].ln(), v[1].ln()]).unwrap();
    let same: f64 = bidirectional_kl(&logits(p), &logits(p), None).unwrap();
    let pq: f64 = bidirectional_kl(&logits(p), &logits(q), None).unwrap();
    let oracle: f64 = 0.5
        * (0..2)
            .map(|i| p[i] * (p[i] / q[i]).ln() + q[i] * (q[i] / p[i]).ln())
            .sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_self = same.abs();
    for _ in 0..200 {
        let cols = rng.random_range(2..12);
        let rows = rng.random_range(1..6);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect();
        let t = Tensor::from_f64(&[rows, cols], &data).unwrap();
        worst_self = worst_self.max(bidirectional_kl::<f64>(&t, &t, None).unwrap().abs());
    }
    let ok = worst_self < 1e-9 && (pq - 0.0981).abs() <= 1e-3 && (pq - oracle).abs() < 1e-12;
    verdict(
        ok,
        format!("KL(P,P) max {worst_self:.1e} over 201 cases; 2-class case {pq:.6} (oracle {oracle:.6}, expected 0.0981 +- 1e-3)"),
    )
}

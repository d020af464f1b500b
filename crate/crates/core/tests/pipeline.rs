use dorm::data::{format_dataset, make_toy_corpus, parse_dataset, ToySpec};
use dorm::evaluator::{evaluate, token_accuracy};
use dorm::model::{read_model, Codec, ModelConfig};
use dorm::textcodec::{CharVocab, PhonemeVocab};
use dorm::trainer::{run_training, RunOptions, TrainConfig, FINAL_CHECKPOINT};
use dorm::{Model32, Model64};

fn small_config(chars: &CharVocab, phonemes: &PhonemeVocab) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 16,
        ffn: 32,
        dropout: 0.0,
        vocab_size: chars.len(),
        num_initials: phonemes.num_initials(),
        num_finals: phonemes.num_finals(),
        max_len: 16,
    }
}

#[test]
fn trained_checkpoint_corrects_what_it_was_trained_on() {
    let toy = make_toy_corpus(ToySpec::new(24, 16, 6, 10, 4)).unwrap();
    let chars = CharVocab::from_chars(toy.chars.iter().copied()).unwrap();
    let phonemes = PhonemeVocab::standard();
    let codec = Codec {
        chars: &chars,
        phonemes: &phonemes,
        table: &toy.table,
    };
    let cfg = TrainConfig {
        batch_size: 16,
        peak_lr: 1e-2,
        max_steps: Some(150),
        eval_every: 50,
        seed: 5,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let model = Model32::new(small_config(&chars, &phonemes), 5).unwrap();
    let out = run_training(model, &toy.examples, Some(&toy.examples), codec, &cfg, &opts).unwrap();
    assert!(out.finished());

    let (loaded, manifest) = read_model::<f32>(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(loaded.params, out.model.params);
    assert_eq!(manifest.step, 150);
    assert_eq!(manifest.char_vocab_sha256, chars.fingerprint());

    let preds = codec.predict_examples(&loaded, &toy.examples, 8).unwrap();
    let acc = token_accuracy(&toy.examples, &preds).unwrap();
    let report = evaluate(&toy.examples, &preds, false).unwrap();
    assert!(acc > 0.9, "token accuracy {acc}");
    assert!(report.correction.f1 <= report.detection.f1);
    assert_eq!(out.best_f1.map(|f| f >= report.correction.f1), Some(true));

    let sentences: Vec<String> = toy.examples.iter().map(|e| e.source_text()).collect();
    let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
    let corrected = codec.correct_all(&loaded, &refs, 5).unwrap();
    for (c, p) in corrected.iter().zip(&preds) {
        assert_eq!(c.chars().collect::<Vec<_>>(), *p);
    }
}

#[test]
fn single_and_double_precision_agree() {
    let toy = make_toy_corpus(ToySpec::new(20, 6, 4, 9, 8)).unwrap();
    let chars = CharVocab::from_chars(toy.chars.iter().copied()).unwrap();
    let phonemes = PhonemeVocab::standard();
    let codec = Codec {
        chars: &chars,
        phonemes: &phonemes,
        table: &toy.table,
    };
    let cfg = small_config(&chars, &phonemes);
    let wide = Model64::new(cfg.clone(), 1).unwrap();
    let narrow = Model32::from_params(cfg.clone(), wide.params.cast()).unwrap();
    let batch = codec.batch(&toy.examples, false, cfg.max_len).unwrap();
    let (a, _) = wide.phonetics_logits(&batch).unwrap();
    let (b, _) = narrow.phonetics_logits(&batch).unwrap();
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, &y)| (x - f64::from(y)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "max difference {worst}");
}

#[test]
fn toy_corpus_survives_the_dataset_format() {
    let toy = make_toy_corpus(ToySpec::new(100, 64, 8, 16, 7)).unwrap();
    let text = format_dataset(&toy.examples);
    let back = parse_dataset(&text, std::path::Path::new("toy.tsv")).unwrap();
    assert_eq!(back, toy.examples);
    assert_eq!(
        format_dataset(&make_toy_corpus(ToySpec::new(100, 64, 8, 16, 7)).unwrap().examples),
        text
    );
    for ex in &toy.examples {
        assert!((8..=16).contains(&ex.len()));
        for i in ex.error_positions() {
            let (x, y) = (ex.source[i], ex.target[i]);
            assert_ne!(x, y);
            assert!(toy.table.contains(x) && toy.table.contains(y));
        }
    }
}

use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dorm::data::{
    make_toy_corpus, read_dataset, write_pretrain_corpus, CorrectionExample, CorruptionPolicy, ToySpec, MAX_FRAGMENT,
};
use dorm::evaluator::{evaluate, phonetic_recall};
use dorm::model::{dump_attention, read_model, Codec, ModelManifest};
use dorm::pinyin::{is_chinese, load_pinyin_table, PinyinTable};
use dorm::textcodec::{char_vocab_from_examples, CharVocab, PhonemeVocab, NOPY};
use dorm::trainer::{run_training, Mode, RunOptions, TrainConfig, LOG_FILE};
use dorm::{ErrorKind, Model32};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Chinese spelling correction with disentangled phonetic representations.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data error
/// (unreadable or malformed input, checkpoint mismatch), 3 numeric error.
#[derive(Parser)]
#[command(name = "dorm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print `char TAB initial TAB final TAB tone` for each character.
    Pinyinize(PinyinizeArgs),
    /// Generate a synthetic toy corpus with its pinyin table and vocabulary.
    MakeData(MakeDataArgs),
    /// Cut raw text into fragments and corrupt them into training pairs.
    PretrainData(PretrainDataArgs),
    /// Train a model, writing checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint (or a file of predictions) against gold pairs.
    Eval(EvalArgs),
    /// Correct sentences, one per line, from a file or stdin.
    Correct(CorrectArgs),
    /// Write per-layer, per-head attention weights for one sentence.
    DumpAttn(DumpAttnArgs),
}

#[derive(Args)]
struct TableArg {
    /// Pinyin table file, or `bundled` for the built-in table.
    #[arg(long, value_name = "PATH")]
    table: PathBuf,
}

impl TableArg {
    fn load(&self) -> Result<PinyinTable> {
        if self.table.as_os_str() == "bundled" {
            return Ok(PinyinTable::bundled());
        }
        Ok(load_pinyin_table(&self.table)?)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    table: TableArg,
    /// Character vocabulary the checkpoint was trained with.
    #[arg(long, value_name = "PATH")]
    vocab: PathBuf,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

struct Loaded {
    table: PinyinTable,
    chars: CharVocab,
    phonemes: PhonemeVocab,
    model: Model32,
}

impl Loaded {
    fn codec(&self) -> Codec<'_> {
        Codec {
            chars: &self.chars,
            phonemes: &self.phonemes,
            table: &self.table,
        }
    }
}

fn check_vocabularies(manifest: &ModelManifest, chars: &CharVocab, phonemes: &PhonemeVocab, what: &Path) -> Result<()> {
    if manifest.char_vocab_sha256 != chars.fingerprint() {
        return Err(dorm::Error::Checkpoint(format!(
            "{} was trained with a different character vocabulary",
            what.display()
        ))
        .into());
    }
    if manifest.phoneme_vocab_sha256 != phonemes.fingerprint() {
        return Err(dorm::Error::Checkpoint(format!("{} uses a different phoneme inventory", what.display())).into());
    }
    Ok(())
}

impl ModelArgs {
    fn load(&self) -> Result<Loaded> {
        let table = self.table.load()?;
        let chars = CharVocab::load(&self.vocab)?;
        let phonemes = PhonemeVocab::standard();
        let (model, manifest) = read_model::<f32>(&self.checkpoint)?;
        check_vocabularies(&manifest, &chars, &phonemes, &self.checkpoint)?;
        Ok(Loaded {
            table,
            chars,
            phonemes,
            model,
        })
    }
}

#[derive(Args)]
struct PinyinizeArgs {
    #[command(flatten)]
    table: TableArg,
    /// Text to annotate. Read from --input or stdin when absent.
    text: Option<String>,
    #[arg(long, value_name = "PATH", conflicts_with = "text")]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDataArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// File name stem for the generated files.
    #[arg(long, default_value = "toy")]
    stem: String,
    #[arg(long, default_value_t = 100)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    examples: usize,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct PretrainDataArgs {
    #[command(flatten)]
    table: TableArg,
    /// Raw UTF-8 text files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Dataset file to write.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Vocabulary whose Chinese characters form the random-replacement pool
    /// (defaults to every character in the table).
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = MAX_FRAGMENT)]
    max_fragment: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    table: TableArg,
    /// Training pairs, `source TAB target` per line.
    #[arg(long, value_name = "PATH")]
    train: PathBuf,
    /// Development pairs scored at each evaluation point.
    #[arg(long, value_name = "PATH")]
    dev: Option<PathBuf>,
    /// Character vocabulary; built from the training and dev data when absent.
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a single configuration key, e.g. `--set peak_lr=2e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_parser = ["pretrain", "finetune"])]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the parameters of an earlier checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Output directory for checkpoints, the log and the vocabulary.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold pairs, `source TAB target` per line.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[command(flatten)]
    table: TableArg,
    #[arg(long, value_name = "PATH", required_unless_present = "predictions")]
    vocab: Option<PathBuf>,
    #[arg(long, value_name = "PATH", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score these predicted sentences instead of running a model.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["vocab", "checkpoint"])]
    predictions: Option<PathBuf>,
    /// Ignore predictions wherever the source has 的, 得 or 地.
    #[arg(long)]
    postproc13: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Directory for `report.txt` and `report.json`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Sentences to correct; stdin when absent.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Where to write corrected lines; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct DumpAttnArgs {
    #[command(flatten)]
    model: ModelArgs,
    sentence: String,
    /// Container file to write.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => Ok(std::fs::read_to_string(p).map_err(|e| dorm::Error::io(p, e))?),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s)
        }
    }
}

fn pinyinize(args: PinyinizeArgs) -> Result<()> {
    let table = args.table.load()?;
    let text = match args.text {
        Some(t) => t,
        None => read_input(args.input.as_deref())?,
    };
    let mut out = io::stdout().lock();
    for ch in text.chars().filter(|c| !c.is_control()) {
        match table.char_to_syllable(ch).filter(|_| is_chinese(ch)) {
            Some(s) => writeln!(out, "{ch}\t{}\t{}\t{}", s.initial, s.rime, s.tone)?,
            None => writeln!(out, "{ch}\t{NOPY}\t{NOPY}\t{NOPY}")?,
        }
    }
    Ok(())
}

fn make_data(args: MakeDataArgs) -> Result<()> {
    let spec = ToySpec::new(args.vocab_size, args.examples, args.min_len, args.max_len, args.seed);
    let toy = make_toy_corpus(spec)?;
    toy.write(&args.out, &args.stem)?;
    CharVocab::from_chars(toy.chars.iter().copied())?.save(args.out.join(format!("{}.vocab", args.stem)))?;
    let stats = dorm::data::dataset_stats(&toy.examples);
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn pretrain_data(args: PretrainDataArgs) -> Result<()> {
    let table = args.table.load()?;
    let pool: Vec<char> = match &args.vocab {
        Some(p) => CharVocab::load(p)?
            .chars()
            .iter()
            .copied()
            .filter(|&c| is_chinese(c))
            .collect(),
        None => table.characters().into_iter().filter(|&c| is_chinese(c)).collect(),
    };
    let policy = CorruptionPolicy::with_seed(args.seed);
    let stats = write_pretrain_corpus(&args.inputs, &args.out, args.max_fragment, &policy, &table, &pool)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let table = args.table.load()?;
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(dorm::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = &args.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if std::env::var("DORM_DETERMINISTIC").is_ok_and(|v| v == "1") {
        cfg.deterministic = true;
    }
    cfg.validate()?;

    let train = read_dataset(&args.train)?;
    let dev = args.dev.as_ref().map(read_dataset).transpose()?;
    let chars = match &args.vocab {
        Some(p) => CharVocab::load(p)?,
        None => {
            let all: Vec<CorrectionExample> = train.iter().chain(dev.iter().flatten()).cloned().collect();
            char_vocab_from_examples(&all, 1)?
        }
    };
    let phonemes = PhonemeVocab::standard();
    std::fs::create_dir_all(&args.out).map_err(|e| dorm::Error::io(&args.out, e))?;
    chars.save(args.out.join("vocab.txt"))?;
    std::fs::write(args.out.join("train.cfg"), cfg.to_file_string()).map_err(|e| dorm::Error::io(&args.out, e))?;

    let model = match &args.checkpoint {
        Some(p) => {
            let (m, manifest) = read_model::<f32>(p)?;
            check_vocabularies(&manifest, &chars, &phonemes, p)?;
            m
        }
        None => Model32::new(cfg.model.model_config(chars.len(), &phonemes), cfg.seed)?,
    };
    let codec = Codec {
        chars: &chars,
        phonemes: &phonemes,
        table: &table,
    };
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume,
        stop_after: None,
    };
    let outcome = run_training(model, &train, dev.as_deref(), codec, &cfg, &opts)?;
    if let Some(last) = outcome.records.last() {
        eprintln!(
            "trained {} of {} steps; last l_joint {:.4}; log in {}",
            outcome.step,
            outcome.total_steps,
            last.loss.l_joint,
            args.out.join(LOG_FILE).display()
        );
    }
    if let Some(f1) = outcome.best_f1 {
        eprintln!("best dev correction F1 {f1:.4}");
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Vec<char>>> {
    let text = std::fs::read_to_string(path).map_err(|e| dorm::Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').chars().collect())
        .collect())
}

fn eval(args: EvalArgs) -> Result<()> {
    let table = args.table.load()?;
    let gold = read_dataset(&args.data)?;
    let predictions = match (&args.predictions, &args.vocab, &args.checkpoint) {
        (Some(p), _, _) => read_predictions(p)?,
        (None, Some(vocab), Some(checkpoint)) => {
            let loaded = ModelArgs {
                table: TableArg {
                    table: args.table.table.clone(),
                },
                vocab: vocab.clone(),
                checkpoint: checkpoint.clone(),
            }
            .load()?;
            loaded.codec().predict_examples(&loaded.model, &gold, args.batch_size)?
        }
        _ => bail!(dorm::Error::Config(
            "eval needs --predictions, or --vocab with --checkpoint".into()
        )),
    };
    if predictions.len() != gold.len() {
        return Err(dorm::Error::LengthMismatch {
            index: predictions.len().min(gold.len()),
            detail: format!("{} predictions for {} gold sentences", predictions.len(), gold.len()),
        }
        .into());
    }
    let report = evaluate(&gold, &predictions, args.postproc13)?;
    let recall = phonetic_recall(&gold, &predictions, &table)?;
    let text = format!(
        "{}phonetic_recall: {:.4} ({}/{})\n",
        report.to_text(),
        recall.recall,
        recall.restored,
        recall.total
    );
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| dorm::Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, &text).map_err(|e| dorm::Error::io(&txt, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, report.to_json_line() + "\n").map_err(|e| dorm::Error::io(&json, e))?;
    }
    Ok(())
}

fn correct(args: CorrectArgs) -> Result<()> {
    let loaded = args.model.load()?;
    let lines: Vec<String> = match &args.input {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| dorm::Error::io(p, e))?;
            io::BufReader::new(f)
                .lines()
                .collect::<io::Result<_>>()
                .map_err(|e| dorm::Error::io(p, e))?
        }
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<_>>()
            .context("reading stdin")?,
    };
    let sentences: Vec<&str> = lines.iter().map(|l| l.trim_end_matches('\r')).collect();
    let corrected = loaded.codec().correct_all(&loaded.model, &sentences, args.batch_size)?;
    let mut text = String::new();
    for line in corrected {
        text.push_str(&line);
        text.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, text).map_err(|e| dorm::Error::io(p, e))?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn dump_attn(args: DumpAttnArgs) -> Result<()> {
    let loaded = args.model.load()?;
    dump_attention(&loaded.model, &args.sentence, loaded.codec())?.write(&args.out)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<dorm::Error>()) {
        Some(e) => match e.kind() {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numeric => EXIT_NUMERIC,
        },
        None => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Pinyinize(a) => pinyinize(a),
        Command::MakeData(a) => make_data(a),
        Command::PretrainData(a) => pretrain_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Correct(a) => correct(a),
        Command::DumpAttn(a) => dump_attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

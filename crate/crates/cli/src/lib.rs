//! `uma` command-line driver: dataset generation, training, evaluation,
//! decoding, weight inspection and decoder benchmarking.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use uma_core::ctc::{greedy_decode, LogitsSequence};
use uma_core::model::checkpoint::Checkpoint;
use uma_core::model::{Model, ModelConfig};
use uma_core::synthdata::{self, Dataset, Split, Utterance};
use uma_core::traineval::{self, boundary_steps, TrainEvent, Trainer};
use uma_core::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "uma", version, about = "Unimodal-aggregation sequence recognition on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Sets the synth, model and train seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/dev/test partition files.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy-decode a split and report error counts.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Print hypotheses for a split.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Dump per-step aggregation weights for one utterance as CSV.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utterance: String,
    },
    /// Time the decoder on aggregated versus un-aggregated sequences.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Number of utterances (0 = whole split).
        #[arg(long, default_value_t = 100)]
        limit: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Run in single precision.
        #[arg(long)]
        f32: bool,
    },
}

/// Parses arguments, runs the command, prints errors and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train { common, data, resume } => cmd_train(&common, &data, resume),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => cmd_eval(&common, &checkpoint, &data, &split),
        Command::Decode {
            common,
            checkpoint,
            data,
            split,
        } => cmd_decode(&common, &checkpoint, &data, &split),
        Command::Inspect {
            common,
            checkpoint,
            data,
            utterance,
        } => cmd_inspect(&common, &checkpoint, &data, &utterance),
        Command::Bench {
            common,
            checkpoint,
            data,
            split,
            limit,
            repeats,
            f32,
        } => cmd_bench(&common, &checkpoint, &data, &split, limit, repeats, f32),
    }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    RunConfig::load(c.config.as_deref(), &c.sets, c.seed)
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn read_data(dir: &Path) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("dataset directory {} not found", dir.display())));
    }
    Ok(synthdata::read_dataset(dir)?)
}

fn read_split(dir: &Path, split: &str) -> CliResult<Vec<Utterance>> {
    let split: Split = split.parse()?;
    let path = dir.join(split.file_name());
    if !path.is_file() {
        return Err(CliError::usage(format!("dataset file {} not found", path.display())));
    }
    Ok(synthdata::read_split(&path)?.utterances)
}

fn load_model(path: &Path) -> CliResult<Model<f64>> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::<f64>::load(path)?.into_model()?)
}

fn split_summary(name: &str, utts: &[Utterance]) -> String {
    let n = utts.len().max(1) as f64;
    let frames: usize = utts.iter().map(Utterance::frames).sum();
    let tokens: usize = utts.iter().map(|u| u.tokens.len()).sum();
    format!(
        "{name:<5} {:>6} utterances  mean T {:>7.2}  mean U {:>6.2}",
        utts.len(),
        frames as f64 / n,
        tokens as f64 / n
    )
}

fn cmd_gen(c: &Common) -> CliResult {
    let cfg = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let data = synthdata::gen_split(&cfg.synth, cfg.data.utterances, cfg.synth.seed)?;
    make_dir(&out)?;
    synthdata::write_dataset(&out, &data)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    for split in Split::ALL {
        println!("{}", split_summary(split.name(), data.split(split)));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(c: &Common, data_dir: &Path, resume: bool) -> CliResult {
    let cfg = load_config(c)?;
    let data = read_data(data_dir)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    make_dir(&out)?;
    let mut cfg = cfg;
    let last = out.join("last.ckpt");
    let mut trainer = if resume && last.is_file() {
        let ck = Checkpoint::<f64>::load(&last)?;
        cfg.model = ck.header.model.clone();
        let t = Trainer::resume(ck, cfg.train.clone())?;
        println!("resuming at epoch {} step {}", t.epoch(), t.step());
        t
    } else {
        let model_cfg: ModelConfig = cfg.model_for(&data.config)?;
        Trainer::new(Model::<f64>::new(model_cfg)?, cfg.train.clone())?
    };
    cfg.synth = data.config.clone();
    write(&out.join("config.toml"), &cfg.to_toml())?;
    println!("{}", split_summary("train", &data.train));
    let summary = trainer.train(&data.train, &data.dev, Some(&out), &mut |ev| {
        if let TrainEvent::Epoch(r) = ev {
            let dev = r.dev.as_ref();
            println!(
                "epoch {:>3} step {:>7} loss {:>8.4} skipped {:>4} dev CER {:>6.2}% I/T' {:.3} {:.1}s",
                r.epoch,
                r.step,
                r.mean_loss,
                r.skipped,
                dev.map_or(f64::NAN, |d| 100.0 * d.cer),
                dev.map_or(f64::NAN, |d| d.mean_length_ratio),
                r.seconds
            );
        }
    })?;
    match summary.best_dev_cer {
        Some(b) => println!(
            "best dev CER {:.2}% at epoch {}",
            100.0 * b,
            summary.best_epoch.unwrap_or(0)
        ),
        None => println!("no dev evaluation"),
    }
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: &Path, data: &Path, split: &str) -> CliResult {
    let model = load_model(checkpoint)?;
    let utts = read_split(data, split)?;
    let report = traineval::evaluate(&model, &utts)?;
    let text = report.to_text();
    print!("{}", text.split("\n\n").next().unwrap_or(""));
    println!();
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    make_dir(&out)?;
    write(&out.join(format!("eval_{split}.txt")), &text)?;
    write(&out.join(format!("eval_{split}.json")), &report.summary_json())?;
    Ok(())
}

fn cmd_decode(c: &Common, checkpoint: &Path, data: &Path, split: &str) -> CliResult {
    let model = load_model(checkpoint)?;
    let utts = read_split(data, split)?;
    let mut text = String::new();
    for u in &utts {
        let tr = model.forward(&u.features)?;
        let hyp = greedy_decode(&LogitsSequence::new(tr.logits)?);
        let toks: Vec<String> = hyp.as_slice().iter().map(usize::to_string).collect();
        writeln!(text, "{}\t{}", u.id, toks.join(" ")).unwrap();
    }
    match &c.out {
        Some(dir) => {
            make_dir(dir)?;
            write(&dir.join(format!("decode_{split}.tsv")), &text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// CSV rows `t,alpha,valley,segment,true_boundary`. `segment` is the index of
/// the segment that starts at or before `t` (overlap frames belong to the
/// earlier one); `true_boundary` marks steps that a token transition maps to.
pub fn inspect_csv(model: &Model<f64>, u: &Utterance) -> CliResult<String> {
    let tr = model.forward(&u.features)?;
    let seg = &tr.segmentation;
    let steps = boundary_steps(&u.transition_frames(), model.config().subsample, seg.frames());
    let mut s = String::from("t,alpha,valley,segment,true_boundary\n");
    for (t, a) in tr.alpha.as_slice().iter().enumerate() {
        writeln!(
            s,
            "{t},{a:.6},{},{},{}",
            u8::from(seg.is_valley(t)),
            seg.owner(t),
            u8::from(steps.contains(&t))
        )
        .unwrap();
    }
    Ok(s)
}

fn cmd_inspect(c: &Common, checkpoint: &Path, data: &Path, id: &str) -> CliResult {
    let model = load_model(checkpoint)?;
    let ds = read_data(data)?;
    let u = Split::ALL
        .iter()
        .flat_map(|&s| ds.split(s).iter())
        .find(|u| u.id == id)
        .ok_or_else(|| CliError::usage(format!("unknown utterance id {id}")))?;
    let csv = inspect_csv(&model, u)?;
    match &c.out {
        Some(dir) => {
            make_dir(dir)?;
            let path = dir.join(format!("weights_{id}.csv"));
            write(&path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bench(
    c: &Common,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    limit: usize,
    repeats: usize,
    single: bool,
) -> CliResult {
    let model = load_model(checkpoint)?;
    let mut utts = read_split(data, split)?;
    if limit > 0 {
        utts.truncate(limit);
    }
    let report = if single {
        let m32 = Model::<f32>::from_params(model.config().clone(), model.params().cast())?;
        traineval::bench(&m32, &utts, repeats)?
    } else {
        traineval::bench(&model, &utts, repeats)?
    };
    let mut s = String::new();
    writeln!(s, "checkpoint {}", checkpoint.display()).unwrap();
    writeln!(s, "model config {}", serde_json::to_string(model.config()).expect("serializes")).unwrap();
    writeln!(s, "scalar {}  utterances {}  repeats {}", report.scalar, report.utterances, report.repeats).unwrap();
    writeln!(
        s,
        "mean T' {:.2}  mean I {:.2}  mean I/T' {:.3}",
        report.mean_encoder_len, report.mean_integrated_len, report.mean_length_ratio
    )
    .unwrap();
    writeln!(
        s,
        "decoder  with aggregation {:>10.3} ms/utt  bypassed {:>10.3} ms/utt  ratio {:.3}",
        1e3 * report.decoder_seconds,
        1e3 * report.decoder_bypass_seconds,
        report.decoder_ratio
    )
    .unwrap();
    writeln!(
        s,
        "full     with aggregation {:>10.3} ms/utt  bypassed {:>10.3} ms/utt  ratio {:.3}",
        1e3 * report.full_seconds,
        1e3 * report.full_bypass_seconds,
        report.full_ratio
    )
    .unwrap();
    writeln!(s, "timer: {}", report.methodology).unwrap();
    print!("{s}");
    if let Some(dir) = &c.out {
        make_dir(dir)?;
        write(&dir.join("bench.txt"), &s)?;
        write(
            &dir.join("bench.json"),
            &serde_json::to_string_pretty(&report).expect("serializes"),
        )?;
    }
    Ok(())
}

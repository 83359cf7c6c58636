use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use redan::checkpoint::Checkpoint;
use redan::data::{
    build_examples, read_data_dir, write_synthetic, DialogExample, DialogFile, FeatureRecord, SyntheticSpec,
    Vocabulary,
};
use redan::encoders::{load_glove, GLOVE_DIM};
use redan::model::{DecoderKind, ModelConfig, ReDan};
use redan::ranking::{aggregate_average, aggregate_reciprocal, metrics, RankingTable};
use redan::trace::trace_dialog;
use redan::training::{evaluate, train, TrainConfig};

const SEED_VAR: &str = "REDAN_SEED";

#[derive(Parser)]
#[command(name = "redan", version, about = "Visual dialog answer ranking with recurrent dual attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (dialogs.json + features.rdnf).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        dialogs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        regions: usize,
        #[arg(long, default_value_t = 5)]
        candidates: usize,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation data; defaults to the training data.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum)]
        decoder: Decoder,
        /// Reasoning steps T.
        #[arg(long, default_value_t = 2)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the preset's epoch limit.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the preset's early-stopping patience.
        #[arg(long)]
        patience: Option<usize>,
        /// Words seen fewer times are mapped to <UNK>; defaults to 5 (paper) or 1 (desk).
        #[arg(long)]
        min_count: Option<usize>,
        /// Frozen 300-d word vectors in GloVe text format.
        #[arg(long)]
        glove: Option<PathBuf>,
    },
    /// Rank every turn of a dataset and print retrieval metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse ranking files from several models.
    Aggregate {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-turn, per-step attention weights for one dialog.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Image id of the dialog.
        #[arg(long)]
        dialog: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoder {
    Dis,
    Gen,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Average,
    Reciprocal,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<redan::Error> for Failure {
    fn from(e: redan::Error) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

fn seed_override(flag: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_VAR} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(flag),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn load_split(dir: &Path, vocab: &Vocabulary, model: &ModelConfig) -> Result<Vec<DialogExample>, Failure> {
    let (file, features) = read_data_dir(dir)?;
    check_feature_dim(&features, model.feature_dim)?;
    Ok(build_examples(&file, &features, vocab, model.truncation)?)
}

fn check_feature_dim(features: &[FeatureRecord], dim: usize) -> Result<(), Failure> {
    match features.iter().find(|f| f.dim != dim) {
        Some(f) => Err(Failure {
            code: 2,
            message: format!("image {} has {}-dim features, expected {dim}", f.image_id, f.dim),
        }),
        None => Ok(()),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { out, dialogs, seed, regions, candidates } => {
            let spec = SyntheticSpec { dialogs, regions, candidates, seed: seed_override(seed)?, ..SyntheticSpec::desk(dialogs, 0) };
            write_synthetic(&out, &spec)?;
            print_json(&json!({ "out": out, "dialogs": dialogs, "seed": spec.seed }));
        }
        Command::Train { data, val, decoder, steps, preset, out, seed, epochs, patience, min_count, glove } => {
            let seed = seed_override(seed)?;
            if steps == 0 {
                return Err(usage("--steps must be at least 1"));
            }
            let (file, features): (DialogFile, Vec<FeatureRecord>) = read_data_dir(&data)?;
            let feature_dim = features.first().map(|f| f.dim).ok_or_else(|| usage("training data has no images"))?;
            let min_count = min_count.unwrap_or(if preset == Preset::Paper { 5 } else { 1 });
            let vocab = Vocabulary::from_dialogs(&file, min_count)?;
            let kind = match decoder {
                Decoder::Dis => DecoderKind::Discriminative,
                Decoder::Gen => DecoderKind::Generative,
            };
            let mut config = match preset {
                Preset::Paper => ModelConfig::paper(vocab.len(), feature_dim, kind, glove.is_some()),
                Preset::Desk => ModelConfig::desk(vocab.len(), feature_dim, kind),
            };
            config.steps = steps;
            let pretrained = match &glove {
                Some(path) => {
                    config.pretrained_dim = Some(GLOVE_DIM);
                    let reader = BufReader::new(File::open(path).map_err(|e| io_failure(path, e))?);
                    Some(load_glove(reader, &vocab, GLOVE_DIM)?)
                }
                None => None,
            };
            check_feature_dim(&features, feature_dim)?;
            let train_set = build_examples(&file, &features, &vocab, config.truncation)?;
            let val_set = match &val {
                Some(dir) => load_split(dir, &vocab, &config)?,
                None => train_set.clone(),
            };
            let mut cfg = match preset {
                Preset::Paper => TrainConfig::paper(seed),
                Preset::Desk => TrainConfig::desk(seed),
            };
            if let Some(e) = epochs {
                cfg.max_epochs = e;
            }
            if let Some(p) = patience {
                cfg.patience = p;
            }
            let model = ReDan::new(config, pretrained, seed)?;
            let outcome = train(model, &vocab, &train_set, &val_set, &cfg, |r| {
                print_json(&serde_json::to_value(r).expect("records serialize"));
                ControlFlow::Continue(())
            })?;
            outcome.checkpoint.save(&out)?;
        }
        Command::Eval { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let examples = load_split(&data, &ck.vocab, &ck.model.config)?;
            let table = evaluate(&ck.model, &examples)?;
            table.write_jsonl(&out)?;
            print_json(&serde_json::to_value(metrics(&table)?).expect("metrics serialize"));
        }
        Command::Aggregate { method, inputs, out } => {
            let tables = inputs.iter().map(RankingTable::read_jsonl).collect::<redan::Result<Vec<_>>>()?;
            let refs: Vec<&RankingTable> = tables.iter().collect();
            let fused = match method {
                Method::Average => aggregate_average(&refs)?,
                Method::Reciprocal => aggregate_reciprocal(&refs)?,
            };
            fused.write_jsonl(&out)?;
            print_json(&serde_json::to_value(metrics(&fused)?).expect("metrics serialize"));
        }
        Command::Trace { ckpt, data, dialog, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let examples = load_split(&data, &ck.vocab, &ck.model.config)?;
            let example = examples.iter().find(|e| e.image_id == dialog).ok_or_else(|| Failure {
                code: 2,
                message: format!("dialog {dialog} is not in {}", data.display()),
            })?;
            let trace = trace_dialog(&ck.model, example)?;
            let text = serde_json::to_string_pretty(&trace).expect("traces serialize");
            fs::write(&out, text + "\n").map_err(|e| io_failure(&out, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&usage(e.to_string().trim_end()));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.code)
        }
    }
}

fn report(f: &Failure) {
    let line = json!({ "code": f.code, "message": f.message });
    let _ = writeln!(io::stderr(), "{line}");
}

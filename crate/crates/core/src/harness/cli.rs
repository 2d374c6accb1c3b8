use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::checkpoint::load_checkpoint_for;
use super::config::ExperimentConfig;
use super::data::{read_dataset, synth_utterances, write_dataset, Split};
use super::eval::evaluate;
use super::train::{distill, train};
use crate::encoder::{count_params, l2_distance_profile, profile_csv};
use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "moe-conformer", version, about = "Shared-block MoE conformer: data, training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (`section.key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Table,
    Kv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic train and test sets named in the config.
    SynthData(Common),
    /// Trains from scratch; writes the metrics log and checkpoints.
    Train(Common),
    /// Decodes a dataset and prints the token error rate.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (default: `data.test`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Beam width (default: `eval.beam`).
        #[arg(long)]
        beam: Option<usize>,
        /// Also write hypothesis lines to this file.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Prints the encoder parameter breakdown.
    CountParams {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Prints per-transformation L2 distances for one utterance as CSV.
    L2Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance index (in file order) or id.
        #[arg(long)]
        utt: String,
        /// Dataset directory (default: `data.test`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains a student against the teacher checkpoint in the config.
    Distill(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn dataset_dir(explicit: Option<PathBuf>, default: &Path) -> Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| default.to_path_buf());
    if !dir.is_dir() {
        return Err(Error::Usage(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => {
            let cfg = load_config(&c)?;
            let (v, f) = (cfg.model.decoder.vocab, cfg.model.encoder.feature_dim);
            let s = &cfg.synth;
            for (split, n, dir) in
                [(Split::Train, s.train_utterances, &cfg.train_data), (Split::Test, s.test_utterances, &cfg.test_data)]
            {
                write_dataset(dir, &synth_utterances(s, v, f, n, cfg.train.seed, split)?)?;
                write_out(out, &format!("wrote {n} utterances to {}\n", dir.display()))?;
            }
        }
        Command::Train(c) => {
            let o = train(&load_config(&c)?)?;
            report_run(out, &o)?;
        }
        Command::Distill(c) => {
            let o = distill(&load_config(&c)?)?;
            report_run(out, &o)?;
        }
        Command::Eval { common, checkpoint, data, beam, hyps } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint_for(&checkpoint, &cfg)?;
            let utts = read_dataset(&dataset_dir(data, &cfg.test_data)?)?;
            let r = evaluate(&ck.model, &utts, beam.unwrap_or(cfg.eval.beam), cfg.eval.max_len)?;
            if let Some(p) = hyps {
                std::fs::write(&p, r.hyp_lines()).map_err(|e| Error::io(&p, e))?;
            }
            write_out(out, &format!("ter={:.6} errors={} ref_tokens={}\n", r.ter, r.errors, r.ref_tokens))?;
        }
        Command::CountParams { common, format } => {
            let report = count_params(&load_config(&common)?.model.encoder);
            let text = match format {
                ReportFormat::Table => report.table(),
                ReportFormat::Kv => report.kv_lines(),
            };
            write_out(out, &text)?;
        }
        Command::L2Curve { common, checkpoint, utt, data } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint_for(&checkpoint, &cfg)?;
            let utts = read_dataset(&dataset_dir(data, &cfg.test_data)?)?;
            let u = match utt.parse::<usize>() {
                Ok(i) => utts.get(i),
                Err(_) => utts.iter().find(|u| u.id == utt),
            }
            .ok_or_else(|| Error::Usage(format!("no utterance {utt} in the dataset")))?;
            let rows = l2_distance_profile(&ck.model.store, &ck.model.encoder, &u.features)?;
            write_out(out, &profile_csv(&rows))?;
        }
    }
    Ok(())
}

fn report_run(out: &mut dyn Write, o: &super::TrainOutcome) -> Result<()> {
    let mut s = format!("metrics: {}\ncheckpoint: {}\n", o.metrics.display(), o.checkpoint.display());
    if let Some(last) = o.rows.last() {
        s.push_str(&format!("steps={} nll={:.6} total={:.6}\n", last.step, last.nll, last.total));
    }
    write_out(out, &s)
}

/// Runs the CLI on `argv` (program name first), writing results to `out`
/// and diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

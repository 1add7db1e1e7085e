//! `tdn` command-line front end.
//!
//! Exit codes: 0 success, 1 internal failure (or a failed gradient check),
//! 2 usage or validation error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_synthetic, load_dataset, save_dataset, Span, SynthConfig};
use crate::error::TdnError;
use crate::model::TdnModel;
use crate::train::{evaluate, format_sig9, gradcheck, train_with};
use crate::visualize::export_adjacency;

#[derive(Debug, Parser)]
#[command(name = "tdn", about = "Temporal dependency networks over frame sequences", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-structure synthetic dataset and its annotation.
    Gen(GenArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Print hit@1 and GAP@k of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write each head's normalized adjacency for one video as a PGM image.
    ExportAdjacency(ExportArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 50)]
    pub videos: usize,
    #[arg(long, default_value_t = 32)]
    pub m: usize,
    #[arg(long, default_value_t = 6)]
    pub prototypes: usize,
    /// Events per video, `MIN-MAX`.
    #[arg(long, default_value = "2-4", value_parser = parse_span)]
    pub events: Span,
    /// Frames per event, `MIN-MAX`.
    #[arg(long, default_value = "5-20", value_parser = parse_span)]
    pub length: Span,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Correlated prototype pairs, `P:Q,P:Q`; empty for none.
    #[arg(long, default_value = "0:1,2:3", value_parser = parse_pairs)]
    pub pairs: Pairs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Dataset path; the annotation goes to `<out>.annotation.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `paths.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `paths.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub video: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pairs(pub Vec<(u32, u32)>);

fn parse_span(s: &str) -> Result<Span, String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let min: usize = a.trim().parse().map_err(|_| format!("bad range start in {s:?}"))?;
    let max: usize = b.trim().parse().map_err(|_| format!("bad range end in {s:?}"))?;
    if min == 0 || min > max {
        return Err(format!("range {s:?} must satisfy 1 <= MIN <= MAX"));
    }
    Ok(Span::new(min, max))
}

fn parse_pairs(s: &str) -> Result<Pairs, String> {
    if s.trim().is_empty() {
        return Ok(Pairs(Vec::new()));
    }
    s.split(',')
        .map(|item| {
            let (p, q) = item
                .split_once(':')
                .ok_or_else(|| format!("pair {item:?} is not P:Q"))?;
            let p = p.trim().parse().map_err(|_| format!("bad prototype id in {item:?}"))?;
            let q = q.trim().parse().map_err(|_| format!("bad prototype id in {item:?}"))?;
            Ok((p, q))
        })
        .collect::<Result<_, _>>()
        .map(Pairs)
}

enum Failure {
    Usage(String),
    Internal(String),
}

impl From<TdnError> for Failure {
    fn from(e: TdnError) -> Self {
        match e {
            TdnError::Contract(_) => Failure::Internal(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub fn annotation_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".annotation.json");
    PathBuf::from(name)
}

fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = SynthConfig {
        videos: args.videos,
        m: args.m,
        num_prototypes: args.prototypes,
        events_per_video: args.events,
        event_length: args.length,
        noise_sigma: args.sigma,
        correlated_pairs: args.pairs.0.clone(),
        seed: args.seed,
    };
    let (dataset, annotation) = gen_synthetic(&cfg)?;
    save_dataset(&dataset, &args.out)?;
    let sidecar = annotation_path(&args.out);
    let json = serde_json::to_string(&annotation).map_err(|e| Failure::Internal(e.to_string()))?;
    std::fs::write(&sidecar, json)?;
    writeln!(out, "wrote {} videos to {} and {}", dataset.len(), args.out.display(), sidecar.display())?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let run = RunConfig::load(&args.config)?;
    let data_path = args
        .data
        .clone()
        .or_else(|| run.paths.data.clone())
        .ok_or_else(|| Failure::Usage("no data path: pass --data or set paths.data".into()))?;
    let ckpt_path = args
        .out
        .clone()
        .or_else(|| run.paths.checkpoint.clone())
        .ok_or_else(|| Failure::Usage("no checkpoint path: pass --out or set paths.checkpoint".into()))?;
    let log_path = args.log.clone().or_else(|| run.paths.log.clone());

    let dataset = load_dataset(&data_path)?;
    let model_cfg = run.model_config(dataset.dim, dataset.num_labels)?;
    let train_cfg = run.train_config()?;
    let mut model = TdnModel::new(model_cfg, train_cfg.seed)?;

    let mut log_file = log_path.as_ref().map(File::create).transpose()?;
    let mut io_error = None;
    train_with(&mut model, &dataset, &train_cfg, |record| {
        let line = record.to_line();
        let res = writeln!(out, "{line}").and_then(|_| match log_file.as_mut() {
            Some(f) => writeln!(f, "{line}"),
            None => Ok(()),
        });
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    checkpoint::save(&model, &ckpt_path)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let model = checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let metrics = evaluate(&model, &dataset, args.k)?;
    writeln!(out, "hit_at_1\t{}", format_sig9(metrics.hit_at_1))?;
    writeln!(out, "gap_at_{}\t{}", args.k, format_sig9(metrics.gap_at_k))?;
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool, Failure> {
    let report = gradcheck(args.trials, args.seed)?;
    let (n, m, k, l, c) = report.worst_config;
    writeln!(out, "trials\t{}", report.trials)?;
    writeln!(out, "entries_checked\t{}", report.entries_checked)?;
    writeln!(out, "max_rel_error\t{}", format_sig9(report.max_rel_error))?;
    writeln!(out, "worst_parameter\t{}", report.worst_path)?;
    writeln!(out, "worst_config\tN={n} m={m} K={k} L={l} C={c}")?;
    writeln!(out, "max_rel_error_resolvable\t{}", format_sig9(report.max_rel_error_resolvable))?;
    writeln!(out, "unresolvable_entries\t{}", report.unresolvable_entries)?;
    writeln!(out, "status\t{}", if report.passed() { "pass" } else { "fail" })?;
    Ok(report.passed())
}

fn cmd_export(args: &ExportArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let model = checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    for path in export_adjacency(&model, &dataset, args.video, &args.out_dir)? {
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render().ansi());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => 2,
            };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, out).map(|_| true),
        Command::Train(a) => cmd_train(a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(a, out).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::ExportAdjacency(a) => cmd_export(a, out).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(Failure::Internal(msg)) => {
            let _ = writeln!(err, "internal error: {msg}");
            1
        }
    }
}

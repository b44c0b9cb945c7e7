//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use robustlab_core::structure::{structure_from_preset, Family, StructureSpec};
use serde::Serialize;

use crate::manifest::{HeatmapSection, LipschitzSection, Manifest, ManifestError};
use crate::pipeline::{run_grid, run_parallel, Run, Stage};
use crate::records::{ExperimentRecord, PruneRecord};

#[derive(Debug, Parser)]
#[command(name = "robustlab", version, about = "Structure-grid robustness experiments")]
pub struct Cli {
    /// Experiment manifest (TOML).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory; overrides the manifest's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces the manifest's master seed.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest, a preset or a structure file and print the
    /// resolved structures as JSON.
    Validate {
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        #[arg(long, default_value = "vit", value_parser = parse_family)]
        family: Family,
        /// JSON file holding one structure.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train every structure and replicate, writing checkpoints.
    Train,
    /// Evaluate trained checkpoints under the manifest's attacks.
    Attack,
    /// Fourier heatmaps of trained checkpoints.
    Heatmap,
    /// Local Lipschitz estimates of trained checkpoints.
    Lipschitz,
    /// Magnitude-pruning sweep of trained checkpoints.
    Prune,
    /// Train and evaluate everything in one pass.
    Grid,
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "vit" => Ok(Family::Vit),
        "vmlp" => Ok(Family::Vmlp),
        other => Err(format!("unknown family `{other}` (expected vit or vmlp)")),
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    label: &'a str,
    spec: &'a StructureSpec,
}

fn open_run(cli: &Cli, fill: impl FnOnce(&mut Manifest)) -> Result<Run> {
    let path = cli.manifest.as_ref().context("usage: this subcommand needs --manifest")?;
    let mut loaded = Manifest::load(path)?;
    fill(&mut loaded.manifest);
    Run::new(loaded, cli.seed_override, cli.out.clone(), cli.jobs)
}

fn validate(cli: &Cli, preset: &Option<String>, family: Family, spec: &Option<PathBuf>) -> Result<()> {
    let resolved: Vec<(String, StructureSpec)> = if let Some(id) = preset {
        let s = structure_from_preset(id, family)?;
        s.validate()?;
        vec![(id.clone(), s)]
    } else if let Some(path) = spec {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: StructureSpec = serde_json::from_str(&text).map_err(|e| ManifestError(format!("{}: {e}", path.display())))?;
        s.validate()?;
        vec![(path.display().to_string(), s)]
    } else {
        let run = open_run(cli, |_| {})?;
        run.structures.iter().map(|r| (r.label.clone(), r.spec.clone())).collect()
    };
    let text = if let [(_, only)] = resolved.as_slice() {
        serde_json::to_string_pretty(only)?
    } else {
        let list: Vec<Resolved> = resolved.iter().map(|(l, s)| Resolved { label: l, spec: s }).collect();
        serde_json::to_string_pretty(&list)?
    };
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

/// Runs `stages` on every trained checkpoint; fails on the first error.
fn evaluate_checkpoints(run: &Run, stages: &[Stage], table: &str) -> Result<()> {
    let data = run.load_data()?;
    let jobs = run.jobs_list();
    let rows = run_parallel(&jobs, run.jobs, |job| -> Result<ExperimentRecord> {
        let model = run.load_trained(job, &data)?;
        let mut rec = run.base_record(job);
        run.evaluate(job, &model, &data, stages, &mut rec)?;
        Ok(rec)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let path = run.write_results(table, &rows)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate { preset, family, spec } => validate(cli, preset, *family, spec),
        Command::Train => {
            let run = open_run(cli, |_| {})?;
            let data = run.load_data()?;
            let jobs = run.jobs_list();
            let rows = run_parallel(&jobs, run.jobs, |job| -> Result<ExperimentRecord> {
                let (model, losses) = run.train(job, &data)?;
                let mut rec = run.base_record(job);
                rec.final_loss = losses.last().copied();
                run.evaluate(job, &model, &data, &[], &mut rec)?;
                Ok(rec)
            });
            let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
            let path = run.write_results("train.csv", &rows)?;
            eprintln!("wrote {} and {} checkpoints", path.display(), rows.len());
            Ok(())
        }
        Command::Attack => {
            let run = open_run(cli, |_| {})?;
            if run.loaded.manifest.attacks.is_empty() {
                return Err(ManifestError("no [[attacks]] configured".into()).into());
            }
            evaluate_checkpoints(&run, &[Stage::Attack], "attack.csv")
        }
        Command::Heatmap => {
            let run = open_run(cli, |m| {
                m.diagnostics.heatmap.get_or_insert_with(HeatmapSection::default);
            })?;
            evaluate_checkpoints(&run, &[Stage::Heatmap], "heatmap.csv")
        }
        Command::Lipschitz => {
            let run = open_run(cli, |m| {
                m.diagnostics.lipschitz.get_or_insert_with(LipschitzSection::default);
            })?;
            evaluate_checkpoints(&run, &[Stage::Lipschitz], "lipschitz.csv")
        }
        Command::Prune => {
            let run = open_run(cli, |_| {})?;
            if run.loaded.manifest.prune.is_none() {
                return Err(ManifestError("no [prune] section configured".into()).into());
            }
            let data = run.load_data()?;
            let jobs = run.jobs_list();
            let rows = run_parallel(&jobs, run.jobs, |job| -> Result<Vec<PruneRecord>> {
                let model = run.load_trained(job, &data)?;
                run.prune(job, &model, &data)
            });
            let rows: Vec<PruneRecord> = rows.into_iter().collect::<Result<Vec<_>>>()?.concat();
            let path = run.write_prune(&rows)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Grid => {
            let run = open_run(cli, |_| {})?;
            let outcomes = run_grid(&run)?;
            let failed = outcomes.iter().filter(|o| o.record.error.is_some()).count();
            let records: Vec<ExperimentRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
            let path = run.write_results("results.csv", &records)?;
            run.write_timings(&records)?;
            if run.loaded.manifest.prune.is_some() {
                let prune: Vec<PruneRecord> = outcomes.into_iter().flat_map(|o| o.prune).collect();
                run.write_prune(&prune)?;
            }
            eprintln!("wrote {} ({} rows, {failed} failed)", path.display(), records.len());
            if failed == records.len() && failed > 0 {
                bail!("every run in the grid failed; see the error column of {}", path.display());
            }
            Ok(())
        }
    }
}

/// Error category, rule name (for rejected structures) and exit status.
pub fn classify(err: &anyhow::Error) -> (&'static str, Option<&'static str>, u8) {
    use robustlab_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Incompatible { rule, .. } => ("incompatible-structure", Some(*rule), 3),
                E::Usage(_) | E::Config(_) | E::ShapeMismatch { .. } => ("invalid-input", None, 2),
                E::Ingestion { .. } | E::Io(_) => ("data", None, 4),
                E::Checkpoint(_) => ("checkpoint", None, 4),
                E::NonFinite { .. } | E::NonFiniteLoss { .. } => ("numeric", None, 5),
            };
        }
        if cause.downcast_ref::<ManifestError>().is_some() {
            return ("invalid-manifest", None, 2);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", None, 4);
        }
    }
    ("runtime", None, 1)
}

/// `error kind=<kind> [rule=<rule>] msg=<message>` on a single line.
pub fn error_line(err: &anyhow::Error) -> String {
    let (kind, rule, _) = classify(err);
    let msg = format!("{err:#}").split_whitespace().collect::<Vec<_>>().join(" ");
    match rule {
        Some(r) => format!("error kind={kind} rule={r} msg={msg}"),
        None => format!("error kind={kind} msg={msg}"),
    }
}

pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(classify(&e).2)
        }
    }
}

//! Stages shared by the subcommands: data loading, training with
//! checkpoints, evaluation, diagnostics and pruning, plus the parallel
//! runner that keeps output order independent of scheduling.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use robustlab_core::attack::robust_accuracy;
use robustlab_core::data::{read_cifar10, synth_freq_dataset, LabeledImageSet, SyntheticFreqSpec};
use robustlab_core::diagnostics::{fourier_heatmap, heatmap_csv, local_lipschitz, render_ppm, LipschitzConfig};
use robustlab_core::prune::pruned;
use robustlab_core::rng::{derive_seed, name_tag};
use robustlab_core::structure::{InputNorm, Model, StructureSpec};
use robustlab_core::train::{accuracy, Checkpoint, Trainer};

use crate::fsutil::write_atomic;
use crate::manifest::{DatasetConfig, LoadedManifest, ResolvedStructure};
use crate::records::{attack_label, prune_csv, results_csv, timings_csv, ExperimentRecord, PruneRecord};

/// Tag mixed into the synthetic training seed to get the held-out seed.
const TEST_SPLIT_TAG: u64 = 0x7e57;

/// Everything a subcommand needs after the manifest has been validated.
pub struct Run {
    pub loaded: LoadedManifest,
    pub structures: Vec<ResolvedStructure>,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

/// One (structure, replicate) unit of work.
#[derive(Clone, Debug)]
pub struct Job {
    pub label: String,
    pub spec: StructureSpec,
    pub replicate: usize,
    pub seed: u64,
}

impl Job {
    /// File-name-safe form of the label: `(b)` becomes `b`.
    pub fn slug(&self) -> String {
        let s: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let s = s.trim_matches('_');
        format!("{}-r{}", if s.is_empty() { "structure" } else { s }, self.replicate)
    }
}

pub struct Datasets {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Attack,
    Heatmap,
    Lipschitz,
}

impl Run {
    pub fn new(loaded: LoadedManifest, seed_override: Option<u64>, out: Option<PathBuf>, jobs: usize) -> Result<Run> {
        let structures = loaded.manifest.validate()?;
        if jobs == 0 {
            bail!("usage: --jobs must be at least 1");
        }
        let out = match out {
            Some(o) => o,
            None => match &loaded.manifest.out {
                Some(o) => loaded.base_dir.join(o),
                None => PathBuf::from("robustlab-out"),
            },
        };
        let seed = seed_override.unwrap_or(loaded.manifest.seed);
        Ok(Run {
            loaded,
            structures,
            seed,
            out,
            jobs,
        })
    }

    pub fn sha(&self) -> &str {
        &self.loaded.sha256
    }

    /// Structures in manifest order, replicates innermost. A run's seed
    /// depends on its label and replicate only, not on its position.
    pub fn jobs_list(&self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for s in &self.structures {
            for r in 0..self.loaded.manifest.replicates {
                jobs.push(Job {
                    label: s.label.clone(),
                    spec: s.spec.clone(),
                    replicate: r,
                    seed: derive_seed(self.seed, &[name_tag(&s.label), r as u64]),
                });
            }
        }
        jobs
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.loaded.base_dir.join(p)
        }
    }

    pub fn load_data(&self) -> Result<Datasets> {
        match &self.loaded.manifest.dataset {
            DatasetConfig::Synthetic {
                synthetic, test_count, ..
            } => {
                let train = synth_freq_dataset(synthetic)?;
                let test = synth_freq_dataset(&SyntheticFreqSpec {
                    count: *test_count,
                    seed: derive_seed(synthetic.seed, &[TEST_SPLIT_TAG]),
                    ..synthetic.clone()
                })?;
                Ok(Datasets { train, test })
            }
            DatasetConfig::Cifar10 {
                train,
                test,
                limit_train,
                limit_test,
                ..
            } => {
                let read = |paths: &[PathBuf], limit: &Option<usize>| -> Result<LabeledImageSet> {
                    let paths: Vec<PathBuf> = paths.iter().map(|p| self.resolve(p)).collect();
                    let set = read_cifar10(&paths)?;
                    Ok(match limit {
                        Some(n) => set.take(*n)?,
                        None => set,
                    })
                };
                Ok(Datasets {
                    train: read(train, limit_train)?,
                    test: read(test, limit_test)?,
                })
            }
        }
    }

    pub fn checkpoint_path(&self, job: &Job) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}.ckpt", job.slug()))
    }

    fn fresh_model(&self, job: &Job, data: &Datasets) -> Result<Model> {
        let mut model = Model::new(&job.spec, job.seed)?;
        if self.loaded.manifest.dataset.normalize() {
            let (mean, std) = data.train.channel_stats();
            model.set_input_norm(InputNorm { mean, std })?;
        }
        Ok(model)
    }

    /// Trains one job from scratch, writing a checkpoint after every epoch.
    pub fn train(&self, job: &Job, data: &Datasets) -> Result<(Model, Vec<f64>)> {
        let mut model = self.fresh_model(job, data)?;
        let spec_json = serde_json::to_string(&job.spec)?;
        let path = self.checkpoint_path(job);
        let config = self.loaded.manifest.train.config(job.seed);
        let mut trainer = Trainer::new(config, &model)?;
        let losses = trainer.fit_with(&mut model, &data.train, |t, net| {
            let bytes = t.checkpoint(net, &spec_json, self.sha()).encode();
            write_atomic(&path, &bytes).map_err(|e| robustlab_core::Error::Io(format!("{e:#}")))
        })?;
        Ok((model, losses))
    }

    /// Rebuilds a trained model from the checkpoint `train` wrote.
    pub fn load_trained(&self, job: &Job, data: &Datasets) -> Result<Model> {
        let path = self.checkpoint_path(job);
        let stale = |what: String| anyhow::Error::new(robustlab_core::Error::Checkpoint(what));
        if !path.exists() {
            return Err(stale(format!(
                "missing checkpoint {} for `{}`; run `robustlab train` first",
                path.display(),
                job.label
            )));
        }
        let ckpt = Checkpoint::load(&path)?;
        let stored: StructureSpec =
            serde_json::from_str(&ckpt.spec_json).with_context(|| format!("structure stored in {}", path.display()))?;
        if stored != job.spec {
            return Err(stale(format!("checkpoint {} was trained for a different structure", path.display())));
        }
        if ckpt.manifest_sha256 != self.sha() {
            return Err(stale(format!("checkpoint {} was produced by a different manifest", path.display())));
        }
        let mut model = self.fresh_model(job, data)?;
        ckpt.restore_params(&mut model)?;
        Ok(model)
    }

    pub fn base_record(&self, job: &Job) -> ExperimentRecord {
        let family = serde_json::to_value(job.spec.family)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        ExperimentRecord {
            preset: job.label.clone(),
            family,
            mode: self.loaded.manifest.train.mode().to_string(),
            replicate: job.replicate,
            seed: job.seed,
            ..Default::default()
        }
    }

    /// Runs the requested evaluation stages and fills `rec`.
    pub fn evaluate(&self, job: &Job, model: &Model, data: &Datasets, stages: &[Stage], rec: &mut ExperimentRecord) -> Result<()> {
        let m = &self.loaded.manifest;
        let batch = m.eval_batch;
        rec.parameter_count = Some(model.parameter_count());
        let norm = model.input_norm();
        rec.input_mean = norm.mean.clone();
        rec.input_std = norm.std.clone();
        rec.clean_accuracy = Some(accuracy(model, &data.test, batch)?);
        if stages.contains(&Stage::Attack) && !m.attacks.is_empty() {
            let report = robust_accuracy(model, &data.test, &m.attacks, batch, derive_seed(job.seed, &[0xa77]))?;
            rec.attacks = m.attacks.iter().map(attack_label).collect();
            rec.per_attack_accuracy = report.per_attack;
            rec.robust_accuracy = Some(report.worst);
        }
        if stages.contains(&Stage::Lipschitz) {
            if let Some(l) = &m.diagnostics.lipschitz {
                let subset = data.test.take(l.samples.min(data.test.len()))?;
                let cfg = LipschitzConfig {
                    epsilon: l.epsilon,
                    steps: l.steps,
                    restarts: l.restarts,
                    seed: derive_seed(job.seed, &[0x11b]),
                };
                let est = local_lipschitz(model, subset.images(), &cfg)?;
                rec.lipschitz_mean = Some(est.mean);
                rec.lipschitz_max = Some(est.per_sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
        if stages.contains(&Stage::Heatmap) {
            if let Some(h) = &m.diagnostics.heatmap {
                let subset = data.test.take(h.samples.min(data.test.len()))?;
                let map = fourier_heatmap(model, &subset, h.norm, batch, derive_seed(job.seed, &[0xf0f]))?;
                rec.heatmap_high_freq_error = Some(map.high_frequency_mean());
                let provenance = format!("manifest_sha256={} preset={} replicate={}", self.sha(), job.label, job.replicate);
                let dir = self.out.join("heatmaps");
                write_atomic(&dir.join(format!("{}.ppm", job.slug())), &render_ppm(&map, h.pixel_scale, &provenance))?;
                let comments = [provenance, format!("norm={} samples={}", h.norm, map.sample_count)];
                write_atomic(&dir.join(format!("{}.csv", job.slug())), heatmap_csv(&map, &comments).as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn prune(&self, job: &Job, model: &Model, data: &Datasets) -> Result<Vec<PruneRecord>> {
        let m = &self.loaded.manifest;
        let Some(p) = &m.prune else {
            return Ok(Vec::new());
        };
        // Each fraction is evaluated on a fresh prune of the trained
        // weights; robust accuracy is the worst case over all attacks.
        let mut rows = Vec::new();
        for &f in &p.fractions {
            let (model, mask) = pruned(model, f)?;
            let clean = accuracy(&model, &data.test, m.eval_batch)?;
            let robust = if p.robust && !m.attacks.is_empty() {
                let seed = derive_seed(job.seed, &[0xa77]);
                Some(robust_accuracy(&model, &data.test, &m.attacks, m.eval_batch, seed)?.worst)
            } else {
                None
            };
            rows.push((f, mask.achieved_nonzero, mask.total_prunable, clean, robust));
        }
        Ok(rows
            .into_iter()
            .map(|(fraction, nonzero, total_prunable, clean, robust)| PruneRecord {
                preset: job.label.clone(),
                replicate: job.replicate,
                seed: job.seed,
                fraction,
                nonzero,
                total_prunable,
                clean_accuracy: Some(clean),
                robust_accuracy: robust,
                error: None,
            })
            .collect())
    }

    pub fn write_results(&self, name: &str, rows: &[ExperimentRecord]) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, &results_csv(self.sha(), rows)?)?;
        Ok(path)
    }

    pub fn write_timings(&self, rows: &[ExperimentRecord]) -> Result<PathBuf> {
        let path = self.out.join("timings.csv");
        write_atomic(&path, &timings_csv(rows)?)?;
        Ok(path)
    }

    pub fn write_prune(&self, rows: &[PruneRecord]) -> Result<PathBuf> {
        let path = self.out.join("prune.csv");
        write_atomic(&path, &prune_csv(self.sha(), rows)?)?;
        Ok(path)
    }
}

/// Applies `f` to every job on up to `workers` threads and returns the
/// results in job order.
pub fn run_parallel<T: Send>(jobs: &[Job], workers: usize, f: impl Fn(&Job) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let value = f(&jobs[i]);
                *slots[i].lock().unwrap() = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every job slot is filled"))
        .collect()
}

/// Output of one grid job.
pub struct GridOutcome {
    pub record: ExperimentRecord,
    pub prune: Vec<PruneRecord>,
}

/// Full protocol per job: train, clean and robust evaluation, Lipschitz,
/// heatmap and optional pruning. A failing job yields a row with its
/// error instead of stopping the grid.
pub fn run_grid(run: &Run) -> Result<Vec<GridOutcome>> {
    let data = run.load_data()?;
    let jobs = run.jobs_list();
    Ok(run_parallel(&jobs, run.jobs, |job| {
        let mut record = run.base_record(job);
        let mut prune = Vec::new();
        let started = Instant::now();
        let result = (|| -> Result<()> {
            let (model, losses) = run.train(job, &data)?;
            record.final_loss = losses.last().copied();
            record.train_seconds = started.elapsed().as_secs_f64();
            let eval_start = Instant::now();
            run.evaluate(job, &model, &data, &[Stage::Attack, Stage::Lipschitz, Stage::Heatmap], &mut record)?;
            prune = run.prune(job, &model, &data)?;
            record.eval_seconds = eval_start.elapsed().as_secs_f64();
            Ok(())
        })();
        if let Err(e) = result {
            record.error = Some(format!("{e:#}"));
            if let Some(p) = &run.loaded.manifest.prune {
                prune = p
                    .fractions
                    .iter()
                    .map(|&fraction| PruneRecord {
                        preset: job.label.clone(),
                        replicate: job.replicate,
                        seed: job.seed,
                        fraction,
                        nonzero: 0,
                        total_prunable: 0,
                        clean_accuracy: None,
                        robust_accuracy: None,
                        error: Some(format!("{e:#}")),
                    })
                    .collect();
            }
        }
        GridOutcome { record, prune }
    }))
}

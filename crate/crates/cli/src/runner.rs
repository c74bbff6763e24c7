//! Runs every (seed, level, strategy) job and writes the report tree.
//!
//! ```text
//! <out>/manifest.json
//! <out>/summary.csv                          mean/min/max across seeds
//! <out>/seed_<s>/heterogeneity_summary.csv   when more than one level is configured
//! <out>/seed_<s>/<level>/robustness.csv      one row per strategy (K >= 2)
//! <out>/seed_<s>/<level>/subregion_gaps.csv  one row per strategy (K >= 2)
//! <out>/seed_<s>/<level>/<strategy>/convergence.csv, slices.csv, global.fstp, client_<k>_norm.fstp
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedstress_core::checkpoint::save_parameters;
use fedstress_core::data::{build_validation_set, generate_cases, load_slice_bundle, partition_cases, Case};
use fedstress_core::federated::{run_experiment, FederatedData, Strategy};
use fedstress_core::heterogeneity::HeterogeneityLevel;
use fedstress_core::metrics::{heterogeneity_summary, subregion_gaps, RoundRecord};
use fedstress_core::model::UNet;
use fedstress_core::Scalar;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, Precision};
use crate::report::{
    convergence_rows, final_robustness, save_rows, write_heterogeneity, HeterogeneityRow, RobustnessRow, SliceRow,
    SubregionRow, SummaryRow,
};
use crate::CliError;

#[derive(Clone, Copy, Debug)]
struct Job {
    seed: u64,
    level: HeterogeneityLevel,
    strategy: Strategy,
}

impl Job {
    fn dir(&self, out: &Path) -> PathBuf {
        level_dir(out, self.seed, self.level).join(self.strategy.label())
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn level_dir(out: &Path, seed: u64, level: HeterogeneityLevel) -> PathBuf {
    seed_dir(out, seed).join(level.as_str())
}

struct JobOutput {
    job: Job,
    records: Vec<RoundRecord>,
    clients: usize,
    files: Vec<PathBuf>,
    seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct JobEntry {
    pub seed: u64,
    pub level: String,
    pub strategy: String,
    pub seconds: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct JobFailure {
    pub seed: u64,
    pub level: String,
    pub strategy: String,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub threads: usize,
    /// False when any job failed; the listed files are then a partial result.
    pub complete: bool,
    pub jobs: Vec<JobEntry>,
    pub failures: Vec<JobFailure>,
    pub reports: Vec<String>,
    pub total_seconds: f64,
}

fn load_cases<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Case<T>>, CliError> {
    Ok(match &cfg.data {
        DataSource::Synthetic(s) => generate_cases(&s.resolve(seed))?,
        DataSource::Bundle(path) => load_slice_bundle(path)?,
    })
}

fn run_job<T: Scalar>(cfg: &ExperimentConfig, job: Job, out: &Path) -> Result<JobOutput, CliError> {
    let start = Instant::now();
    let cases = load_cases::<T>(cfg, job.seed)?;
    let slice_size = cases
        .first()
        .and_then(Case::slice_size)
        .ok_or_else(|| CliError::Runtime("data source contains no slices".into()))?;
    let clients = partition_cases(cases, cfg.clients, job.level, job.seed)?;
    let (clients, validation) = build_validation_set(clients, cfg.validation_fraction, job.seed)?;
    let model = UNet::new(cfg.model_config(slice_size))?;
    let data = FederatedData { clients, validation };
    let result = run_experiment(&model, &job.strategy, &cfg.round_config(job.seed), &data)?;

    let dir = job.dir(out);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut files = Vec::new();
    let convergence = dir.join("convergence.csv");
    save_rows(&convergence_rows(&result.records), &convergence)?;
    files.push(convergence);
    let slices = dir.join("slices.csv");
    save_rows(&result.final_slices.iter().map(SliceRow::from).collect::<Vec<_>>(), &slices)?;
    files.push(slices);
    let global = dir.join("global.fstp");
    save_parameters(&result.global, &global)?;
    files.push(global);
    for (client, norms) in &result.client_norms {
        let path = dir.join(format!("client_{client}_norm.fstp"));
        save_parameters(norms, &path)?;
        files.push(path);
    }
    Ok(JobOutput { job, records: result.records, clients: cfg.clients, files, seconds: start.elapsed().as_secs_f64() })
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

/// Runs all jobs on `threads` workers and writes reports under `out`.
///
/// Job failures do not stop other jobs; they are listed in the manifest and
/// reported as an error after everything else is written.
pub fn run(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| {
            cfg.levels
                .iter()
                .flat_map(move |&level| cfg.strategies.iter().map(move |&strategy| Job { seed, level, strategy }))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<Result<JobOutput, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&job| match cfg.precision {
                Precision::F32 => run_job::<f32>(cfg, job, out),
                Precision::F64 => run_job::<f64>(cfg, job, out),
            })
            .collect()
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(o) => outputs.push(o),
            Err(e) => failures.push(JobFailure {
                seed: job.seed,
                level: job.level.to_string(),
                strategy: job.strategy.label(),
                error: e.to_string(),
            }),
        }
    }
    let reports = write_reports(cfg, out, &outputs)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        threads,
        complete: failures.is_empty(),
        jobs: outputs
            .iter()
            .map(|o| JobEntry {
                seed: o.job.seed,
                level: o.job.level.to_string(),
                strategy: o.job.strategy.label(),
                seconds: o.seconds,
                files: o.files.iter().map(|f| relative(out, f)).collect(),
            })
            .collect(),
        failures,
        reports: reports.iter().map(|f| relative(out, f)).collect(),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CliError::io(&path, e))?;
    if let Some(f) = manifest.failures.first() {
        return Err(CliError::Runtime(format!(
            "{} of {} jobs failed; first: seed {} level {} {}: {}",
            manifest.failures.len(),
            jobs.len(),
            f.seed,
            f.level,
            f.strategy,
            f.error
        )));
    }
    Ok(manifest)
}

fn write_reports(cfg: &ExperimentConfig, out: &Path, outputs: &[JobOutput]) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    // (level, strategy) -> metric -> per-seed values
    let mut across_seeds: BTreeMap<(HeterogeneityLevel, String), BTreeMap<&'static str, Vec<f64>>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let mut het_rows = Vec::new();
        for &level in &cfg.levels {
            let mut robust = Vec::new();
            let mut gaps = Vec::new();
            for o in outputs.iter().filter(|o| o.job.seed == seed && o.job.level == level) {
                let label = o.job.strategy.label();
                let summary = heterogeneity_summary(&o.records, &cfg.thresholds)?;
                let metrics = across_seeds.entry((level, label.clone())).or_default();
                metrics.entry("best_mean_dice").or_default().push(summary.best_mean_dice);
                // disparity metrics need at least two clients
                if o.clients >= 2 {
                    let r = final_robustness(&o.records)?;
                    let last = o.records.last().expect("robustness checked a final round");
                    let g = subregion_gaps(&last.client_region_dice())?;
                    for (name, v) in [
                        ("worst", r.worst),
                        ("best", r.best),
                        ("gap", r.gap),
                        ("mean", r.mean),
                        ("wt_gap", g.wt),
                        ("tc_gap", g.tc),
                        ("et_gap", g.et),
                    ] {
                        metrics.entry(name).or_default().push(v);
                    }
                    robust.push(RobustnessRow::new(level.as_str(), &label, o.clients, &r));
                    gaps.push(SubregionRow::new(level.as_str(), &label, &g));
                }
                het_rows.push(HeterogeneityRow { strategy: label, level: level.to_string(), summary });
            }
            if robust.is_empty() {
                continue;
            }
            let dir = level_dir(out, seed, level);
            let path = dir.join("robustness.csv");
            save_rows(&robust, &path)?;
            written.push(path);
            let path = dir.join("subregion_gaps.csv");
            save_rows(&gaps, &path)?;
            written.push(path);
        }
        if cfg.levels.len() > 1 && !het_rows.is_empty() {
            het_rows.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.level.cmp(&b.level)));
            let path = seed_dir(out, seed).join("heterogeneity_summary.csv");
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            write_heterogeneity(&het_rows, &cfg.thresholds, file)?;
            written.push(path);
        }
    }
    if !across_seeds.is_empty() {
        let rows: Vec<SummaryRow> = across_seeds
            .iter()
            .flat_map(|((level, label), metrics)| {
                metrics.iter().map(move |(name, values)| SummaryRow::new(level.as_str(), label, name, values))
            })
            .collect();
        let path = out.join("summary.csv");
        save_rows(&rows, &path)?;
        written.push(path);
    }
    Ok(written)
}

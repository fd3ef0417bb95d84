//! Single runs and suites of runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedvtc::accounting::{memory_entry, MemoryReport};
use fedvtc::datapart::dirichlet_partition;
use fedvtc::orchestrator::{run_experiment, write_run_dir, Phase, RunArtifacts};
use fedvtc::DatasetBundleF32;
use rayon::prelude::*;

use crate::config::{ExperimentFile, Variant};
use crate::report;

/// Name of the per-run accuracy curve file.
pub const CURVE_FILE: &str = "curve.tsv";

/// Round-by-round accuracy of one run: `T` FL rows then one row per
/// fine-tuning pass.
pub fn curve_tsv<T: fedvtc::Scalar>(art: &RunArtifacts<T>) -> String {
    let mut s = String::from("round\tphase\tmean_accuracy\n");
    for m in &art.metrics {
        let phase = match m.phase {
            Phase::Fl => "fl",
            Phase::FineTune => "fine_tune",
        };
        let _ = writeln!(s, "{}\t{}\t{:.4}", m.round, phase, m.mean_accuracy);
    }
    s
}

/// Memory estimates for every architecture cluster of the run at its
/// batch size.
pub fn memory_report<T: fedvtc::Scalar>(art: &RunArtifacts<T>) -> Result<MemoryReport> {
    let cfg = &art.config;
    let mut report = MemoryReport::default();
    for c in &art.clients {
        if report.entries.iter().any(|e| e.arch_id == c.model.arch.id) {
            continue;
        }
        report.entries.push(memory_entry(
            &c.model,
            &art.decoder,
            &art.decoder.output,
            cfg.batch_size,
        )?);
    }
    report.entries.sort_by_key(|e| e.arch_id);
    Ok(report)
}

/// Partitions, runs and writes one experiment into `dir`.
pub fn execute_run(
    file: &ExperimentFile,
    variant: &Variant,
    bundle: &DatasetBundleF32,
    dir: &Path,
) -> Result<RunArtifacts<f32>> {
    let cfg = &variant.config;
    let partition = dirichlet_partition(&bundle.train_labels, cfg.clients, file.partition.alpha, cfg.seed)?;
    let art = run_experiment(&variant.name, cfg, bundle, &partition)
        .with_context(|| format!("run {} (seed {})", variant.name, cfg.seed))?;
    write_run_dir(&art, dir)?;
    fs::write(dir.join("experiment.toml"), file.to_toml()?)?;
    fs::write(dir.join(CURVE_FILE), curve_tsv(&art))?;
    fs::write(dir.join("memory.tsv"), memory_report(&art)?.to_table())?;
    Ok(art)
}

/// Outcome of one suite member on one seed.
#[derive(Clone, Debug)]
pub struct JobOutcome {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub error: Option<String>,
}

/// Runs every variant on every seed (a bounded pool of `workers` runs at a
/// time), then writes the summary report over the output directory. Failed
/// runs are listed in `failures.tsv`; the others still complete.
pub fn run_suite(file: &ExperimentFile, bundle: &DatasetBundleF32, out: &Path) -> Result<Vec<JobOutcome>> {
    let variants = file.variants()?;
    let seeds = file.seed_list()?;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|v| {
            seeds.iter().map(move |&s| {
                let mut v = v.clone();
                v.config.seed = s;
                (v, s)
            })
        })
        .collect();
    fs::create_dir_all(out)?;
    fs::write(out.join("suite.toml"), file.to_toml()?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(file.workers.unwrap_or(2).max(1))
        .build()?;
    let outcomes: Vec<JobOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|(v, seed)| {
                let dir = out.join(&v.name).join(format!("seed-{seed}"));
                let error = execute_run(file, v, bundle, &dir).err().map(|e| format!("{e:#}"));
                if let Some(e) = &error {
                    log::error!("{} seed {seed} failed: {e}", v.name);
                }
                JobOutcome {
                    variant: v.name.clone(),
                    seed: *seed,
                    dir,
                    error,
                }
            })
            .collect()
    });
    let mut failures = String::from("variant\tseed\terror\n");
    for o in outcomes.iter().filter(|o| o.error.is_some()) {
        let _ = writeln!(
            failures,
            "{}\t{}\t{}",
            o.variant,
            o.seed,
            o.error.as_deref().unwrap_or("")
        );
    }
    fs::write(out.join("failures.tsv"), failures)?;
    if outcomes.iter().any(|o| o.error.is_none()) {
        report::write_report(out)?;
    }
    Ok(outcomes)
}

//! Summaries and plots computed from stored run directories only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedvtc::orchestrator::{MetricsRecord, Phase, RunConfig, TcMode, LEDGER_FILE, METRICS_FILE};
use serde::Serialize;
use walkdir::WalkDir;

use crate::plot::{plot_curves, Series};

/// One stored run.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub metrics: Vec<MetricsRecord>,
    pub total_bytes: u64,
    pub decoder_bytes: u64,
}

impl StoredRun {
    pub fn name(&self) -> &str {
        self.metrics.first().map_or("", |m| m.run.as_str())
    }

    /// Mean accuracy after the last evaluation point.
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.mean_accuracy)
    }

    /// Mean accuracy after the last FL round, before any fine-tuning.
    pub fn fl_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.phase == Phase::Fl)
            .map_or(0.0, |m| m.mean_accuracy)
    }
}

fn ledger_totals(text: &str) -> (u64, u64) {
    let mut total = 0;
    let mut decoder = 0;
    for line in text.lines().filter_map(|l| l.strip_prefix("# total ")) {
        let Some((key, value)) = line.split_once('\t') else {
            continue;
        };
        let v: u64 = value.trim().parse().unwrap_or(0);
        if key == "bytes" {
            total = v;
        } else if key.ends_with(" decoder") {
            decoder += v;
        }
    }
    (total, decoder)
}

pub fn load_run(dir: &Path) -> Result<StoredRun> {
    let metrics = fs::read_to_string(dir.join(METRICS_FILE))
        .with_context(|| format!("reading {}", dir.join(METRICS_FILE).display()))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
        .with_context(|| format!("parsing metrics in {}", dir.display()))?;
    let config: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let (total_bytes, decoder_bytes) = fs::read_to_string(dir.join(LEDGER_FILE))
        .map(|t| ledger_totals(&t))
        .unwrap_or((0, 0));
    Ok(StoredRun {
        dir: dir.to_path_buf(),
        config,
        metrics,
        total_bytes,
        decoder_bytes,
    })
}

/// Every run directory (one holding a metrics file) below `root`, sorted by path.
pub fn collect_runs(root: &Path) -> Result<Vec<StoredRun>> {
    let mut dirs: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == METRICS_FILE)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_run(d)).collect()
}

/// Arithmetic mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub fl_accuracy: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub total_bytes: Vec<u64>,
    pub decoder_bytes: Vec<u64>,
    pub tc_mode: TcMode,
    pub config: RunConfig,
}

impl SummaryRow {
    pub fn final_mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.final_accuracy)
    }

    pub fn fl_mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.fl_accuracy)
    }

    pub fn mean_bytes(&self) -> f64 {
        self.total_bytes.iter().sum::<u64>() as f64 / self.total_bytes.len() as f64
    }

    pub fn mean_decoder_bytes(&self) -> f64 {
        self.decoder_bytes.iter().sum::<u64>() as f64 / self.decoder_bytes.len() as f64
    }
}

/// Groups runs by name, in order of first appearance.
pub fn summarize(runs: &[StoredRun]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in runs {
        let idx = match rows.iter().position(|row| row.name == r.name()) {
            Some(i) => i,
            None => {
                let mut config = r.config.clone();
                config.seed = 0;
                rows.push(SummaryRow {
                    name: r.name().to_string(),
                    seeds: Vec::new(),
                    fl_accuracy: Vec::new(),
                    final_accuracy: Vec::new(),
                    total_bytes: Vec::new(),
                    decoder_bytes: Vec::new(),
                    tc_mode: r.config.tc_mode,
                    config,
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        row.seeds.push(r.config.seed);
        row.fl_accuracy.push(r.fl_accuracy());
        row.final_accuracy.push(r.final_accuracy());
        row.total_bytes.push(r.total_bytes);
        row.decoder_bytes.push(r.decoder_bytes);
    }
    rows
}

/// A singular/regular pair of rows whose configurations agree on
/// everything but the transmission mode.
pub fn transmission_pair(rows: &[SummaryRow]) -> Option<(&SummaryRow, &SummaryRow)> {
    rows.iter().filter(|r| r.tc_mode == TcMode::Singular).find_map(|s| {
        rows.iter()
            .filter(|r| r.tc_mode == TcMode::Regular)
            .find(|r| {
                let mut c = r.config.clone();
                c.tc_mode = TcMode::Singular;
                c == s.config
            })
            .map(|r| (s, r))
    })
}

/// Per-round mean and SD over a group's runs: `(round, phase, mean, sd, n)`.
pub fn mean_curve(runs: &[&StoredRun]) -> Vec<(usize, Phase, f64, f64, usize)> {
    let mut by_round: BTreeMap<usize, (Phase, Vec<f64>)> = BTreeMap::new();
    for r in runs {
        for m in &r.metrics {
            by_round
                .entry(m.round)
                .or_insert((m.phase, Vec::new()))
                .1
                .push(m.mean_accuracy);
        }
    }
    by_round
        .into_iter()
        .map(|(round, (phase, xs))| {
            let (m, sd) = mean_sd(&xs);
            (round, phase, m, sd, xs.len())
        })
        .collect()
}

fn pm((m, sd): (f64, f64)) -> String {
    format!("{m:.2} ± {sd:.2}")
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Fl => "fl",
        Phase::FineTune => "fine_tune",
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::from("# Summary\n\n");
    s.push_str("| run | seeds | accuracy after FL (%) | final accuracy (%) | mean bytes sent |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.0} |",
            r.name,
            r.seeds.len(),
            pm(r.fl_mean_sd()),
            pm(r.final_mean_sd()),
            r.mean_bytes()
        );
    }
    if let Some((sing, reg)) = transmission_pair(rows) {
        s.push_str("\n## Decoder transmission\n\n");
        s.push_str("| mode | run | final accuracy (%) | mean bytes sent | decoder bytes |\n|---|---|---|---|---|\n");
        for (mode, r) in [("singular", sing), ("regular", reg)] {
            let _ = writeln!(
                s,
                "| {mode} | {} | {} | {:.0} | {:.0} |",
                r.name,
                pm(r.final_mean_sd()),
                r.mean_bytes(),
                r.mean_decoder_bytes()
            );
        }
    }
    if rows.iter().any(|r| r.config.fine_tune_rounds == 0) {
        s.push_str(
            "\nRuns with `fine_tune_rounds = 0` stop after the FL rounds; they are not granted extra \
             rounds in place of fine-tuning.\n",
        );
    }
    s
}

pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("run\tseeds\tfl_mean\tfl_sd\tfinal_mean\tfinal_sd\tmean_bytes\tmean_decoder_bytes\n");
    for r in rows {
        let (fm, fs) = r.fl_mean_sd();
        let (m, sd) = r.final_mean_sd();
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{fm}\t{fs}\t{m}\t{sd}\t{}\t{}",
            r.name,
            seeds.join(","),
            r.mean_bytes(),
            r.mean_decoder_bytes()
        );
    }
    s
}

/// Files written by [`write_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub summary_md: PathBuf,
    pub summary_tsv: PathBuf,
    pub comparison: Option<PathBuf>,
    pub curves: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Reads every run under `root` and writes `summary.md`, `summary.tsv`,
/// `comparison.tsv` (when a singular/regular pair exists), `curves/*.tsv`
/// and `plots/*.png` into `root`.
pub fn write_report(root: &Path) -> Result<ReportFiles> {
    let runs = collect_runs(root)?;
    if runs.is_empty() {
        bail!("no runs found under {}", root.display());
    }
    let rows = summarize(&runs);
    let summary_md = root.join("summary.md");
    let summary_tsv_path = root.join("summary.tsv");
    fs::write(&summary_md, summary_markdown(&rows))?;
    fs::write(&summary_tsv_path, summary_tsv(&rows))?;

    let comparison = match transmission_pair(&rows) {
        Some((sing, reg)) => {
            let mut s = String::from("mode\trun\tfinal_mean\tfinal_sd\tmean_bytes\tmean_decoder_bytes\n");
            for (mode, r) in [("singular", sing), ("regular", reg)] {
                let (m, sd) = r.final_mean_sd();
                let _ = writeln!(
                    s,
                    "{mode}\t{}\t{m}\t{sd}\t{}\t{}",
                    r.name,
                    r.mean_bytes(),
                    r.mean_decoder_bytes()
                );
            }
            let p = root.join("comparison.tsv");
            fs::write(&p, s)?;
            Some(p)
        }
        None => None,
    };

    fs::create_dir_all(root.join("curves"))?;
    fs::create_dir_all(root.join("plots"))?;
    let mut curves = Vec::new();
    let mut plots = Vec::new();
    let mut all = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let group: Vec<&StoredRun> = runs.iter().filter(|r| r.name() == row.name).collect();
        let curve = mean_curve(&group);
        let mut s = String::from("round\tphase\tmean_accuracy\tsd\truns\n");
        for (round, phase, m, sd, n) in &curve {
            let _ = writeln!(s, "{round}\t{}\t{m:.4}\t{sd:.4}\t{n}", phase_name(*phase));
        }
        let path = root.join("curves").join(format!("{}.tsv", sanitize(&row.name)));
        fs::write(&path, s)?;
        curves.push(path);
        let series = Series {
            points: curve.iter().map(|&(r, _, m, _, _)| (r as f64, m)).collect(),
            color: PALETTE[i % PALETTE.len()],
        };
        let plot = root.join("plots").join(format!("{}.png", sanitize(&row.name)));
        plot_curves(
            std::slice::from_ref(&series),
            Some(row.config.rounds as f64 + 0.5),
            &plot,
        )?;
        plots.push(plot);
        all.push(series);
    }
    let overlay = root.join("plots").join("accuracy.png");
    let split = rows.first().map(|r| r.config.rounds as f64 + 0.5);
    plot_curves(&all, split, &overlay)?;
    plots.push(overlay);
    let legend: String = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let [cr, cg, cb] = PALETTE[i % PALETTE.len()];
            format!("{}\t#{cr:02x}{cg:02x}{cb:02x}\n", r.name)
        })
        .collect();
    fs::write(root.join("plots").join("legend.tsv"), legend)?;
    Ok(ReportFiles {
        summary_md,
        summary_tsv: summary_tsv_path,
        comparison,
        curves,
        plots,
    })
}

//! Running experiments and writing their results to disk.
//!
//! Each run directory holds `metrics.csv` (deterministic for a given config),
//! `timings.csv` (wall-clock, varies run to run), `summary.json` and the
//! resolved `config.toml`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::engine::{build_pool, run_with, GradientVector, RoundReport};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Vector;
use crate::vert::Vert;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const INDEX_FILE: &str = "index.json";

/// One `metrics.csv` row. Column order follows field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub accuracy: f64,
    pub max_accuracy_so_far: f64,
    pub selection_precision: f64,
    pub selection_recall: Option<f64>,
    pub mean_rho_honest: Option<f64>,
    pub mean_rho_malicious: Option<f64>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "accuracy",
    "max_accuracy_so_far",
    "selection_precision",
    "selection_recall",
    "mean_rho_honest",
    "mean_rho_malicious",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub round: usize,
    pub local_train_ms: f64,
    pub attack_ms: f64,
    pub defense_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub rounds: usize,
    pub max_accuracy: f64,
    pub final_accuracy: f64,
    /// Mean selection precision over rounds after warm-up.
    pub mean_precision: Option<f64>,
    /// Mean of `mean_rho_honest − mean_rho_malicious` over rounds that have both.
    pub mean_rho_gap: Option<f64>,
    pub total_runtime_s: f64,
}

/// Running per-round bookkeeping for the output files.
#[derive(Debug, Default)]
pub struct Recorder {
    pub metrics: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    max_accuracy: f64,
}

impl Recorder {
    pub fn push(&mut self, r: &RoundReport) {
        self.max_accuracy = if self.metrics.is_empty() {
            r.accuracy
        } else {
            self.max_accuracy.max(r.accuracy)
        };
        self.metrics.push(MetricsRow {
            round: r.context.t,
            accuracy: r.accuracy,
            max_accuracy_so_far: self.max_accuracy,
            selection_precision: r.precision,
            selection_recall: r.recall,
            mean_rho_honest: r.mean_rho_honest,
            mean_rho_malicious: r.mean_rho_malicious,
        });
        self.timings.push(TimingRow {
            round: r.context.t,
            local_train_ms: r.timings.local_train_ms,
            attack_ms: r.timings.attack_ms,
            defense_ms: r.timings.defense_ms,
            eval_ms: r.timings.eval_ms,
        });
    }

    pub fn summary(&self, seed: u64, warmup: usize, runtime_s: f64) -> Summary {
        let after: Vec<&MetricsRow> = self.metrics.iter().filter(|m| m.round > warmup).collect();
        let gaps: Vec<f64> = self
            .metrics
            .iter()
            .filter_map(|m| Some(m.mean_rho_honest? - m.mean_rho_malicious?))
            .collect();
        Summary {
            seed,
            rounds: self.metrics.len(),
            max_accuracy: self.max_accuracy,
            final_accuracy: self.metrics.last().map_or(0.0, |m| m.accuracy),
            mean_precision: mean(after.iter().map(|m| m.selection_precision)),
            mean_rho_gap: mean(gaps.into_iter()),
            total_runtime_s: runtime_s,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs one experiment, writing results into `out_dir` (or the config's
/// output directory).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Summary> {
    let dir = out_dir.unwrap_or(&cfg.output.dir).to_path_buf();
    cfg.validate()?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    let start = Instant::now();
    let mut rec = Recorder::default();
    run_with(cfg, |r| rec.push(r))?;
    let summary = rec.summary(cfg.seed, cfg.federation.warmup, start.elapsed().as_secs_f64());
    write_csv(&dir.join(METRICS_FILE), &rec.metrics)?;
    write_csv(&dir.join(TIMINGS_FILE), &rec.timings)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: String,
    pub dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub axis: String,
    pub entries: Vec<SweepEntry>,
}

/// Directory name for a sweep value.
pub fn value_dir_name(value: &str) -> String {
    let cleaned: String = value
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect();
    if cleaned.is_empty() || cleaned.chars().all(|c| c == '.') {
        format!("value_{cleaned}")
    } else {
        cleaned
    }
}

/// One run per value of `axis` under `out_root/<value>`, plus `index.json`.
/// A failing value is recorded in the index and the sweep continues.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String], out_root: &Path) -> Result<SweepIndex> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    crate::config::resolve_axis(axis)?;
    fs::create_dir_all(out_root)?;
    let mut entries = Vec::with_capacity(values.len());
    for value in values {
        let dir = out_root.join(value_dir_name(value));
        let outcome = base
            .set_field(axis, value)
            .and_then(|cfg| run_experiment(&cfg, Some(&dir)));
        let (summary, error) = match outcome {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        entries.push(SweepEntry {
            value: value.clone(),
            dir,
            summary,
            error,
        });
    }
    let index = SweepIndex {
        axis: axis.to_string(),
        entries,
    };
    fs::write(out_root.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    pub s: usize,
    pub users: usize,
    /// Median wall time of one train-and-score pass over all users.
    pub ms_per_round: f64,
    /// Counted `f64` slots of VERT state after the pass.
    pub state_values: usize,
    /// The part of `state_values` that scales with `d` per user: `A`, `B`
    /// and their optimizer moments.
    pub coefficient_values: usize,
    pub projector_values: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub users: usize,
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            users: 8,
            repetitions: 5,
        }
    }
}

/// Times VERT's train-and-score phase on synthetic gradient histories for
/// each model size in `dims`, single-threaded, using the config's VERT
/// settings.
pub fn bench_scaling(cfg: &ExperimentConfig, dims: &[usize], opts: BenchOptions) -> Result<Vec<BenchRow>> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument("bench needs at least two model sizes".into()));
    }
    if opts.users == 0 || opts.repetitions == 0 {
        return Err(Error::InvalidArgument("bench needs users and repetitions".into()));
    }
    let pool = build_pool(1)?;
    dims.iter()
        .map(|&d| {
            let mut vert = Vert::new(cfg.vert.clone(), d, cfg.seed)?;
            let m = cfg.vert.m;
            let base = gaussian(cfg.seed, usize::MAX, 0, d, 1.0);
            let uploads_at = |t: usize| -> Vec<GradientVector> {
                (0..opts.users)
                    .map(|u| {
                        let noise = gaussian(cfg.seed, u, t, d, 0.3);
                        let values = base.iter().zip(noise.iter()).map(|(b, n)| b + n).collect();
                        GradientVector {
                            values: Vector::new(values).expect("finite"),
                            owner: u,
                            round: t,
                        }
                    })
                    .collect()
            };
            for t in 1..=m {
                vert.observe(t, &uploads_at(t), &base)?;
            }
            let current = uploads_at(m + 1);
            let mut times = Vec::with_capacity(opts.repetitions);
            for _ in 0..opts.repetitions {
                let start = Instant::now();
                vert.score(m + 1, &current, &pool)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            let fp = vert.footprint();
            Ok(BenchRow {
                d,
                s: cfg.vert.s,
                users: opts.users,
                ms_per_round: times[times.len() / 2],
                state_values: fp.total(),
                coefficient_values: fp.coefficients,
                projector_values: fp.projector,
            })
        })
        .collect()
}

fn gaussian(seed: u64, a: usize, b: usize, d: usize, scale: f64) -> Vector {
    let mut rng = stream(seed, Purpose::Bench, a as u64, b as u64);
    Vector::new((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_names_are_safe() {
        assert_eq!(value_dir_name("0.8"), "0.8");
        assert_eq!(value_dir_name("multi_krum"), "multi_krum");
        assert_eq!(value_dir_name("a/b c"), "a_b_c");
        assert_eq!(value_dir_name(".."), "value_..");
    }

    #[test]
    fn bench_rejects_single_size() {
        let cfg = ExperimentConfig::with_seed(1);
        assert!(bench_scaling(&cfg, &[4096], BenchOptions::default()).is_err());
    }

    #[test]
    fn csv_header_matches_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            round: 1,
            accuracy: 0.5,
            max_accuracy_so_far: 0.5,
            selection_precision: 1.0,
            selection_recall: None,
            mean_rho_honest: Some(0.25),
            mean_rho_malicious: None,
        };
        write_csv(&path, std::slice::from_ref(&row)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.5,1.0,,0.25,");
        assert_eq!(read_metrics(&path).unwrap(), vec![row]);
    }
}

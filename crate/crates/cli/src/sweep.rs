//! Sweep execution and the CSV/JSON result tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ncma::protocol::{run_session, SessionStats};
use rayon::prelude::*;
use serde::Serialize;

use crate::spec::{ExperimentSpec, SweepPoint};

/// One line of the sweep table. Per-repetition rows carry `rep`; the
/// aggregate rows leave it empty and hold the mean or the standard error.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub row: &'static str,
    pub variant: String,
    pub snr_a: f64,
    pub snr_b: f64,
    pub l_a: usize,
    pub l_b: usize,
    pub rep: Option<usize>,
    pub seed: Option<u64>,
    pub slots: usize,
    pub p_none: Option<f64>,
    pub p_x: Option<f64>,
    pub p_single: Option<f64>,
    pub p_native_xor: Option<f64>,
    pub p_ab: Option<f64>,
    pub th_a: Option<f64>,
    pub th_b: Option<f64>,
    pub th_total: Option<f64>,
    pub upper_bound: Option<f64>,
    pub long_enough: Option<bool>,
    pub undetected_errors: Option<f64>,
    pub config_hash: String,
}

const METRICS: usize = 10;

impl SweepRow {
    fn metrics(&self) -> [Option<f64>; METRICS] {
        [
            self.p_none,
            self.p_x,
            self.p_single,
            self.p_native_xor,
            self.p_ab,
            self.th_a,
            self.th_b,
            self.th_total,
            self.upper_bound,
            self.undetected_errors,
        ]
    }

    fn with_metrics(mut self, m: [Option<f64>; METRICS]) -> Self {
        [
            self.p_none,
            self.p_x,
            self.p_single,
            self.p_native_xor,
            self.p_ab,
            self.th_a,
            self.th_b,
            self.th_total,
            self.upper_bound,
            self.undetected_errors,
        ] = m;
        self
    }

    fn from_stats(p: &SweepPoint, rep: usize, seed: u64, stats: &SessionStats, hash: &str) -> Self {
        let freq = stats.group_frequencies();
        let node_th = |i: usize| stats.nodes.get(i).map(|n| n.throughput);
        Self {
            row: "run",
            variant: p.variant.label().to_string(),
            snr_a: p.snr_a,
            snr_b: p.snr_b,
            l_a: p.l_a,
            l_b: p.l_b,
            rep: Some(rep),
            seed: Some(seed),
            slots: stats.slots,
            p_none: freq.map(|f| f.none),
            p_x: freq.map(|f| f.x),
            p_single: freq.map(|f| f.single),
            p_native_xor: freq.map(|f| f.native_xor),
            p_ab: freq.map(|f| f.ab),
            th_a: node_th(0),
            th_b: node_th(1),
            th_total: Some(stats.throughput),
            upper_bound: stats.upper_bound,
            long_enough: Some(stats.long_enough),
            undetected_errors: Some(stats.undetected_errors as f64),
            config_hash: hash.to_string(),
        }
    }
}

/// Mean and standard error of the mean over the repetitions of one point.
fn aggregate(runs: &[SweepRow]) -> [SweepRow; 2] {
    let n = runs.len() as f64;
    let mut mean = [None; METRICS];
    let mut stderr = [None; METRICS];
    for i in 0..METRICS {
        let values: Option<Vec<f64>> = runs.iter().map(|r| r.metrics()[i]).collect();
        let Some(values) = values else { continue };
        let m = values.iter().sum::<f64>() / n;
        mean[i] = Some(m);
        if runs.len() > 1 {
            let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            stderr[i] = Some((var / n).sqrt());
        }
    }
    let base = SweepRow { rep: None, seed: None, long_enough: None, ..runs[0].clone() };
    [
        SweepRow { row: "mean", ..base.clone() }.with_metrics(mean),
        SweepRow { row: "stderr", ..base }.with_metrics(stderr),
    ]
}

/// Runs every (point, repetition) on the worker pool and returns the table
/// in grid order: the repetitions of a point followed by its aggregates.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let hash = spec.hash();
    let points = spec.points();
    let jobs: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|p| (0..spec.repetitions).map(move |r| (p, r))).collect();
    let results: Vec<Result<SweepRow>> = jobs
        .par_iter()
        .map(|&(pi, rep)| {
            let point = &points[pi];
            let cfg = spec.session(point, rep);
            let (stats, _) = run_session(&cfg).with_context(|| format!("point {point:?}, repetition {rep}"))?;
            Ok(SweepRow::from_stats(point, rep, cfg.seed, &stats, &hash))
        })
        .collect();

    let mut failures = Vec::new();
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(row) => runs.push(row),
            Err(e) => failures.push(format!("{e:#}")),
        }
    }
    if !failures.is_empty() {
        bail!("{} sweep point(s) failed:\n{}", failures.len(), failures.join("\n"));
    }

    let mut table = Vec::new();
    for chunk in runs.chunks(spec.repetitions) {
        table.extend_from_slice(chunk);
        table.extend(aggregate(chunk));
    }
    Ok(table)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config_hash: String,
    points: usize,
    repetitions: usize,
    table: &'a Path,
    config: &'a ExperimentSpec,
}

/// Writes `sweep.csv` and `sweep.json` into `dir`; returns the CSV path.
pub fn write_outputs(spec: &ExperimentSpec, table: &[SweepRow], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for row in table {
        w.serialize(row)?;
    }
    w.flush()?;
    let sidecar = Sidecar {
        config_hash: spec.hash(),
        points: spec.points().len(),
        repetitions: spec.repetitions,
        table: Path::new("sweep.csv"),
        config: spec,
    };
    let json_path = dir.join("sweep.json");
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ncma::protocol::Variant;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            variant: vec![Variant::NcmaRmud, Variant::Su],
            snr_a: vec![4.0, 12.0],
            l_a: vec![6],
            l_b: vec![4],
            repetitions: 2,
            slots: 60,
            k: 8,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn table_layout_and_aggregates() {
        let spec = tiny_spec();
        let table = run_sweep(&spec).unwrap();
        assert_eq!(table.len(), 4 * (2 + 2));
        let kinds: Vec<&str> = table[..4].iter().map(|r| r.row).collect();
        assert_eq!(kinds, ["run", "run", "mean", "stderr"]);
        assert_eq!(table[0].seed, Some(1));
        assert_eq!(table[1].seed, Some(2));
        let mean = (table[0].th_total.unwrap() + table[1].th_total.unwrap()) / 2.0;
        assert!((table[2].th_total.unwrap() - mean).abs() < 1e-12);
        assert!(table.iter().all(|r| r.config_hash == spec.hash()));
        // SU rows have no two-user event statistics.
        let su = table.iter().find(|r| r.variant == "SU").unwrap();
        assert!(su.p_ab.is_none() && su.upper_bound.is_none());
    }

    #[test]
    fn sweep_is_reproducible() {
        let spec = tiny_spec();
        let a = run_sweep(&spec).unwrap();
        let b = run_sweep(&spec).unwrap();
        let th = |t: &[SweepRow]| t.iter().map(|r| r.th_total).collect::<Vec<_>>();
        assert_eq!(th(&a), th(&b));
    }

    #[test]
    fn writes_csv_and_sidecar() {
        let spec = ExperimentSpec { repetitions: 1, variant: vec![Variant::NcmaRmud], snr_a: vec![10.0], ..tiny_spec() };
        let table = run_sweep(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = write_outputs(&spec, &table, dir.path()).unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("row,variant,snr_a,snr_b,l_a,l_b,rep,seed,slots,p_none"));
        assert_eq!(text.lines().count(), 1 + 3);
        let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
        assert_eq!(sidecar["config_hash"], spec.hash());
        assert_eq!(sidecar["config"]["slots"], 60);
    }
}

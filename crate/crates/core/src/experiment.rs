//! Seeded streaming experiments: real-time estimation, k-step prediction and
//! robust estimation under injected outliers, each scored against ground truth
//! and the historic-mean baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, inject_outliers, SyntheticSpec};
use crate::engine::{self, FilterState};
use crate::error::{Error, Result};
use crate::metrics::{self, Grouping, HistoricMean};
use crate::model::{ModelConfig, ObservationWindow};
use crate::serde_mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Estimation,
    Prediction,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated stream; the experiment seed replaces `spec.seed`.
    Synthetic { spec: SyntheticSpec },
    /// Complete CSV matrix, rows are series.
    Csv {
        path: String,
        #[serde(default)]
        missing_token: String,
    },
    /// Complete matrix sent inline.
    Inline {
        #[serde(with = "serde_mat::matrix")]
        values: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierSettings {
    pub fraction: f64,
    pub scales: Vec<f64>,
    /// A cell counts as detected when `|E[e]|` exceeds this many noise
    /// standard deviations `1/√β̂`.
    pub detection_sigmas: f64,
}

impl Default for OutlierSettings {
    fn default() -> Self {
        OutlierSettings {
            fraction: 0.05,
            scales: vec![0.75],
            detection_sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: DataSource,
    pub model: ModelConfig,
    /// Fraction of cells observed. Overrides the synthetic spec when set;
    /// defaults to 1 for file data.
    pub observe_fraction: Option<f64>,
    pub seeds: Vec<u64>,
    pub horizons: Vec<usize>,
    pub outliers: OutlierSettings,
    /// Columns per day; enables slot-of-day grouping and baseline.
    pub slots_per_day: Option<usize>,
    /// Leading columns used as history; scoring starts after them.
    pub train_columns: usize,
    /// Number of scored columns; defaults to everything after the history.
    pub eval_columns: Option<usize>,
    /// When set, the whole history is first fitted as one window with this
    /// many iterations and the first sliding window starts from that fit.
    pub pretrain_max_iters: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Estimation,
            data: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
            },
            model: ModelConfig::default(),
            observe_fraction: None,
            seeds: vec![0],
            horizons: (1..=5).collect(),
            outliers: OutlierSettings::default(),
            slots_per_day: None,
            train_columns: 50,
            eval_columns: None,
            pretrain_max_iters: Some(1000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub injected: usize,
    pub hits: usize,
    pub false_alarms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub horizon: Option<usize>,
    pub outlier_scale: Option<f64>,
    /// MRE per slot of day, or per scored column without day structure.
    pub mre_series: Vec<Option<f64>>,
    pub overall_mre: f64,
    pub mae: f64,
    pub skipped_columns: usize,
    pub detection: Option<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub fraction_observed: f64,
    pub m: usize,
    pub train_columns: usize,
    pub eval_columns: usize,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn run(&self, label: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub horizon: Option<usize>,
    pub outlier_scale: Option<f64>,
    pub median_mre: f64,
    pub mean_mre: f64,
    pub median_mae: f64,
    pub detection: Option<Detection>,
}

/// Deterministic part of an experiment: identical for identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: ExperimentConfig,
    pub reports: Vec<ExperimentReport>,
    pub summary: Vec<RunSummary>,
}

/// Wall-clock seconds per processed column, keyed by run label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub seconds_per_column: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub report: BenchReport,
    pub timing: Vec<Timing>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.train_columns == 0 {
            return fail("train_columns must be positive");
        }
        if self.eval_columns == Some(0) {
            return fail("zero-length run: eval_columns is 0");
        }
        if let Some(p) = self.observe_fraction {
            if !(p > 0.0 && p <= 1.0) {
                return fail("observe_fraction must lie in (0, 1]");
            }
        }
        if self.slots_per_day == Some(0) {
            return fail("slots_per_day must be positive");
        }
        if let Some(s) = self.slots_per_day {
            if s > self.train_columns {
                return fail("the baseline needs at least one day of history");
            }
        }
        if self.kind == ExperimentKind::Prediction {
            if self.horizons.is_empty() {
                return fail("prediction needs at least one horizon");
            }
            if self.horizons.iter().any(|&k| k == 0 || k > self.model.horizon) {
                return Err(Error::Config(format!(
                    "horizons must lie in 1..={}",
                    self.model.horizon
                )));
            }
        }
        if self.kind == ExperimentKind::Robust {
            if !(0.0..1.0).contains(&self.outliers.fraction) {
                return fail("outlier fraction must lie in [0, 1)");
            }
            if self.outliers.scales.is_empty() {
                return fail("robust runs need at least one outlier scale");
            }
        }
        if let DataSource::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Ground truth and the observed (masked) version of it.
fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(DMatrix<f64>, ObservationWindow)> {
    let complete = |values: DMatrix<f64>| -> Result<(DMatrix<f64>, ObservationWindow)> {
        let p = cfg.observe_fraction.unwrap_or(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = DMatrix::from_fn(values.nrows(), values.ncols(), |_, _| rng.random::<f64>() < p);
        let win = ObservationWindow::new(values.clone(), mask)?;
        Ok((values, win))
    };
    match &cfg.data {
        DataSource::Synthetic { spec } => {
            let spec = SyntheticSpec {
                seed,
                observe_fraction: cfg.observe_fraction.unwrap_or(spec.observe_fraction),
                outlier_fraction: 0.0,
                ..spec.clone()
            };
            let d = data::generate_synthetic(&spec)?;
            Ok((d.truth, d.observed))
        }
        DataSource::Csv { path, missing_token } => {
            let win = data::load_csv(path, missing_token)?;
            if win.omega() != win.m() * win.t() {
                return Err(Error::Metric(format!(
                    "ground truth has {} missing cells",
                    win.m() * win.t() - win.omega()
                )));
            }
            complete(win.values().clone())
        }
        DataSource::Inline { values } => {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("inline data must be finite".into()));
            }
            complete(values.clone())
        }
    }
}

/// What one filter pass over the scored columns produced.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    /// Estimate of every scored column at the configured lag.
    pub estimates: DMatrix<f64>,
    /// `forecasts[k-1][j]`: the `k`-step forecast of scored column `j`.
    pub forecasts: Vec<Vec<Option<DVector<f64>>>>,
    /// Cells flagged as outliers while they were the newest column.
    pub flagged: BTreeSet<(usize, usize)>,
    pub seconds_per_column: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StreamOptions {
    /// Longest forecast recorded before each new column (0 for none).
    pub max_horizon: usize,
    pub detection_sigmas: f64,
    pub pretrain_max_iters: Option<usize>,
}

/// Fits the `h + 1` columns before `start`, then slides through `start..end`.
pub fn run_stream(
    observed: &ObservationWindow,
    cfg: &ModelConfig,
    start: usize,
    end: usize,
    opts: &StreamOptions,
) -> Result<StreamOutcome> {
    if start == 0 || start >= end || end > observed.t() {
        return Err(Error::Config(format!(
            "invalid stream range {start}..{end} over {} columns",
            observed.t()
        )));
    }
    let n = end - start;
    let m = observed.m();
    let first = start.saturating_sub(cfg.h + 1);
    let pretrained = match opts.pretrain_max_iters {
        Some(iters) if first > 0 => {
            let pre_cfg = ModelConfig {
                h: start - 1,
                rank: cfg.resolve(m)?.rank,
                max_iters: iters,
                track_elbo: false,
                ..cfg.clone()
            };
            Some(engine::fit_window(&observed.columns(0, start)?, &pre_cfg, None)?)
        }
        _ => None,
    };
    let mut state = engine::fit_window(&observed.columns(first, start)?, cfg, pretrained.as_ref())?;
    let mut estimates = DMatrix::zeros(m, n);
    let mut filled = vec![false; n];
    let max_horizon = opts.max_horizon;
    let mut forecasts = vec![vec![None; n]; max_horizon];
    let mut flagged = BTreeSet::new();
    let delta = state.cfg.delta;

    let clock = Instant::now();
    for tau in start..end {
        if max_horizon > 0 {
            let f = engine::forecast(&state, max_horizon)?;
            for k in 1..=max_horizon {
                let target = tau + k - 1;
                if target < end {
                    forecasts[k - 1][target - start] = Some(f.column(k - 1).into_owned());
                }
            }
        }
        state = engine::slide(&state, &observed.column(tau))?;
        record_flags(&state, tau, opts.detection_sigmas, &mut flagged);
        if let Some(target) = tau.checked_sub(delta).filter(|&c| c >= start) {
            estimates.set_column(target - start, &state.lag_estimate());
            filled[target - start] = true;
        }
    }
    let seconds_per_column = clock.elapsed().as_secs_f64() / n as f64;

    // Columns within the lag of the end are read from the final window.
    let t = state.t();
    for (j, done) in filled.iter().enumerate() {
        if !done {
            let back = end - 1 - (start + j);
            estimates.set_column(j, &state.last_y_hat.column(t - 1 - back));
        }
    }
    Ok(StreamOutcome {
        estimates,
        forecasts,
        flagged,
        seconds_per_column,
    })
}

fn record_flags(state: &FilterState, tau: usize, sigmas: f64, flagged: &mut BTreeSet<(usize, usize)>) {
    let Some(outliers) = &state.outliers else {
        return;
    };
    let last = state.t() - 1;
    let threshold = sigmas / state.precisions.beta.sqrt();
    for &i in state.window.column_set(last) {
        if outliers.mean(i, last).abs() > threshold {
            flagged.insert((i, tau));
        }
    }
}

struct Scorer<'a> {
    truth: &'a DMatrix<f64>,
    start: usize,
    slots_per_day: Option<usize>,
}

impl Scorer<'_> {
    fn grouping(&self, first_col: usize) -> Grouping {
        match self.slots_per_day {
            Some(s) => Grouping::SlotOfDay {
                slots_per_day: s,
                first_slot: first_col % s,
            },
            None => Grouping::PerColumn,
        }
    }

    /// Scores `estimates`, whose column `j` is absolute column `first + j`.
    fn score(&self, label: String, estimates: &DMatrix<f64>, first: usize) -> Result<RunReport> {
        let truth = self.truth.columns(first, estimates.ncols()).into_owned();
        let mre = metrics::mre(estimates, &truth, self.grouping(first))?;
        Ok(RunReport {
            label,
            horizon: None,
            outlier_scale: None,
            mre_series: mre.per_group,
            overall_mre: mre.overall,
            mae: metrics::mae(estimates, &truth)?,
            skipped_columns: mre.skipped_columns,
            detection: None,
        })
    }

    fn score_forecasts(&self, label: String, k: usize, cols: &[Option<DVector<f64>>]) -> Result<RunReport> {
        let offset = cols.iter().position(Option::is_some).ok_or_else(|| {
            Error::Config(format!("no column is scored at horizon {k}; lengthen the run"))
        })?;
        let present: Vec<DVector<f64>> = cols[offset..].iter().flatten().cloned().collect();
        let est = DMatrix::from_columns(&present);
        let mut run = self.score(label, &est, self.start + offset)?;
        run.horizon = Some(k);
        Ok(run)
    }
}

fn detection(flagged: &BTreeSet<(usize, usize)>, injected: &[(usize, usize)], start: usize, end: usize) -> Detection {
    let scored: BTreeSet<(usize, usize)> = injected
        .iter()
        .copied()
        .filter(|&(_, tau)| tau >= start && tau < end)
        .collect();
    let hits = flagged.intersection(&scored).count();
    Detection {
        injected: scored.len(),
        hits,
        false_alarms: flagged.len() - hits,
    }
}

/// Runs every configured protocol for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(ExperimentReport, Timing)> {
    let (truth, observed) = load_data(cfg, seed)?;
    let start = cfg.train_columns;
    let total = observed.t();
    if start >= total {
        return Err(Error::Config(format!(
            "zero-length run: {total} columns, {start} reserved for history"
        )));
    }
    let n = cfg.eval_columns.unwrap_or(total - start).min(total - start);
    let end = start + n;
    let model = ModelConfig {
        seed,
        ..cfg.model.clone()
    };
    let scorer = Scorer {
        truth: &truth,
        start,
        slots_per_day: cfg.slots_per_day,
    };
    let opts = StreamOptions {
        max_horizon: 0,
        detection_sigmas: cfg.outliers.detection_sigmas,
        pretrain_max_iters: cfg.pretrain_max_iters,
    };
    let mut runs = Vec::new();
    let mut timing = BTreeMap::new();

    let slots = cfg.slots_per_day.unwrap_or(1);
    let history = observed.columns(0, start)?;
    let baseline = HistoricMean::fit(&history, slots)?.estimate(start % slots, n);
    runs.push(scorer.score("historic_mean".into(), &baseline, start)?);

    match cfg.kind {
        ExperimentKind::Estimation | ExperimentKind::Prediction => {
            let max_h = match cfg.kind {
                ExperimentKind::Prediction => cfg.horizons.iter().copied().max().unwrap_or(0),
                _ => 0,
            };
            let out = run_stream(&observed, &model, start, end, &StreamOptions { max_horizon: max_h, ..opts })?;
            runs.push(scorer.score("vbsf".into(), &out.estimates, start)?);
            timing.insert("vbsf".to_string(), out.seconds_per_column);
            if cfg.kind == ExperimentKind::Prediction {
                for &k in &cfg.horizons {
                    runs.push(scorer.score_forecasts(format!("vbsf_h{k}"), k, &out.forecasts[k - 1])?);
                }
            }
        }
        ExperimentKind::Robust => {
            let clean = run_stream(&observed, &model, start, end, &opts)?;
            runs.push(scorer.score("vbsf_clean".into(), &clean.estimates, start)?);
            timing.insert("vbsf_clean".to_string(), clean.seconds_per_column);
            let robust_model = ModelConfig {
                robust: true,
                ..model.clone()
            };
            for (idx, &c) in cfg.outliers.scales.iter().enumerate() {
                let inj_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64);
                let inj = inject_outliers(&observed, cfg.outliers.fraction, c, inj_seed)?;
                let plain = run_stream(&inj.window, &model, start, end, &opts)?;
                let robust = run_stream(&inj.window, &robust_model, start, end, &opts)?;
                let mut r = scorer.score(format!("vbsf_corrupted_c{c}"), &plain.estimates, start)?;
                r.outlier_scale = Some(c);
                runs.push(r);
                let mut r = scorer.score(format!("rvbsf_c{c}"), &robust.estimates, start)?;
                r.outlier_scale = Some(c);
                r.detection = Some(detection(&robust.flagged, &inj.locations, start, end));
                runs.push(r);
                timing.insert(format!("vbsf_corrupted_c{c}"), plain.seconds_per_column);
                timing.insert(format!("rvbsf_c{c}"), robust.seconds_per_column);
            }
        }
    }

    let report = ExperimentReport {
        kind: cfg.kind,
        seed,
        fraction_observed: observed.omega() as f64 / (observed.m() * observed.t()) as f64,
        m: observed.m(),
        train_columns: start,
        eval_columns: n,
        runs,
    };
    Ok((
        report,
        Timing {
            seed,
            seconds_per_column: timing,
        },
    ))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(reports: &[ExperimentReport]) -> Vec<RunSummary> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .runs
        .iter()
        .map(|template| {
            let matching: Vec<&RunReport> = reports
                .iter()
                .filter_map(|r| r.run(&template.label))
                .collect();
            let mut mre: Vec<f64> = matching.iter().map(|r| r.overall_mre).collect();
            let mut mae: Vec<f64> = matching.iter().map(|r| r.mae).collect();
            let detection = template.detection.map(|_| {
                matching
                    .iter()
                    .filter_map(|r| r.detection)
                    .fold(Detection { injected: 0, hits: 0, false_alarms: 0 }, |a, d| Detection {
                        injected: a.injected + d.injected,
                        hits: a.hits + d.hits,
                        false_alarms: a.false_alarms + d.false_alarms,
                    })
            });
            RunSummary {
                label: template.label.clone(),
                horizon: template.horizon,
                outlier_scale: template.outlier_scale,
                mean_mre: mre.iter().sum::<f64>() / mre.len() as f64,
                median_mre: median(&mut mre),
                median_mae: median(&mut mae),
                detection,
            }
        })
        .collect()
}

/// Runs all seeds in parallel; reports come back in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let results: Vec<(ExperimentReport, Timing)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed))
        .collect::<Result<_>>()?;
    let (reports, timing): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(ExperimentOutput {
        report: BenchReport {
            config: cfg.clone(),
            summary: summarize(&reports),
            reports,
        },
        timing,
    })
}

/// Rows of `label,horizon,outlier_scale,seed,group,mre` for plotting.
pub fn mre_series_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "horizon", "outlier_scale", "seed", "group", "mre"])?;
    for rep in &report.reports {
        for run in &rep.runs {
            for (g, v) in run.mre_series.iter().enumerate() {
                w.write_record([
                    run.label.clone(),
                    run.horizon.map(|h| h.to_string()).unwrap_or_default(),
                    run.outlier_scale.map(|c| c.to_string()).unwrap_or_default(),
                    rep.seed.to_string(),
                    g.to_string(),
                    v.map(|x| format!("{x:?}")).unwrap_or_default(),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            data: DataSource::Synthetic {
                spec: SyntheticSpec {
                    m: 8,
                    t_total: 40,
                    true_rank: 2,
                    ..Default::default()
                },
            },
            model: ModelConfig {
                h: 9,
                max_iters: 50,
                ..Default::default()
            }
            .with_rank(3),
            train_columns: 30,
            horizons: vec![1, 3],
            ..Default::default()
        }
    }

    #[test]
    fn zero_length_run_rejected() {
        let cfg = ExperimentConfig {
            eval_columns: Some(0),
            ..quick(ExperimentKind::Estimation)
        };
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            train_columns: 40,
            ..quick(ExperimentKind::Estimation)
        };
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn prediction_emits_one_series_per_horizon() {
        let out = run_experiment(&quick(ExperimentKind::Prediction)).unwrap();
        let rep = &out.report.reports[0];
        assert!(rep.run("vbsf_h1").is_some());
        let h3 = rep.run("vbsf_h3").unwrap();
        assert_eq!(h3.horizon, Some(3));
        assert_eq!(h3.mre_series.len(), 8);
        assert_eq!(rep.run("vbsf").unwrap().mre_series.len(), 10);
    }

    #[test]
    fn robust_reports_detection() {
        let mut cfg = quick(ExperimentKind::Robust);
        cfg.outliers.scales = vec![0.75, 1.75];
        let out = run_experiment(&cfg).unwrap();
        let rep = &out.report.reports[0];
        for c in [0.75, 1.75] {
            let d = rep.run(&format!("rvbsf_c{c}")).unwrap().detection.unwrap();
            assert!(d.hits <= d.injected);
        }
        assert!(rep.run("vbsf_clean").is_some());
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = ExperimentConfig {
            seeds: vec![3, 4],
            ..quick(ExperimentKind::Estimation)
        };
        let a = serde_json::to_string(&run_experiment(&cfg).unwrap().report).unwrap();
        let b = serde_json::to_string(&run_experiment(&cfg).unwrap().report).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn series_csv_has_header_and_rows() {
        let out = run_experiment(&quick(ExperimentKind::Estimation)).unwrap();
        let csv = mre_series_csv(&out.report).unwrap();
        assert!(csv.starts_with("label,horizon,outlier_scale,seed,group,mre\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 10);
    }
}

//! Error metrics and the historic-mean baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservationWindow;

/// How columns are pooled into MRE groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One group per column.
    PerColumn,
    /// Columns sharing a slot of the day form a group; column 0 sits at
    /// `first_slot`.
    SlotOfDay {
        slots_per_day: usize,
        first_slot: usize,
    },
}

impl Grouping {
    fn n_groups(&self, n_cols: usize) -> usize {
        match *self {
            Grouping::PerColumn => n_cols,
            Grouping::SlotOfDay { slots_per_day, .. } => slots_per_day,
        }
    }

    fn group_of(&self, col: usize) -> usize {
        match *self {
            Grouping::PerColumn => col,
            Grouping::SlotOfDay {
                slots_per_day,
                first_slot,
            } => (first_slot + col) % slots_per_day,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MreSummary {
    /// Mean relative error per group; `None` for groups with no usable column.
    pub per_group: Vec<Option<f64>>,
    /// Mean over groups that have a value.
    pub overall: f64,
    /// Columns skipped because the ground truth was all zero.
    pub skipped_columns: usize,
}

fn check_shapes(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<()> {
    if est.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "estimates {:?} vs truth {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// `‖ŷ − y‖₂ / ‖y‖₂` for one column, `None` when `y = 0`.
pub fn relative_error(est: &[f64], truth: &[f64]) -> Option<f64> {
    let norm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let diff: f64 = est
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Some(diff / norm)
}

/// Mean relative error per group and overall.
pub fn mre(est: &DMatrix<f64>, truth: &DMatrix<f64>, grouping: Grouping) -> Result<MreSummary> {
    check_shapes(est, truth)?;
    if let Grouping::SlotOfDay { slots_per_day: 0, .. } = grouping {
        return Err(Error::Config("slots_per_day must be positive".into()));
    }
    let n = grouping.n_groups(est.ncols());
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut skipped = 0;
    for col in 0..est.ncols() {
        let e: Vec<f64> = est.column(col).iter().copied().collect();
        let y: Vec<f64> = truth.column(col).iter().copied().collect();
        match relative_error(&e, &y) {
            Some(v) => {
                let g = grouping.group_of(col);
                sums[g] += v;
                counts[g] += 1;
            }
            None => skipped += 1,
        }
    }
    let per_group: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per_group.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Metric("no column with non-zero ground truth".into()));
    }
    let overall = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MreSummary {
        per_group,
        overall,
        skipped_columns: skipped,
    })
}

/// Mean over columns of the per-entry absolute error.
pub fn mae(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_shapes(est, truth)?;
    if est.is_empty() {
        return Err(Error::Metric("empty input".into()));
    }
    let rows = est.nrows() as f64;
    let total: f64 = (0..est.ncols())
        .map(|c| (est.column(c) - truth.column(c)).abs().sum() / rows)
        .sum();
    Ok(total / est.ncols() as f64)
}

/// Per-(row, slot-of-day) means of past observations.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricMean {
    means: DMatrix<f64>,
}

impl HistoricMean {
    /// `history` column 0 is slot 0 of its first day.
    pub fn fit(history: &ObservationWindow, slots_per_day: usize) -> Result<Self> {
        if slots_per_day == 0 {
            return Err(Error::Config("slots_per_day must be positive".into()));
        }
        if history.t() < slots_per_day {
            return Err(Error::Metric(format!(
                "historic mean needs at least one full day ({slots_per_day} columns), got {}",
                history.t()
            )));
        }
        let m = history.m();
        let mut sums = DMatrix::<f64>::zeros(m, slots_per_day);
        let mut counts = DMatrix::<usize>::zeros(m, slots_per_day);
        let mut row_sums = vec![0.0; m];
        let mut row_counts = vec![0usize; m];
        for tau in 0..history.t() {
            let slot = tau % slots_per_day;
            for &i in history.column_set(tau) {
                let y = history.values()[(i, tau)];
                sums[(i, slot)] += y;
                counts[(i, slot)] += 1;
                row_sums[i] += y;
                row_counts[i] += 1;
            }
        }
        let means = DMatrix::from_fn(m, slots_per_day, |i, s| {
            if counts[(i, s)] > 0 {
                sums[(i, s)] / counts[(i, s)] as f64
            } else if row_counts[i] > 0 {
                row_sums[i] / row_counts[i] as f64
            } else {
                0.0
            }
        });
        Ok(HistoricMean { means })
    }

    pub fn slots_per_day(&self) -> usize {
        self.means.ncols()
    }

    pub fn predict(&self, slot: usize) -> DVector<f64> {
        self.means.column(slot % self.slots_per_day()).into_owned()
    }

    /// Estimates for `n` consecutive columns starting at `first_slot`.
    pub fn estimate(&self, first_slot: usize, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.means.nrows(), n);
        for k in 0..n {
            out.set_column(k, &self.predict(first_slot + k));
        }
        out
    }
}

/// Fills every target cell with its historic slot mean.
pub fn historic_mean_baseline(
    history: &ObservationWindow,
    slots_per_day: usize,
    first_slot: usize,
    n: usize,
) -> Result<DMatrix<f64>> {
    Ok(HistoricMean::fit(history, slots_per_day)?.estimate(first_slot, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn mre_examples() {
        let y = dmatrix![3.0; 4.0];
        assert_eq!(mre(&y, &y, Grouping::PerColumn).unwrap().overall, 0.0);
        let zero = DMatrix::zeros(2, 1);
        assert_eq!(mre(&zero, &y, Grouping::PerColumn).unwrap().overall, 1.0);
    }

    #[test]
    fn mre_skips_zero_columns() {
        let y = dmatrix![3.0, 0.0; 4.0, 0.0];
        let est = dmatrix![3.0, 1.0; 4.0, 1.0];
        let s = mre(&est, &y, Grouping::PerColumn).unwrap();
        assert_eq!(s.skipped_columns, 1);
        assert_eq!(s.per_group, vec![Some(0.0), None]);
        assert!(mre(&est, &DMatrix::zeros(2, 2), Grouping::PerColumn).is_err());
    }

    #[test]
    fn mre_groups_by_slot() {
        // Two days of two slots; slot 1 is off by 100% on day 2 only.
        let y = dmatrix![1.0, 1.0, 1.0, 1.0];
        let est = dmatrix![1.0, 1.0, 1.0, 2.0];
        let g = Grouping::SlotOfDay {
            slots_per_day: 2,
            first_slot: 0,
        };
        let s = mre(&est, &y, g).unwrap();
        assert_eq!(s.per_group, vec![Some(0.0), Some(0.5)]);
        assert_eq!(s.overall, 0.25);
    }

    #[test]
    fn mae_examples() {
        let y = dmatrix![1.0; 3.0];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&dmatrix![2.0; 2.0], &y).unwrap(), 1.0);
    }

    #[test]
    fn historic_mean_examples() {
        let day = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0];
        let hist = ObservationWindow::dense(day.clone()).unwrap();
        let est = historic_mean_baseline(&hist, 3, 0, 3).unwrap();
        assert_eq!(est, day);

        let constant = ObservationWindow::dense(DMatrix::from_element(2, 6, 7.0)).unwrap();
        let est = historic_mean_baseline(&constant, 3, 1, 4).unwrap();
        let truth = DMatrix::from_element(2, 4, 7.0);
        assert_eq!(mre(&est, &truth, Grouping::PerColumn).unwrap().overall, 0.0);

        assert!(historic_mean_baseline(&hist, 4, 0, 1).is_err());
    }

    #[test]
    fn historic_mean_ignores_missing() {
        let hist = ObservationWindow::from_row_major(
            1,
            4,
            &[Some(1.0), None, Some(3.0), Some(8.0)],
        )
        .unwrap();
        let hm = HistoricMean::fit(&hist, 2).unwrap();
        assert_eq!(hm.predict(0)[0], 2.0);
        assert_eq!(hm.predict(1)[0], 8.0);
    }
}

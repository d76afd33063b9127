//! Evaluation metrics: cardinality match rate, pixel RMSE, false-alarm and
//! missed-detection rates.
//!
//! Predictions enter as thresholded slot outputs denormalized to continuous
//! pixel coordinates; true emitter cells are compared directly as pixel
//! coordinates without snapping predictions to the grid. RMSE is computed
//! only over samples whose predicted cardinality matches the truth, with
//! predictions paired to truths by minimum total squared distance. The
//! primary RMSE pools squared distances over all matched pairs before the
//! root; the per-sample-averaged variant is reported alongside it.

use serde::{Deserialize, Serialize};

use crate::assign::{min_cost_assignment, CostMatrix, Strategy};
use crate::grid::CellIndex;
use crate::loss::SlotPred;
use crate::{Error, Result};

/// Existence threshold: slots with a strictly larger probability count as
/// detections.
pub const DEFAULT_GAMMA: f64 = 0.5;

/// Grid height that RMSE figures are rescaled to for cross-scale comparison.
pub const REFERENCE_GRID_H: usize = 144;

/// A continuous point in pixel coordinates (row, column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    fn sq_dist(self, other: PixelPoint) -> f64 {
        let du = self.u - other.u;
        let dv = self.v - other.v;
        du * du + dv * dv
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub k_true: usize,
    pub k_pred: usize,
    /// True exactly when `k_pred == k_true`.
    pub matched: bool,
    /// Present iff matched: root of the mean squared pairing distance.
    pub rmse_px: Option<f64>,
    /// Present iff matched: the raw squared-distance sum behind `rmse_px`,
    /// kept so pooled aggregation does not re-square a rounded root.
    pub sq_error_sum: Option<f64>,
    pub extra: usize,
    pub missed: usize,
}

/// Aggregate metrics over one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of samples with the correct predicted cardinality.
    pub cmr: f64,
    /// Pooled pixel RMSE over all matched pairs; absent when nothing matched.
    pub rmse_px: Option<f64>,
    /// Mean of per-sample RMSEs over matched samples; secondary form.
    pub rmse_px_per_sample: Option<f64>,
    /// Surplus detections divided by total true emitters.
    pub fa: f64,
    /// Missing detections divided by total true emitters.
    pub mr: f64,
    pub n_samples: usize,
    pub n_true_emitters: usize,
    /// Grid height the pixel coordinates live on.
    pub grid_h: usize,
}

impl MetricsReport {
    /// Pooled RMSE rescaled to the reference grid for cross-scale tables.
    pub fn rmse_px_rescaled(&self) -> Option<f64> {
        self.rmse_px.map(|r| r * REFERENCE_GRID_H as f64 / self.grid_h as f64)
    }

    pub fn table_header() -> String {
        format!(
            "{:<18} {:>7} {:>9} {:>10} {:>7} {:>7} {:>8}",
            "method", "CMR %", "RMSE px", "RMSE@144", "FA %", "MR %", "samples"
        )
    }

    pub fn table_row(&self, label: &str) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.2}"),
            None => "-".to_string(),
        };
        format!(
            "{:<18} {:>7.2} {:>9} {:>10} {:>7.2} {:>7.2} {:>8}",
            label,
            100.0 * self.cmr,
            fmt_opt(self.rmse_px),
            fmt_opt(self.rmse_px_rescaled()),
            100.0 * self.fa,
            100.0 * self.mr,
            self.n_samples
        )
    }
}

/// Threshold slot outputs at `gamma` and denormalize the survivors to
/// continuous pixel coordinates.
pub fn threshold_predictions(
    preds: &[SlotPred],
    grid_h: usize,
    grid_w: usize,
    gamma: f64,
) -> Vec<PixelPoint> {
    preds
        .iter()
        .filter(|p| p.b_hat > gamma)
        .map(|p| PixelPoint { u: p.qu_hat * grid_h as f64, v: p.qv_hat * grid_w as f64 })
        .collect()
}

/// Evaluate one sample. On a cardinality match, predictions are paired to
/// true cells by minimum total squared pixel distance; otherwise only the
/// count surplus or deficit is recorded.
pub fn evaluate_sample(true_cells: &[CellIndex], preds: &[PixelPoint]) -> SampleEval {
    let k_true = true_cells.len();
    let k_pred = preds.len();
    if k_true != k_pred {
        return SampleEval {
            k_true,
            k_pred,
            matched: false,
            rmse_px: None,
            sq_error_sum: None,
            extra: k_pred.saturating_sub(k_true),
            missed: k_true.saturating_sub(k_pred),
        }
        .into_checked();
    }
    let sq_sum = if k_true == 0 {
        0.0
    } else {
        let truths: Vec<PixelPoint> = true_cells
            .iter()
            .map(|c| PixelPoint { u: c.u as f64, v: c.v as f64 })
            .collect();
        let mut costs = Vec::with_capacity(k_true * k_true);
        for &t in &truths {
            for &p in preds {
                costs.push(t.sq_dist(p));
            }
        }
        let cost = CostMatrix::new(k_true, costs);
        let perm = min_cost_assignment(&cost, Strategy::Auto);
        cost.total(&perm)
    };
    SampleEval {
        k_true,
        k_pred,
        matched: true,
        rmse_px: Some(if k_true == 0 { 0.0 } else { (sq_sum / k_true as f64).sqrt() }),
        sq_error_sum: Some(sq_sum),
        extra: 0,
        missed: 0,
    }
    .into_checked()
}

/// Aggregate per-sample records into a report. Pixel coordinates are assumed
/// to live on a `grid_h`-row grid (used only for the rescaled RMSE).
pub fn aggregate(evals: &[SampleEval], grid_h: usize) -> Result<MetricsReport> {
    if evals.is_empty() {
        return Err(Error::Config("cannot aggregate zero samples".to_string()));
    }
    let n_samples = evals.len();
    let n_true: usize = evals.iter().map(|e| e.k_true).sum();
    if n_true == 0 {
        return Err(Error::Config("evaluation set contains no true emitters".to_string()));
    }
    let n_matched = evals.iter().filter(|e| e.matched).count();
    let extra: usize = evals.iter().map(|e| e.extra).sum();
    let missed: usize = evals.iter().map(|e| e.missed).sum();

    let (rmse_px, rmse_per_sample) = if n_matched == 0 {
        (None, None)
    } else {
        let pooled_sq: f64 = evals.iter().filter_map(|e| e.sq_error_sum).sum();
        let pooled_pairs: usize = evals.iter().filter(|e| e.matched).map(|e| e.k_true).sum();
        let pooled = if pooled_pairs == 0 { 0.0 } else { (pooled_sq / pooled_pairs as f64).sqrt() };
        let mean_rmse: f64 =
            evals.iter().filter_map(|e| e.rmse_px).sum::<f64>() / n_matched as f64;
        (Some(pooled), Some(mean_rmse))
    };

    Ok(MetricsReport {
        cmr: n_matched as f64 / n_samples as f64,
        rmse_px,
        rmse_px_per_sample: rmse_per_sample,
        fa: extra as f64 / n_true as f64,
        mr: missed as f64 / n_true as f64,
        n_samples,
        n_true_emitters: n_true,
        grid_h,
    })
}

impl SampleEval {
    // Every construction site routes through here; the record's invariants
    // hold by the time a caller sees it.
    fn into_checked(self) -> SampleEval {
        debug_assert_eq!(self.matched, self.k_pred == self.k_true);
        debug_assert_eq!(self.rmse_px.is_some(), self.matched);
        debug_assert_eq!(self.extra, self.k_pred.saturating_sub(self.k_true));
        debug_assert_eq!(self.missed, self.k_true.saturating_sub(self.k_pred));
        debug_assert!(self.extra == 0 || self.missed == 0);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cell(u: usize, v: usize) -> CellIndex {
        CellIndex::new(u, v)
    }

    fn point(u: f64, v: f64) -> PixelPoint {
        PixelPoint { u, v }
    }

    #[test]
    fn pairing_oracle() {
        let truths = [cell(10, 10), cell(20, 20)];
        let preds = [point(20.0, 22.0), point(10.0, 13.0)];
        let eval = evaluate_sample(&truths, &preds);
        assert!(eval.matched);
        let rmse = eval.rmse_px.unwrap();
        assert!((rmse - 2.5495).abs() < 1e-4, "rmse {rmse}");
        assert_eq!(eval.sq_error_sum, Some(13.0));
        assert_eq!((eval.extra, eval.missed), (0, 0));
    }

    #[test]
    fn exact_predictions_have_zero_rmse() {
        let truths = [cell(3, 5), cell(40, 2), cell(7, 7)];
        let preds: Vec<PixelPoint> =
            truths.iter().map(|c| point(c.u as f64, c.v as f64)).collect();
        let eval = evaluate_sample(&truths, &preds);
        assert_eq!(eval.rmse_px, Some(0.0));
        assert_eq!(eval.sq_error_sum, Some(0.0));
    }

    #[test]
    fn count_mismatch_records_surplus_only() {
        let truths = [cell(1, 1), cell(2, 2)];
        let preds = [point(1.0, 1.0), point(2.0, 2.0), point(3.0, 3.0)];
        let eval = evaluate_sample(&truths, &preds);
        assert!(!eval.matched);
        assert_eq!(eval.rmse_px, None);
        assert_eq!((eval.extra, eval.missed), (1, 0));

        let eval = evaluate_sample(&truths, &preds[..1]);
        assert_eq!((eval.extra, eval.missed), (0, 1));
    }

    #[test]
    fn aggregation_oracle() {
        // Two samples with two true emitters each: one perfect, one with a
        // single surplus detection.
        let evals = vec![
            evaluate_sample(
                &[cell(4, 4), cell(9, 9)],
                &[point(4.0, 4.0), point(9.0, 9.0)],
            ),
            evaluate_sample(
                &[cell(4, 4), cell(9, 9)],
                &[point(4.0, 4.0), point(9.0, 9.0), point(1.0, 1.0)],
            ),
        ];
        let report = aggregate(&evals, 72).unwrap();
        assert_eq!(report.cmr, 0.5);
        assert_eq!(report.fa, 0.25);
        assert_eq!(report.mr, 0.0);
        assert_eq!(report.rmse_px, Some(0.0));
        assert_eq!(report.n_true_emitters, 4);
    }

    #[test]
    fn perfect_run_and_empty_match_set() {
        let perfect = vec![
            evaluate_sample(&[cell(2, 2)], &[point(2.0, 2.0)]);
            4
        ];
        let report = aggregate(&perfect, 72).unwrap();
        assert_eq!((report.cmr, report.fa, report.mr), (1.0, 0.0, 0.0));
        assert_eq!(report.rmse_px, Some(0.0));
        assert_eq!(report.rmse_px_per_sample, Some(0.0));

        let unmatched = vec![evaluate_sample(&[cell(2, 2)], &[])];
        let report = aggregate(&unmatched, 72).unwrap();
        assert_eq!(report.cmr, 0.0);
        assert_eq!(report.rmse_px, None, "rmse must be absent, not zero");
        assert_eq!(report.rmse_px_per_sample, None);
        assert_eq!(report.mr, 1.0);
    }

    #[test]
    fn aggregate_rejects_degenerate_inputs() {
        assert!(aggregate(&[], 72).is_err());
    }

    #[test]
    fn pooled_and_per_sample_forms_differ_as_expected() {
        // Sample A: one pair at distance 3 px. Sample B: one pair at 4 px.
        let evals = vec![
            evaluate_sample(&[cell(10, 10)], &[point(10.0, 13.0)]),
            evaluate_sample(&[cell(10, 10)], &[point(10.0, 14.0)]),
        ];
        let report = aggregate(&evals, 72).unwrap();
        let pooled = ((9.0 + 16.0) / 2.0f64).sqrt();
        assert!((report.rmse_px.unwrap() - pooled).abs() < 1e-12);
        assert!((report.rmse_px_per_sample.unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn rescaled_rmse_uses_reference_grid() {
        let evals = vec![evaluate_sample(&[cell(10, 10)], &[point(10.0, 12.0)])];
        let report = aggregate(&evals, 72).unwrap();
        assert!((report.rmse_px.unwrap() - 2.0).abs() < 1e-12);
        assert!((report.rmse_px_rescaled().unwrap() - 4.0).abs() < 1e-12);

        let native = aggregate(&evals, 144).unwrap();
        assert_eq!(native.rmse_px_rescaled(), native.rmse_px);
    }

    #[test]
    fn complementarity_over_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let k_true = rng.gen_range(0..5usize);
            let k_pred = rng.gen_range(0..5usize);
            let truths: Vec<CellIndex> = (0..k_true).map(|i| cell(i + 1, 2 * i + 1)).collect();
            let preds: Vec<PixelPoint> = (0..k_pred)
                .map(|_| point(rng.gen_range(1.0..16.0), rng.gen_range(1.0..16.0)))
                .collect();
            let eval = evaluate_sample(&truths, &preds);
            assert!(eval.extra == 0 || eval.missed == 0);
            assert_eq!(eval.matched, k_true == k_pred);
        }
    }

    #[test]
    fn pairing_beats_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let k = rng.gen_range(1..=5usize);
            let truths: Vec<CellIndex> =
                (0..k).map(|i| cell(rng.gen_range(1..=36), 1 + (i * 7) % 36)).collect();
            let preds: Vec<PixelPoint> = (0..k)
                .map(|_| point(rng.gen_range(1.0..36.0), rng.gen_range(1.0..36.0)))
                .collect();
            let optimal = evaluate_sample(&truths, &preds).sq_error_sum.unwrap();

            // Any random pairing costs at least as much.
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: f64 = perm
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    point(truths[i].u as f64, truths[i].v as f64).sq_dist(preds[j])
                })
                .sum();
            assert!(optimal <= shuffled + 1e-12);
        }
    }

    #[test]
    fn threshold_rules() {
        let slots = [
            SlotPred { b_hat: 0.9, qu_hat: 0.5, qv_hat: 0.5 },
            SlotPred { b_hat: 0.6, qu_hat: 0.25, qv_hat: 0.75 },
            SlotPred { b_hat: 0.2, qu_hat: 0.1, qv_hat: 0.1 },
        ];
        let kept = threshold_predictions(&slots, 72, 72, DEFAULT_GAMMA);
        assert_eq!(kept.len(), 2);
        // Continuous denormalization, no rounding.
        assert_eq!(kept[0], point(36.0, 36.0));
        assert_eq!(kept[1], point(18.0, 54.0));

        // Exactly gamma is dropped: the rule is strictly larger.
        let boundary = [SlotPred { b_hat: 0.5, qu_hat: 0.5, qv_hat: 0.5 }];
        assert!(threshold_predictions(&boundary, 72, 72, DEFAULT_GAMMA).is_empty());

        let low = [SlotPred { b_hat: 0.49, qu_hat: 0.5, qv_hat: 0.5 }];
        assert!(threshold_predictions(&low, 72, 72, DEFAULT_GAMMA).is_empty());
    }

    #[test]
    fn raising_gamma_never_increases_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let slots: Vec<SlotPred> = (0..5)
                .map(|_| SlotPred {
                    b_hat: rng.gen_range(0.0..1.0),
                    qu_hat: rng.gen_range(0.0..1.0),
                    qv_hat: rng.gen_range(0.0..1.0),
                })
                .collect();
            let mut last = usize::MAX;
            for gamma in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
                let n = threshold_predictions(&slots, 72, 72, gamma).len();
                assert!(n <= last);
                last = n;
            }
        }
    }

    #[test]
    fn report_serde_round_trip_and_table() {
        let evals = vec![
            evaluate_sample(&[cell(10, 10)], &[point(10.0, 13.0)]),
            evaluate_sample(&[cell(5, 5)], &[]),
        ];
        let report = aggregate(&evals, 72).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let table = format!("{}\n{}", MetricsReport::table_header(), report.table_row("probe"));
        assert!(table.contains("probe"));
        assert!(table.contains("50.00"), "{table}");
    }
}

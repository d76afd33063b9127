//! Existence + location loss under permutation-invariant training, plus the
//! pixel-mean BCE used by the occupancy stage.
//!
//! Each label slot is (b, q) where b marks a real emitter and q is the cell
//! coordinate normalized by the grid size. A prediction slot is (b_hat,
//! q_hat) with every component in (0, 1). The per-slot loss is
//!
//! ```text
//! l = lambda_b * BCE(b, b_hat) + lambda_xy * b * ||q - q_hat||^2
//! ```
//!
//! and the set loss is the minimum over all assignments of prediction slots
//! to target slots of the per-slot mean. The pure functions here pick the
//! assignment; the differentiable path runs through
//! [`crate::autodiff::Graph::slot_set_loss`] with that assignment held fixed.

use serde::{Deserialize, Serialize};

use crate::assign::{min_cost_assignment, CostMatrix, Strategy};
use crate::autodiff::SlotTargets;
use crate::propagation::GridMap;
use crate::scene::{LabelMatrix, OccupancyMap};
use crate::{Error, Result};

/// Loss weights and the probability clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_b: f64,
    pub lambda_xy: f64,
    /// Predicted probabilities are clamped to [eps, 1 - eps] inside the BCE
    /// term so saturated sigmoids cannot produce infinite loss.
    pub bce_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_b: 0.1, lambda_xy: 0.9, bce_epsilon: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_b >= 0.0) || !(self.lambda_xy >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got lambda_b={}, lambda_xy={}",
                self.lambda_b, self.lambda_xy
            )));
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 0.5) {
            return Err(Error::Config(format!(
                "bce_epsilon must lie in (0, 0.5), got {}",
                self.bce_epsilon
            )));
        }
        Ok(())
    }
}

/// One normalized target slot. `qu`/`qv` are only meaningful when `b == 1`;
/// padding slots never have their coordinates read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotTarget {
    pub b: u8,
    pub qu: f64,
    pub qv: f64,
}

/// One prediction slot: existence probability and normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotPred {
    pub b_hat: f64,
    pub qu_hat: f64,
    pub qv_hat: f64,
}

/// Per-slot loss breakdown. `bce_term` is the raw cross entropy and
/// `coord_term` is `b * ||q - q_hat||^2`, so it is exactly zero on padding
/// slots; `total` combines them with the configured weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotLoss {
    pub bce_term: f64,
    pub coord_term: f64,
    pub total: f64,
}

/// Loss of a single (target, prediction) slot pair.
pub fn slot_loss(target: SlotTarget, pred: SlotPred, cfg: &LossConfig) -> Result<SlotLoss> {
    if target.b > 1 {
        return Err(Error::Config(format!(
            "existence bit must be 0 or 1, got {}",
            target.b
        )));
    }
    let p = pred.b_hat.clamp(cfg.bce_epsilon, 1.0 - cfg.bce_epsilon);
    let bce_term = if target.b == 1 { -p.ln() } else { -(1.0 - p).ln() };
    let coord_term = if target.b == 1 {
        let du = target.qu - pred.qu_hat;
        let dv = target.qv - pred.qv_hat;
        du * du + dv * dv
    } else {
        0.0
    };
    Ok(SlotLoss {
        bce_term,
        coord_term,
        total: cfg.lambda_b * bce_term + cfg.lambda_xy * coord_term,
    })
}

/// Set loss: minimum over assignments of prediction slots to target slots of
/// the per-slot mean. Returns the loss and the argmin assignment, where entry
/// `i` is the prediction slot matched to target `i`. Ties break toward the
/// lexicographically smallest assignment on the enumeration path, which
/// covers every slot count the Hungarian route is not forced onto.
pub fn pit_loss(
    targets: &[SlotTarget],
    preds: &[SlotPred],
    cfg: &LossConfig,
    strategy: Strategy,
) -> Result<(f64, Vec<usize>)> {
    let m = targets.len();
    if m == 0 || preds.len() != m {
        return Err(Error::Config(format!(
            "slot counts must match and be nonzero: {} targets, {} predictions",
            m,
            preds.len()
        )));
    }
    let mut costs = Vec::with_capacity(m * m);
    for &t in targets {
        for &p in preds {
            costs.push(slot_loss(t, p, cfg)?.total);
        }
    }
    let cost = CostMatrix::new(m, costs);
    let mut perm = min_cost_assignment(&cost, strategy);
    canonicalize_ties(&mut perm, targets);
    // Sum matched losses in value order: the scalar then depends only on the
    // multiset of matched pairs, so relabeling prediction slots (or padding
    // slots trading places) reproduces it bit-for-bit.
    let mut matched: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| cost.at(i, j)).collect();
    matched.sort_unstable_by(f64::total_cmp);
    Ok((matched.iter().sum::<f64>() / m as f64, perm))
}

/// Identical target slots (all padding slots, in particular) have identical
/// cost rows, so any redistribution of their matched prediction slots is
/// equally optimal. Sorting each such group ascending lands every optimal
/// solver on the same lexicographically-smallest assignment; the exhaustive
/// route already returns it, making this a no-op there.
fn canonicalize_ties(perm: &mut [usize], targets: &[SlotTarget]) {
    let m = targets.len();
    let mut grouped = vec![false; m];
    for i in 0..m {
        if grouped[i] {
            continue;
        }
        let group: Vec<usize> = (i..m)
            .filter(|&j| !grouped[j] && targets[j] == targets[i])
            .collect();
        for &g in &group {
            grouped[g] = true;
        }
        if group.len() > 1 {
            let mut assigned: Vec<usize> = group.iter().map(|&g| perm[g]).collect();
            assigned.sort_unstable();
            for (&g, &a) in group.iter().zip(&assigned) {
                perm[g] = a;
            }
        }
    }
}

/// Normalize an M-slot label matrix against the grid size: a real row (u, v)
/// becomes q = (u / H, v / W); padding rows keep b = 0 with zeroed
/// placeholders that no loss path reads.
pub fn normalize_labels(labels: &LabelMatrix, grid_h: usize, grid_w: usize) -> Vec<SlotTarget> {
    labels
        .rows
        .iter()
        .map(|row| {
            if row.b == 1 {
                SlotTarget {
                    b: 1,
                    qu: row.u as f64 / grid_h as f64,
                    qv: row.v as f64 / grid_w as f64,
                }
            } else {
                SlotTarget { b: 0, qu: 0.0, qv: 0.0 }
            }
        })
        .collect()
}

/// Split one sample's flat prediction vector `[b, u, v] * m` into slots.
pub fn preds_from_flat(flat: &[f64], m: usize) -> Result<Vec<SlotPred>> {
    if flat.len() != 3 * m {
        return Err(Error::ShapeMismatch {
            op: "preds_from_flat",
            lhs: vec![flat.len()],
            rhs: vec![3 * m],
        });
    }
    Ok((0..m)
        .map(|j| SlotPred {
            b_hat: flat[3 * j],
            qu_hat: flat[3 * j + 1],
            qv_hat: flat[3 * j + 2],
        })
        .collect())
}

/// Mean set loss over a batch, for validation tracking outside the graph.
pub fn batch_pit_loss(
    labels: &[LabelMatrix],
    grid_h: usize,
    grid_w: usize,
    preds: &[f64],
    cfg: &LossConfig,
    strategy: Strategy,
) -> Result<f64> {
    let targets = build_slot_targets(labels, grid_h, grid_w, preds, cfg, strategy)?;
    let n = labels.len();
    let m = targets.m;
    let mut acc = 0.0;
    for s in 0..n {
        for i in 0..m {
            let flat = s * m + i;
            let pj = targets.perm[flat];
            let pred = SlotPred {
                b_hat: preds[s * 3 * m + 3 * pj],
                qu_hat: preds[s * 3 * m + 3 * pj + 1],
                qv_hat: preds[s * 3 * m + 3 * pj + 2],
            };
            let target = SlotTarget {
                b: targets.b[flat] as u8,
                qu: targets.qu[flat],
                qv: targets.qv[flat],
            };
            acc += slot_loss(target, pred, cfg)?.total;
        }
    }
    Ok(acc / (n * m) as f64)
}

/// Solve the per-sample assignments for a batch and package them for
/// [`crate::autodiff::Graph::slot_set_loss`]. `preds` is the flattened
/// `[n, 3m]` network output; the returned assignment is a constant of the
/// subsequent backward pass.
pub fn build_slot_targets(
    labels: &[LabelMatrix],
    grid_h: usize,
    grid_w: usize,
    preds: &[f64],
    cfg: &LossConfig,
    strategy: Strategy,
) -> Result<SlotTargets> {
    cfg.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Config("batch must be nonempty".to_string()));
    }
    let m = labels[0].m();
    if labels.iter().any(|l| l.m() != m) {
        return Err(Error::Config("all label matrices must have the same slot count".to_string()));
    }
    if preds.len() != n * 3 * m {
        return Err(Error::ShapeMismatch {
            op: "build_slot_targets",
            lhs: vec![preds.len()],
            rhs: vec![n, 3 * m],
        });
    }
    let mut b = Vec::with_capacity(n * m);
    let mut qu = Vec::with_capacity(n * m);
    let mut qv = Vec::with_capacity(n * m);
    let mut perm = Vec::with_capacity(n * m);
    for (s, matrix) in labels.iter().enumerate() {
        let targets = normalize_labels(matrix, grid_h, grid_w);
        let slot_preds = preds_from_flat(&preds[s * 3 * m..(s + 1) * 3 * m], m)?;
        let (_, assignment) = pit_loss(&targets, &slot_preds, cfg, strategy)?;
        for (i, t) in targets.iter().enumerate() {
            b.push(t.b as f64);
            qu.push(t.qu);
            qv.push(t.qv);
            perm.push(assignment[i]);
        }
    }
    Ok(SlotTargets {
        m,
        b,
        qu,
        qv,
        perm,
        lambda_b: cfg.lambda_b,
        lambda_xy: cfg.lambda_xy,
        eps: cfg.bce_epsilon,
    })
}

/// Pixel-mean binary cross entropy between occupancy logits and a 0/1 target
/// map, evaluated in the numerically stable logits form.
pub fn occupancy_bce(logits: &GridMap, target: &OccupancyMap) -> Result<f64> {
    if logits.h != target.h || logits.w != target.w {
        return Err(Error::ShapeMismatch {
            op: "occupancy_bce",
            lhs: vec![logits.h, logits.w],
            rhs: vec![target.h, target.w],
        });
    }
    let mut acc = 0.0f64;
    for (&x, &t) in logits.values.iter().zip(&target.values) {
        if t > 1 {
            return Err(Error::Config(format!(
                "occupancy target values must be 0 or 1, got {t}"
            )));
        }
        let t = t as f64;
        acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    Ok(acc / logits.values.len() as f64)
}

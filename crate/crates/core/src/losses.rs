//! Multi-task objective and boundary ground truth.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{change_mask, BiTemporalSample, LabelMap};
use crate::error::{shape_err, Result, ScdError};
use crate::graph::{Graph, Var};
use crate::heads::Predictions;
use crate::tensor::Scalar;

pub const SIMILARITY_EPS: f64 = 1e-8;

/// Pixels whose change-mask value differs from at least one 4-neighbour.
/// Out-of-image neighbours replicate the edge pixel.
pub fn mask_boundary(mask: &LabelMap) -> LabelMap {
    let (h, w) = mask.dims();
    let m = mask.data();
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let v = m[i] > 0;
            let differs = |yy: usize, xx: usize| (m[yy * w + xx] > 0) != v;
            let hit = (y > 0 && differs(y - 1, x)) || (y + 1 < h && differs(y + 1, x)) || (x > 0 && differs(y, x - 1)) || (x + 1 < w && differs(y, x + 1));
            u8::from(hit)
        })
        .collect();
    LabelMap::new(h, w, data).expect("sized buffer")
}

/// Boundary of the change mask derived from a label pair.
pub fn boundary_target(label_t1: &LabelMap, label_t2: &LabelMap) -> Result<LabelMap> {
    Ok(mask_boundary(&change_mask(label_t1, label_t2)?))
}

/// `(lambda_sem, lambda_cd, lambda_bd, lambda_sim)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sem: f64,
    pub change: f64,
    pub boundary: f64,
    pub similarity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sem: 1.0, change: 1.0, boundary: 0.5, similarity: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub boundary_pos_weight: f64,
    pub similarity_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), boundary_pos_weight: 5.0, similarity_margin: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sem: f64,
    pub change: f64,
    pub boundary: f64,
    pub similarity: f64,
    pub weights: LossWeights,
}

impl LossReport {
    /// Weighted sum of the components.
    pub fn combined(&self) -> f64 {
        let w = &self.weights;
        w.sem * self.sem + w.change * self.change + w.boundary * self.boundary + w.similarity * self.similarity
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            total: avg(|r| r.total),
            sem: avg(|r| r.sem),
            change: avg(|r| r.change),
            boundary: avg(|r| r.boundary),
            similarity: avg(|r| r.similarity),
            weights: first.weights,
        })
    }
}

/// Batched targets, flattened in `(batch, y, x)` order.
#[derive(Clone, Debug)]
pub struct Targets {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels_t1: Rc<Vec<u8>>,
    pub labels_t2: Rc<Vec<u8>>,
    pub change: Rc<Vec<bool>>,
    pub boundary: Rc<Vec<bool>>,
}

impl Targets {
    pub fn from_samples(samples: &[&BiTemporalSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(ScdError::InvalidArgument("empty batch".into()));
        };
        let (h, w) = first.dims();
        if let Some(s) = samples.iter().find(|s| s.dims() != (h, w)) {
            return shape_err(format!("batch mixes {h}x{w} and {:?} samples", s.dims()));
        }
        let flat = |f: fn(&BiTemporalSample) -> &LabelMap| samples.iter().flat_map(|s| f(s).data().iter().copied()).collect::<Vec<u8>>();
        let flag = |f: fn(&BiTemporalSample) -> &LabelMap| samples.iter().flat_map(|s| f(s).data().iter().map(|&v| v > 0)).collect::<Vec<bool>>();
        Ok(Self {
            batch: samples.len(),
            height: h,
            width: w,
            labels_t1: Rc::new(flat(|s| &s.label_t1)),
            labels_t2: Rc::new(flat(|s| &s.label_t2)),
            change: Rc::new(flag(|s| &s.change)),
            boundary: Rc::new(flag(|s| &s.boundary)),
        })
    }
}

fn as_scalars<T: Scalar>(mask: &[bool]) -> Rc<Vec<T>> {
    Rc::new(mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())
}

/// Build the weighted objective. Returns the scalar loss node and the
/// per-component report; any non-finite component is an error naming it.
pub fn scd_loss<T: Scalar>(g: &Graph<T>, preds: &Predictions, targets: &Targets, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    let (b, h, w) = (targets.batch, targets.height, targets.width);
    let classes = g.shape(preds.sem1_logits)[1];
    for (name, v, c) in [
        ("sem1", preds.sem1_logits, classes),
        ("sem2", preds.sem2_logits, classes),
        ("change", preds.change_logits, 1),
        ("boundary", preds.boundary_logits, 1),
    ] {
        if g.shape(v) != [b, c, h, w] {
            return shape_err(format!("{name} logits {:?} do not match targets [{b}, {c}, {h}, {w}]", g.shape(v)));
        }
    }
    for labels in [&targets.labels_t1, &targets.labels_t2] {
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(ScdError::ClassOutOfRange { index: l as usize, classes });
        }
    }
    let ce1 = g.masked_cross_entropy(preds.sem1_logits, targets.labels_t1.clone());
    let ce2 = g.masked_cross_entropy(preds.sem2_logits, targets.labels_t2.clone());
    let sem = g.weighted_sum(&[(ce1, 0.5), (ce2, 0.5)]);
    let change = g.bce_with_logits(preds.change_logits, as_scalars(&targets.change), 1.0);
    let boundary = g.bce_with_logits(preds.boundary_logits, as_scalars(&targets.boundary), cfg.boundary_pos_weight);
    let similarity = g.similarity_loss(preds.sem1_features, preds.sem2_features, targets.change.clone(), cfg.similarity_margin, SIMILARITY_EPS);

    let value = |v: Var| g.value(v).data()[0].as_f64();
    let wts = cfg.weights;
    let mut report = LossReport { total: 0.0, sem: value(sem), change: value(change), boundary: value(boundary), similarity: value(similarity), weights: wts };
    for (name, v) in [("sem", report.sem), ("change", report.change), ("boundary", report.boundary), ("similarity", report.similarity)] {
        if !v.is_finite() {
            return Err(ScdError::NonFiniteLoss { component: name, value: v });
        }
    }
    let total = g.weighted_sum(&[(sem, wts.sem), (change, wts.change), (boundary, wts.boundary), (similarity, wts.similarity)]);
    report.total = value(total);
    if !report.total.is_finite() {
        return Err(ScdError::NonFiniteLoss { component: "total", value: report.total });
    }
    Ok((total, report))
}

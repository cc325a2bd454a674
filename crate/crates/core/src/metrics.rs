//! Confusion-matrix accumulation and the four semantic change scores.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdError};

/// `C x C` counts; rows are predictions, columns ground truth, class 0 is
/// no change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(ScdError::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.classes + gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count one `(pred, gt)` pair per pixel.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(ScdError::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let c = self.classes;
        if let Some(&v) = pred.iter().chain(gt).find(|&&v| v as usize >= c) {
            return Err(ScdError::ClassOutOfRange { index: v as usize, classes: c });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[p as usize * c + g as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(ScdError::Shape(format!("cannot merge {}-class and {}-class matrices", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Change / no-change collapse `[[b00, b01], [b10, b11]]`.
    pub fn binary(&self) -> [[u64; 2]; 2] {
        let mut b = [[0; 2]; 2];
        for i in 0..self.classes {
            for j in 0..self.classes {
                b[usize::from(i > 0)][usize::from(j > 0)] += self.get(i, j);
            }
        }
        b
    }

    /// F1 of the binarized change map.
    pub fn change_f1(&self) -> f64 {
        let b = self.binary();
        ratio(2 * b[1][1], 2 * b[1][1] + b[0][1] + b[1][0])
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScdScores {
    pub oa: f64,
    pub miou: f64,
    pub sek: f64,
    pub f1: f64,
}

impl ScdScores {
    /// Flat JSON object with six decimals.
    pub fn to_json(&self) -> String {
        format!("{{\"oa\": {:.6}, \"miou\": {:.6}, \"sek\": {:.6}, \"f1\": {:.6}}}", self.oa, self.miou, self.sek, self.f1)
    }
}

/// Cohen's kappa over a count matrix. A matrix whose chance agreement is
/// already total (a single occupied diagonal cell) counts as full agreement.
fn kappa(counts: &[u64], c: usize) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let po = (0..c).map(|i| counts[i * c + i]).sum::<u64>() as f64 / t;
    let pe = (0..c)
        .map(|i| {
            let row: u64 = counts[i * c..(i + 1) * c].iter().sum();
            let col: u64 = (0..c).map(|j| counts[j * c + i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (t * t);
    if pe >= 1.0 {
        return if po >= 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

pub fn compute_scores(q: &ConfusionMatrix) -> Result<ScdScores> {
    let total = q.total();
    if total == 0 {
        return Err(ScdError::InvalidArgument("cannot score an empty confusion matrix".into()));
    }
    let c = q.classes;
    let oa = ratio((0..c).map(|i| q.get(i, i)).sum(), total);
    let b = q.binary();
    let iou_n = ratio(b[0][0], b[0][0] + b[0][1] + b[1][0]);
    let iou_c = ratio(b[1][1], b[1][1] + b[0][1] + b[1][0]);
    let miou = 0.5 * (iou_n + iou_c);
    let mut hat = q.counts.clone();
    hat[0] = 0;
    let sek = (iou_c - 1.0).exp() * kappa(&hat, c);
    let hits: u64 = (1..c).map(|i| q.get(i, i)).sum();
    let pred_changed: u64 = (1..c).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| q.get(i, j)).sum();
    let gt_changed: u64 = (0..c).flat_map(|i| (1..c).map(move |j| (i, j))).map(|(i, j)| q.get(i, j)).sum();
    let p = ratio(hits, pred_changed);
    let r = ratio(hits, gt_changed);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok(ScdScores { oa, miou, sek, f1 })
}

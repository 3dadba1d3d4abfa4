//! Edit-distance metrics and the alignment used for ⟨ooc⟩ accounting.

use crate::tokenizer::Token;

use super::EvalError;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One step of an alignment between a prediction and its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AlignOp {
    /// Prediction `pred` paired with ground truth `gt` (match or substitution).
    Pair { pred: usize, gt: usize },
    /// Ground-truth position left unpaired.
    Delete { gt: usize },
    /// Predicted position left unpaired.
    Insert { pred: usize },
}

/// Minimal-cost alignment in left-to-right order. Walking back from the end,
/// ties prefer a pair, then a deletion, then an insertion.
pub fn align<T: PartialEq>(pred: &[T], gt: &[T]) -> Vec<AlignOp> {
    let (n, m) = (pred.len(), gt.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        for j in 0..=m {
            dp[i * w + j] = if i == 0 {
                j
            } else if j == 0 {
                i
            } else {
                let sub = dp[(i - 1) * w + j - 1] + usize::from(pred[i - 1] != gt[j - 1]);
                sub.min(dp[(i - 1) * w + j] + 1).min(dp[i * w + j - 1] + 1)
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 && here == dp[(i - 1) * w + j - 1] + usize::from(pred[i - 1] != gt[j - 1]) {
            ops.push(AlignOp::Pair { pred: i - 1, gt: j - 1 });
            i -= 1;
            j -= 1;
        } else if j > 0 && here == dp[i * w + j - 1] + 1 {
            ops.push(AlignOp::Delete { gt: j - 1 });
            j -= 1;
        } else {
            ops.push(AlignOp::Insert { pred: i - 1 });
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

fn rate<T: PartialEq>(pred: &[T], gt: &[T]) -> Result<f64, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    Ok(edit_distance(pred, gt) as f64 / gt.len() as f64)
}

/// Character error rate of a decoded prediction (⟨ooc⟩ already shown as `*`).
pub fn cer(pred: &str, gt: &str) -> Result<f64, EvalError> {
    let p: Vec<char> = pred.chars().collect();
    let g: Vec<char> = gt.chars().collect();
    rate(&p, &g)
}

/// Token error rate; ⟨ooc⟩ is an ordinary token.
pub fn ter<T: PartialEq>(pred: &[T], gt: &[T]) -> Result<f64, EvalError> {
    rate(pred, gt)
}

/// Token error rate after removing ground-truth ⟨ooc⟩ positions and the
/// predictions aligned to them. `None` when every ground-truth token is
/// ⟨ooc⟩ (or the ground truth is empty).
pub fn ter_excluding_ooc(pred: &[Token], gt: &[Token]) -> Option<f64> {
    let mut p = Vec::with_capacity(pred.len());
    let mut g = Vec::with_capacity(gt.len());
    for op in align(pred, gt) {
        match op {
            AlignOp::Pair { pred: i, gt: j } => {
                if !gt[j].is_ooc() {
                    p.push(pred[i]);
                    g.push(gt[j]);
                }
            }
            AlignOp::Delete { gt: j } => {
                if !gt[j].is_ooc() {
                    g.push(gt[j]);
                }
            }
            AlignOp::Insert { pred: i } => p.push(pred[i]),
        }
    }
    ter(&p, &g).ok()
}

/// ⟨ooc⟩ confusion counts for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OocCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl OocCounts {
    pub fn add(&mut self, o: OocCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// F1 over the accumulated counts; `None` when there were no ⟨ooc⟩
    /// tokens on either side.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

/// Counts ⟨ooc⟩ agreement over the alignment of `pred` to `gt`.
pub fn f1_ooc(pred: &[Token], gt: &[Token]) -> OocCounts {
    let mut c = OocCounts::default();
    for op in align(pred, gt) {
        match op {
            AlignOp::Pair { pred: i, gt: j } => match (pred[i].is_ooc(), gt[j].is_ooc()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            },
            AlignOp::Delete { gt: j } => c.fn_ += usize::from(gt[j].is_ooc()),
            AlignOp::Insert { pred: i } => c.fp += usize::from(pred[i].is_ooc()),
        }
    }
    c
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

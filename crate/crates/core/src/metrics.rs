//! Agreement metrics and the task losses built from them.
//!
//! All moments are population (1/N) moments, so CCC is bounded in
//! `[-1, 1]` and never exceeds Pearson's ρ in magnitude.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First and second moments of a paired sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSummary<S> {
    pub mean_x: S,
    pub mean_y: S,
    pub var_x: S,
    pub var_y: S,
    pub cov: S,
}

impl<S: Scalar> MomentSummary<S> {
    pub fn of(x: &[S], y: &[S]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape("moments", format!("lengths {} and {} differ", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(Error::domain("moments", format!("need at least 2 points, got {}", x.len())));
        }
        let n = S::from_usize_lossy(x.len());
        let mean_x = x.iter().copied().sum::<S>() / n;
        let mean_y = y.iter().copied().sum::<S>() / n;
        let (mut var_x, mut var_y, mut cov) = (S::zero(), S::zero(), S::zero());
        for (&a, &b) in x.iter().zip(y) {
            let (da, db) = (a - mean_x, b - mean_y);
            var_x += da * da;
            var_y += db * db;
            cov += da * db;
        }
        Ok(Self { mean_x, mean_y, var_x: var_x / n, var_y: var_y / n, cov: cov / n })
    }
}

/// Concordance correlation coefficient.
pub fn ccc<S: Scalar>(x: &[S], y: &[S]) -> Result<S> {
    let m = MomentSummary::of(x, y)?;
    let gap = m.mean_x - m.mean_y;
    let denom = m.var_x + m.var_y + gap * gap;
    if denom <= S::zero() {
        return Err(Error::domain("ccc", "both inputs constant with equal means"));
    }
    Ok((m.cov + m.cov) / denom)
}

/// Pearson correlation coefficient.
pub fn pearson<S: Scalar>(x: &[S], y: &[S]) -> Result<S> {
    let m = MomentSummary::of(x, y)?;
    if m.var_x <= S::zero() || m.var_y <= S::zero() {
        return Err(Error::domain("pearson", "zero variance input"));
    }
    Ok(m.cov / (m.var_x.sqrt() * m.var_y.sqrt()))
}

fn column<S: Scalar>(m: &[S], cols: usize, j: usize) -> Vec<S> {
    m.iter().skip(j).step_by(cols).copied().collect()
}

/// Mean over columns of per-column CCC for row-major `N×cols` matrices.
pub fn mean_ccc<S: Scalar>(pred: &[S], target: &[S], cols: usize) -> Result<S> {
    column_mean(pred, target, cols, ccc)
}

/// Mean over columns of per-column Pearson ρ.
pub fn mean_pearson<S: Scalar>(pred: &[S], target: &[S], cols: usize) -> Result<S> {
    column_mean(pred, target, cols, pearson)
}

fn column_mean<S: Scalar>(
    pred: &[S],
    target: &[S],
    cols: usize,
    f: fn(&[S], &[S]) -> Result<S>,
) -> Result<S> {
    if cols == 0 || pred.len() != target.len() || pred.len() % cols != 0 {
        return Err(Error::shape("column metric", format!("{} vs {} values over {cols} columns", pred.len(), target.len())));
    }
    let mut acc = S::zero();
    for j in 0..cols {
        acc += f(&column(pred, cols, j), &column(target, cols, j))?;
    }
    Ok(acc / S::from_usize_lossy(cols))
}

/// Class-by-class count table; rows are true classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::domain("confusion", format!("label pair ({t}, {p}) outside {classes} classes")));
            }
            counts[t * classes + p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class * self.classes..(class + 1) * self.classes].iter().sum()
    }

    /// Per-class recall; `None` for classes absent from the truth.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let n = self.support(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect()
    }

    /// Unweighted average recall over the classes present in the truth.
    pub fn uar(&self) -> Result<f64> {
        let recalls = self.recalls();
        let absent: Vec<usize> = recalls.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(c, _)| c).collect();
        if absent.len() == self.classes {
            return Err(Error::domain("uar", "no labelled samples"));
        }
        if !absent.is_empty() {
            log::warn!("uar: classes {absent:?} absent from ground truth, averaging over the rest");
        }
        let present: Vec<f64> = recalls.into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Unweighted average recall.
pub fn uar(truth: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    ConfusionMatrix::new(truth, pred, classes)?.uar()
}

/// Index of the largest entry in each row.
pub fn argmax_rows<S: Scalar>(m: &[S], cols: usize) -> Vec<usize> {
    m.chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// `mean_d (1 − CCC_d)` over the columns of two `N×D` matrices.
/// Differentiable with respect to `pred`.
pub fn ccc_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if pred.ndim() != 2 || pred.shape() != target.shape() {
        return Err(Error::shape("ccc_loss", format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    if pred.shape()[0] < 2 {
        return Err(Error::domain("ccc_loss", format!("need at least 2 rows, got {}", pred.shape()[0])));
    }
    let mp = pred.mean(0, true)?;
    let mt = target.mean(0, true)?;
    let pc = pred.sub(&mp)?;
    let tc = target.sub(&mt)?;
    let cov = pc.mul(&tc)?.mean(0, true)?;
    let denom = pc.square().mean(0, true)?.add(&tc.square().mean(0, true)?)?.add(&mp.sub(&mt)?.square())?;
    if denom.data().iter().any(|&d| d <= S::zero()) {
        return Err(Error::domain("ccc_loss", "a column has both inputs constant with equal means"));
    }
    let ccc = cov.scale(S::lit(2.0)).div(&denom)?;
    Ok(ccc.mean_all().neg().add_scalar(S::one()))
}

/// Mean negative log-likelihood of the true class under a row softmax.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape("cross_entropy", format!("label {bad} outside {c} classes")));
    }
    let mut onehot = vec![S::zero(); n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = S::one();
    }
    let picked = logits.log_softmax(1)?.mul(&Tensor::new(onehot, &[n, c])?)?;
    Ok(picked.sum_all().scale(-S::one() / S::from_usize_lossy(n)))
}

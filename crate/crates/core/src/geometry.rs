//! Closed-form domain geometry for binary linear classifiers: the optimal
//! lp perturbation is input-independent, so each perturbation type shifts
//! the clean distribution by a constant vector and the pairwise 2-Wasserstein
//! distances between the shifted domains have closed forms.

use crate::error::Error;

/// `f(x) = sign(w . x + b)` with labels y in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearClassifier {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self, Error> {
        if w.iter().all(|&v| v == 0.0) || w.is_empty() {
            return Err(Error::ZeroWeight);
        }
        Ok(LinearClassifier { w, b })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// The lp norm family used for perturbation budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PNorm {
    L1,
    L2,
    Linf,
}

impl std::fmt::Display for PNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PNorm::L1 => write!(f, "l1"),
            PNorm::L2 => write!(f, "l2"),
            PNorm::Linf => write!(f, "linf"),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the largest |w_j|, lowest index on ties.
pub fn argmax_abs(w: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in w.iter().enumerate().skip(1) {
        if v.abs() > w[best].abs() {
            best = j;
        }
    }
    best
}

/// The loss-maximizing perturbation inside the lp ball of radius epsilon:
/// the (scaled) dual-norm subgradient of `-y * w`. Independent of the input.
pub fn optimal_perturbation(
    clf: &LinearClassifier,
    y: i8,
    epsilon: f64,
    p: PNorm,
) -> Result<Vec<f64>, Error> {
    if clf.w.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroWeight);
    }
    let yf = y as f64;
    let d = clf.dim();
    let dir: Vec<f64> = clf.w.iter().map(|&w| -yf * w).collect();
    Ok(match p {
        PNorm::Linf => dir.iter().map(|&v| epsilon * sign(v)).collect(),
        PNorm::L1 => {
            let i = argmax_abs(&dir);
            let mut out = vec![0.0; d];
            out[i] = epsilon * sign(dir[i]);
            out
        }
        PNorm::L2 => {
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter().map(|&v| epsilon * v / norm).collect()
        }
    })
}

fn check_pair(clf: &LinearClassifier, p: PNorm, q: PNorm) -> Result<(), Error> {
    if p == q {
        return Err(Error::usage("wasserstein pair requires two distinct norms"));
    }
    if clf.w.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroWeight);
    }
    Ok(())
}

/// Closed-form 2-Wasserstein distance between the domains of two
/// perturbation types (both are the clean distribution shifted by a
/// constant, so the distance is the Euclidean distance of the shifts).
pub fn wasserstein_pair(
    clf: &LinearClassifier,
    epsilon: f64,
    p: PNorm,
    q: PNorm,
) -> Result<f64, Error> {
    check_pair(clf, p, q)?;
    let d = clf.dim() as f64;
    let l1 = clf.w.iter().map(|v| v.abs()).sum::<f64>();
    let l2 = clf.w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let wi = clf.w[argmax_abs(&clf.w)].abs();
    let mut pair = [p, q];
    pair.sort();
    Ok(match pair {
        [PNorm::L1, PNorm::Linf] => epsilon * (d - 1.0).sqrt(),
        [PNorm::L1, PNorm::L2] => epsilon * (2.0 - 2.0 * wi / l2).sqrt(),
        [PNorm::L2, PNorm::Linf] => epsilon * (d + 1.0 - 2.0 * l1 / l2).sqrt(),
        _ => unreachable!("pairs are distinct"),
    })
}

/// Independent check: the same distance computed as the Euclidean norm of
/// the difference of the two optimal shifts.
pub fn wasserstein_oracle(
    clf: &LinearClassifier,
    epsilon: f64,
    p: PNorm,
    q: PNorm,
) -> Result<f64, Error> {
    check_pair(clf, p, q)?;
    let dp = optimal_perturbation(clf, 1, epsilon, p)?;
    let dq = optimal_perturbation(clf, 1, epsilon, q)?;
    Ok(dp.iter().zip(&dq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

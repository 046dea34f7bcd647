//! Quantification losses and evaluation summaries.
//!
//! RAE smoothing uses `ε = 1/(2m)` where `m` is the size of the evaluated
//! bag; it is always passed explicitly.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Rae,
    Nmd,
    Ae,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Rae => "rae",
            LossKind::Nmd => "nmd",
            LossKind::Ae => "ae",
        }
    }

    /// Plain loss value; `bag_size` only matters for RAE.
    pub fn evaluate(self, p: &[f64], p_hat: &[f64], bag_size: usize) -> f64 {
        match self {
            LossKind::Rae => rae(p, p_hat, bag_size),
            LossKind::Nmd => nmd(p, p_hat),
            LossKind::Ae => ae(p, p_hat),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "rae" => Ok(LossKind::Rae),
            "nmd" => Ok(LossKind::Nmd),
            "ae" | "mae" => Ok(LossKind::Ae),
            other => Err(Error::Config(format!("unknown loss {:?} (expected rae, nmd or ae)", other))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn same_len(p: &[f64], q: &[f64]) {
    assert_eq!(p.len(), q.len(), "prevalence vectors have lengths {} and {}", p.len(), q.len());
}

/// Smoothing factor for a bag of size `m`.
pub fn smoothing_eps(m: usize) -> f64 {
    assert!(m >= 1, "smoothing needs a bag size >= 1");
    1.0 / (2.0 * m as f64)
}

fn smooth(v: f64, eps: f64, l: usize) -> f64 {
    (v + eps) / (l as f64 * eps + 1.0)
}

/// Relative absolute error with additive smoothing.
pub fn rae(p: &[f64], p_hat: &[f64], m: usize) -> f64 {
    same_len(p, p_hat);
    let l = p.len();
    let eps = smoothing_eps(m);
    p.iter()
        .zip(p_hat)
        .map(|(&a, &b)| {
            let sa = smooth(a, eps, l);
            (sa - smooth(b, eps, l)).abs() / sa
        })
        .sum::<f64>()
        / l as f64
}

/// Normalized match distance over ordered classes.
pub fn nmd(p: &[f64], p_hat: &[f64]) -> f64 {
    same_len(p, p_hat);
    let l = p.len();
    assert!(l >= 2, "nmd needs at least two classes");
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for j in 0..l - 1 {
        cp += p[j];
        cq += p_hat[j];
        total += (cq - cp).abs();
    }
    total / (l - 1) as f64
}

/// Mean absolute error over classes.
pub fn ae(p: &[f64], p_hat: &[f64]) -> f64 {
    same_len(p, p_hat);
    p.iter().zip(p_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

/// Hellinger distance between normalized histograms, in `[0, 1]`.
pub fn hellinger(h1: &[f64], h2: &[f64]) -> f64 {
    assert_eq!(h1.len(), h2.len(), "histograms have {} and {} bins", h1.len(), h2.len());
    for h in [h1, h2] {
        let s: f64 = h.iter().sum();
        assert!(
            (s - 1.0).abs() < 1e-9 && h.iter().all(|&v| v >= 0.0),
            "hellinger: histogram not normalized (sum {})",
            s
        );
    }
    let s: f64 = h1.iter().zip(h2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    (s.sqrt() / std::f64::consts::SQRT_2).min(1.0)
}

/// Graph version of the loss. `p_hat` holds `l` values (shape `[l]` or `[1, l]`).
pub fn differentiable_loss(g: &mut Graph, kind: LossKind, p_true: &[f64], p_hat: NodeId, bag_size: usize) -> NodeId {
    let l = p_true.len();
    assert_eq!(g.value(p_hat).len(), l, "predicted prevalence has shape {:?}, truth has {} classes", g.shape(p_hat), l);
    let q = g.reshape(p_hat, [l]);
    match kind {
        LossKind::Rae => {
            let eps = smoothing_eps(bag_size);
            let norm = l as f64 * eps + 1.0;
            let sp: Vec<f64> = p_true.iter().map(|&v| smooth(v, eps, l)).collect();
            let inv: Vec<f64> = sp.iter().map(|v| 1.0 / v).collect();
            let shifted = g.add_scalar(q, eps);
            let sq = g.mul_scalar(shifted, 1.0 / norm);
            let spn = g.constant(Tensor::vector(sp));
            let diff = g.sub(spn, sq);
            let a = g.abs(diff);
            let invn = g.constant(Tensor::vector(inv));
            let rel = g.mul(a, invn);
            g.mean(rel)
        }
        LossKind::Nmd => {
            assert!(l >= 2, "nmd needs at least two classes");
            let mut upper = Tensor::zeros([l, l - 1]);
            for i in 0..l {
                for j in i..l - 1 {
                    upper.data_mut()[i * (l - 1) + j] = 1.0;
                }
            }
            let mut cum_true = Vec::with_capacity(l - 1);
            let mut c = 0.0;
            for &v in &p_true[..l - 1] {
                c += v;
                cum_true.push(c);
            }
            let row = g.reshape(q, [1, l]);
            let un = g.constant(upper);
            let cum = g.matmul(row, un);
            let ct = g.constant(Tensor::new([1, l - 1], cum_true));
            let diff = g.sub(cum, ct);
            let a = g.abs(diff);
            g.mean(a)
        }
        LossKind::Ae => {
            let pt = g.constant(Tensor::vector(p_true.to_vec()));
            let diff = g.sub(q, pt);
            let a = g.abs(diff);
            g.mean(a)
        }
    }
}

/// Per-bag losses with mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub loss: LossKind,
    pub losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Summary block written next to the per-bag CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub loss: LossKind,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, loss: LossKind, losses: Vec<f64>) -> Self {
        let n = losses.len();
        let mean = if n == 0 { 0.0 } else { losses.iter().sum::<f64>() / n as f64 };
        let var = if n == 0 { 0.0 } else { losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64 };
        EvalReport { method: method.into(), loss, losses, mean, std: var.sqrt(), n }
    }

    /// `bag_id,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bag_id,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{},{}", i, l).unwrap();
        }
        s
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary { method: self.method.clone(), loss: self.loss, mean: self.mean, std: self.std, n: self.n }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rae_hand_case() {
        assert!((rae(&[0.5, 0.5], &[0.6, 0.4], 1000) - 0.1998002).abs() < 1e-6);
        assert_eq!(rae(&[0.3, 0.7], &[0.3, 0.7], 10), 0.0);
        assert!(rae(&[0.0, 1.0], &[1.0, 0.0], 5).is_finite());
    }

    #[test]
    fn nmd_cases() {
        assert!((nmd(&[0.2, 0.5, 0.3], &[0.3, 0.4, 0.3]) - 0.05).abs() < 1e-12);
        assert_eq!(nmd(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0, 1.0]), 1.0);
        assert_eq!(nmd(&[0.1, 0.9], &[0.1, 0.9]), 0.0);
    }

    #[test]
    #[should_panic(expected = "at least two classes")]
    fn nmd_needs_two_classes() {
        nmd(&[1.0], &[1.0]);
    }

    #[test]
    fn ae_cases() {
        assert_eq!(ae(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(ae(&[0.5, 0.5], &[0.75, 0.25]), 0.25);
        assert_eq!(ae(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
    }

    #[test]
    #[should_panic(expected = "lengths")]
    fn length_mismatch() {
        ae(&[1.0], &[0.5, 0.5]);
    }

    #[test]
    fn hellinger_cases() {
        assert_eq!(hellinger(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!((hellinger(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        let expected = (((0.5f64).sqrt() - 1.0).powi(2) + 0.5).sqrt() / 2f64.sqrt();
        assert!((hellinger(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.5412).abs() < 1e-4);
    }

    #[test]
    #[should_panic(expected = "not normalized")]
    fn hellinger_rejects_unnormalized() {
        hellinger(&[0.5, 0.6], &[0.5, 0.5]);
    }

    #[test]
    fn report_summary() {
        let r = EvalReport::new("cc", LossKind::Ae, vec![0.1, 0.3]);
        assert!((r.mean - 0.2).abs() < 1e-15);
        assert!((r.std - 0.1).abs() < 1e-15);
        assert_eq!(r.to_csv(), "bag_id,loss\n0,0.1\n1,0.3\n");
    }
}

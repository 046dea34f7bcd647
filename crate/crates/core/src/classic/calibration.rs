//! Posterior recalibration: Platt scaling (binary) and temperature scaling (multiclass).

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const CLIP: f64 = 1e-12;
const MAX_NEWTON: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Calibration {
    /// `p₁' = σ(a·logit(p₁) + b)`.
    Platt { a: f64, b: f64 },
    /// `p' = softmax(log p / t)`.
    Temperature { t: f64 },
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(CLIP, 1.0 - CLIP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_rows(posteriors: &Tensor) -> Vec<Vec<f64>> {
    (0..posteriors.rows()).map(|i| posteriors.row(i).iter().map(|v| v.max(CLIP).ln()).collect()).collect()
}

/// NLL of `softmax(s·z)` and its first two derivatives in `s`.
fn temperature_nll(z: &[Vec<f64>], y: &[usize], s: f64) -> (f64, f64, f64) {
    let (mut f, mut g, mut h) = (0.0, 0.0, 0.0);
    for (zi, &yi) in z.iter().zip(y) {
        let mx = zi.iter().map(|v| s * v).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = zi.iter().map(|v| (s * v - mx).exp()).collect();
        let total: f64 = w.iter().sum();
        let mean: f64 = w.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>() / total;
        let second: f64 = w.iter().zip(zi).map(|(a, b)| a * b * b).sum::<f64>() / total;
        f += mx + total.ln() - s * zi[yi];
        g += mean - zi[yi];
        h += second - mean * mean;
    }
    let n = y.len() as f64;
    (f / n, g / n, h / n)
}

fn platt_nll(z: &[f64], y: &[usize], a: f64, b: f64) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&zi, &yi)| {
            let u = a * zi + b;
            // log(1 + e^u) − [y=1]·u
            let softplus = if u > 0.0 { u + (-u).exp().ln_1p() } else { u.exp().ln_1p() };
            softplus - if yi == 1 { u } else { 0.0 }
        })
        .sum::<f64>()
        / z.len() as f64
}

impl Calibration {
    /// Fits the map to out-of-fold posteriors by damped Newton steps on the NLL.
    pub fn fit(posteriors: &Tensor, labels: &[usize]) -> Result<Self> {
        let l = posteriors.cols();
        assert_eq!(posteriors.rows(), labels.len(), "calibration: {} labels for {} rows", labels.len(), posteriors.rows());
        let first = labels.first().copied();
        if l < 2 || first.is_none() || labels.iter().all(|&y| Some(y) == first) {
            return Err(Error::Validation("calibration needs examples from at least two classes".into()));
        }
        if l == 2 {
            Ok(Self::fit_platt(posteriors, labels))
        } else {
            Ok(Self::fit_temperature(posteriors, labels))
        }
    }

    fn fit_platt(posteriors: &Tensor, labels: &[usize]) -> Self {
        let z: Vec<f64> = (0..posteriors.rows()).map(|i| logit(posteriors.row(i)[1])).collect();
        let n = z.len() as f64;
        let (mut a, mut b) = (1.0, 0.0);
        let mut f = platt_nll(&z, labels, a, b);
        for _ in 0..MAX_NEWTON {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&zi, &yi) in z.iter().zip(labels) {
                let p = sigmoid(a * zi + b);
                let r = p - if yi == 1 { 1.0 } else { 0.0 };
                let w = p * (1.0 - p);
                ga += r * zi;
                gb += r;
                haa += w * zi * zi;
                hab += w * zi;
                hbb += w;
            }
            let (ga, gb) = (ga / n, gb / n);
            let (haa, hab, hbb) = (haa / n + 1e-12, hab / n, hbb / n + 1e-12);
            let det = haa * hbb - hab * hab;
            let (da, db) = if det > 1e-18 {
                ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
            } else {
                (ga, gb)
            };
            let mut step = 1.0;
            let mut improved = false;
            while step > 1e-10 {
                let (na, nb) = (a - step * da, b - step * db);
                let nf = platt_nll(&z, labels, na, nb);
                if nf <= f {
                    improved = f - nf > 1e-15;
                    a = na;
                    b = nb;
                    f = nf;
                    break;
                }
                step /= 2.0;
            }
            if !improved || (da.abs() + db.abs()) * step < 1e-12 {
                break;
            }
        }
        Calibration::Platt { a, b }
    }

    fn fit_temperature(posteriors: &Tensor, labels: &[usize]) -> Self {
        let z = log_rows(posteriors);
        let mut s = 1.0f64;
        let (mut f, _, _) = temperature_nll(&z, labels, s);
        for _ in 0..MAX_NEWTON {
            let (_, g, h) = temperature_nll(&z, labels, s);
            let delta = if h > 1e-12 { g / h } else { g };
            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-10 {
                let ns = (s - step * delta).max(1e-6);
                let (nf, _, _) = temperature_nll(&z, labels, ns);
                if nf <= f {
                    accepted = f - nf > 1e-15;
                    s = ns;
                    f = nf;
                    break;
                }
                step /= 2.0;
            }
            if !accepted || (delta * step).abs() < 1e-12 {
                break;
            }
        }
        Calibration::Temperature { t: 1.0 / s }
    }

    pub fn apply(&self, posteriors: &Tensor) -> Tensor {
        let (m, l) = (posteriors.rows(), posteriors.cols());
        let mut out = Vec::with_capacity(m * l);
        match *self {
            Calibration::Platt { a, b } => {
                assert_eq!(l, 2, "Platt calibration is binary, got {} classes", l);
                for i in 0..m {
                    let p1 = sigmoid(a * logit(posteriors.row(i)[1]) + b);
                    out.extend_from_slice(&[1.0 - p1, p1]);
                }
            }
            Calibration::Temperature { t } => {
                for i in 0..m {
                    let z: Vec<f64> = posteriors.row(i).iter().map(|v| v.max(CLIP).ln() / t).collect();
                    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                    let s: f64 = e.iter().sum();
                    out.extend(e.iter().map(|v| v / s));
                }
            }
        }
        Tensor::new([m, l], out)
    }
}

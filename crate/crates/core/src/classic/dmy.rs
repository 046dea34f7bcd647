//! Distribution matching over histograms of classifier posteriors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::solver::project_simplex;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::protocols::kraemer_sample;

pub const DMY_TOL: f64 = 1e-7;
pub const DMY_MAX_ITER: usize = 10_000;
pub const DMY_RESTARTS: usize = 10;

/// Histogram of each posterior coordinate, `b` bins over `[0, 1]`,
/// concatenated into one vector of length `l·b`. Each block sums to 1.
pub fn posterior_histogram(posteriors: &Tensor, bins: usize) -> Vec<f64> {
    assert!(bins >= 1, "histogram needs at least one bin");
    assert!(posteriors.rows() >= 1, "histogram of an empty posterior matrix");
    let (m, l) = (posteriors.rows(), posteriors.cols());
    let mut h = vec![0.0; l * bins];
    for i in 0..m {
        for (c, &v) in posteriors.row(i).iter().enumerate() {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            h[c * bins + b] += 1.0;
        }
    }
    h.iter_mut().for_each(|v| *v /= m as f64);
    h
}

/// Per-class histograms of cross-validated posteriors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorHistogramModel {
    pub bins: usize,
    pub classes: usize,
    /// One `l·b` histogram per true class.
    pub histograms: Vec<Vec<f64>>,
}

impl PosteriorHistogramModel {
    pub fn fit(posteriors: &Tensor, labels: &[usize], classes: usize, bins: usize) -> Result<Self> {
        let mut histograms = Vec::with_capacity(classes);
        for c in 0..classes {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                return Err(Error::Validation(format!("class {} has no examples for its posterior histogram", c)));
            }
            histograms.push(posterior_histogram(&posteriors.select_rows(&idx), bins));
        }
        Ok(PosteriorHistogramModel { bins, classes, histograms })
    }

    pub fn mixture(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.histograms[0].len()];
        for (pj, h) in p.iter().zip(&self.histograms) {
            for (o, v) in out.iter_mut().zip(h) {
                *o += pj * v;
            }
        }
        out
    }

    /// Mean Hellinger distance over posterior coordinates between the
    /// `p`-weighted training mixture and `target`.
    pub fn objective(&self, p: &[f64], target: &[f64]) -> f64 {
        let mix = self.mixture(p);
        let b = self.bins;
        let l = mix.len() / b;
        (0..l)
            .map(|c| {
                let s: f64 = (c * b..(c + 1) * b).map(|k| (mix[k].max(0.0).sqrt() - target[k].sqrt()).powi(2)).sum();
                (s / 2.0).sqrt()
            })
            .sum::<f64>()
            / l as f64
    }

    fn gradient(&self, p: &[f64], target: &[f64]) -> Vec<f64> {
        let mix = self.mixture(p);
        let b = self.bins;
        let l = mix.len() / b;
        let mut dmix = vec![0.0; mix.len()];
        for c in 0..l {
            let range = c * b..(c + 1) * b;
            let s: f64 = range.clone().map(|k| (mix[k].max(0.0).sqrt() - target[k].sqrt()).powi(2)).sum();
            let h = (s / 2.0).sqrt();
            if h <= 0.0 {
                continue;
            }
            for k in range {
                let sm = mix[k].max(1e-12).sqrt();
                dmix[k] = (1.0 - target[k].sqrt() / sm) / (4.0 * h * l as f64);
            }
        }
        self.histograms.iter().map(|hj| hj.iter().zip(&dmix).map(|(a, g)| a * g).sum()).collect()
    }

    /// Projected gradient with backtracking from `restarts` uniform starting points.
    pub fn estimate<R: Rng + ?Sized>(&self, target: &[f64], restarts: usize, rng: &mut R) -> Vec<f64> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..restarts.max(1) {
            let start = kraemer_sample(self.classes, rng).into_inner();
            let (f, p) = self.descend(start, target);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, p));
            }
        }
        best.unwrap().1
    }

    fn descend(&self, mut p: Vec<f64>, target: &[f64]) -> (f64, Vec<f64>) {
        let mut f = self.objective(&p, target);
        let mut step = 1.0;
        for _ in 0..DMY_MAX_ITER {
            let g = self.gradient(&p, target);
            let mut moved = false;
            let mut change = 0.0;
            while step > 1e-16 {
                let trial: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                let cand = project_simplex(&trial);
                let ft = self.objective(&cand, target);
                let lin: f64 = g.iter().zip(cand.iter().zip(&p)).map(|(gi, (c, o))| gi * (c - o)).sum();
                let dist: f64 = cand.iter().zip(&p).map(|(c, o)| (c - o).powi(2)).sum();
                if ft <= f + lin + dist / (2.0 * step) && ft <= f {
                    change = cand.iter().zip(&p).map(|(c, o)| (c - o).abs()).fold(0.0, f64::max);
                    p = cand;
                    f = ft;
                    moved = true;
                    break;
                }
                step /= 2.0;
            }
            if !moved || change < DMY_TOL {
                break;
            }
            step *= 2.0;
        }
        (f, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_blocks_are_normalized() {
        let post = Tensor::from_rows(&[[0.1, 0.9], [1.0, 0.0], [0.55, 0.45]]);
        let h = posterior_histogram(&post, 4);
        assert_eq!(h, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }
}

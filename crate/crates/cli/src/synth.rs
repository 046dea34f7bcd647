//! Synthetic prior-shift data: one isotropic Gaussian cluster per class.
//!
//! Class `c` is centered at `(separation·σ/√2)·e_c`, so any two centers are
//! `separation·σ` apart. Natural and test bags draw a Kraemer prevalence,
//! round it to counts and sample each class's share from its cluster.

use quantnet::data::{Bag, Dataset, Example, PrevalenceVector};
use quantnet::diffcore::Tensor;
use quantnet::protocols::{kraemer_sample, largest_remainder, stream_rng, QuantRng};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::config::GenConfig;
use crate::error::Result;

const EXAMPLE_STREAM: u64 = 1;
const BAG_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

/// A generated dataset plus its held-out test bags.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub test_bags: Vec<Bag>,
}

struct Clusters {
    centers: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl Clusters {
    fn new(cfg: &GenConfig) -> Self {
        let offset = cfg.separation * cfg.sigma / std::f64::consts::SQRT_2;
        let centers = (0..cfg.classes)
            .map(|c| (0..cfg.dim).map(|k| if k == c { offset } else { 0.0 }).collect())
            .collect();
        Clusters { centers, noise: Normal::new(0.0, cfg.sigma).expect("sigma validated") }
    }

    fn draw(&self, class: usize, rng: &mut QuantRng) -> Vec<f64> {
        self.centers[class].iter().map(|&mu| mu + self.noise.sample(rng)).collect()
    }

    /// Shuffled class labels with counts from largest-remainder rounding.
    fn labels(&self, p: &PrevalenceVector, n: usize, rng: &mut QuantRng) -> Vec<usize> {
        let counts = largest_remainder(p, n);
        let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
        labels.shuffle(rng);
        labels
    }

    fn bag(&self, l: usize, m: usize, rng: &mut QuantRng) -> Result<Bag> {
        let p = kraemer_sample(l, rng);
        let labels = self.labels(&p, m, rng);
        let rows: Vec<Vec<f64>> = labels.iter().map(|&y| self.draw(y, rng)).collect();
        Ok(Bag::labeled(Tensor::from_rows(&rows), labels, l)?)
    }
}

/// Deterministic in `seed`; each part of the dataset uses its own RNG stream.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Synthetic> {
    cfg.validate()?;
    let clusters = Clusters::new(cfg);
    let l = cfg.classes;

    let mut rng = stream_rng(seed, EXAMPLE_STREAM);
    let labels = clusters.labels(&PrevalenceVector::uniform(l), cfg.examples, &mut rng);
    let examples = labels
        .iter()
        .map(|&y| Example { features: clusters.draw(y, &mut rng), label: Some(y) })
        .collect();

    let mut rng = stream_rng(seed, BAG_STREAM);
    let bags = (0..cfg.bags).map(|_| clusters.bag(l, cfg.bag_size, &mut rng)).collect::<Result<Vec<_>>>()?;

    let mut rng = stream_rng(seed, TEST_STREAM);
    let test_bags = (0..cfg.test_bags).map(|_| clusters.bag(l, cfg.bag_size, &mut rng)).collect::<Result<Vec<_>>>()?;

    let dataset = Dataset { classes: l, feature_dim: cfg.dim, examples, bags };
    dataset.validate()?;
    Ok(Synthetic { dataset, test_bags })
}

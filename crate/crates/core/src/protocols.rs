//! Bag generation: uniform simplex sampling, APP bags, Bag Mixer, and the
//! per-epoch training stream.
//!
//! All randomness comes from ChaCha8 ([`rng_from_seed`]); a seed and a stream
//! index fully determine every draw on every platform.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset, PrevalenceVector};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// The generator used throughout the crate.
pub type QuantRng = ChaCha8Rng;

/// Name of the generator family, recorded in artifacts.
pub const RNG_ALGORITHM: &str = "chacha8";

pub fn rng_from_seed(seed: u64) -> QuantRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed` (used per epoch).
pub fn stream_rng(seed: u64, stream: u64) -> QuantRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Uniform draw from the `(l−1)`-simplex: sorted uniforms, consecutive gaps.
pub fn kraemer_sample<R: Rng + ?Sized>(l: usize, rng: &mut R) -> PrevalenceVector {
    assert!(l >= 1, "simplex over zero classes");
    let mut cuts: Vec<f64> = (0..l - 1).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut values = Vec::with_capacity(l);
    let mut prev = 0.0;
    for c in cuts.into_iter().chain(std::iter::once(1.0)) {
        values.push(c - prev);
        prev = c;
    }
    PrevalenceVector::new(values).expect("gaps of sorted uniforms lie on the simplex")
}

/// Integer class counts summing to `m`: floors of `m·p`, with leftover units
/// assigned by largest remainder (lowest class index wins ties).
pub fn largest_remainder(p: &PrevalenceVector, m: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.as_slice().iter().map(|&v| v * m as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(m.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Example-labeled features indexed by class, for class-conditional sampling.
#[derive(Clone, Debug)]
pub struct LabeledPool {
    features: Tensor,
    by_class: Vec<Vec<usize>>,
}

impl LabeledPool {
    pub fn new(features: Tensor, labels: &[usize], classes: usize) -> Self {
        assert_eq!(features.rows(), labels.len(), "pool: {} rows but {} labels", features.rows(), labels.len());
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        LabeledPool { features, by_class }
    }

    pub fn from_dataset(ds: &Dataset) -> Option<Self> {
        let (x, y) = ds.labeled_matrix()?;
        Some(LabeledPool::new(x, &y, ds.classes))
    }

    pub fn classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_size(&self, c: usize) -> usize {
        self.by_class[c].len()
    }
}

/// APP bag: `m` examples drawn with replacement, class counts from
/// largest-remainder rounding of `m·prevalence`, labeled by the realized counts.
pub fn sample_bag_app<R: Rng + ?Sized>(
    pool: &LabeledPool,
    prevalence: &PrevalenceVector,
    m: usize,
    rng: &mut R,
) -> Result<Bag> {
    assert!(m >= 1, "bag size must be >= 1");
    assert_eq!(prevalence.len(), pool.classes(), "prevalence has {} classes, pool has {}", prevalence.len(), pool.classes());
    let counts = largest_remainder(prevalence, m);
    let mut rows = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let members = &pool.by_class[c];
        if members.is_empty() {
            return Err(Error::Protocol(format!("class {} needs {} examples but has none", c, n)));
        }
        for _ in 0..n {
            rows.push(members[rng.random_range(0..members.len())]);
            labels.push(c);
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let rows: Vec<usize> = order.iter().map(|&i| rows[i]).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    Bag::labeled(pool.features.select_rows(&rows), labels, pool.classes())
}

/// Bag Mixer: `⌈m/2⌉` examples of `a` and `⌊m/2⌋` of `b`, each drawn without
/// replacement, labeled with the mean of the parents' prevalences.
pub fn bag_mixer<R: Rng + ?Sized>(a: &Bag, b: &Bag, rng: &mut R) -> Bag {
    assert_eq!(a.size(), b.size(), "bag mixer: sizes {} and {} differ", a.size(), b.size());
    assert_eq!(a.dim(), b.dim(), "bag mixer: dimensions {} and {} differ", a.dim(), b.dim());
    let (pa, pb) = match (&a.prevalence, &b.prevalence) {
        (Some(pa), Some(pb)) => (pa, pb),
        _ => panic!("bag mixer needs prevalence-labeled parents"),
    };
    let m = a.size();
    let take_a = m.div_ceil(2);
    let ia = index::sample(rng, m, take_a).into_vec();
    let ib = index::sample(rng, m, m - take_a).into_vec();
    let mut data = Vec::with_capacity(m * a.dim());
    for &i in &ia {
        data.extend_from_slice(a.features.row(i));
    }
    for &i in &ib {
        data.extend_from_slice(b.features.row(i));
    }
    Bag {
        features: Tensor::new([m, a.dim()], data),
        prevalence: Some(pa.midpoint(pb)),
        labels: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Size of generated APP bags; defaults to the natural bag size.
    pub bag_size: Option<usize>,
    /// Bags per epoch; defaults to keeping one slot per natural bag.
    pub bags_per_epoch: Option<usize>,
    pub mixer_enabled: bool,
    /// Chance that a natural slot is replaced by a mixed bag.
    pub mixer_prob: f64,
    pub app_enabled: bool,
    pub app_fraction: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            bag_size: None,
            bags_per_epoch: None,
            mixer_enabled: true,
            mixer_prob: 0.5,
            app_enabled: false,
            app_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Per-epoch bag source for the deep trainer (U or U+APP setting).
#[derive(Clone, Debug)]
pub struct TrainingStream {
    natural: Vec<Bag>,
    pool: Option<LabeledPool>,
    config: SamplingConfig,
    bag_size: usize,
    app_generated: usize,
}

impl TrainingStream {
    pub fn new(natural: Vec<Bag>, pool: Option<LabeledPool>, config: SamplingConfig) -> Result<Self> {
        if config.app_enabled && pool.is_none() {
            return Err(Error::Config("U+APP setting requires example-labeled data".into()));
        }
        if !config.app_enabled && natural.is_empty() {
            return Err(Error::Config("U setting requires prevalence-labeled bags".into()));
        }
        if natural.iter().any(|b| b.prevalence.is_none()) {
            return Err(Error::Config("training bags must carry prevalence labels".into()));
        }
        if !(0.0..=1.0).contains(&config.app_fraction) || !(0.0..=1.0).contains(&config.mixer_prob) {
            return Err(Error::Config("app_fraction and mixer_prob must lie in [0, 1]".into()));
        }
        let bag_size = config
            .bag_size
            .or_else(|| natural.first().map(Bag::size))
            .ok_or_else(|| Error::Config("bag_size is required when there are no natural bags".into()))?;
        if bag_size == 0 {
            return Err(Error::Config("bag_size must be >= 1".into()));
        }
        Ok(TrainingStream { natural, pool, config, bag_size, app_generated: 0 })
    }

    pub fn bags_per_epoch(&self) -> usize {
        self.config.bags_per_epoch.unwrap_or_else(|| {
            let n = self.natural.len();
            if self.config.app_enabled {
                if self.config.app_fraction >= 1.0 || n == 0 {
                    n.max(1) * 2
                } else {
                    (n as f64 / (1.0 - self.config.app_fraction)).round() as usize
                }
            } else {
                n
            }
        })
    }

    pub fn app_bags_per_epoch(&self) -> usize {
        if !self.config.app_enabled {
            return 0;
        }
        if self.natural.is_empty() {
            return self.bags_per_epoch();
        }
        (self.config.app_fraction * self.bags_per_epoch() as f64).round() as usize
    }

    /// Total APP bags produced so far.
    pub fn app_generated(&self) -> usize {
        self.app_generated
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    /// Bags for `epoch`; a pure function of the seed and epoch index.
    pub fn epoch(&mut self, epoch: usize) -> Result<Vec<Bag>> {
        let mut rng = stream_rng(self.config.seed, epoch as u64);
        let total = self.bags_per_epoch();
        let n_app = self.app_bags_per_epoch().min(total);
        let n_nat = total - n_app;

        let mut slots: Vec<bool> = std::iter::repeat_n(true, n_app).chain(std::iter::repeat_n(false, n_nat)).collect();
        slots.shuffle(&mut rng);

        let mut natural_order: Vec<usize> = Vec::with_capacity(n_nat);
        while natural_order.len() < n_nat {
            let mut pass: Vec<usize> = (0..self.natural.len()).collect();
            pass.shuffle(&mut rng);
            natural_order.extend(pass);
        }
        natural_order.truncate(n_nat);
        let mut next_natural = natural_order.into_iter();

        let mut out = Vec::with_capacity(total);
        for is_app in slots {
            if is_app {
                let pool = self.pool.as_ref().expect("checked at construction");
                let p = kraemer_sample(pool.classes(), &mut rng);
                out.push(sample_bag_app(pool, &p, self.bag_size, &mut rng)?);
                self.app_generated += 1;
            } else {
                let i = next_natural.next().expect("enough natural slots");
                let bag = &self.natural[i];
                if self.config.mixer_enabled && rng.random::<f64>() < self.config.mixer_prob {
                    let j = rng.random_range(0..self.natural.len());
                    let partner = &self.natural[j];
                    if partner.size() == bag.size() {
                        out.push(bag_mixer(bag, partner, &mut rng));
                        continue;
                    }
                }
                out.push(bag.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> LabeledPool {
        let x = Tensor::from_rows(&[[0.0], [0.1], [1.0], [1.1], [2.0]]);
        LabeledPool::new(x, &[0, 0, 1, 1, 2], 3)
    }

    #[test]
    fn degenerate_simplex() {
        let mut r = rng_from_seed(1);
        assert_eq!(kraemer_sample(1, &mut r).as_slice(), &[1.0]);
    }

    #[test]
    fn largest_remainder_tie_goes_to_lowest_class() {
        let p = PrevalenceVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(largest_remainder(&p, 3), vec![2, 1]);
        let p = PrevalenceVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(largest_remainder(&p, 7), vec![1, 2, 4]);
    }

    #[test]
    fn app_bag_with_one_hot_prevalence() {
        let mut r = rng_from_seed(2);
        let p = PrevalenceVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let b = sample_bag_app(&pool(), &p, 5, &mut r).unwrap();
        assert_eq!(b.labels.as_ref().unwrap(), &vec![0; 5]);
        assert_eq!(b.prevalence.unwrap().as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn app_bag_half_half_of_three() {
        let x = Tensor::from_rows(&[[0.0], [1.0]]);
        let pool = LabeledPool::new(x, &[0, 1], 2);
        let mut r = rng_from_seed(3);
        let p = PrevalenceVector::new(vec![0.5, 0.5]).unwrap();
        let b = sample_bag_app(&pool, &p, 3, &mut r).unwrap();
        let y = b.labels.clone().unwrap();
        assert_eq!(y.iter().filter(|&&c| c == 0).count(), 2);
        assert_eq!(b.prevalence.as_ref().unwrap().as_slice(), &[2.0 / 3.0, 1.0 / 3.0]);
        assert!(b.is_consistent());
    }

    #[test]
    fn app_bag_missing_class_errors() {
        let x = Tensor::from_rows(&[[0.0]]);
        let pool = LabeledPool::new(x, &[0], 2);
        let p = PrevalenceVector::new(vec![0.5, 0.5]).unwrap();
        let err = sample_bag_app(&pool, &p, 4, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn mixer_labels() {
        let a = Bag::new(Tensor::from_rows(&[[0.0], [1.0], [2.0]]), Some(PrevalenceVector::one_hot(2, 0))).unwrap();
        let b = Bag::new(Tensor::from_rows(&[[5.0], [6.0], [7.0]]), Some(PrevalenceVector::one_hot(2, 1))).unwrap();
        let mut r = rng_from_seed(4);
        let mix = bag_mixer(&a, &b, &mut r);
        assert_eq!(mix.prevalence.as_ref().unwrap().as_slice(), &[0.5, 0.5]);
        let from_a = mix.features.data().iter().filter(|&&v| v < 5.0).count();
        assert_eq!(from_a, 2);
        let same = bag_mixer(&a, &a, &mut r);
        assert_eq!(same.prevalence, a.prevalence);
    }

    #[test]
    #[should_panic(expected = "sizes")]
    fn mixer_size_mismatch() {
        let a = Bag::new(Tensor::from_rows(&[[0.0], [1.0]]), Some(PrevalenceVector::one_hot(2, 0))).unwrap();
        let b = Bag::new(Tensor::from_rows(&[[5.0]]), Some(PrevalenceVector::one_hot(2, 1))).unwrap();
        bag_mixer(&a, &b, &mut rng_from_seed(0));
    }

    #[test]
    fn app_requires_labels() {
        let cfg = SamplingConfig { app_enabled: true, ..Default::default() };
        let natural = vec![Bag::new(Tensor::from_rows(&[[0.0]]), Some(PrevalenceVector::one_hot(2, 0))).unwrap()];
        assert!(matches!(TrainingStream::new(natural, None, cfg), Err(Error::Config(_))));
    }
}

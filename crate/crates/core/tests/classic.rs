use proptest::prelude::*;
use quantnet::classic::{
    acc, cc, cv_predictions, emq, pacc, pcc, posterior_histogram, project_simplex, solve_simplex_ls,
    stratified_folds, Calibration, ClassicConfig, ClassicMethod, ClassicQuantifier, ClassifierConfig,
    ConfusionEstimate, ConfusionSource, LogisticRegression, PosteriorHistogramModel,
};
use quantnet::diffcore::Tensor;
use quantnet::protocols::{kraemer_sample, rng_from_seed, QuantRng};
use quantnet::Error;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn blobs(n_per_class: &[usize], d: usize, sep: f64, rng: &mut QuantRng) -> (Tensor, Vec<usize>) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (c, &n) in n_per_class.iter().enumerate() {
        for _ in 0..n {
            let row: Vec<f64> =
                (0..d).map(|k| normal.sample(rng) + if k == c % d { sep } else { 0.0 }).collect();
            rows.push(row);
            y.push(c);
        }
    }
    (Tensor::from_rows(&rows), y)
}

fn random_column_stochastic(l: usize, rng: &mut QuantRng) -> Tensor {
    // diagonally dominant columns keep the matrix well conditioned
    let mut m = Tensor::zeros([l, l]);
    for j in 0..l {
        let mut col: Vec<f64> = (0..l).map(|i| rng.random::<f64>() + if i == j { l as f64 } else { 0.0 }).collect();
        let s: f64 = col.iter().sum();
        col.iter_mut().for_each(|v| *v /= s);
        for (i, v) in col.into_iter().enumerate() {
            m.data_mut()[i * l + j] = v;
        }
    }
    m
}

fn matvec(c: &Tensor, p: &[f64]) -> Vec<f64> {
    (0..c.rows()).map(|i| c.row(i).iter().zip(p).map(|(a, b)| a * b).sum()).collect()
}

fn interior(l: usize, rng: &mut QuantRng) -> Vec<f64> {
    loop {
        let p = kraemer_sample(l, rng).into_inner();
        if p.iter().all(|&v| v > 0.02) {
            return p;
        }
    }
}

#[test]
fn separable_data_is_fit_perfectly() {
    let x = Tensor::from_rows(&[[-3.0], [-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0], [3.0]]);
    let y = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let model = LogisticRegression::fit(&x, &y, 2, &ClassifierConfig::default()).unwrap();
    assert_eq!(model.predict(&x), y);
    let again = LogisticRegression::fit(&x, &y, 2, &ClassifierConfig::default()).unwrap();
    assert_eq!(model, again);
}

#[test]
fn predict_proba_rows_sum_to_one() {
    let mut rng = rng_from_seed(0);
    let (x, y) = blobs(&[30, 30, 30], 4, 1.0, &mut rng);
    let model = LogisticRegression::fit(&x, &y, 3, &ClassifierConfig::default()).unwrap();
    let probe = Tensor::new([5, 4], vec![100.0, -50.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, -1e3, 1e3, 0.0, 7.0, 0.1, 0.2, 0.3, 0.4]);
    let p = model.predict_proba(&probe);
    for i in 0..5 {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn missing_class_is_an_error() {
    let x = Tensor::from_rows(&[[0.0], [1.0]]);
    assert!(matches!(LogisticRegression::fit(&x, &[0, 0], 2, &ClassifierConfig::default()), Err(Error::Validation(_))));
}

#[test]
fn folds_partition_and_cover() {
    let y = vec![0, 1, 0, 1];
    let mut rng = rng_from_seed(1);
    let cv = cv_predictions(&Tensor::from_rows(&[[0.0], [1.0], [0.1], [0.9]]), &y, 2, 2, &ClassifierConfig::default(), &mut rng)
        .unwrap();
    assert_eq!(cv.posteriors.rows(), 4);
    let mut per_fold = [0, 0];
    for &f in &cv.folds {
        per_fold[f] += 1;
    }
    assert_eq!(per_fold, [2, 2]);

    let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
    let a = stratified_folds(&labels, 3, 5, &mut rng_from_seed(9)).unwrap();
    let b = stratified_folds(&labels, 3, 5, &mut rng_from_seed(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&f| f < 5));
    assert!(matches!(stratified_folds(&[0, 0, 1], 2, 2, &mut rng_from_seed(0)), Err(Error::Fold(_))));
}

#[test]
fn cc_examples() {
    let post = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8], [0.4, 0.6]]);
    assert_eq!(cc(&post).as_slice(), &[1.0 / 3.0, 2.0 / 3.0]);
    let same = Tensor::from_rows(&[[0.3, 0.7], [0.3, 0.7]]);
    assert_eq!(cc(&same).as_slice(), &[0.0, 1.0]);
    assert_eq!(cc(&Tensor::from_rows(&[[0.5, 0.5]])).as_slice(), &[1.0, 0.0]);
}

#[test]
fn pcc_examples() {
    let p = pcc(&Tensor::from_rows(&[[0.7, 0.3], [0.5, 0.5]]));
    assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15);
    assert_eq!(pcc(&Tensor::from_rows(&[[0.25, 0.75]])).as_slice(), &[0.25, 0.75]);
}

#[test]
fn acc_with_identity_confusion_is_cc() {
    let post = Tensor::from_rows(&[[0.9, 0.05, 0.05], [0.2, 0.7, 0.1], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]]);
    let conf = ConfusionEstimate { matrix: Tensor::identity(3), source: ConfusionSource::Hard };
    let a = acc(&post, &conf);
    for (x, y) in a.as_slice().iter().zip(cc(&post).as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
    let b = pacc(&post, &ConfusionEstimate { matrix: Tensor::identity(3), source: ConfusionSource::Soft });
    for (x, y) in b.as_slice().iter().zip(pcc(&post).as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn binary_acc_hand_case() {
    // rows: predicted negative / positive; columns: true negative / positive
    let c = Tensor::from_rows(&[[0.8, 0.1], [0.2, 0.9]]);
    let sol = solve_simplex_ls(&c, &[0.45, 0.55]);
    assert!((sol.p[1] - 0.5).abs() < 1e-9, "{:?}", sol);
}

#[test]
fn solver_recovers_synthesized_prevalence() {
    let mut rng = rng_from_seed(21);
    for trial in 0..100 {
        let l = [2, 3, 5][trial % 3];
        let c = random_column_stochastic(l, &mut rng);
        let p = interior(l, &mut rng);
        let sol = solve_simplex_ls(&c, &matvec(&c, &p));
        let err = sol.p.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "trial {}: error {}", trial, err);
    }
}

#[test]
fn emq_examples() {
    let flat = Tensor::from_rows(&[[0.3, 0.7], [0.3, 0.7]]);
    let r = emq(&flat, &[0.3, 0.7], 1000, 1e-6);
    assert_eq!(r.iterations, 1);
    assert!((r.prevalence[0] - 0.3).abs() < 1e-15);

    let post = Tensor::from_rows(&[[0.9, 0.1], [0.7, 0.3]]);
    let r = emq(&post, &[0.5, 0.5], 1000, 1e-6);
    assert!((r.priors[0][0] - 0.8).abs() < 1e-12 && (r.priors[0][1] - 0.2).abs() < 1e-12);
    for p in &r.priors {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn emq_likelihood_never_decreases() {
    let mut rng = rng_from_seed(5);
    for _ in 0..50 {
        let l = rng.random_range(2..6);
        let m = rng.random_range(1..40);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| kraemer_sample(l, &mut rng).into_inner().iter().map(|v| v * 0.98 + 0.02 / l as f64).collect()).collect();
        let prior = interior(l, &mut rng);
        let r = emq(&Tensor::from_rows(&rows), &prior, 500, 1e-9);
        for w in r.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{:?}", r.log_likelihood);
        }
    }
}

#[test]
fn dmy_on_disjoint_histograms_recovers_mixture() {
    let model = PosteriorHistogramModel {
        bins: 4,
        classes: 2,
        histograms: vec![vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5], vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0]],
    };
    let mut rng = rng_from_seed(2);
    for &p in &[0.1, 0.37, 0.5, 0.83] {
        let target = model.mixture(&[p, 1.0 - p]);
        let est = model.estimate(&target, 10, &mut rng);
        assert!((est[0] - p).abs() < 1e-3, "{} vs {:?}", p, est);
    }
}

#[test]
fn dmy_true_mixture_beats_random_probes() {
    let mut rng = rng_from_seed(3);
    let post = Tensor::new([60, 3], (0..60).flat_map(|_| kraemer_sample(3, &mut rng).into_inner()).collect());
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let model = PosteriorHistogramModel::fit(&post, &labels, 3, 8).unwrap();
    let p = [0.2, 0.5, 0.3];
    let target = model.mixture(&p);
    let at_truth = model.objective(&p, &target);
    for _ in 0..1000 {
        let probe = kraemer_sample(3, &mut rng).into_inner();
        assert!(model.objective(&probe, &target) >= at_truth);
    }
}

#[test]
fn dmy_pure_bag_concentrates_on_its_class() {
    let mut rng = rng_from_seed(8);
    let (x, y) = blobs(&[200, 200, 200], 3, 5.0, &mut rng);
    let q = ClassicQuantifier::fit(ClassicMethod::Dmy, &x, &y, 3, &ClassicConfig::default()).unwrap();
    for c in 0..3 {
        let (bag, _) = blobs(&[if c == 0 { 50 } else { 0 }, if c == 1 { 50 } else { 0 }, if c == 2 { 50 } else { 0 }], 3, 5.0, &mut rng);
        let p = q.quantify(&bag);
        assert!(p[c] >= 0.9, "class {}: {:?}", c, p);
    }
}

#[test]
fn calibrated_scores_keep_temperature_near_one() {
    let mut rng = rng_from_seed(12);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..5000 {
        let p = kraemer_sample(4, &mut rng).into_inner();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut y = 3;
        for (c, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                y = c;
                break;
            }
        }
        rows.push(p);
        labels.push(y);
    }
    let post = Tensor::from_rows(&rows);
    match Calibration::fit(&post, &labels).unwrap() {
        Calibration::Temperature { t } => assert!((0.9..=1.1).contains(&t), "t = {}", t),
        other => panic!("expected temperature scaling, got {:?}", other),
    }
    let scaled = Calibration::Temperature { t: 2.5 }.apply(&post);
    for i in 0..post.rows() {
        assert!((scaled.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let am = |r: &[f64]| (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b });
        assert_eq!(am(scaled.row(i)), am(post.row(i)));
    }
}

#[test]
fn calibrated_binary_scores_keep_platt_near_identity() {
    let mut rng = rng_from_seed(13);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..5000 {
        let p1: f64 = rng.random_range(0.02..0.98);
        rows.push(vec![1.0 - p1, p1]);
        labels.push(usize::from(rng.random::<f64>() < p1));
    }
    match Calibration::fit(&Tensor::from_rows(&rows), &labels).unwrap() {
        Calibration::Platt { a, b } => assert!((a - 1.0).abs() < 0.1 && b.abs() < 0.1, "a={} b={}", a, b),
        other => panic!("expected Platt scaling, got {:?}", other),
    }
}

#[test]
fn single_class_calibration_is_an_error() {
    let post = Tensor::from_rows(&[[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]]);
    assert!(Calibration::fit(&post, &[2, 2]).is_err());
}

#[test]
fn every_method_fits_and_stays_on_the_simplex() {
    let mut rng = rng_from_seed(30);
    let (x, y) = blobs(&[120, 80, 100], 4, 2.0, &mut rng);
    let (bag, truth) = blobs(&[10, 50, 40], 4, 2.0, &mut rng);
    let truth = quantnet::data::PrevalenceVector::from_labels(&truth, 3);
    for method in ClassicMethod::ALL {
        let q = ClassicQuantifier::fit(method, &x, &y, 3, &ClassicConfig::default()).unwrap();
        let p = q.quantify(&bag);
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let err = quantnet::metrics::ae(truth.as_slice(), p.as_slice());
        assert!(err < 0.15, "{}: ae {} ({:?})", method, err, p);
        let json = serde_json::to_string(&q).unwrap();
        let back: ClassicQuantifier = serde_json::from_str(&json).unwrap();
        assert_eq!(back.quantify(&bag), p);
    }
    let cc_only = ClassicQuantifier::fit(ClassicMethod::Cc, &x, &y, 3, &ClassicConfig::default()).unwrap();
    assert!(cc_only.confusion.is_none() && cc_only.histograms.is_none() && cc_only.calibration.is_none());
}

#[test]
fn cc_and_pcc_ignore_example_order() {
    let mut rng = rng_from_seed(40);
    let post = Tensor::new([25, 3], (0..25).flat_map(|_| kraemer_sample(3, &mut rng).into_inner()).collect());
    let base_cc = cc(&post);
    let base_pcc = pcc(&post);
    let hist = posterior_histogram(&post, 8);
    for _ in 0..50 {
        let mut order: Vec<usize> = (0..25).collect();
        order.shuffle(&mut rng);
        let shuffled = post.select_rows(&order);
        assert_eq!(cc(&shuffled), base_cc);
        assert_eq!(pcc(&shuffled), base_pcc);
        assert_eq!(posterior_histogram(&shuffled, 8), hist);
    }
}

proptest! {
    #[test]
    fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_columns_sum_to_one(seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        let n = 30;
        let post = Tensor::new([n, 3], (0..n).flat_map(|_| kraemer_sample(3, &mut rng).into_inner()).collect());
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let hard: Vec<usize> = (0..n).map(|i| quantnet::classic::argmax(post.row(i))).collect();
        for conf in [ConfusionEstimate::from_soft(&post, &labels, 3), ConfusionEstimate::from_hard(&hard, &labels, 3)] {
            for j in 0..3 {
                let s: f64 = (0..3).map(|i| conf.matrix.get2(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

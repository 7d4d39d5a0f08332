#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use fscil::data::{generate_synthetic, FullData, SessionPlan, SyntheticSpec};
use fscil::nn::{Classifier, Extractor, ExtractorConfig, Group, Mode, ModelState};
use fscil::numcore::{finite_diff_grad, relative_error, Rng, Tensor2D};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// A random tiny network with every group populated, plus a batch.
pub struct TinyCase {
    pub model: ModelState,
    pub x: Tensor2D,
    pub labels: Vec<usize>,
    pub eps: f64,
}

pub fn param_count(m: &ModelState) -> usize {
    Group::ALL.iter().map(|&g| m.group_flat(g).len()).sum()
}

/// Builds a random network with at most 3 linear layers and at most 64
/// parameters, two novel sessions appended so `Previous` is non-empty.
pub fn tiny_case(seed: u64) -> TinyCase {
    let mut rng = Rng::new(seed);
    loop {
        let input_dim = 2 + rng.below(3);
        let hidden: Vec<usize> = (0..rng.below(3)).map(|_| 2 + rng.below(2)).collect();
        let feature_dim = 2 + rng.below(2);
        let cfg = ExtractorConfig {
            input_dim,
            hidden,
            feature_dim,
            norm_momentum: 0.1,
            final_relu: rng.below(2) == 0,
        };
        let base_classes = 2 + rng.below(2);
        let extractor = Extractor::new(&cfg, &mut rng).unwrap();
        let base = Classifier::random(base_classes, feature_dim, 1.0, &mut rng);
        let mut model = ModelState::new(extractor, base).unwrap();
        for _ in 0..2 {
            let n = 1 + rng.below(2);
            model
                .push_novel(Classifier::random(n, feature_dim, 1.0, &mut rng))
                .unwrap();
        }
        if param_count(&model) > 64 {
            continue;
        }
        // move every parameter off its structured initialization
        for g in Group::ALL {
            let v: Vec<f64> = model
                .group_flat(g)
                .iter()
                .map(|p| p + 0.5 * rng.normal())
                .collect();
            model.set_group_flat(g, &v).unwrap();
        }
        let batch = 6;
        let x = Tensor2D::from_vec(
            batch,
            input_dim,
            (0..batch * input_dim).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let classes = model.num_classes();
        let labels = (0..batch).map(|_| rng.below(classes)).collect();
        let eps = [0.0, 0.1, 0.3][rng.below(3)];
        return TinyCase {
            model,
            x,
            labels,
            eps,
        };
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over the four parameter groups.
pub fn max_grad_error(case: &TinyCase) -> f64 {
    let analytic = case
        .model
        .clone()
        .loss_and_grads(&case.x, &case.labels, case.eps, Mode::Train, true)
        .unwrap()
        .grads;
    Group::ALL
        .iter()
        .map(|&g| {
            let a = analytic
                .group_slices(g)
                .expect("extractor grads requested")
                .concat();
            let p = case.model.group_flat(g);
            let fd = finite_diff_grad(
                |q| {
                    let mut m = case.model.clone();
                    m.set_group_flat(g, q).unwrap();
                    m.loss_and_grads(&case.x, &case.labels, case.eps, Mode::Train, false)
                        .unwrap()
                        .loss
                },
                &p,
                FD_STEP,
            );
            relative_error(&a, &fd, 1e-6)
        })
        .fold(0.0, f64::max)
}

pub fn hash_f64s<'a>(slices: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h = DefaultHasher::new();
    for s in slices {
        for v in s {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Byte hash of `h¹..h^(n)` for the first `n` novel classifiers.
pub fn novel_digest(m: &ModelState, n: usize) -> u64 {
    hash_f64s(m.novel[..n].iter().map(|c| c.weight.as_slice()))
}

pub fn synthetic(plan: &SessionPlan, spec: &SyntheticSpec) -> FullData {
    generate_synthetic(spec, plan, &mut Rng::new(plan.seed)).unwrap()
}

/// Brute-force cosine-nearest-prototype prediction; ties and zero vectors
/// resolve to the lowest class index.
pub fn cosine_nearest(feature: &[f64], prototypes: &[Vec<f64>]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf = norm(feature);
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, p) in prototypes.iter().enumerate() {
        let np = norm(p);
        let dot: f64 = feature.iter().zip(p).map(|(a, b)| a * b).sum();
        let sim = if nf > 0.0 && np > 0.0 {
            dot / (nf * np)
        } else {
            0.0
        };
        if sim > best_sim {
            best_sim = sim;
            best = c;
        }
    }
    best
}

/// Per-class mean of `features` rows, computed with plain loops.
pub fn class_mean_rows(
    features: &Tensor2D,
    labels: &[usize],
    classes: std::ops::Range<usize>,
) -> Vec<Vec<f64>> {
    classes
        .map(|c| {
            let mut sum = vec![0.0; features.cols()];
            let mut n = 0usize;
            for (r, &l) in labels.iter().enumerate() {
                if l == c {
                    for (s, v) in sum.iter_mut().zip(features.row(r)) {
                        *s += v;
                    }
                    n += 1;
                }
            }
            assert!(n > 0, "class {c} has no samples");
            sum.into_iter().map(|s| s / n as f64).collect()
        })
        .collect()
}

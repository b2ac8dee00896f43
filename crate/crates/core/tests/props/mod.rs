//! Property suites shared by the `properties` test target and the
//! acceptance run.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use saliency_sanity::analysis::sobel_edges;
use saliency_sanity::data::{self, LabeledDataset};
use saliency_sanity::metrics::{compare, spearman, MetricConfig, MetricId};
use saliency_sanity::models::{ArchitectureId, Scale};
use saliency_sanity::saliency::{
    self, normalize, BaseMethod, IgConfig, IgVariant, Method, MethodConfig, NoiseScale, SaliencyMap, SmoothingConfig,
};
use saliency_sanity::training::permute_labels;
use saliency_sanity::{Model, Tensor};

fn map(values: Vec<f64>, side: usize) -> SaliencyMap {
    SaliencyMap {
        values: Tensor::new(vec![side, side], values).unwrap(),
        method: Method::Base(BaseMethod::Gradient),
        class: 0,
        normalized: false,
        degenerate: false,
    }
}

/// A non-constant 16x16 map whose max-abs is bounded away from zero.
fn map16() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 256).prop_filter("non-constant", |v| {
        let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        max > 1e-3 && v.iter().any(|&x| x != v[0])
    })
}

fn non_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

const ALL_METRICS: [MetricId; 4] = [MetricId::SpearmanAbs, MetricId::SpearmanNoAbs, MetricId::Ssim, MetricId::HogPearson];

fn cfg16() -> MetricConfig {
    MetricConfig {
        hog_cell: Some(4),
        ..MetricConfig::default()
    }
}

/// Runs `f` on `cases` deterministic draws from `strategy`.
fn check<S: Strategy>(cases: u32, strategy: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, f).map_err(|e| e.to_string())
}

pub fn spearman_is_symmetric_and_bounded() -> Result<(), String> {
    check(64, (prop::collection::vec(-5.0f64..5.0, 2..40), any::<u64>()), |(a, seed)| {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 60)) & 1) as f64 - (i as f64).sin()).collect();
        for abs in [false, true] {
            let ab = spearman(&a, &b, abs).unwrap();
            let ba = spearman(&b, &a, abs).unwrap();
            prop_assert_eq!(ab.value.to_bits(), ba.value.to_bits());
            prop_assert!((-1.0..=1.0).contains(&ab.value));
        }
        Ok(())
    })
}

pub fn spearman_ignores_strictly_increasing_transforms() -> Result<(), String> {
    check(64, (prop::collection::vec(-3.0f64..3.0, 3..50), prop::collection::vec(-3.0f64..3.0, 50)), |(a, b)| {
        prop_assume!(non_constant(&a));
        let b = &b[..a.len()];
        prop_assume!(non_constant(b));
        let before = spearman(&a, b, false).unwrap().value;
        let fa: Vec<f64> = a.iter().map(|x| x.exp() + x * x * x).collect();
        let fb: Vec<f64> = b.iter().map(|x| 2.0 * x - 7.0).collect();
        let after = spearman(&fa, &fb, false).unwrap().value;
        prop_assert!((before - after).abs() < 1e-12, "{} vs {}", before, after);
        Ok(())
    })
}

pub fn every_metric_is_one_on_identical_maps() -> Result<(), String> {
    check(64, map16(), |v| {
        let m = map(v, 16);
        for metric in ALL_METRICS {
            let r = compare(&m, &m, metric, &cfg16()).unwrap();
            prop_assert!(!r.degenerate);
            prop_assert!((r.value - 1.0).abs() < 1e-12, "{:?}: {}", metric, r.value);
        }
        Ok(())
    })
}

pub fn sign_flip_leaves_abs_metrics_at_one() -> Result<(), String> {
    check(64, map16(), |v| {
        let m = map(v.clone(), 16);
        let neg = map(v.iter().map(|x| -x).collect(), 16);
        for metric in [MetricId::SpearmanAbs, MetricId::HogPearson] {
            let r = compare(&m, &neg, metric, &cfg16()).unwrap();
            prop_assert!((r.value - 1.0).abs() < 1e-9, "{:?}: {}", metric, r.value);
        }
        Ok(())
    })
}

pub fn metrics_ignore_positive_rescaling() -> Result<(), String> {
    check(64, (map16(), map16(), 1e-3f64..1e3), |(a, b, c)| {
        let (ma, mb) = (map(a.clone(), 16), map(b.clone(), 16));
        let (sa, sb) = (map(a.iter().map(|x| x * c).collect(), 16), map(b.iter().map(|x| x * c).collect(), 16));
        for metric in ALL_METRICS {
            let before = compare(&ma, &mb, metric, &cfg16()).unwrap().value;
            let after = compare(&sa, &sb, metric, &cfg16()).unwrap().value;
            prop_assert!((before - after).abs() < 1e-9, "{:?}: {} vs {}", metric, before, after);
        }
        Ok(())
    })
}

pub fn normalization_bounds() -> Result<(), String> {
    check(64, prop::collection::vec(-1e6f64..1e6, 1..100), |v| {
        let n = v.len();
        let m = SaliencyMap { values: Tensor::new(vec![n], v.clone()).unwrap(), ..map(vec![0.0], 1) };
        let out = normalize(&m);
        let max = out.values.max_abs();
        if v.iter().all(|&x| x == 0.0) {
            prop_assert!(out.degenerate);
            prop_assert_eq!(max, 0.0);
        } else {
            prop_assert!(!out.degenerate);
            prop_assert_eq!(max, 1.0);
            for (o, x) in out.values.data().iter().zip(&v) {
                prop_assert!(o.abs() <= 1.0);
                prop_assert_eq!(o.signum() == x.signum() || *x == 0.0, true);
            }
        }
        Ok(())
    })
}

pub fn guided_backprop_equals_gradient_without_relus() -> Result<(), String> {
    check(64, (prop::collection::vec(-2.0f64..2.0, 1..20), any::<u64>()), |(w, seed)| {
        let model = Model::linear(&w).unwrap();
        prop_assert!(!model.has_relu());
        let x = Tensor::new(vec![w.len()], (0..w.len()).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64) / 10.0 - 4.0).collect()).unwrap();
        let g = saliency::gradient(&model, &x, Some(0)).unwrap();
        let gbp = saliency::guided_backprop(&model, &x, Some(0)).unwrap();
        prop_assert_eq!(g.values.data(), gbp.values.data());
        prop_assert_eq!(g.values.data(), &w[..]);
        Ok(())
    })
}

pub fn integrated_gradients_are_complete_on_linear_models() -> Result<(), String> {
    check(64, (prop::collection::vec(-2.0f64..2.0, 1..12), prop::collection::vec(-3.0f64..3.0, 12), prop::collection::vec(-3.0f64..3.0, 12), 1usize..64), |(w, x, b, steps)| {
        let d = w.len();
        let model = Model::linear(&w).unwrap();
        let xt = Tensor::new(vec![d], x[..d].to_vec()).unwrap();
        let bt = Tensor::new(vec![d], b[..d].to_vec()).unwrap();
        let cfg = IgConfig { baseline: Some(bt), steps, variant: IgVariant::Standard };
        let ig = saliency::integrated_gradients(&model, &xt, Some(0), &cfg).unwrap();
        let total: f64 = ig.values.data().iter().sum();
        let expect: f64 = (0..d).map(|i| w[i] * (x[i] - b[i])).sum();
        prop_assert!((total - expect).abs() < 1e-9, "{} vs {}", total, expect);
        Ok(())
    })
}

pub fn permutation_preserves_the_label_multiset() -> Result<(), String> {
    check(64, (prop::collection::vec(0usize..10, 1..200), any::<u64>()), |(labels, seed)| {
        let n = labels.len();
        let ds = LabeledDataset::new(Tensor::new(vec![n, 1, 1], vec![0.5; n]).unwrap(), labels, 10).unwrap();
        let p = permute_labels(&ds, seed).unwrap();
        prop_assert_eq!(p.class_counts(), ds.class_counts());
        prop_assert_eq!(p.images(), ds.images());
        let again = permute_labels(&ds, seed).unwrap();
        prop_assert_eq!(again.labels(), p.labels());
        Ok(())
    })
}

pub fn idx_round_trip() -> Result<(), String> {
    check(64, (1usize..6, 1usize..9, 1usize..9, any::<u64>()), |(n, rows, cols, seed)| {
        let pixels: Vec<f64> = (0..n * rows * cols).map(|i| ((seed.rotate_left(i as u32 % 64) ^ i as u64) % 256) as f64 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize).wrapping_add(i) % 10).collect();
        let ds = LabeledDataset::new(Tensor::new(vec![n, rows, cols], pixels).unwrap(), labels, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("x-images-idx3-ubyte"), dir.path().join("x-labels-idx1-ubyte"));
        data::write_idx(&ds, &ip, &lp).unwrap();
        let back = data::load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.images().shape(), ds.images().shape());
        prop_assert_eq!(back.images().data(), ds.images().data());
        Ok(())
    })
}

pub fn sobel_edges_lie_in_unit_range() -> Result<(), String> {
    check(64, (prop::collection::vec(0.0f64..1.0, 64), 0.0f64..1.0), |(v, c)| {
        let e = sobel_edges(&Tensor::new(vec![8, 8], v).unwrap()).unwrap();
        prop_assert!(e.values.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let flat = sobel_edges(&Tensor::new(vec![8, 8], vec![c; 64]).unwrap()).unwrap();
        prop_assert!(flat.values.data().iter().all(|&x| x == 0.0));
        Ok(())
    })
}

pub fn smoothgrad_without_noise_is_the_base_map() -> Result<(), String> {
    check(8, (any::<u64>(), 1usize..4), |(seed, samples)| {
        let model = Model::build(ArchitectureId::Mlp { scale: Scale::Desk }, seed);
        let x = Tensor::new(vec![1, 28, 28], (0..784).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 17.0).collect()).unwrap();
        let cfg = SmoothingConfig { samples, noise: NoiseScale::Absolute(0.0), seed };
        for base in [BaseMethod::Gradient, BaseMethod::GuidedBackprop, BaseMethod::IntegratedGradients] {
            let mc = MethodConfig { smoothing: cfg.clone(), ig: IgConfig { steps: 8, ..IgConfig::default() } };
            let plain = saliency::explain(&model, &x, Some(2), Method::Base(base), &mc).unwrap();
            let smooth = saliency::explain(&model, &x, Some(2), Method::SmoothGrad(base), &mc).unwrap();
            prop_assert_eq!(plain.values.data(), smooth.values.data());
        }
        Ok(())
    })
}

pub fn randomizing_one_layer_leaves_the_rest_bit_identical() -> Result<(), String> {
    check(8, (any::<u64>(), 0usize..4), |(seed, which)| {
        let model = Model::build(ArchitectureId::Cnn { scale: Scale::Desk }, 1);
        let names = model.parameterized_layers();
        let r = model.randomize_layers(&[&names[which]], seed).unwrap();
        for (a, b) in model.layers().iter().zip(r.layers()) {
            if a.name == names[which] {
                prop_assert_ne!(&a.weights, &b.weights);
            } else {
                prop_assert_eq!(&a.weights, &b.weights);
                prop_assert_eq!(&a.biases, &b.biases);
            }
        }
        Ok(())
    })
}

/// Every property, by name.
pub const SUITE: &[(&str, fn() -> Result<(), String>)] = &[
    ("spearman_is_symmetric_and_bounded", spearman_is_symmetric_and_bounded),
    ("spearman_ignores_strictly_increasing_transforms", spearman_ignores_strictly_increasing_transforms),
    ("every_metric_is_one_on_identical_maps", every_metric_is_one_on_identical_maps),
    ("sign_flip_leaves_abs_metrics_at_one", sign_flip_leaves_abs_metrics_at_one),
    ("metrics_ignore_positive_rescaling", metrics_ignore_positive_rescaling),
    ("normalization_bounds", normalization_bounds),
    ("guided_backprop_equals_gradient_without_relus", guided_backprop_equals_gradient_without_relus),
    ("integrated_gradients_are_complete_on_linear_models", integrated_gradients_are_complete_on_linear_models),
    ("permutation_preserves_the_label_multiset", permutation_preserves_the_label_multiset),
    ("idx_round_trip", idx_round_trip),
    ("sobel_edges_lie_in_unit_range", sobel_edges_lie_in_unit_range),
    ("smoothgrad_without_noise_is_the_base_map", smoothgrad_without_noise_is_the_base_map),
    ("randomizing_one_layer_leaves_the_rest_bit_identical", randomizing_one_layer_leaves_the_rest_bit_identical),
];

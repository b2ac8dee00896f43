//! Model-parameter and data randomization tests.
//!
//! Every test computes each method's maps on a fixed input set for the
//! trained model, then for a sequence of altered models, and compares the two
//! under each metric. Target classes are fixed per input to the trained
//! model's argmax so every stage explains the same logit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{compare, MetricConfig, MetricId};
use crate::models::Model;
use crate::saliency::{explain_batch, MethodConfig, Method, SaliencyMap};
use crate::tensor::Tensor;
use crate::training::evaluate;

/// Train accuracy a random-label model must exceed before its explanations
/// are compared.
pub const MEMORIZATION_THRESHOLD: f64 = 0.95;

pub const BASELINE_STAGE: &str = "baseline";
pub const RANDOM_LABELS_STAGE: &str = "random-labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizationOrder {
    /// Logits layer first, then downward, cumulatively.
    Cascading,
    /// One layer at a time on a fresh copy of the trained model.
    Independent,
    /// Input layer first, then upward, cumulatively.
    ReverseCascading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    /// Indices into the evaluation dataset.
    pub inputs: Vec<usize>,
    pub methods: Vec<Method>,
    pub metrics: Vec<MetricId>,
    /// Master seed for layer re-initialization.
    pub seed: u64,
    pub method_config: MethodConfig,
    pub metric_config: MetricConfig,
}

impl HarnessConfig {
    /// The first `n` inputs, all standard methods and all metrics.
    pub fn standard(n: usize, seed: u64) -> Self {
        let mut method_config = MethodConfig::default();
        method_config.smoothing.seed = seed;
        HarnessConfig {
            inputs: (0..n).collect(),
            methods: Method::STANDARD.to_vec(),
            metrics: MetricId::ALL.to_vec(),
            seed,
            method_config,
            metric_config: MetricConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.methods.is_empty() || self.metrics.is_empty() {
            return Err(Error::Config("harness needs at least one input, method and metric".into()));
        }
        self.metric_config.validate()
    }
}

/// Similarity of one method under one metric at one stage. Inputs whose
/// comparison is degenerate (an all-zero map or a constant rank vector)
/// appear as `None` and are left out of `mean`, `std` and `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub method: Method,
    pub stage: String,
    pub stage_index: usize,
    pub metric: MetricId,
    pub values: Vec<Option<f64>>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    pub degenerate: usize,
}

impl SimilarityRecord {
    fn new(method: Method, stage: &str, stage_index: usize, metric: MetricId, values: Vec<Option<f64>>) -> Self {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        let n = ok.len();
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = ok.iter().sum::<f64>() / n as f64;
            let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        SimilarityRecord {
            method,
            stage: stage.to_string(),
            stage_index,
            metric,
            degenerate: values.len() - n,
            values,
            mean,
            std,
            n,
        }
    }
}

/// Records for one test plus what produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub test: String,
    pub config: HarnessConfig,
    /// Trained-model argmax class per input.
    pub classes: Vec<usize>,
    /// Methods dropped because the architecture does not define them.
    pub skipped_methods: Vec<Method>,
    pub records: Vec<SimilarityRecord>,
}

impl SimilarityTable {
    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.stage) {
                out.push(r.stage.clone());
            }
        }
        out
    }

    pub fn record(&self, method: Method, stage: &str, metric: MetricId) -> Option<&SimilarityRecord> {
        self.records
            .iter()
            .find(|r| r.method == method && r.stage == stage && r.metric == metric)
    }

    /// The last stage's record for a method and metric.
    pub fn final_record(&self, method: Method, metric: MetricId) -> Option<&SimilarityRecord> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .max_by_key(|r| r.stage_index)
    }

    /// Summary rows: `method,stage,metric,mean,std,n,degenerate`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "stage", "metric", "mean", "std", "n", "degenerate"])?;
        for r in &self.records {
            w.write_record([
                r.method.to_string(),
                r.stage.clone(),
                r.metric.to_string(),
                format!("{}", r.mean),
                format!("{}", r.std),
                r.n.to_string(),
                r.degenerate.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

struct TestBed {
    xs: Vec<Tensor>,
    classes: Vec<usize>,
    methods: Vec<Method>,
    skipped: Vec<Method>,
}

fn test_bed(model: &Model, data: &LabeledDataset, cfg: &HarnessConfig) -> Result<TestBed> {
    cfg.validate()?;
    let xs = cfg
        .inputs
        .iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::Config(format!("input index {i} out of range for {} items", data.len())));
            }
            data.input(i, model.input_shape())
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = model.predict_batch(&Tensor::stack(&xs)?)?;
    let (methods, skipped) = cfg
        .methods
        .iter()
        .partition(|m| !m.needs_conv() || model.gradcam_tap().is_some());
    Ok(TestBed {
        xs,
        classes,
        methods,
        skipped,
    })
}

fn all_maps(model: &Model, bed: &TestBed, cfg: &HarnessConfig) -> Result<Vec<Vec<SaliencyMap>>> {
    bed.methods
        .iter()
        .map(|&m| explain_batch(model, &bed.xs, &bed.classes, m, &cfg.method_config))
        .collect()
}

fn compare_stage(
    reference: &[Vec<SaliencyMap>],
    model: &Model,
    stage: &str,
    stage_index: usize,
    bed: &TestBed,
    cfg: &HarnessConfig,
) -> Result<Vec<SimilarityRecord>> {
    let maps = all_maps(model, bed, cfg)?;
    let mut out = Vec::new();
    for ((&method, refs), cur) in bed.methods.iter().zip(reference).zip(&maps) {
        for &metric in &cfg.metrics {
            let values = refs
                .iter()
                .zip(cur)
                .map(|(a, b)| {
                    if a.values.max_abs() == 0.0 || b.values.max_abs() == 0.0 {
                        return Ok(None);
                    }
                    let v = compare(a, b, metric, &cfg.metric_config)?;
                    Ok((!v.degenerate).then_some(v.value))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SimilarityRecord::new(method, stage, stage_index, metric, values));
        }
    }
    Ok(out)
}

/// `(stage label, layers randomized at that stage)` for an order.
pub fn stage_plan(model: &Model, order: RandomizationOrder) -> Vec<(String, Vec<String>)> {
    let layers = model.parameterized_layers();
    match order {
        RandomizationOrder::Independent => layers.iter().map(|l| (l.clone(), vec![l.clone()])).collect(),
        RandomizationOrder::Cascading => {
            let top_down: Vec<String> = layers.iter().rev().cloned().collect();
            (1..=top_down.len())
                .map(|k| (top_down[k - 1].clone(), top_down[..k].to_vec()))
                .collect()
        }
        RandomizationOrder::ReverseCascading => (1..=layers.len())
            .map(|k| (layers[k - 1].clone(), layers[..k].to_vec()))
            .collect(),
    }
}

/// Stage 0 compares the trained model with itself; stage k compares it with
/// the model whose layers in `stage_plan(model, order)[k - 1]` are
/// re-initialized.
pub fn run_randomization(model: &Model, data: &LabeledDataset, cfg: &HarnessConfig, order: RandomizationOrder) -> Result<SimilarityTable> {
    let bed = test_bed(model, data, cfg)?;
    let reference = all_maps(model, &bed, cfg)?;
    let mut records = compare_stage(&reference, model, BASELINE_STAGE, 0, &bed, cfg)?;
    for (k, (label, layers)) in stage_plan(model, order).into_iter().enumerate() {
        let altered = model.randomize_layers(&layers, cfg.seed)?;
        records.extend(compare_stage(&reference, &altered, &label, k + 1, &bed, cfg)?);
    }
    let test = match order {
        RandomizationOrder::Cascading => "cascading",
        RandomizationOrder::Independent => "independent",
        RandomizationOrder::ReverseCascading => "reverse_cascading",
    };
    Ok(SimilarityTable {
        test: test.into(),
        config: cfg.clone(),
        classes: bed.classes,
        skipped_methods: bed.skipped,
        records,
    })
}

pub fn cascading(model: &Model, data: &LabeledDataset, cfg: &HarnessConfig) -> Result<SimilarityTable> {
    run_randomization(model, data, cfg, RandomizationOrder::Cascading)
}

pub fn independent(model: &Model, data: &LabeledDataset, cfg: &HarnessConfig) -> Result<SimilarityTable> {
    run_randomization(model, data, cfg, RandomizationOrder::Independent)
}

pub fn reverse_cascading(model: &Model, data: &LabeledDataset, cfg: &HarnessConfig) -> Result<SimilarityTable> {
    run_randomization(model, data, cfg, RandomizationOrder::ReverseCascading)
}

/// Compares explanations of a true-label model and a random-label model on
/// the same inputs. `memorized` is the permuted-label training set, on
/// which `model_rand` must exceed [`MEMORIZATION_THRESHOLD`] accuracy.
pub fn data_randomization_compare(
    model_true: &Model,
    model_rand: &Model,
    memorized: &LabeledDataset,
    data: &LabeledDataset,
    cfg: &HarnessConfig,
) -> Result<SimilarityTable> {
    if model_true.arch() != model_rand.arch() {
        return Err(Error::Config("both models must share an architecture".into()));
    }
    let measured = evaluate(model_rand, memorized)?;
    if measured <= MEMORIZATION_THRESHOLD {
        return Err(Error::Memorization {
            measured,
            required: MEMORIZATION_THRESHOLD,
        });
    }
    let bed = test_bed(model_true, data, cfg)?;
    let reference = all_maps(model_true, &bed, cfg)?;
    let records = compare_stage(&reference, model_rand, RANDOM_LABELS_STAGE, 1, &bed, cfg)?;
    Ok(SimilarityTable {
        test: "data_randomization".into(),
        config: cfg.clone(),
        classes: bed.classes,
        skipped_methods: bed.skipped,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::models::{ArchitectureId, Scale};
    use crate::saliency::BaseMethod;

    fn setup() -> (Model, LabeledDataset, HarnessConfig) {
        let data = synthesize(&SyntheticSpec {
            per_class: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model = Model::build(ArchitectureId::Cnn { scale: Scale::Desk }, 1);
        let mut cfg = HarnessConfig::standard(4, 9);
        cfg.methods = vec![Method::Base(BaseMethod::Gradient), Method::Base(BaseMethod::GradCam)];
        (model, data, cfg)
    }

    #[test]
    fn stage_plans() {
        let m = Model::build(ArchitectureId::Cnn { scale: Scale::Desk }, 0);
        let c = stage_plan(&m, RandomizationOrder::Cascading);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0], ("fc2".to_string(), vec!["fc2".to_string()]));
        assert_eq!(c[3].1, vec!["fc2", "fc1", "conv2", "conv1"]);
        let r = stage_plan(&m, RandomizationOrder::ReverseCascading);
        assert_eq!(r[0].1, vec!["conv1"]);
        assert_eq!(r[3].1.len(), 4);
        let i = stage_plan(&m, RandomizationOrder::Independent);
        assert_eq!(i[2], ("fc1".to_string(), vec!["fc1".to_string()]));
    }

    #[test]
    fn baseline_row_is_one_and_stage_count_matches() {
        let (model, data, cfg) = setup();
        let t = cascading(&model, &data, &cfg).unwrap();
        assert_eq!(t.stages().len(), 1 + model.parameterized_layers().len());
        for r in t.records.iter().filter(|r| r.stage == BASELINE_STAGE) {
            if r.metric != MetricId::HogPearson && r.n > 0 {
                assert_eq!(r.mean, 1.0, "{:?} {:?}", r.method, r.metric);
            }
        }
        assert_eq!(t.records.len(), t.stages().len() * 2 * 4);
    }

    #[test]
    fn cascading_and_reverse_share_final_model() {
        let (model, data, cfg) = setup();
        let a = cascading(&model, &data, &cfg).unwrap();
        let b = reverse_cascading(&model, &data, &cfg).unwrap();
        for m in &cfg.methods {
            for &metric in &cfg.metrics {
                let (x, y) = (a.final_record(*m, metric).unwrap(), b.final_record(*m, metric).unwrap());
                assert_eq!(x.values, y.values);
            }
        }
    }

    #[test]
    fn harness_is_deterministic() {
        let (model, data, cfg) = setup();
        let a = independent(&model, &data, &cfg).unwrap();
        let b = independent(&model, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.csv_string().unwrap(), b.csv_string().unwrap());
    }

    #[test]
    fn undefined_methods_are_skipped() {
        let (_, data, mut cfg) = setup();
        cfg.metrics = vec![MetricId::SpearmanAbs];
        let mlp = Model::build(ArchitectureId::Mlp { scale: Scale::Desk }, 0);
        let t = cascading(&mlp, &data, &cfg).unwrap();
        assert_eq!(t.skipped_methods, vec![Method::Base(BaseMethod::GradCam)]);
    }

    #[test]
    fn data_randomization_requires_memorization() {
        let (model, data, cfg) = setup();
        let err = data_randomization_compare(&model, &model, &data, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Memorization { .. }));
    }

    #[test]
    fn data_randomization_with_itself_is_one() {
        let (model, data, mut cfg) = setup();
        cfg.metrics = vec![MetricId::SpearmanAbs, MetricId::SpearmanNoAbs, MetricId::Ssim];
        // The model's own predictions are a dataset it fits perfectly.
        let preds = model.predict_batch(&Tensor::stack(&(0..data.len()).map(|i| data.input(i, model.input_shape()).unwrap()).collect::<Vec<_>>()).unwrap()).unwrap();
        let memorized = LabeledDataset::new(data.images().clone(), preds, 10).unwrap();
        let t = data_randomization_compare(&model, &model, &memorized, &data, &cfg).unwrap();
        assert_eq!(t.records.len(), cfg.methods.len() * cfg.metrics.len());
        for r in &t.records {
            assert_eq!(r.stage, RANDOM_LABELS_STAGE);
            if r.n > 0 {
                assert_eq!(r.mean, 1.0);
            }
        }
    }

    #[test]
    fn record_statistics_skip_degenerate_values() {
        let r = SimilarityRecord::new(Method::Base(BaseMethod::Gradient), "x", 1, MetricId::Ssim, vec![Some(1.0), None, Some(0.0)]);
        assert_eq!((r.mean, r.std, r.n, r.degenerate), (0.5, 0.5, 2, 1));
    }
}

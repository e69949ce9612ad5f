//! Unlearning metrics: target and global accuracy, a confidence-based
//! membership-inference forgetting rate, timing and comparison reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::layer::{Dense, Layer};
use crate::model::{Model, ModelMetadata};
use crate::tensor::Tensor;
use crate::train::{softmax, train, TrainConfig};

pub const ATTACK_FAMILY: &str = "logistic(true-class prob, max prob, entropy)";
pub const FEATURE_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(rename = "A_t")]
    pub a_t: f64,
    #[serde(rename = "A_g")]
    pub a_g: f64,
}

fn predictions(model: &Model, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.par_iter().map(|s| model.predict(&s.input)).collect()
}

/// A_t over target-class samples, A_g over every other sample.
pub fn class_metrics(model: &Model, eval_set: &LabeledDataset, target_class: usize) -> Result<ClassMetrics> {
    if target_class >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: target_class,
            class_count: model.class_count(),
        });
    }
    let preds = predictions(model, eval_set.samples())?;
    let (mut t_total, mut t_hit, mut g_total, mut g_hit) = (0usize, 0usize, 0usize, 0usize);
    for (s, &p) in eval_set.samples().iter().zip(&preds) {
        if s.label == target_class {
            t_total += 1;
            t_hit += usize::from(p == s.label);
        } else {
            g_total += 1;
            g_hit += usize::from(p == s.label);
        }
    }
    if t_total == 0 {
        return Err(Error::InsufficientSamples {
            class: target_class,
            requested: 1,
            available: 0,
        });
    }
    if g_total == 0 {
        return Err(Error::InvalidArgument(format!(
            "evaluation set has no samples outside class {target_class}"
        )));
    }
    Ok(ClassMetrics {
        a_t: t_hit as f64 / t_total as f64,
        a_g: g_hit as f64 / g_total as f64,
    })
}

/// Overall accuracy.
pub fn accuracy(model: &Model, eval_set: &LabeledDataset) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predictions(model, eval_set.samples())?;
    let hits = eval_set
        .samples()
        .iter()
        .zip(&preds)
        .filter(|(s, &p)| s.label == p)
        .count();
    Ok(hits as f64 / eval_set.len() as f64)
}

/// True-class probability, max probability and entropy of the softmax output.
pub fn confidence_features(model: &Model, sample: &Sample) -> Result<[f64; FEATURE_COUNT]> {
    let logits = model.forward(&sample.input)?;
    let probs = softmax(logits.data());
    let p_true = probs.get(sample.label).copied().ok_or(Error::ClassOutOfRange {
        class: sample.label,
        class_count: probs.len(),
    })?;
    let p_max = probs.iter().copied().fold(0.0, f64::max);
    let entropy = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    Ok([p_true, p_max, entropy])
}

fn all_features(model: &Model, samples: &[Sample]) -> Result<Vec<[f64; FEATURE_COUNT]>> {
    samples
        .par_iter()
        .map(|s| confidence_features(model, s))
        .collect()
}

/// Member/non-member classifier over standardized confidence features.
/// A sample is called a member when the member posterior is `>= threshold`.
#[derive(Debug, Clone)]
pub struct AttackModel {
    mean: [f64; FEATURE_COUNT],
    scale: [f64; FEATURE_COUNT],
    classifier: Model,
    pub threshold: f64,
}

const MEMBER: usize = 1;
const NON_MEMBER: usize = 0;

impl AttackModel {
    /// Fits the attack on an equal number of members and non-members (the
    /// larger side is truncated).
    pub fn fit(model: &Model, members: &[Sample], non_members: &[Sample], seed: u64) -> Result<Self> {
        if members.is_empty() || non_members.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = members.len().min(non_members.len());
        let fm = all_features(model, &members[..n])?;
        let fn_ = all_features(model, &non_members[..n])?;

        let mut mean = [0.0; FEATURE_COUNT];
        let mut scale = [0.0; FEATURE_COUNT];
        let count = (2 * n) as f64;
        for f in fm.iter().chain(&fn_) {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / count;
            }
        }
        for f in fm.iter().chain(&fn_) {
            for i in 0..FEATURE_COUNT {
                scale[i] += (f[i] - mean[i]).powi(2) / count;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }

        let standardize = |f: &[f64; FEATURE_COUNT]| -> Vec<f64> {
            (0..FEATURE_COUNT).map(|i| (f[i] - mean[i]) / scale[i]).collect()
        };
        let mut samples = Vec::with_capacity(2 * n);
        for (m, nm) in fm.iter().zip(&fn_) {
            samples.push(Sample::from_tensor(Tensor::vector(standardize(m))?, MEMBER));
            samples.push(Sample::from_tensor(Tensor::vector(standardize(nm))?, NON_MEMBER));
        }
        let dataset = LabeledDataset::new(samples, 2, Split::Train)?;

        let init = Dense::new(FEATURE_COUNT, 2, vec![0.0; 2 * FEATURE_COUNT], vec![0.0; 2])?;
        let classifier = Model::new(
            vec![FEATURE_COUNT],
            vec![Layer::Dense(init)],
            2,
            ModelMetadata {
                name: "attack".into(),
                seed,
                ..ModelMetadata::default()
            },
        )?;
        // Full-batch gradient descent on a convex loss: converges without
        // depending on sample order.
        let config = TrainConfig {
            learning_rate: 1.0,
            epochs: 300,
            batch_size: dataset.len(),
            seed,
        };
        let classifier = train(&classifier, &dataset, &config)?;
        Ok(Self {
            mean,
            scale,
            classifier,
            threshold: 0.5,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn member_posterior(&self, features: &[f64; FEATURE_COUNT]) -> Result<f64> {
        let x: Vec<f64> = (0..FEATURE_COUNT)
            .map(|i| (features[i] - self.mean[i]) / self.scale[i])
            .collect();
        let logits = self.classifier.forward(&Tensor::vector(x)?)?;
        Ok(softmax(logits.data())[MEMBER])
    }

    pub fn is_member(&self, model: &Model, sample: &Sample) -> Result<bool> {
        Ok(self.member_posterior(&confidence_features(model, sample)?)? >= self.threshold)
    }

    /// Fraction of `targets` labeled non-member.
    pub fn non_member_rate(&self, model: &Model, targets: &[Sample]) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let flags: Vec<bool> = targets
            .par_iter()
            .map(|s| self.is_member(model, s))
            .collect::<Result<_>>()?;
        Ok(flags.iter().filter(|&&m| !m).count() as f64 / targets.len() as f64)
    }
}

/// Samples fed to the membership-inference attack.
#[derive(Debug, Clone, Copy)]
pub struct MiaInputs<'a> {
    /// Training samples of the unlearning class; these are scored.
    pub member_targets: &'a [Sample],
    pub calibration_members: &'a [Sample],
    pub calibration_non_members: &'a [Sample],
    pub seed: u64,
}

impl MiaInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.member_targets.is_empty()
            || self.calibration_members.is_empty()
            || self.calibration_non_members.is_empty()
        {
            return Err(Error::EmptyDataset);
        }
        let targets: BTreeSet<u64> = self.member_targets.iter().map(|s| s.hash).collect();
        let overlap = self
            .calibration_members
            .iter()
            .chain(self.calibration_non_members)
            .filter(|s| targets.contains(&s.hash))
            .count();
        if overlap > 0 {
            return Err(Error::InvalidArgument(format!(
                "{overlap} calibration samples also appear among the scored targets"
            )));
        }
        Ok(())
    }
}

/// Owned attack inputs drawn from a training and a held-out split: every
/// training sample of the target class is scored, and the attack is
/// calibrated on `calibration_size` training and held-out samples of the
/// other classes.
#[derive(Debug, Clone)]
pub struct MiaSamples {
    pub member_targets: Vec<Sample>,
    pub calibration_members: Vec<Sample>,
    pub calibration_non_members: Vec<Sample>,
    pub seed: u64,
}

impl MiaSamples {
    pub fn from_splits(
        train_set: &LabeledDataset,
        held_out: &LabeledDataset,
        target_class: usize,
        calibration_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if calibration_size == 0 {
            return Err(Error::InvalidArgument("calibration size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |set: &LabeledDataset| {
            let mut others: Vec<Sample> = set
                .samples()
                .iter()
                .filter(|s| s.label != target_class)
                .cloned()
                .collect();
            others.shuffle(&mut rng);
            others.truncate(calibration_size);
            others
        };
        let calibration_members = pick(train_set);
        let calibration_non_members = pick(held_out);
        let member_targets = train_set
            .samples()
            .iter()
            .filter(|s| s.label == target_class)
            .cloned()
            .collect();
        let out = Self {
            member_targets,
            calibration_members,
            calibration_non_members,
            seed,
        };
        out.inputs().validate()?;
        Ok(out)
    }

    pub fn inputs(&self) -> MiaInputs<'_> {
        MiaInputs {
            member_targets: &self.member_targets,
            calibration_members: &self.calibration_members,
            calibration_non_members: &self.calibration_non_members,
            seed: self.seed,
        }
    }
}

/// Fr: the fraction of `member_targets` an attack calibrated on the other two
/// sets labels non-member.
pub fn forgetting_rate(model: &Model, mia: &MiaInputs<'_>) -> Result<f64> {
    mia.validate()?;
    let attack = AttackModel::fit(
        model,
        mia.calibration_members,
        mia.calibration_non_members,
        mia.seed,
    )?;
    attack.non_member_rate(model, mia.member_targets)
}

/// Runs `f` and returns its result with the elapsed wall time in seconds.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Settings that produced a model; all `None` for a model that was not
/// produced by unlearning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfigEcho {
    pub rule: Option<String>,
    pub k: Option<usize>,
    pub m_p: Option<f64>,
    pub layer: Option<usize>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub name: String,
    #[serde(rename = "A_t")]
    pub a_t: f64,
    #[serde(rename = "A_g")]
    pub a_g: f64,
    #[serde(rename = "Fr")]
    pub fr: f64,
    #[serde(rename = "T_seconds")]
    pub t_seconds: f64,
    pub config: RunConfigEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target_class: usize,
    pub attack: String,
    pub models: Vec<UnlearnReport>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table, rates to 2 decimals.
    pub fn to_text(&self) -> String {
        let width = self
            .models
            .iter()
            .map(|m| m.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!(
            "{:<width$}  {:>5}  {:>5}  {:>5}  {:>8}\n",
            "model", "A_t", "A_g", "Fr", "T(s)"
        );
        for m in &self.models {
            let _ = writeln!(
                out,
                "{:<width$}  {:>5.2}  {:>5.2}  {:>5.2}  {:>8.2}",
                m.name, m.a_t, m.a_g, m.fr, m.t_seconds
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct NamedModel<'a> {
    pub name: String,
    pub model: &'a Model,
    /// Time spent producing the model.
    pub t_seconds: f64,
    pub config: RunConfigEcho,
}

/// One report row per model, in input order.
pub fn compare(
    models: &[NamedModel<'_>],
    eval_set: &LabeledDataset,
    target_class: usize,
    mia: &MiaInputs<'_>,
) -> Result<Report> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    }
    mia.validate()?;
    let rows = models
        .par_iter()
        .map(|m| {
            let metrics = class_metrics(m.model, eval_set, target_class)?;
            let fr = forgetting_rate(m.model, mia)?;
            Ok(UnlearnReport {
                name: m.name.clone(),
                a_t: metrics.a_t,
                a_g: metrics.a_g,
                fr,
                t_seconds: m.t_seconds,
                config: m.config.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Report {
        target_class,
        attack: ATTACK_FAMILY.into(),
        models: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    /// Identity-weight classifier: predicts the argmax of its 3-d input.
    fn argmax_model() -> Model {
        let d = Dense::new(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0; 3],
        )
        .unwrap();
        Model::new(vec![3], vec![Layer::Dense(d)], 3, ModelMetadata::default()).unwrap()
    }

    fn one_hot(class: usize, label: usize) -> Sample {
        let mut v = vec![0.0; 3];
        v[class] = 1.0;
        Sample::from_tensor(Tensor::vector(v).unwrap(), label)
    }

    #[test]
    fn counting_oracle() {
        // 10 target samples with 3 correct, 90 others with 81 correct.
        let mut samples = Vec::new();
        for i in 0..10 {
            samples.push(one_hot(if i < 3 { 0 } else { 1 }, 0));
        }
        for i in 0..90 {
            let label = 1 + i % 2;
            samples.push(one_hot(if i < 81 { label } else { 0 }, label));
        }
        let ds = LabeledDataset::new(samples, 3, Split::Test).unwrap();
        let m = class_metrics(&argmax_model(), &ds, 0).unwrap();
        assert!((m.a_t - 0.3).abs() < 1e-15);
        assert!((m.a_g - 0.9).abs() < 1e-15);
    }

    #[test]
    fn all_correct_and_target_all_wrong() {
        let ds = LabeledDataset::new(
            vec![one_hot(0, 0), one_hot(1, 1), one_hot(2, 2)],
            3,
            Split::Test,
        )
        .unwrap();
        let m = class_metrics(&argmax_model(), &ds, 1).unwrap();
        assert_eq!((m.a_t, m.a_g), (1.0, 1.0));
        let ds = LabeledDataset::new(
            vec![one_hot(0, 0), one_hot(2, 1), one_hot(2, 2)],
            3,
            Split::Test,
        )
        .unwrap();
        let m = class_metrics(&argmax_model(), &ds, 1).unwrap();
        assert_eq!((m.a_t, m.a_g), (0.0, 1.0));
    }

    #[test]
    fn missing_class_coverage() {
        let ds = LabeledDataset::new(vec![one_hot(0, 0)], 3, Split::Test).unwrap();
        assert!(class_metrics(&argmax_model(), &ds, 1).is_err());
        assert!(class_metrics(&argmax_model(), &ds, 0).is_err());
    }

    #[test]
    fn features_of_uniform_output() {
        let s = Sample::from_tensor(Tensor::vector(vec![0.0; 3]).unwrap(), 1);
        let [pt, pm, h] = confidence_features(&argmax_model(), &s).unwrap();
        assert!((pt - 1.0 / 3.0).abs() < 1e-15);
        assert!((pm - 1.0 / 3.0).abs() < 1e-15);
        assert!((h - 3f64.ln()).abs() < 1e-12);
    }

    fn mia_fixture() -> (Model, Vec<Sample>, Vec<Sample>, Vec<Sample>) {
        let data = synth_blobs(3, 40, 3, 9).into_samples();
        let targets: Vec<Sample> = data.iter().filter(|s| s.label == 0).cloned().collect();
        let rest: Vec<Sample> = data.into_iter().filter(|s| s.label != 0).collect();
        let (members, non_members) = rest.split_at(rest.len() / 2);
        (argmax_model(), targets, members.to_vec(), non_members.to_vec())
    }

    #[test]
    fn degenerate_thresholds() {
        let (model, targets, members, non_members) = mia_fixture();
        let attack = AttackModel::fit(&model, &members, &non_members, 1).unwrap();
        let everyone_member = attack.clone().with_threshold(0.0);
        assert_eq!(everyone_member.non_member_rate(&model, &targets).unwrap(), 0.0);
        let nobody_member = attack.with_threshold(f64::INFINITY);
        assert_eq!(nobody_member.non_member_rate(&model, &targets).unwrap(), 1.0);
    }

    #[test]
    fn forgetting_rate_bounds_and_errors() {
        let (model, targets, members, non_members) = mia_fixture();
        let mia = MiaInputs {
            member_targets: &targets,
            calibration_members: &members,
            calibration_non_members: &non_members,
            seed: 3,
        };
        let fr = forgetting_rate(&model, &mia).unwrap();
        assert!((0.0..=1.0).contains(&fr));

        let overlapping = MiaInputs {
            calibration_members: &targets,
            ..mia
        };
        assert!(forgetting_rate(&model, &overlapping).is_err());
        let empty = MiaInputs {
            member_targets: &[],
            ..mia
        };
        assert!(forgetting_rate(&model, &empty).is_err());
    }

    #[test]
    fn compare_is_deterministic() {
        let (model, targets, members, non_members) = mia_fixture();
        let eval = synth_blobs(3, 10, 3, 5).with_split(Split::Test);
        let mia = MiaInputs {
            member_targets: &targets,
            calibration_members: &members,
            calibration_non_members: &non_members,
            seed: 3,
        };
        let named = |name: &str| NamedModel {
            name: name.into(),
            model: &model,
            t_seconds: 0.0,
            config: RunConfigEcho::default(),
        };
        let report = compare(&[named("a"), named("b")], &eval, 0, &mia).unwrap();
        assert_eq!(report.models.len(), 2);
        let (a, b) = (&report.models[0], &report.models[1]);
        assert_eq!((a.a_t, a.a_g, a.fr), (b.a_t, b.a_g, b.fr));
        let again = compare(&[named("a"), named("b")], &eval, 0, &mia).unwrap();
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
        assert!(report.to_json().unwrap().contains("\"T_seconds\""));
        assert_eq!(report.to_text().lines().count(), 3);
        assert!(compare(&[], &eval, 0, &mia).is_err());
    }

    #[test]
    fn mia_samples_split_by_class() {
        let train_set = synth_blobs(3, 30, 3, 1);
        let held_out = synth_blobs(3, 20, 3, 2).with_split(Split::Test);
        let mia = MiaSamples::from_splits(&train_set, &held_out, 2, 25, 7).unwrap();
        assert_eq!(mia.member_targets.len(), 30);
        assert!(mia.member_targets.iter().all(|s| s.label == 2));
        assert_eq!(mia.calibration_members.len(), 25);
        assert_eq!(mia.calibration_non_members.len(), 25);
        assert!(mia
            .calibration_members
            .iter()
            .chain(&mia.calibration_non_members)
            .all(|s| s.label != 2));
        let again = MiaSamples::from_splits(&train_set, &held_out, 2, 25, 7).unwrap();
        assert_eq!(again.calibration_members, mia.calibration_members);
    }

    #[test]
    fn timing_a_noop() {
        let ((), t) = timed(|| ());
        assert!((0.0..0.001).contains(&t));
        let ((_, t1), t_total) = timed(|| timed(|| (0..1000).sum::<u64>()));
        assert!(t_total >= t1);
    }
}

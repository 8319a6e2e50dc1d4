//! Binary text classifiers.
//!
//! [`LinearTextModel`] is logistic regression over signed, hashed bag-of-words
//! features, trained with plain SGD, a fixed learning rate and early stopping
//! on validation loss.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document};
use crate::error::{Error, Result};
use crate::rng::TracedRng;

pub trait ClassifierModel: Send + Sync {
    /// Probability of the positive class for a token sequence.
    fn predict_surfaces(&self, surfaces: &[&str]) -> f64;

    fn predict_proba(&self, doc: &Document) -> f64 {
        self.predict_surfaces(&doc.surfaces())
    }

    fn describe(&self) -> String;
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log p(y | z)` for a logistic model, stable for large `|z|`.
pub fn log_loss(z: f64, target: f64) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - target * z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature space has `2^dims_log2` slots.
    pub dims_log2: u32,
    pub use_bigrams: bool,
    pub l2: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims_log2: 18,
            use_bigrams: false,
            l2: 1e-6,
            lr: 0.1,
            max_epochs: 20,
            patience: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(1..=30).contains(&self.dims_log2) {
            return bad("dims_log2 must be in 1..=30");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) || self.lr * self.l2 >= 1.0 {
            return bad("l2 must be non-negative with lr * l2 < 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }
}

/// Stateless signed feature hashing of lowercased unigrams (and bigrams).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    dims_log2: u32,
    use_bigrams: bool,
}

/// Sparse feature vector; repeated indices add up.
pub type Features = Vec<(usize, f64)>;

impl FeatureHasher {
    pub fn new(dims_log2: u32, use_bigrams: bool) -> Self {
        FeatureHasher { dims_log2, use_bigrams }
    }

    pub fn dims(&self) -> usize {
        1 << self.dims_log2
    }

    fn slot_of(&self, bytes: &[&[u8]]) -> (usize, f64) {
        let mut h = FnvHasher::default();
        for (i, b) in bytes.iter().enumerate() {
            if i > 0 {
                h.write(&[0x1f]);
            }
            h.write(b);
        }
        let hash = h.finish();
        let index = (hash as usize) & (self.dims() - 1);
        let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
        (index, sign)
    }

    /// Slot index and sign of a unigram.
    pub fn unigram_slot(&self, surface: &str) -> (usize, f64) {
        self.slot_of(&[surface.to_lowercase().as_bytes()])
    }

    pub fn bigram_slot(&self, first: &str, second: &str) -> (usize, f64) {
        self.slot_of(&[first.to_lowercase().as_bytes(), second.to_lowercase().as_bytes()])
    }

    pub fn features(&self, surfaces: &[&str]) -> Features {
        let lowered: Vec<String> = surfaces.iter().map(|s| s.to_lowercase()).collect();
        let mut out = Vec::with_capacity(lowered.len() * if self.use_bigrams { 2 } else { 1 });
        for tok in &lowered {
            out.push(self.slot_of(&[tok.as_bytes()]));
        }
        if self.use_bigrams {
            for pair in lowered.windows(2) {
                out.push(self.slot_of(&[pair[0].as_bytes(), pair[1].as_bytes()]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTextModel {
    pub config: ModelConfig,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearTextModel {
    pub fn zeros(config: ModelConfig) -> Self {
        LinearTextModel {
            weights: vec![0.0; 1 << config.dims_log2],
            bias: 0.0,
            config,
        }
    }

    pub fn hasher(&self) -> FeatureHasher {
        FeatureHasher::new(self.config.dims_log2, self.config.use_bigrams)
    }

    /// Set the effective weight of a unigram, accounting for its hash sign.
    pub fn set_token_weight(&mut self, surface: &str, value: f64) {
        let (index, sign) = self.hasher().unigram_slot(surface);
        self.weights[index] = sign * value;
    }

    /// Effective weight of a unigram (collisions included).
    pub fn token_weight(&self, surface: &str) -> f64 {
        let (index, sign) = self.hasher().unigram_slot(surface);
        sign * self.weights[index]
    }

    pub fn margin(&self, features: &Features) -> f64 {
        self.bias + features.iter().map(|&(i, v)| self.weights[i] * v).sum::<f64>()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile::from(self);
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.into_model()
    }
}

impl ClassifierModel for LinearTextModel {
    fn predict_surfaces(&self, surfaces: &[&str]) -> f64 {
        logistic(self.margin(&self.hasher().features(surfaces)))
    }

    fn describe(&self) -> String {
        format!(
            "hashed logistic regression (2^{} dims{})",
            self.config.dims_log2,
            if self.config.use_bigrams { ", bigrams" } else { "" }
        )
    }
}

pub const MODEL_FORMAT: &str = "rationale-linear";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dims: usize,
    use_bigrams: bool,
    bias: f64,
    weights: Vec<(usize, f64)>,
    config: ModelConfig,
}

impl From<&LinearTextModel> for ModelFile {
    fn from(model: &LinearTextModel) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dims: model.weights.len(),
            use_bigrams: model.config.use_bigrams,
            bias: model.bias,
            weights: model
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i, *w))
                .collect(),
            config: model.config,
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<LinearTextModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model file {} v{}",
                self.format, self.version
            )));
        }
        if !self.dims.is_power_of_two() {
            return Err(Error::Validation(format!("dims {} is not a power of two", self.dims)));
        }
        let mut config = self.config;
        config.dims_log2 = self.dims.trailing_zeros();
        config.use_bigrams = self.use_bigrams;
        let mut model = LinearTextModel::zeros(config);
        model.bias = self.bias;
        for (i, w) in self.weights {
            *model
                .weights
                .get_mut(i)
                .ok_or_else(|| Error::Validation(format!("weight index {i} out of range")))? = w;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub val_loss_curve: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub final_train_accuracy: f64,
}

/// Patience-based stopping on a loss sequence.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record the loss of `epoch` (1-based). Only strict decreases count.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: !improved && self.since_best >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Mean log loss plus `l2 / 2 * |w|^2`, and its gradient in `(w, b)`.
pub fn objective_and_gradient(
    weights: &[f64],
    bias: f64,
    examples: &[(Features, f64)],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = examples.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (features, target) in examples {
        let z = bias + features.iter().map(|&(i, v)| weights[i] * v).sum::<f64>();
        loss += log_loss(z, *target);
        let g = logistic(z) - target;
        for &(i, v) in features {
            grad[i] += g * v / n;
        }
        grad_b += g / n;
    }
    loss /= n;
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in grad.iter_mut().zip(weights) {
        *g += l2 * w;
    }
    (loss, grad, grad_b)
}

/// Weights stored as `scale * raw` so the L2 shrink of every step is O(1).
struct ScaledWeights {
    raw: Vec<f64>,
    scale: f64,
}

impl ScaledWeights {
    fn zeros(dims: usize) -> Self {
        ScaledWeights {
            raw: vec![0.0; dims],
            scale: 1.0,
        }
    }

    fn dot(&self, features: &Features) -> f64 {
        self.scale * features.iter().map(|&(i, v)| self.raw[i] * v).sum::<f64>()
    }

    /// `w <- shrink * w - step * x`
    fn update(&mut self, shrink: f64, step: f64, features: &Features) {
        self.scale *= shrink;
        if self.scale < 1e-9 {
            for w in &mut self.raw {
                *w *= self.scale;
            }
            self.scale = 1.0;
        }
        for &(i, v) in features {
            self.raw[i] -= step * v / self.scale;
        }
    }

    fn materialize(&self) -> Vec<f64> {
        self.raw.iter().map(|w| w * self.scale).collect()
    }
}

fn mean_log_loss(weights: &ScaledWeights, bias: f64, examples: &[(Features, f64)]) -> f64 {
    examples
        .iter()
        .map(|(f, y)| log_loss(weights.dot(f) + bias, *y))
        .sum::<f64>()
        / examples.len() as f64
}

fn featurize(hasher: &FeatureHasher, dataset: &Dataset) -> Vec<(Features, f64)> {
    dataset
        .documents
        .iter()
        .map(|d| (hasher.features(&d.surfaces()), d.label.target()))
        .collect()
}

/// SGD on logistic loss from zero weights; returns the best-validation-loss
/// weights.
pub fn train(
    dataset: &Dataset,
    val: &Dataset,
    config: &ModelConfig,
    seed: u64,
) -> Result<(LinearTextModel, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let (pos, neg) = dataset.label_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }

    let hasher = FeatureHasher::new(config.dims_log2, config.use_bigrams);
    let train_set = featurize(&hasher, dataset);
    let val_set = featurize(&hasher, val);

    let mut rng = TracedRng::derived(seed, &[b"train"]);
    let mut weights = ScaledWeights::zeros(hasher.dims());
    let mut bias = 0.0;
    let shrink = 1.0 - config.lr * config.l2;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (weights.materialize(), bias);
    let mut curve = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let (features, target) = &train_set[i];
            let g = logistic(weights.dot(features) + bias) - target;
            weights.update(shrink, config.lr * g, features);
            bias -= config.lr * g;
        }
        let loss = mean_log_loss(&weights, bias, &val_set);
        curve.push(loss);
        let decision = stopper.observe(epoch, loss);
        if decision.improved {
            best = (weights.materialize(), bias);
        }
        if decision.stop {
            break;
        }
    }

    let model = LinearTextModel {
        config: *config,
        weights: best.0,
        bias: best.1,
    };
    let final_train_accuracy = evaluate_accuracy(&model, dataset)?;
    let report = TrainReport {
        epochs_run: curve.len(),
        val_loss_curve: curve,
        best_epoch: stopper.best_epoch(),
        final_train_accuracy,
    };
    Ok((model, report))
}

pub fn predict_label<M: ClassifierModel + ?Sized>(model: &M, doc: &Document) -> bool {
    model.predict_proba(doc) >= 0.5
}

/// Fraction of documents whose thresholded prediction matches the label.
pub fn evaluate_accuracy<M: ClassifierModel + ?Sized>(model: &M, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let correct = dataset
        .documents
        .iter()
        .filter(|d| predict_label(model, d) == d.label.is_positive())
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, SplitTag};

    fn small() -> ModelConfig {
        ModelConfig {
            dims_log2: 10,
            ..ModelConfig::default()
        }
    }

    fn ds(rows: &[(&str, bool)], split: SplitTag) -> Dataset {
        let docs = rows
            .iter()
            .enumerate()
            .map(|(i, (t, p))| Document::from_text(format!("d{i}"), t, Label::from_positive(*p), &[]).unwrap())
            .collect();
        Dataset::new(docs, split).unwrap()
    }

    #[test]
    fn zero_model_is_undecided() {
        let m = LinearTextModel::zeros(small());
        assert_eq!(m.predict_surfaces(&["anything", "at", "all"]), 0.5);
    }

    #[test]
    fn hand_set_weights() {
        let mut m = LinearTextModel::zeros(small());
        m.set_token_weight("good", 2.0);
        let p = m.predict_surfaces(&["good", "good"]);
        assert!((p - 0.982_013_790_037_908_5).abs() < 1e-12);
        assert!((m.predict_surfaces(&["GOOD"]) - logistic(2.0)).abs() < 1e-15);

        let mut m = LinearTextModel::zeros(small());
        m.bias = -1.0;
        let p = m.predict_surfaces(&["qqq", "zzz"]);
        assert!((p - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_arithmetic() {
        let mut s = EarlyStopping::new(5);
        let mut run = 0;
        for (epoch, loss) in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0].into_iter().enumerate() {
            run = epoch + 1;
            if s.observe(run, loss).stop {
                break;
            }
        }
        assert_eq!(run, 6);
        assert_eq!(s.best_epoch(), 1);

        let mut s = EarlyStopping::new(5);
        for epoch in 1..=20 {
            assert!(!s.observe(epoch, 1.0 / epoch as f64).stop);
        }
        assert_eq!(s.best_epoch(), 20);

        // ties do not count as improvement
        let mut s = EarlyStopping::new(2);
        s.observe(1, 1.0);
        assert!(!s.observe(2, 1.0).stop);
        assert!(s.observe(3, 1.0).stop);
    }

    #[test]
    fn separable_toy_set_is_fit() {
        let train_set = ds(
            &[
                ("a good film", true),
                ("good acting here", true),
                ("so good", true),
                ("a bad film", false),
                ("bad acting here", false),
                ("so bad", false),
            ],
            SplitTag::Train,
        );
        let val = ds(&[("good", true), ("bad", false)], SplitTag::Validation);
        let (model, report) = train(&train_set, &val, &small(), 3).unwrap();
        assert_eq!(report.final_train_accuracy, 1.0);
        assert!(model.token_weight("good") > 0.0);
        assert!(model.token_weight("bad") < 0.0);
        assert_eq!(report.val_loss_curve.len(), report.epochs_run);
    }

    #[test]
    fn training_errors() {
        let one_class = ds(&[("x", true), ("y", true)], SplitTag::Train);
        let val = ds(&[("x", true)], SplitTag::Validation);
        assert!(matches!(train(&one_class, &val, &small(), 0), Err(Error::SingleClass)));
        let ok = ds(&[("x", true), ("y", false)], SplitTag::Train);
        let empty = Dataset::new(vec![], SplitTag::Validation).unwrap();
        assert!(matches!(train(&ok, &empty, &small(), 0), Err(Error::Empty(_))));
        assert!(evaluate_accuracy(&LinearTextModel::zeros(small()), &empty).is_err());
    }

    #[test]
    fn majority_model_scores_half_on_balanced_set() {
        let set = ds(&[("a", true), ("b", false), ("c", true), ("d", false)], SplitTag::Test);
        let mut m = LinearTextModel::zeros(small());
        m.bias = 1.0;
        assert_eq!(evaluate_accuracy(&m, &set).unwrap(), 0.5);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = LinearTextModel::zeros(small());
        m.set_token_weight("good", 0.1 + 0.2);
        m.bias = -1.0 / 3.0;
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        assert_eq!(LinearTextModel::load(&path).unwrap(), m);
    }
}

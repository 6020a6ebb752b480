//! Familiar/unfamiliar MLP over awareness vectors.
//!
//! ReLU hidden layers and a single logit; `p = sigmoid(logit)` is the
//! probability of *unfamiliar*. Trained with binary cross-entropy and Adam.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::awareness::{AwarenessVector, VectorSource};
use crate::binio::{put_f32s, put_u32, read_file, to_u32, write_file, ByteReader};
use crate::digest::sha256_hex;
use crate::error::{KamirError, Result};
use crate::gradcheck::{central_difference, GradCheckReport};
use crate::label::Label;
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn_acc, DenseMatrix};

pub const CLASSIFIER_MAGIC: &[u8; 8] = b"KAMCLF01";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub vector: AwarenessVector,
    pub label: Label,
}

impl LabeledVector {
    pub fn new(doc_id: impl Into<String>, values: Vec<f32>, label: Label) -> Self {
        LabeledVector {
            vector: AwarenessVector {
                doc_id: doc_id.into(),
                values,
                source: VectorSource::InternalModel,
            },
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![64],
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(KamirError::Config("hidden widths must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(KamirError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(KamirError::Config(format!("lr must be > 0 (got {})", self.lr)));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(t: f32) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(KamirError::Config(format!("threshold must lie in (0, 1), got {t}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: DenseMatrix,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct AwarenessClassifier {
    pub layers: Vec<DenseLayer>,
    pub threshold: f32,
    /// Training seed; not stored in checkpoints.
    pub seed: Option<u64>,
}

/// Weights and threshold; the seed is provenance only.
impl PartialEq for AwarenessClassifier {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.threshold.to_bits() == other.threshold.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub label: Label,
    pub probability: f64,
}

struct Activations {
    /// `inputs[l]` is the input to layer `l`, `B × in_l`.
    inputs: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

impl AwarenessClassifier {
    /// He-scaled Gaussian weights, zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], threshold: f32, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(KamirError::Config("classifier input size must be >= 1".into()));
        }
        check_threshold(threshold)?;
        let mut rng = SeededRng::new(seed);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 2 < sizes.len() { 2.0 } else { 1.0 };
                DenseLayer {
                    weight: DenseMatrix::gaussian(w[1], w[0], (gain / w[0] as f32).sqrt(), &mut rng),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(AwarenessClassifier {
            layers,
            threshold,
            seed: Some(seed),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    /// `[input, hidden…, 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.rows()));
        s
    }

    pub fn zeros_like(&self) -> AwarenessClassifier {
        AwarenessClassifier {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            threshold: self.threshold,
            seed: None,
        }
    }

    /// Layer order, weight before bias.
    pub fn params(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let DenseLayer { weight, bias } = l;
                [weight.as_mut_slice(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(KamirError::Shape(format!(
                "awareness vector has length {len}, classifier expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn forward(&self, x: Vec<f32>, batch: usize) -> Activations {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (d_out, d_in) = layer.weight.shape();
            let mut z = vec![0.0f32; batch * d_out];
            matmul_nt(&cur, layer.weight.as_slice(), batch, d_in, d_out, &mut z);
            for row in z.chunks_exact_mut(d_out) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                    if i < last {
                        *v = v.max(0.0);
                    }
                }
            }
            inputs.push(std::mem::replace(&mut cur, z));
        }
        Activations {
            inputs,
            logits: cur,
        }
    }

    /// Raw logit for one vector.
    pub fn logit(&self, values: &[f32]) -> Result<f32> {
        self.check_dim(values.len())?;
        Ok(self.forward(values.to_vec(), 1).logits[0])
    }

    pub fn classify(&self, values: &[f32]) -> Result<Classification> {
        let z = self.logit(values)?;
        let probability = sigmoid64(z as f64);
        let label = if probability >= self.threshold as f64 {
            Label::Unfamiliar
        } else {
            Label::Familiar
        };
        Ok(Classification { label, probability })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let sizes = self.layer_sizes();
        let mut out = Vec::new();
        out.extend_from_slice(CLASSIFIER_MAGIC);
        put_u32(&mut out, to_u32(sizes.len(), "layer count")?);
        for s in sizes {
            put_u32(&mut out, to_u32(s, "layer size")?);
        }
        put_f32s(&mut out, &[self.threshold]);
        for p in self.params() {
            put_f32s(&mut out, p);
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CLASSIFIER_MAGIC)?;
        let count_off = r.offset();
        let n = r.u32("layer count")? as usize;
        if n < 2 {
            return Err(KamirError::format(count_off, format!("layer count {n} < 2")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let off = r.offset();
            let s = r.u32("layer size")? as usize;
            if s == 0 {
                return Err(KamirError::format(off, "layer size 0"));
            }
            sizes.push(s);
        }
        if sizes[n - 1] != 1 {
            return Err(KamirError::format(
                count_off + 4 * n as u64,
                format!("output size {} != 1", sizes[n - 1]),
            ));
        }
        let t_off = r.offset();
        let threshold = r.f32("threshold")?;
        check_threshold(threshold).map_err(|e| KamirError::format(t_off, e.to_string()))?;
        let mut layers = Vec::with_capacity(n - 1);
        for w in sizes.windows(2) {
            let off = r.offset();
            let weight = r.f32s(w[0] * w[1], "weights")?;
            let bias = r.f32s(w[1], "biases")?;
            if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(KamirError::format(off, "non-finite classifier weight"));
            }
            layers.push(DenseLayer {
                weight: DenseMatrix::from_vec(w[1], w[0], weight)?,
                bias,
            });
        }
        r.finish()?;
        Ok(AwarenessClassifier {
            layers,
            threshold,
            seed: None,
        })
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.checkpoint_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.checkpoint_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&read_file(path)?)
    }
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` from the logit, without overflow.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn stack(clf: &AwarenessClassifier, batch: &[&LabeledVector]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut x = Vec::with_capacity(batch.len() * clf.input_dim());
    let mut y = Vec::with_capacity(batch.len());
    for ex in batch {
        clf.check_dim(ex.vector.values.len())?;
        x.extend_from_slice(&ex.vector.values);
        y.push(ex.label.as_target());
    }
    Ok((x, y))
}

/// Mean BCE over the batch and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    clf: &AwarenessClassifier,
    batch: &[&LabeledVector],
) -> Result<(f64, AwarenessClassifier)> {
    if batch.is_empty() {
        return Err(KamirError::invalid("empty batch"));
    }
    let b = batch.len();
    let (x, y) = stack(clf, batch)?;
    let acts = clf.forward(x, b);
    let mut loss = 0.0f64;
    let mut delta: Vec<f32> = Vec::with_capacity(b);
    for (&z, &t) in acts.logits.iter().zip(&y) {
        loss += bce_with_logit(z as f64, t as f64);
        delta.push(((sigmoid64(z as f64) - t as f64) / b as f64) as f32);
    }
    loss /= b as f64;
    let mut grads = clf.zeros_like();
    for l in (0..clf.layers.len()).rev() {
        let (d_out, d_in) = clf.layers[l].weight.shape();
        let input = &acts.inputs[l];
        let g = &mut grads.layers[l];
        matmul_tn_acc(&delta, input, b, d_out, d_in, g.weight.as_mut_slice());
        for row in delta.chunks_exact(d_out) {
            for (gb, d) in g.bias.iter_mut().zip(row) {
                *gb += d;
            }
        }
        if l > 0 {
            let mut prev = vec![0.0f32; b * d_in];
            matmul_nn(&delta, clf.layers[l].weight.as_slice(), b, d_out, d_in, &mut prev);
            // ReLU mask: the input to layer l is the activated output of l-1.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    if !loss.is_finite() {
        return Err(KamirError::NonFinite("classifier loss".into()));
    }
    Ok((loss, grads))
}

/// Mean BCE only.
pub fn batch_loss(clf: &AwarenessClassifier, batch: &[&LabeledVector]) -> Result<f64> {
    if batch.is_empty() {
        return Err(KamirError::invalid("empty batch"));
    }
    let (x, y) = stack(clf, batch)?;
    let acts = clf.forward(x, batch.len());
    Ok(acts
        .logits
        .iter()
        .zip(&y)
        .map(|(&z, &t)| bce_with_logit(z as f64, t as f64))
        .sum::<f64>()
        / batch.len() as f64)
}

fn check_training_data(data: &[LabeledVector]) -> Result<usize> {
    let k = data
        .first()
        .ok_or_else(|| KamirError::invalid("no training examples"))?
        .vector
        .values
        .len();
    if let Some(bad) = data.iter().find(|d| d.vector.values.len() != k) {
        return Err(KamirError::Shape(format!(
            "vector {:?} has length {}, expected {k}",
            bad.vector.doc_id,
            bad.vector.values.len()
        )));
    }
    let unfamiliar = data.iter().filter(|d| d.label == Label::Unfamiliar).count();
    let familiar = data.len() - unfamiliar;
    if familiar < 2 || unfamiliar < 2 {
        return Err(KamirError::invalid(format!(
            "training needs at least 2 examples per class (familiar {familiar}, unfamiliar {unfamiliar})"
        )));
    }
    Ok(k)
}

/// Minibatch Adam on shuffled data. Returns the classifier and the mean
/// training loss of each epoch.
pub fn train_classifier(
    data: &[LabeledVector],
    cfg: &ClassifierConfig,
) -> Result<(AwarenessClassifier, Vec<f64>)> {
    cfg.validate()?;
    let k = check_training_data(data)?;
    let mut clf = AwarenessClassifier::new(k, &cfg.hidden, cfg.threshold, cfg.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        clf.param_count(),
    );
    let mut rng = SeededRng::new(cfg.seed).fork(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledVector> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = loss_and_gradient(&clf, &batch)?;
            total += loss * batch.len() as f64;
            adam.step(clf.params_mut(), grads.params());
        }
        history.push(total / data.len() as f64);
    }
    Ok((clf, history))
}

/// Counts with *unfamiliar* as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        self.auc
            .ok_or_else(|| KamirError::invalid("AUC is undefined when only one class is present"))
    }
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counted as one half. `positive[i]` marks the positive
/// class. Computed from average ranks in `O(n log n)`.
pub fn mann_whitney_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(KamirError::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(KamirError::NonFinite("AUC score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KamirError::invalid("AUC is undefined when only one class is present"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn evaluate(clf: &AwarenessClassifier, data: &[LabeledVector]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(KamirError::invalid("cannot evaluate on empty data"));
    }
    let mut confusion = Confusion::default();
    let mut scores = Vec::with_capacity(data.len());
    let mut positive = Vec::with_capacity(data.len());
    for ex in data {
        let c = clf.classify(&ex.vector.values)?;
        let truth = ex.label == Label::Unfamiliar;
        match (c.label == Label::Unfamiliar, truth) {
            (true, true) => confusion.true_positive += 1,
            (true, false) => confusion.false_positive += 1,
            (false, false) => confusion.true_negative += 1,
            (false, true) => confusion.false_negative += 1,
        }
        // The logit ranks identically to the probability without saturating.
        scores.push(clf.logit(&ex.vector.values)? as f64);
        positive.push(truth);
    }
    let correct = confusion.true_positive + confusion.true_negative;
    let auc = if positive.iter().all(|&p| p) || positive.iter().all(|&p| !p) {
        None
    } else {
        Some(mann_whitney_auc(&scores, &positive)?)
    };
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        auc,
        confusion,
    })
}

pub const GRADCHECK_STEP: f32 = 1e-3;
pub const GRADCHECK_FLOOR: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-2;

/// Central differences on every parameter against the analytic gradient.
pub fn gradient_check(clf: &AwarenessClassifier, batch: &[&LabeledVector]) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradient(clf, batch)?;
    let analytic: Vec<f32> = grads.params().into_iter().flatten().copied().collect();
    let mut probe = clf.clone();
    let mut pairs = Vec::with_capacity(analytic.len());
    let mut flat = 0usize;
    for t in 0..probe.params().len() {
        for i in 0..probe.params()[t].len() {
            let x = probe.params()[t][i];
            let numeric = central_difference(
                |v| {
                    probe.params_mut()[t][i] = v;
                    batch_loss(&probe, batch).unwrap_or(f64::NAN)
                },
                x,
                GRADCHECK_STEP,
            );
            probe.params_mut()[t][i] = x;
            pairs.push((analytic[flat] as f64, numeric));
            flat += 1;
        }
    }
    Ok(GradCheckReport::from_pairs(&pairs, GRADCHECK_FLOOR, GRADCHECK_TOLERANCE))
}

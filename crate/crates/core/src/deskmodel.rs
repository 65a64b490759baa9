//! A small built-in text classifier: signed hashed bag-of-words features and
//! a linear softmax head trained with AdamW and validation-F1 early stopping.

use std::io::Write;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, Record, Split};
use crate::error::{OodError, Result};
use crate::hash::{fnv1a64, fnv1a64_extend};
use crate::matrix::Matrix;
use crate::numeric::{argmax, logsumexp, softmax};
use crate::pack::{ClassifierHead, FeaturePack};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Raw token counts.
    #[default]
    Count,
    /// 1 per distinct token.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub hash_seed: u64,
    pub dim: usize,
    #[serde(default)]
    pub weighting: Weighting,
}

/// Sparse feature vector: sorted `(bucket, value)` pairs.
pub type SparseVec = Vec<(u32, f64)>;

impl Featurizer {
    pub fn new(dim: usize, hash_seed: u64) -> Self {
        Self {
            hash_seed,
            dim,
            weighting: Weighting::Count,
        }
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let h = fnv1a64_extend(fnv1a64(&self.hash_seed.to_le_bytes()), token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }

    /// L2-normalized signed bucket counts. The flag is `true` when the text
    /// produced a zero vector (no tokens, or every bucket cancelled out).
    pub fn featurize_sparse(&self, text: &str) -> (SparseVec, bool) {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower.split_whitespace().collect();
        if self.weighting == Weighting::Binary {
            tokens.sort_unstable();
            tokens.dedup();
        }
        let mut acc = std::collections::BTreeMap::<u32, f64>::new();
        for t in tokens {
            let (b, s) = self.bucket(t);
            *acc.entry(b as u32).or_insert(0.0) += s;
        }
        let norm = acc.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (Vec::new(), true);
        }
        let v = acc
            .into_iter()
            .filter(|&(_, x)| x != 0.0)
            .map(|(b, x)| (b, x / norm))
            .collect();
        (v, false)
    }

    pub fn featurize(&self, text: &str) -> (Vec<f64>, bool) {
        let (sparse, empty) = self.featurize_sparse(text);
        (densify(&sparse, self.dim), empty)
    }
}

pub fn densify(v: &[(u32, f64)], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for &(j, x) in v {
        out[j as usize] = x;
    }
    out
}

fn sparsify(v: &[f64]) -> SparseVec {
    v.iter()
        .enumerate()
        .filter(|(_, &x)| x != 0.0)
        .map(|(j, &x)| (j as u32, x))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Decoupled decay, applied to the weight matrix only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub hash_seed: u64,
    pub weighting: Weighting,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            learning_rate: 0.05,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 2021,
            feature_dim: 512,
            hash_seed: 0,
            weighting: Weighting::Count,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OodError::Config(m));
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 || self.feature_dim == 0 {
            return bad("max_epochs, patience, batch_size and feature_dim must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer {
            hash_seed: self.hash_seed,
            dim: self.feature_dim,
            weighting: self.weighting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the whole training set after the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

/// Linear softmax head in f64, `weight` row-major C x D.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub n_classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weight: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn logits_sparse(&self, x: &[(u32, f64)]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|k| {
                let row = &self.weight[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + x.iter().map(|&(j, v)| row[j as usize] * v).sum::<f64>()
            })
            .collect()
    }

    pub fn to_classifier_head(&self) -> Result<ClassifierHead> {
        let w = Matrix::new(
            self.n_classes,
            self.dim,
            self.weight.iter().map(|&v| v as f32).collect(),
        )?;
        ClassifierHead::new(w, self.bias.iter().map(|&v| v as f32).collect())
    }
}

/// Softmax cross-entropy of one sample and its gradient w.r.t. the head
/// (`grad_w` row-major C x D).
pub fn cross_entropy_grad(head: &LinearHead, x: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let sx = sparsify(x);
    let z = head.logits_sparse(&sx);
    let loss = logsumexp(&z) - z[label];
    let mut g = softmax(&z);
    g[label] -= 1.0;
    let mut grad_w = vec![0.0; head.n_classes * head.dim];
    for (k, &gk) in g.iter().enumerate() {
        for (j, &xj) in x.iter().enumerate() {
            grad_w[k * head.dim + j] = gk * xj;
        }
    }
    (loss, grad_w, g)
}

fn mean_loss(head: &LinearHead, xs: &[SparseVec], ys: &[usize]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = head.logits_sparse(x);
            logsumexp(&z) - z[y]
        })
        .sum();
    total / xs.len() as f64
}

fn predict_all(head: &LinearHead, xs: &[SparseVec]) -> Vec<usize> {
    xs.iter().map(|x| argmax(&head.logits_sparse(x))).collect()
}

struct AdamW {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(head: &LinearHead) -> Self {
        Self {
            m_w: vec![0.0; head.weight.len()],
            v_w: vec![0.0; head.weight.len()],
            m_b: vec![0.0; head.bias.len()],
            v_b: vec![0.0; head.bias.len()],
            t: 0,
        }
    }

    fn step(&mut self, head: &mut LinearHead, gw: &[f64], gb: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64, decay: f64| {
            *p -= lr * decay * *p;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        let weights = head.weight.iter_mut().zip(&mut self.m_w).zip(&mut self.v_w).zip(gw);
        for (((p, m), v), &g) in weights {
            update(p, m, v, g, wd);
        }
        let biases = head.bias.iter_mut().zip(&mut self.m_b).zip(&mut self.v_b).zip(gb);
        for (((p, m), v), &g) in biases {
            update(p, m, v, g, 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub head: LinearHead,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose head was kept.
    pub selected_epoch: usize,
}

/// Trains a linear head on pre-computed sparse features.
pub fn train_head(
    train_x: &[SparseVec],
    train_y: &[usize],
    val_x: &[SparseVec],
    val_y: &[usize],
    n_classes: usize,
    dim: usize,
    config: &TrainingConfig,
) -> Result<HeadFit> {
    config.validate()?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(OodError::Empty("train and val splits must be non-empty".into()));
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(OodError::Dimension("feature and label counts differ".into()));
    }
    if n_classes < 2 {
        return Err(OodError::Degenerate(format!("need at least 2 classes, got {n_classes}")));
    }
    if let Some(&y) = train_y.iter().chain(val_y).find(|&&y| y >= n_classes) {
        return Err(OodError::UnknownClass(y.to_string()));
    }
    if train_x.iter().chain(val_x).flatten().any(|&(j, _)| j as usize >= dim) {
        return Err(OodError::Dimension(format!("feature index outside dimension {dim}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = LinearHead::zeros(n_classes, dim);
    for w in &mut head.weight {
        *w = rng.gen_range(-INIT_SCALE..INIT_SCALE);
    }
    let mut opt = AdamW::new(&head);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut gw = vec![0.0; n_classes * dim];
    let mut gb = vec![0.0; n_classes];

    // (val F1, val loss, head, epoch)
    let mut best: Option<(f64, f64, LinearHead, usize)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut p = softmax(&head.logits_sparse(&train_x[i]));
                p[train_y[i]] -= 1.0;
                for (k, &pk) in p.iter().enumerate() {
                    gb[k] += pk * scale;
                    let row = &mut gw[k * dim..(k + 1) * dim];
                    for &(j, x) in &train_x[i] {
                        row[j as usize] += pk * x * scale;
                    }
                }
            }
            opt.step(&mut head, &gw, &gb, config.learning_rate, config.weight_decay);
        }

        let pred = predict_all(&head, val_x);
        let f1 = classification_report_from(val_y, &pred, n_classes)?.macro_f1;
        let rec = EpochRecord {
            epoch,
            train_loss: mean_loss(&head, train_x, train_y),
            val_loss: mean_loss(&head, val_x, val_y),
            val_macro_f1: f1,
        };
        debug!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}, val F1 {:.4}",
            rec.train_loss, rec.val_loss, rec.val_macro_f1
        );
        let val_loss = rec.val_loss;
        history.push(rec);
        let improved = best.as_ref().is_none_or(|(b, _, _, _)| f1 > *b);
        // equal F1 (typically saturated at 1.0): keep the better-fit head,
        // but only F1 gains reset patience
        let tie_better = best
            .as_ref()
            .is_some_and(|(b, l, _, _)| f1 == *b && val_loss < *l);
        if improved || tie_better {
            best = Some((f1, val_loss, head.clone(), epoch));
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                debug!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, _, head, selected_epoch) = best.expect("at least one epoch ran");
    Ok(HeadFit {
        head,
        history,
        selected_epoch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub featurizer: Featurizer,
    pub head: LinearHead,
    pub label_names: Vec<String>,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

fn featurize_records<'a>(f: &Featurizer, records: impl Iterator<Item = &'a Record>) -> (Vec<SparseVec>, Vec<usize>, usize) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut empty = 0;
    for r in records {
        let (x, e) = f.featurize_sparse(&r.text);
        empty += usize::from(e);
        xs.push(x);
        ys.push(r.label);
    }
    (xs, ys, empty)
}

/// Trains on the corpus' train split, selecting the epoch by val macro-F1.
pub fn train(corpus: &LabeledCorpus, config: &TrainingConfig) -> Result<TrainedModel> {
    config.validate()?;
    if corpus.n_classes() < 2 {
        return Err(OodError::Degenerate("single-class corpus".into()));
    }
    let f = config.featurizer();
    let (tx, ty, te) = featurize_records(&f, corpus.split(Split::Train));
    let (vx, vy, ve) = featurize_records(&f, corpus.split(Split::Val));
    if tx.is_empty() {
        return Err(OodError::Empty("train split is empty".into()));
    }
    if vx.is_empty() {
        return Err(OodError::Empty("val split is empty".into()));
    }
    if te + ve > 0 {
        warn!("{} train/val texts featurize to zero vectors", te + ve);
    }
    let fit = train_head(&tx, &ty, &vx, &vy, corpus.n_classes(), f.dim, config)?;
    Ok(TrainedModel {
        featurizer: f,
        head: fit.head,
        label_names: corpus.label_names().to_vec(),
        history: fit.history,
        selected_epoch: fit.selected_epoch,
    })
}

impl TrainedModel {
    pub fn predict(&self, text: &str) -> usize {
        argmax(&self.head.logits_sparse(&self.featurizer.featurize_sparse(text).0))
    }

    pub fn classifier_head(&self) -> Result<ClassifierHead> {
        self.head.to_classifier_head()
    }

    /// Features and logits of `texts` as a pack split without labels.
    pub fn export_texts<'a>(&self, split_name: &str, texts: impl IntoIterator<Item = &'a str>) -> Result<FeaturePack> {
        let head = self.classifier_head()?;
        let mut feats = Vec::new();
        let mut n = 0;
        for t in texts {
            let (x, _) = self.featurizer.featurize(t);
            feats.extend(x.iter().map(|&v| v as f32));
            n += 1;
        }
        if n == 0 {
            return Err(OodError::Empty(format!("no records for split `{split_name}`")));
        }
        let features = Matrix::new(n, self.featurizer.dim, feats)?;
        if features.cols() != head.dim() {
            return Err(OodError::Dimension(format!(
                "featurizer dimension {} but head expects {}",
                features.cols(),
                head.dim()
            )));
        }
        let logits = head.apply(&features)?;
        FeaturePack::new(split_name, features, head.n_classes())?.with_logits(logits)
    }

    /// Features, logits and labels of `records` as a pack split.
    pub fn export_records<'a>(
        &self,
        split_name: &str,
        records: impl IntoIterator<Item = &'a Record>,
    ) -> Result<FeaturePack> {
        let records: Vec<&Record> = records.into_iter().collect();
        let labels = records.iter().map(|r| r.label as u32).collect();
        self.export_texts(split_name, records.iter().map(|r| r.text.as_str()))?
            .with_labels(labels)
    }

    /// Exports one split of `corpus`. Labels must index this model's classes.
    pub fn export_pack(&self, corpus: &LabeledCorpus, split: Split) -> Result<FeaturePack> {
        self.export_records(split.as_str(), corpus.split(split))
    }

    pub fn classification_report(&self, records: &[Record]) -> Result<ClassificationReport> {
        if records.is_empty() {
            return Err(OodError::Empty("classification report on an empty split".into()));
        }
        let truth: Vec<usize> = records.iter().map(|r| r.label).collect();
        let pred: Vec<usize> = records.iter().map(|r| self.predict(&r.text)).collect();
        classification_report_from(&truth, &pred, self.head.n_classes)
    }
}

/// Writes `epoch,train_loss,val_loss,val_macro_f1` rows.
pub fn write_history_csv<W: Write>(writer: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for rec in history {
        w.serialize(rec).map_err(|e| OodError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| OodError::Serde(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

/// Macro averages over the classes that occur in `truth` or `pred`; a ratio
/// with a zero denominator counts as 0.
pub fn classification_report_from(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ClassificationReport> {
    if truth.is_empty() {
        return Err(OodError::Empty("classification report on an empty split".into()));
    }
    if truth.len() != pred.len() {
        return Err(OodError::Dimension("truth and prediction lengths differ".into()));
    }
    if let Some(&y) = truth.iter().chain(pred).find(|&&y| y >= n_classes) {
        return Err(OodError::UnknownClass(y.to_string()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut n_true = vec![0usize; n_classes];
    let mut n_pred = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        n_true[t] += 1;
        n_pred[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let present: Vec<usize> = (0..n_classes).filter(|&k| n_true[k] + n_pred[k] > 0).collect();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &k in &present {
        let p = ratio(tp[k], n_pred[k]);
        let r = ratio(tp[k], n_true[k]);
        p_sum += p;
        r_sum += r;
        f_sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let m = present.len() as f64;
    Ok(ClassificationReport {
        accuracy: ratio(tp.iter().sum(), truth.len()),
        macro_f1: f_sum / m,
        macro_precision: p_sum / m,
        macro_recall: r_sum / m,
    })
}

//! Composite adversarial loss: margin + λ_f · fluency + λ_s · similarity.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, ReferenceModel};
use crate::relaxation::{RelaxedSequence, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_f: 1.0, lambda_s: 20.0, kappa: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_s", self.lambda_s), ("kappa", self.kappa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub margin: f64,
    pub fluency: f64,
    pub similarity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(margin: f64, fluency: f64, similarity: f64, weights: &LossWeights) -> Self {
        Self { margin, fluency, similarity, total: margin + weights.lambda_f * fluency + weights.lambda_s * similarity }
    }
}

/// Index of the largest logit other than `y`, ties toward the smallest index.
fn best_other(logits: ArrayView1<f64>, y: usize) -> usize {
    let mut best = None;
    for (k, &v) in logits.iter().enumerate() {
        if k == y {
            continue;
        }
        match best {
            Some(b) if logits[b] >= v => {}
            _ => best = Some(k),
        }
    }
    best.expect("at least two labels")
}

fn check_label(logits: ArrayView1<f64>, y: usize) -> Result<()> {
    if logits.len() < 2 || y >= logits.len() {
        return Err(Error::LabelOutOfRange { label: y, num_labels: logits.len() });
    }
    Ok(())
}

/// `max(m_y − max_{k≠y} m_k + κ, 0)`.
pub fn margin_loss(logits: ArrayView1<f64>, y: usize, kappa: f64) -> Result<f64> {
    check_label(logits, y)?;
    let other = best_other(logits, y);
    Ok((logits[y] - logits[other] + kappa).max(0.0))
}

/// Gradient of [`margin_loss`] with respect to the logits (zero on the flat side).
pub fn margin_loss_grad(logits: ArrayView1<f64>, y: usize, kappa: f64) -> Result<Array1<f64>> {
    check_label(logits, y)?;
    let other = best_other(logits, y);
    let mut g = Array1::zeros(logits.len());
    if logits[y] - logits[other] + kappa > 0.0 {
        g[y] = 1.0;
        g[other] = -1.0;
    }
    Ok(g)
}

fn fluency_from_probs(g: &dyn ReferenceModel, probs: ArrayView2<f64>) -> f64 {
    let next = g.next_token_distributions(probs);
    -(&probs * &next).sum()
}

fn fluency_grad_from_probs(g: &dyn ReferenceModel, probs: ArrayView2<f64>) -> Array2<f64> {
    let next = g.next_token_distributions(probs);
    let through_model = g.next_token_vjp(probs, (-&probs).view());
    through_model - next
}

/// `−Σ_i Σ_j (π_i)_j · g(π_1..π_{i−1})_j`.
pub fn fluency_loss(g: &dyn ReferenceModel, seq: &RelaxedSequence) -> Result<f64> {
    if seq.vocab_size() != g.vocab_size() {
        return Err(Error::shape(g.vocab_size(), seq.vocab_size()));
    }
    Ok(fluency_from_probs(g, seq.probability_matrix().view()))
}

/// Inverse token frequencies of `x`, rescaled to sum to `n`.
pub fn inverse_frequency_weights(x: &TokenSequence, frequencies: &[f64]) -> Result<Array1<f64>> {
    let raw = x
        .ids()
        .iter()
        .map(|&id| frequencies.get(id).map(|f| 1.0 / f).ok_or(Error::TokenOutOfRange { id, size: frequencies.len() }))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = raw.iter().sum();
    let n = raw.len() as f64;
    Ok(Array1::from(raw) * (n / total))
}

/// For each original embedding row, the index of its best-matching
/// adversarial row (ties toward the smallest index).
fn best_matches(original: ArrayView2<f64>, adversarial: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    let scores = original.dot(&adversarial.t());
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .unzip()
}

fn similarity_from_context(original: ArrayView2<f64>, adversarial: ArrayView2<f64>, w: ArrayView1<f64>) -> f64 {
    let (_, best) = best_matches(original, adversarial);
    -best.iter().zip(w.iter()).map(|(s, wi)| wi * s).sum::<f64>()
}

fn similarity_grad_from_probs(
    g: &dyn ReferenceModel,
    probs: ArrayView2<f64>,
    original: ArrayView2<f64>,
    w: ArrayView1<f64>,
) -> Array2<f64> {
    let adversarial = g.contextual_embeddings(probs);
    let (matches, _) = best_matches(original, adversarial.view());
    let mut upstream = Array2::zeros(adversarial.raw_dim());
    for (i, &j) in matches.iter().enumerate() {
        let mut row = upstream.row_mut(j);
        row.scaled_add(-w[i], &original.row(i));
    }
    g.contextual_vjp(probs, upstream.view())
}

/// `−Σ_i w_i · max_j v_iᵀ v'_j`, with `v = φ_g(x)` and `v' = φ_g(x')`.
pub fn similarity_loss(
    g: &dyn ReferenceModel,
    seq_adv: &RelaxedSequence,
    x: &TokenSequence,
    weights: ArrayView1<f64>,
) -> Result<f64> {
    if seq_adv.len() != x.len() || weights.len() != x.len() {
        return Err(Error::shape(x.len(), (seq_adv.len(), weights.len())));
    }
    if seq_adv.vocab_size() != g.vocab_size() {
        return Err(Error::shape(g.vocab_size(), seq_adv.vocab_size()));
    }
    let original = g.contextual_embeddings(x.one_hot(g.vocab_size()).view());
    let adversarial = g.contextual_embeddings(seq_adv.probability_matrix().view());
    Ok(similarity_from_context(original.view(), adversarial.view(), weights))
}

/// Per-term gradients with respect to the probability matrix, plus the total
/// chained back to the logits.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub breakdown: LossBreakdown,
    pub margin_probs: Array2<f64>,
    pub fluency_probs: Array2<f64>,
    pub similarity_probs: Array2<f64>,
    pub total_probs: Array2<f64>,
    pub total_logits: Array2<f64>,
}

/// Everything the loss needs about one attack target: the models, the
/// original sequence and label, the term weights, and cached quantities that
/// depend only on the original.
pub struct LossContext<'a> {
    classifier: &'a dyn Classifier,
    reference: &'a dyn ReferenceModel,
    original: TokenSequence,
    label: usize,
    weights: LossWeights,
    token_weights: Array1<f64>,
    original_context: Array2<f64>,
}

impl<'a> LossContext<'a> {
    pub fn new(
        classifier: &'a dyn Classifier,
        reference: &'a dyn ReferenceModel,
        original: TokenSequence,
        label: usize,
        weights: LossWeights,
        frequencies: &[f64],
    ) -> Result<Self> {
        weights.validate()?;
        let v = classifier.vocab_size();
        if reference.vocab_size() != v || frequencies.len() != v {
            return Err(Error::shape(v, (reference.vocab_size(), frequencies.len())));
        }
        if let Some(&id) = original.ids().iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        if label >= classifier.num_labels() {
            return Err(Error::LabelOutOfRange { label, num_labels: classifier.num_labels() });
        }
        let token_weights = inverse_frequency_weights(&original, frequencies)?;
        let original_context = reference.contextual_embeddings(original.one_hot(v).view());
        Ok(Self { classifier, reference, original, label, weights, token_weights, original_context })
    }

    pub fn classifier(&self) -> &'a dyn Classifier {
        self.classifier
    }

    pub fn reference(&self) -> &'a dyn ReferenceModel {
        self.reference
    }

    pub fn original(&self) -> &TokenSequence {
        &self.original
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn token_weights(&self) -> &Array1<f64> {
        &self.token_weights
    }

    pub fn vocab_size(&self) -> usize {
        self.classifier.vocab_size()
    }

    fn check(&self, seq: &RelaxedSequence) -> Result<()> {
        if seq.len() != self.original.len() || seq.vocab_size() != self.vocab_size() {
            return Err(Error::shape((self.original.len(), self.vocab_size()), (seq.len(), seq.vocab_size())));
        }
        Ok(())
    }

    /// Loss of an `n × |V|` probability matrix. Only forward model queries.
    pub fn evaluate_probs(&self, probs: ArrayView2<f64>) -> LossBreakdown {
        let logits = self.classifier.logits(probs);
        let other = best_other(logits.view(), self.label);
        let margin = (logits[self.label] - logits[other] + self.weights.kappa).max(0.0);
        let fluency = fluency_from_probs(self.reference, probs);
        let adversarial = self.reference.contextual_embeddings(probs);
        let similarity =
            similarity_from_context(self.original_context.view(), adversarial.view(), self.token_weights.view());
        LossBreakdown::combine(margin, fluency, similarity, &self.weights)
    }

    pub fn evaluate(&self, seq: &RelaxedSequence) -> Result<LossBreakdown> {
        self.check(seq)?;
        Ok(self.evaluate_probs(seq.probability_matrix().view()))
    }

    /// Loss of a discrete sequence, via its one-hot encoding.
    pub fn evaluate_tokens(&self, x: &TokenSequence) -> Result<LossBreakdown> {
        if x.len() != self.original.len() {
            return Err(Error::shape(self.original.len(), x.len()));
        }
        if let Some(&id) = x.ids().iter().find(|&&id| id >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange { id, size: self.vocab_size() });
        }
        Ok(self.evaluate_probs(x.one_hot(self.vocab_size()).view()))
    }

    /// Total loss of `seq` with its logits replaced by `theta`; frozen
    /// positions keep their tokens.
    pub fn total_at_logits(&self, seq: &RelaxedSequence, theta: &Array2<f64>) -> f64 {
        let mut probe = seq.clone();
        probe.theta_mut().assign(theta);
        self.evaluate_probs(probe.probability_matrix().view()).total
    }

    pub fn gradient(&self, seq: &RelaxedSequence) -> Result<LossGradient> {
        self.check(seq)?;
        let probs = seq.probability_matrix();
        let breakdown = self.evaluate_probs(probs.view());
        let logits = self.classifier.logits(probs.view());
        let d_logits = margin_loss_grad(logits.view(), self.label, self.weights.kappa)?;
        let margin_probs = if d_logits.iter().all(|&v| v == 0.0) {
            Array2::zeros(probs.raw_dim())
        } else {
            self.classifier.logits_vjp(probs.view(), d_logits.view())
        };
        let fluency_probs = fluency_grad_from_probs(self.reference, probs.view());
        let similarity_probs = similarity_grad_from_probs(
            self.reference,
            probs.view(),
            self.original_context.view(),
            self.token_weights.view(),
        );
        let total_probs =
            &margin_probs + &(&fluency_probs * self.weights.lambda_f) + &(&similarity_probs * self.weights.lambda_s);
        let total_logits = seq.chain_to_logits(&total_probs)?;
        Ok(LossGradient { breakdown, margin_probs, fluency_probs, similarity_probs, total_probs, total_logits })
    }

    /// `L(argmax-quantized seq) − L(seq)`.
    pub fn quantization_gap(&self, seq: &RelaxedSequence) -> Result<f64> {
        if seq.is_fully_quantized() {
            self.check(seq)?;
            return Ok(0.0);
        }
        let continuous = self.evaluate(seq)?.total;
        let discrete = self.evaluate(&seq.argmax_quantized())?.total;
        Ok(discrete - continuous)
    }

    /// Whether the classifier's prediction on `x` differs from the label.
    pub fn is_misclassified(&self, x: &TokenSequence) -> bool {
        let logits = self.classifier.logits(x.one_hot(self.vocab_size()).view());
        crate::relaxation::argmax(logits.view()) != self.label
    }
}

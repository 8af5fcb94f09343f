//! Differentiable model interfaces used by the adversarial loss, and small
//! seeded toy implementations of them.
//!
//! Models consume a relaxed sequence as its `n × |V|` probability matrix and
//! expose vector-Jacobian products with respect to that matrix. Gradients with
//! respect to logits are obtained by the caller through
//! [`RelaxedSequence::chain_to_logits`].

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relaxation::{softmax, softmax_vjp, RelaxedSequence};

/// The attacked classifier `m`.
pub trait Classifier: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn num_labels(&self) -> usize;

    /// Label logits for a sequence given as an `n × |V|` probability matrix.
    fn logits(&self, probs: ArrayView2<f64>) -> Array1<f64>;

    /// Gradient of `upstream · logits(P)` with respect to `P`.
    fn logits_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView1<f64>) -> Array2<f64>;
}

/// The reference model `g`: a causal next-token predictor plus a contextual
/// embedder.
pub trait ReferenceModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn context_dim(&self) -> usize;

    /// Row `i` is the next-token distribution given positions `< i`; row 0 is
    /// the empty-prefix prior.
    fn next_token_distributions(&self, probs: ArrayView2<f64>) -> Array2<f64>;

    /// Gradient of `<upstream, next_token_distributions(P)>` with respect to `P`.
    fn next_token_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64>;

    /// Unit-norm contextual embedding for every position.
    fn contextual_embeddings(&self, probs: ArrayView2<f64>) -> Array2<f64>;

    /// Gradient of `<upstream, contextual_embeddings(P)>` with respect to `P`.
    fn contextual_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64>;
}

fn check_vocab(expected: usize, seq: &RelaxedSequence) -> Result<()> {
    if seq.vocab_size() != expected {
        return Err(Error::shape(format!("|V| = {expected}"), format!("|V| = {}", seq.vocab_size())));
    }
    Ok(())
}

pub fn classify(model: &dyn Classifier, seq: &RelaxedSequence) -> Result<Array1<f64>> {
    check_vocab(model.vocab_size(), seq)?;
    Ok(model.logits(seq.probability_matrix().view()))
}

pub fn next_token_distributions(model: &dyn ReferenceModel, seq: &RelaxedSequence) -> Result<Array2<f64>> {
    check_vocab(model.vocab_size(), seq)?;
    Ok(model.next_token_distributions(seq.probability_matrix().view()))
}

pub fn contextual_embeddings(model: &dyn ReferenceModel, seq: &RelaxedSequence) -> Result<Array2<f64>> {
    check_vocab(model.vocab_size(), seq)?;
    Ok(model.contextual_embeddings(seq.probability_matrix().view()))
}

/// Wraps a classifier and counts forward and gradient queries.
#[derive(Debug)]
pub struct CountingClassifier<C> {
    inner: C,
    forward: AtomicUsize,
    gradient: AtomicUsize,
}

impl<C: Classifier> CountingClassifier<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, forward: AtomicUsize::new(0), gradient: AtomicUsize::new(0) }
    }

    pub fn forward_calls(&self) -> usize {
        self.forward.load(Ordering::SeqCst)
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Classifier> Classifier for CountingClassifier<C> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn num_labels(&self) -> usize {
        self.inner.num_labels()
    }

    fn logits(&self, probs: ArrayView2<f64>) -> Array1<f64> {
        self.forward.fetch_add(1, Ordering::SeqCst);
        self.inner.logits(probs)
    }

    fn logits_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView1<f64>) -> Array2<f64> {
        self.gradient.fetch_add(1, Ordering::SeqCst);
        self.inner.logits_vjp(probs, upstream)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn matrix_from_flat(rows: usize, cols: usize, flat: Vec<f64>, what: &str) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|_| Error::Config(format!("{what}: expected {rows}x{cols} parameters")))
}

fn vector_from_flat(len: usize, flat: Vec<f64>, what: &str) -> Result<Array1<f64>> {
    if flat.len() != len {
        return Err(Error::Config(format!("{what}: expected {len} parameters, got {}", flat.len())));
    }
    Ok(Array1::from(flat))
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean-pooled embedding classifier: `logits = Wᵀ · mean_i e(π_i) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    seed: u64,
    embedding: Array2<f64>,
    output: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct ToyClassifierFile {
    seed: u64,
    vocab_size: usize,
    embed_dim: usize,
    num_labels: usize,
    embedding: Vec<f64>,
    output: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyClassifier {
    /// Draws every parameter from a ChaCha stream keyed by `seed`. The output
    /// map is scaled by `logit_scale`.
    pub fn new(seed: u64, vocab_size: usize, embed_dim: usize, num_labels: usize, logit_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = normal_matrix(&mut rng, vocab_size, embed_dim, 1.0);
        let output = normal_matrix(&mut rng, embed_dim, num_labels, logit_scale / (embed_dim as f64).sqrt());
        let bias = normal_vector(&mut rng, num_labels, 0.1 * logit_scale);
        Self { seed, embedding, output, bias }
    }

    pub fn from_parts(seed: u64, embedding: Array2<f64>, output: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if embedding.ncols() != output.nrows() || output.ncols() != bias.len() {
            return Err(Error::shape((embedding.ncols(), bias.len()), (output.nrows(), output.ncols())));
        }
        if output.ncols() < 2 {
            return Err(Error::Config("classifier needs at least 2 labels".into()));
        }
        Ok(Self { seed, embedding, output, bias })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = ToyClassifierFile {
            seed: self.seed,
            vocab_size: self.embedding.nrows(),
            embed_dim: self.embedding.ncols(),
            num_labels: self.bias.len(),
            embedding: flat(&self.embedding),
            output: flat(&self.output),
            bias: self.bias.to_vec(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: ToyClassifierFile = serde_json::from_str(text)?;
        Self::from_parts(
            f.seed,
            matrix_from_flat(f.vocab_size, f.embed_dim, f.embedding, "embedding")?,
            matrix_from_flat(f.embed_dim, f.num_labels, f.output, "output")?,
            vector_from_flat(f.num_labels, f.bias, "bias")?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_json_string()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&read_file(path.as_ref())?)
    }
}

impl Classifier for ToyClassifier {
    fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    fn num_labels(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, probs: ArrayView2<f64>) -> Array1<f64> {
        let n = probs.nrows() as f64;
        let pooled = probs.dot(&self.embedding).sum_axis(Axis(0)) / n;
        self.output.t().dot(&pooled) + &self.bias
    }

    fn logits_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView1<f64>) -> Array2<f64> {
        let n = probs.nrows();
        let d_pooled = self.output.dot(&upstream) / n as f64;
        let d_row = self.embedding.dot(&d_pooled);
        let mut out = Array2::zeros(probs.raw_dim());
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(&d_row);
        }
        out
    }
}

/// Low-capacity reference model.
///
/// Next-token head: the state of position `i > 0` is
/// `h_i = tanh(A · mean_{j<i} e(π_j))`, mapped to `softmax(Uᵀ h_i + c)`;
/// position 0 uses the prior `softmax(p₀)`.
///
/// Contextual head: `v_i = normalize(Qᵀ tanh(e(π_i) + M · mean_j e(π_j)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyReferenceModel {
    seed: u64,
    embedding: Array2<f64>,
    causal_mix: Array2<f64>,
    next_proj: Array2<f64>,
    next_bias: Array1<f64>,
    prior: Array1<f64>,
    context_mix: Array2<f64>,
    context_proj: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ToyReferenceFile {
    seed: u64,
    vocab_size: usize,
    embed_dim: usize,
    context_dim: usize,
    embedding: Vec<f64>,
    causal_mix: Vec<f64>,
    next_proj: Vec<f64>,
    next_bias: Vec<f64>,
    prior: Vec<f64>,
    context_mix: Vec<f64>,
    context_proj: Vec<f64>,
}

/// Intermediate values of the contextual head, kept for the backward pass.
struct ContextForward {
    embedded: Array2<f64>,
    hidden: Array2<f64>,
    projected: Array2<f64>,
    norms: Array1<f64>,
}

impl ToyReferenceModel {
    pub fn new(seed: u64, vocab_size: usize, embed_dim: usize, context_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = embed_dim as f64;
        let embedding = normal_matrix(&mut rng, vocab_size, embed_dim, 1.0);
        let causal_mix = normal_matrix(&mut rng, embed_dim, embed_dim, 1.0 / d.sqrt());
        let next_proj = normal_matrix(&mut rng, embed_dim, vocab_size, 1.0);
        let next_bias = normal_vector(&mut rng, vocab_size, 0.5);
        let prior = normal_vector(&mut rng, vocab_size, 1.0);
        let context_mix = normal_matrix(&mut rng, embed_dim, embed_dim, 1.0 / d.sqrt());
        let context_proj = normal_matrix(&mut rng, embed_dim, context_dim, 1.0 / d.sqrt());
        Self { seed, embedding, causal_mix, next_proj, next_bias, prior, context_mix, context_proj }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn causal_mix(&self) -> &Array2<f64> {
        &self.causal_mix
    }

    pub fn next_proj(&self) -> &Array2<f64> {
        &self.next_proj
    }

    pub fn next_bias(&self) -> &Array1<f64> {
        &self.next_bias
    }

    pub fn prior(&self) -> &Array1<f64> {
        &self.prior
    }

    pub fn context_mix(&self) -> &Array2<f64> {
        &self.context_mix
    }

    pub fn context_proj(&self) -> &Array2<f64> {
        &self.context_proj
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = ToyReferenceFile {
            seed: self.seed,
            vocab_size: self.embedding.nrows(),
            embed_dim: self.embedding.ncols(),
            context_dim: self.context_proj.ncols(),
            embedding: flat(&self.embedding),
            causal_mix: flat(&self.causal_mix),
            next_proj: flat(&self.next_proj),
            next_bias: self.next_bias.to_vec(),
            prior: self.prior.to_vec(),
            context_mix: flat(&self.context_mix),
            context_proj: flat(&self.context_proj),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: ToyReferenceFile = serde_json::from_str(text)?;
        let (v, d, c) = (f.vocab_size, f.embed_dim, f.context_dim);
        if v < 2 {
            return Err(Error::Config("reference model needs |V| >= 2".into()));
        }
        Ok(Self {
            seed: f.seed,
            embedding: matrix_from_flat(v, d, f.embedding, "embedding")?,
            causal_mix: matrix_from_flat(d, d, f.causal_mix, "causal_mix")?,
            next_proj: matrix_from_flat(d, v, f.next_proj, "next_proj")?,
            next_bias: vector_from_flat(v, f.next_bias, "next_bias")?,
            prior: vector_from_flat(v, f.prior, "prior")?,
            context_mix: matrix_from_flat(d, d, f.context_mix, "context_mix")?,
            context_proj: matrix_from_flat(d, c, f.context_proj, "context_proj")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_json_string()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&read_file(path.as_ref())?)
    }

    /// Causal hidden states `h_i` for `i ≥ 1` (row 0 is unused and zero).
    fn causal_states(&self, embedded: &Array2<f64>) -> Array2<f64> {
        let (n, d) = embedded.dim();
        let mut states = Array2::zeros((n, d));
        let mut prefix = Array1::<f64>::zeros(d);
        for i in 1..n {
            prefix += &embedded.row(i - 1);
            let mean = &prefix / i as f64;
            states.row_mut(i).assign(&self.causal_mix.dot(&mean).mapv(f64::tanh));
        }
        states
    }

    fn context_forward(&self, probs: ArrayView2<f64>) -> ContextForward {
        let embedded = probs.dot(&self.embedding);
        let n = embedded.nrows() as f64;
        let mean = embedded.sum_axis(Axis(0)) / n;
        let mixed = self.context_mix.dot(&mean);
        let hidden = (&embedded + &mixed).mapv(f64::tanh);
        let projected = hidden.dot(&self.context_proj);
        let norms = projected.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        ContextForward { embedded, hidden, projected, norms }
    }
}

impl ReferenceModel for ToyReferenceModel {
    fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    fn context_dim(&self) -> usize {
        self.context_proj.ncols()
    }

    fn next_token_distributions(&self, probs: ArrayView2<f64>) -> Array2<f64> {
        let embedded = probs.dot(&self.embedding);
        let states = self.causal_states(&embedded);
        let mut out = Array2::zeros((probs.nrows(), self.vocab_size()));
        out.row_mut(0).assign(&softmax(self.prior.view()));
        for i in 1..probs.nrows() {
            let logits = self.next_proj.t().dot(&states.row(i)) + &self.next_bias;
            out.row_mut(i).assign(&softmax(logits.view()));
        }
        out
    }

    fn next_token_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
        let n = probs.nrows();
        let d = self.embed_dim();
        let embedded = probs.dot(&self.embedding);
        let states = self.causal_states(&embedded);
        // d/d(mean prefix embedding) for each i, then scattered to j < i.
        let mut d_embedded = Array2::<f64>::zeros((n, d));
        let mut carry = Array1::<f64>::zeros(d);
        for i in (1..n).rev() {
            let h = states.row(i);
            let logits = self.next_proj.t().dot(&h) + &self.next_bias;
            let dist = softmax(logits.view());
            let d_logits = softmax_vjp(dist.view(), upstream.row(i));
            let d_h = self.next_proj.dot(&d_logits);
            let d_pre = &d_h * &h.mapv(|t| 1.0 - t * t);
            let d_mean = self.causal_mix.t().dot(&d_pre);
            carry += &(d_mean / i as f64);
            // position i - 1 receives contributions from every i' ≥ i
            d_embedded.row_mut(i - 1).assign(&carry);
        }
        d_embedded.dot(&self.embedding.t())
    }

    fn contextual_embeddings(&self, probs: ArrayView2<f64>) -> Array2<f64> {
        let fw = self.context_forward(probs);
        fw.projected / &fw.norms.insert_axis(Axis(1))
    }

    fn contextual_vjp(&self, probs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
        let fw = self.context_forward(probs);
        let n = probs.nrows();
        let mut d_hidden_pre = Array2::<f64>::zeros(fw.hidden.raw_dim());
        for i in 0..n {
            let norm = fw.norms[i];
            let v = fw.projected.row(i).mapv(|x| x / norm);
            let g = upstream.row(i);
            let d_proj = (&g - &(&v * v.dot(&g))) / norm;
            let d_hidden = self.context_proj.dot(&d_proj);
            let d_pre = &d_hidden * &fw.hidden.row(i).mapv(|t| 1.0 - t * t);
            d_hidden_pre.row_mut(i).assign(&d_pre);
        }
        let d_mixed = d_hidden_pre.sum_axis(Axis(0));
        let d_mean = self.context_mix.t().dot(&d_mixed) / n as f64;
        let d_embedded = &d_hidden_pre + &d_mean;
        debug_assert_eq!(d_embedded.dim(), fw.embedded.dim());
        d_embedded.dot(&self.embedding.t())
    }
}

/// Outcome of comparing an analytic logit gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` over unfrozen entries.
    pub max_rel_error: f64,
    pub worst_entry: Option<(usize, usize)>,
    /// Largest absolute analytic entry found on a frozen row (must be 0).
    pub frozen_leak: f64,
    pub entries_checked: usize,
}

/// Central-difference check of `analytic` (gradient with respect to the
/// logits of `seq`) against `value`, with step `h`.
pub fn gradient_check<F>(value: F, analytic: &Array2<f64>, seq: &RelaxedSequence, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&RelaxedSequence) -> f64,
{
    if analytic.dim() != seq.theta().dim() {
        return Err(Error::shape(seq.theta().dim(), analytic.dim()));
    }
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_entry: None, frozen_leak: 0.0, entries_checked: 0 };
    let mut probe = seq.clone();
    for i in 0..seq.len() {
        if seq.is_frozen(i) {
            let leak = analytic.row(i).fold(0.0f64, |m, &v| m.max(v.abs()));
            report.frozen_leak = report.frozen_leak.max(leak);
            continue;
        }
        for j in 0..seq.vocab_size() {
            let base = seq.theta()[[i, j]];
            probe.theta_mut()[[i, j]] = base + h;
            let plus = value(&probe);
            probe.theta_mut()[[i, j]] = base - h;
            let minus = value(&probe);
            probe.theta_mut()[[i, j]] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[[i, j]];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.entries_checked += 1;
            if report.worst_entry.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_entry = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relaxation::TokenSequence;
    use ndarray::array;

    fn random_seq(seed: u64, n: usize, v: usize) -> RelaxedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RelaxedSequence::from_logits(normal_matrix(&mut rng, n, v, 1.5)).unwrap()
    }

    /// Loop-based re-implementation of the next-token head.
    fn brute_next_token(model: &ToyReferenceModel, p: &Array2<f64>) -> Vec<Vec<f64>> {
        let (n, v) = p.dim();
        let d = model.embed_dim();
        let e: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|c| (0..v).map(|k| p[[i, k]] * model.embedding()[[k, c]]).sum()).collect())
            .collect();
        let soft = |z: Vec<f64>| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let mut rows = vec![soft(model.prior().to_vec())];
        for i in 1..n {
            let mean: Vec<f64> = (0..d).map(|c| (0..i).map(|j| e[j][c]).sum::<f64>() / i as f64).collect();
            let h: Vec<f64> =
                (0..d).map(|r| (0..d).map(|c| model.causal_mix()[[r, c]] * mean[c]).sum::<f64>().tanh()).collect();
            let z: Vec<f64> = (0..v)
                .map(|k| (0..d).map(|r| model.next_proj()[[r, k]] * h[r]).sum::<f64>() + model.next_bias()[k])
                .collect();
            rows.push(soft(z));
        }
        rows
    }

    #[test]
    fn classifier_is_linear_in_mixtures() {
        let m = ToyClassifier::new(7, 5, 4, 3, 3.0);
        let (a, b) = (1, 4);
        let x_a = TokenSequence::new(vec![0, a, 2], 5).unwrap();
        let x_b = TokenSequence::new(vec![0, b, 2], 5).unwrap();
        let mut mix = x_a.one_hot(5);
        mix[[1, a]] = 0.5;
        mix[[1, b]] = 0.5;
        let want = (m.logits(x_a.one_hot(5).view()) + m.logits(x_b.one_hot(5).view())) / 2.0;
        let got = m.logits(mix.view());
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn quantized_sequence_classifies_like_one_hots() {
        let m = ToyClassifier::new(3, 6, 4, 2, 3.0);
        let x = TokenSequence::new(vec![5, 0, 3], 6).unwrap();
        let mut r = RelaxedSequence::initialize(&x, 2.0, 6).unwrap();
        for (i, &id) in x.ids().iter().enumerate() {
            r.quantize(i, id).unwrap();
        }
        assert_eq!(classify(&m, &r).unwrap(), m.logits(x.one_hot(6).view()));
        let wrong = RelaxedSequence::from_logits(Array2::zeros((2, 4))).unwrap();
        assert!(classify(&m, &wrong).is_err());
    }

    #[test]
    fn toy_models_are_deterministic_in_seed() {
        assert_eq!(ToyClassifier::new(11, 12, 8, 2, 3.0), ToyClassifier::new(11, 12, 8, 2, 3.0));
        assert_ne!(ToyClassifier::new(11, 12, 8, 2, 3.0), ToyClassifier::new(12, 12, 8, 2, 3.0));
        assert_eq!(ToyReferenceModel::new(5, 12, 8, 6), ToyReferenceModel::new(5, 12, 8, 6));
    }

    #[test]
    fn next_token_rows_are_distributions_and_causal() {
        let g = ToyReferenceModel::new(2, 7, 5, 4);
        let seq = random_seq(9, 5, 7);
        let p = seq.probability_matrix();
        let d = g.next_token_distributions(p.view());
        for row in d.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        let mut perturbed = p.clone();
        perturbed.row_mut(2).assign(&array![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let d2 = g.next_token_distributions(perturbed.view());
        for i in 0..=2 {
            assert_eq!(d.row(i), d2.row(i));
        }
        assert_ne!(d.row(3), d2.row(3));
    }

    #[test]
    fn next_token_matches_brute_force_forward() {
        let g = ToyReferenceModel::new(4, 6, 3, 3);
        let p = random_seq(1, 4, 6).probability_matrix();
        let fast = g.next_token_distributions(p.view());
        let slow = brute_next_token(&g, &p);
        for i in 0..4 {
            for k in 0..6 {
                assert!((fast[[i, k]] - slow[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contextual_embeddings_are_unit_norm() {
        let g = ToyReferenceModel::new(8, 9, 6, 5);
        let p = random_seq(3, 6, 9).probability_matrix();
        let v = g.contextual_embeddings(p.view());
        assert_eq!(v, g.contextual_embeddings(p.view()));
        for row in v.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
            assert!((row.dot(&row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vjps_match_finite_differences() {
        let g = ToyReferenceModel::new(21, 6, 4, 3);
        let m = ToyClassifier::new(22, 6, 4, 3, 2.0);
        let seq = random_seq(23, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let up_next = normal_matrix(&mut rng, 4, 6, 1.0);
        let up_ctx = normal_matrix(&mut rng, 4, 3, 1.0);
        let up_cls = normal_vector(&mut rng, 3, 1.0);

        let p = seq.probability_matrix();
        type Case<'a> = (Box<dyn Fn(&RelaxedSequence) -> f64 + 'a>, Array2<f64>);
        let cases: Vec<Case> = vec![
            (
                Box::new(|s: &RelaxedSequence| {
                    (g.next_token_distributions(s.probability_matrix().view()) * &up_next).sum()
                }),
                g.next_token_vjp(p.view(), up_next.view()),
            ),
            (
                Box::new(|s: &RelaxedSequence| {
                    (g.contextual_embeddings(s.probability_matrix().view()) * &up_ctx).sum()
                }),
                g.contextual_vjp(p.view(), up_ctx.view()),
            ),
            (
                Box::new(|s: &RelaxedSequence| m.logits(s.probability_matrix().view()).dot(&up_cls)),
                m.logits_vjp(p.view(), up_cls.view()),
            ),
        ];
        for (f, grad_p) in cases {
            let analytic = seq.chain_to_logits(&grad_p).unwrap();
            let report = gradient_check(f, &analytic, &seq, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
            assert_eq!(report.entries_checked, 24);
        }
    }

    #[test]
    fn gradient_check_skips_frozen_rows() {
        let m = ToyClassifier::new(1, 4, 3, 2, 2.0);
        let mut seq = random_seq(2, 3, 4);
        seq.quantize(1, 3).unwrap();
        let up = array![1.0, -1.0];
        let analytic = seq.chain_to_logits(&m.logits_vjp(seq.probability_matrix().view(), up.view())).unwrap();
        let f = |s: &RelaxedSequence| m.logits(s.probability_matrix().view()).dot(&up);
        let report = gradient_check(f, &analytic, &seq, 1e-5).unwrap();
        assert_eq!(report.entries_checked, 8);
        assert_eq!(report.frozen_leak, 0.0);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn counting_wrapper_counts() {
        let m = CountingClassifier::new(ToyClassifier::new(1, 4, 3, 2, 2.0));
        let p = Array2::from_elem((2, 4), 0.25);
        m.logits(p.view());
        m.logits(p.view());
        m.logits_vjp(p.view(), array![1.0, 0.0].view());
        assert_eq!((m.forward_calls(), m.gradient_calls()), (2, 1));
    }

    #[test]
    fn toy_models_round_trip_through_json() {
        let m = ToyClassifier::new(5, 6, 3, 2, 2.0);
        assert_eq!(ToyClassifier::from_json_str(&m.to_json_string().unwrap()).unwrap(), m);
        let g = ToyReferenceModel::new(6, 6, 3, 4);
        assert_eq!(ToyReferenceModel::from_json_str(&g.to_json_string().unwrap()).unwrap(), g);
        assert!(ToyClassifier::from_json_str(
            r#"{"seed":0,"vocab_size":2,"embed_dim":1,"num_labels":2,"embedding":[1],"output":[1,2],"bias":[0,0]}"#
        )
        .is_err());
    }
}

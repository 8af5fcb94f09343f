//! Relaxed token sequences.
//!
//! A sequence of `n` tokens over a vocabulary `V` is relaxed into `n`
//! probability vectors, each parameterized by a row of logits and mapped
//! through a softmax. Positions can be quantized (frozen) to a single token,
//! after which they behave as exact one-hot vectors and are never touched by
//! optimization again.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory with display strings, corpus frequencies and an optional
/// static embedding table (used by the similarity filter of the gray variant).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: Vec<f64>,
    embeddings: Option<Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frequencies: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<Vec<Vec<f64>>>,
}

impl Vocabulary {
    /// Builds a vocabulary; missing frequencies default to all ones.
    pub fn new(tokens: Vec<String>, frequencies: Option<Vec<f64>>, embeddings: Option<Array2<f64>>) -> Result<Self> {
        let size = tokens.len();
        if size < 2 {
            return Err(Error::InvalidVocabulary(format!("size {size} < 2")));
        }
        let distinct: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        if distinct.len() != size {
            return Err(Error::InvalidVocabulary("token strings are not distinct".into()));
        }
        let frequencies = frequencies.unwrap_or_else(|| vec![1.0; size]);
        if frequencies.len() != size {
            return Err(Error::InvalidVocabulary(format!("{} frequencies for {size} tokens", frequencies.len())));
        }
        if let Some(bad) = frequencies.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::InvalidVocabulary(format!("frequency {bad} is not positive")));
        }
        if let Some(table) = &embeddings {
            if table.nrows() != size {
                return Err(Error::InvalidVocabulary(format!(
                    "embedding table has {} rows for {size} tokens",
                    table.nrows()
                )));
            }
        }
        Ok(Self { tokens, frequencies, embeddings })
    }

    /// Vocabulary of `size` tokens named `t0, t1, ...` with uniform frequencies.
    pub fn synthetic(size: usize, embeddings: Option<Array2<f64>>) -> Result<Self> {
        Self::new((0..size).map(|k| format!("t{k}")).collect(), None, embeddings)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn embeddings(&self) -> Option<&Array2<f64>> {
        self.embeddings.as_ref()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: VocabularyFile = serde_json::from_str(text)?;
        let embeddings = match raw.embeddings {
            None => None,
            Some(rows) => Some(rows_to_matrix(rows)?),
        };
        Self::new(raw.tokens, raw.frequencies, embeddings)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let raw = VocabularyFile {
            tokens: self.tokens.clone(),
            frequencies: Some(self.frequencies.clone()),
            embeddings: self.embeddings.as_ref().map(|t| t.outer_iter().map(|r| r.to_vec()).collect()),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

fn rows_to_matrix(rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidVocabulary("ragged embedding table".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| Error::InvalidVocabulary(e.to_string()))
}

/// A discrete token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, size: vocab_size });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `n × |V|` matrix whose rows are the one-hot encodings of the tokens.
    pub fn one_hot(&self, vocab_size: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.ids.len(), vocab_size));
        for (i, &id) in self.ids.iter().enumerate() {
            out[[i, id]] = 1.0;
        }
        out
    }
}

/// The optimization variable: logits over the vocabulary for every position,
/// plus the per-position quantization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedSequence {
    theta: Array2<f64>,
    frozen: Vec<Option<usize>>,
}

impl RelaxedSequence {
    /// Logits `C · onehot(x_i)` for every position, nothing frozen.
    pub fn initialize(x: &TokenSequence, scale: f64, vocab_size: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Config(format!("init scale must be finite and >= 0, got {scale}")));
        }
        if let Some(&id) = x.ids().iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, size: vocab_size });
        }
        let theta = x.one_hot(vocab_size) * scale;
        Ok(Self { theta, frozen: vec![None; x.len()] })
    }

    /// Wraps an arbitrary logit matrix with every position unfrozen.
    pub fn from_logits(theta: Array2<f64>) -> Result<Self> {
        if theta.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        if theta.ncols() < 2 {
            return Err(Error::InvalidVocabulary(format!("size {} < 2", theta.ncols())));
        }
        let n = theta.nrows();
        Ok(Self { theta, frozen: vec![None; n] })
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.nrows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.theta.ncols()
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    /// Mutable logits. Rows of frozen positions may be written but are
    /// ignored by every downstream computation.
    pub fn theta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.theta
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.get(i).is_some_and(Option::is_some)
    }

    pub fn frozen_id(&self, i: usize) -> Option<usize> {
        self.frozen.get(i).copied().flatten()
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.frozen.iter().map(Option::is_some).collect()
    }

    pub fn unfrozen_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().enumerate().filter(|(_, f)| f.is_none()).map(|(i, _)| i)
    }

    pub fn num_frozen(&self) -> usize {
        self.frozen.iter().filter(|f| f.is_some()).count()
    }

    pub fn is_fully_quantized(&self) -> bool {
        self.frozen.iter().all(Option::is_some)
    }

    fn check_position(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::PositionOutOfRange { index: i, len: self.len() });
        }
        Ok(())
    }

    /// Probability vector of position `i`: the exact one-hot if frozen,
    /// otherwise `softmax(theta[i])`.
    pub fn probabilities(&self, i: usize) -> Result<Array1<f64>> {
        self.check_position(i)?;
        Ok(match self.frozen[i] {
            Some(k) => {
                let mut p = Array1::zeros(self.vocab_size());
                p[k] = 1.0;
                p
            }
            None => softmax(self.theta.row(i)),
        })
    }

    /// All probability vectors stacked into an `n × |V|` matrix.
    pub fn probability_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.theta.raw_dim());
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            match self.frozen[i] {
                Some(k) => row[k] = 1.0,
                None => row.assign(&softmax(self.theta.row(i))),
            }
        }
        out
    }

    /// Freezes position `i` to token `k`.
    pub fn quantize(&mut self, i: usize, k: usize) -> Result<()> {
        self.check_position(i)?;
        if k >= self.vocab_size() {
            return Err(Error::TokenOutOfRange { id: k, size: self.vocab_size() });
        }
        if self.frozen[i].is_some() {
            return Err(Error::AlreadyQuantized(i));
        }
        self.frozen[i] = Some(k);
        Ok(())
    }

    /// Copy with position `i` frozen to `k`.
    pub fn quantized(&self, i: usize, k: usize) -> Result<Self> {
        let mut out = self.clone();
        out.quantize(i, k)?;
        Ok(out)
    }

    /// Copy where every unfrozen position is frozen to its most probable
    /// token (ties toward the smallest id).
    pub fn argmax_quantized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            if out.frozen[i].is_none() {
                out.frozen[i] = Some(argmax(self.theta.row(i)));
            }
        }
        out
    }

    pub fn to_token_sequence(&self) -> Result<TokenSequence> {
        let ids =
            self.frozen.iter().enumerate().map(|(i, f)| f.ok_or(Error::NotQuantized(i))).collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence { ids })
    }

    /// Applies the softmax Jacobian row by row, turning `dL/dπ` into
    /// `dL/dθ`. Frozen rows come out exactly zero.
    pub fn chain_to_logits(&self, grad_probs: &Array2<f64>) -> Result<Array2<f64>> {
        if grad_probs.dim() != self.theta.dim() {
            return Err(Error::shape(self.theta.dim(), grad_probs.dim()));
        }
        let mut out = Array2::zeros(self.theta.raw_dim());
        for i in self.unfrozen_positions() {
            let p = softmax(self.theta.row(i));
            out.row_mut(i).assign(&softmax_vjp(p.view(), grad_probs.row(i)));
        }
        Ok(out)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let total = out.sum();
    out /= total;
    out
}

/// `(diag(p) − p pᵀ) g`: the gradient with respect to the logits of a softmax
/// whose output is `p`, given upstream gradient `g` with respect to `p`.
pub fn softmax_vjp(p: ArrayView1<f64>, upstream: ArrayView1<f64>) -> Array1<f64> {
    let inner = p.dot(&upstream);
    let mut out = upstream.to_owned();
    out -= inner;
    out *= &p;
    out
}

/// Index of the largest entry, ties toward the smallest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// `e(π) = Σ_j π_j E_j`.
pub fn embed(pi: ArrayView1<f64>, table: ArrayView2<f64>) -> Result<Array1<f64>> {
    if pi.len() != table.nrows() {
        return Err(Error::shape(table.nrows(), pi.len()));
    }
    Ok(table.t().dot(&pi))
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(pi: ArrayView1<f64>) -> f64 {
    let h: f64 = pi.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

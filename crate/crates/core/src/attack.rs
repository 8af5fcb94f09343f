//! Quantization-compensation search.
//!
//! Each round optimizes the still-continuous positions, picks the unfrozen
//! position with the highest entropy, shortlists candidate tokens for it by
//! a blend of probability and gradient direction, evaluates the loss with
//! each candidate committed, and freezes the best one. After `n` rounds the
//! sequence is fully discrete.
//!
//! Three variants share this machinery:
//! - [`run_mango`]: analytic gradients, Adam reset after every quantization,
//!   step budget halved every round.
//! - [`run_naive`]: one optimization phase followed by a one-shot argmax
//!   quantization of every position.
//! - [`run_gray`]: gradients estimated from loss values only (random
//!   Gaussian directions), AMSGrad without reset, probability-only ranking
//!   and a per-position embedding-similarity filter on candidates.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossContext, LossWeights};
use crate::models::{Classifier, ReferenceModel};
use crate::optimizers::{OptimizerConfig, OptimizerState, OptimizerVariant, StepSchedule};
use crate::relaxation::{argmax, entropy, RelaxedSequence, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mango,
    Naive,
    Gray,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Mango => "mango",
            Variant::Naive => "naive",
            Variant::Gray => "gray",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mango" => Ok(Variant::Mango),
            "naive" => Ok(Variant::Naive),
            "gray" => Ok(Variant::Gray),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected mango, naive or gray)"))),
        }
    }
}

/// Zeroth-order estimator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooConfig {
    /// Random directions per gradient estimate (K).
    pub samples: usize,
    /// Perturbation scale (μ).
    pub noise_scale: f64,
    /// Minimum embedding cosine between a candidate and the original token
    /// at that position. Values ≤ −1 disable the filter.
    pub similarity_floor: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self { samples: 20, noise_scale: 0.1, similarity_floor: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub weights: LossWeights,
    pub lambda_prob: f64,
    pub max_candidates: usize,
    pub candidate_threshold: f64,
    pub init_scale: f64,
    pub schedule: StepSchedule,
    pub optimizer: OptimizerConfig,
    pub variant: Variant,
    pub zoo: ZooConfig,
    pub seed: u64,
    /// Recompute the gradient at the optimized point before scoring
    /// candidates; otherwise reuse the last optimizer-step gradient.
    pub recompute_score_gradient: bool,
    /// Record continuous and argmax-quantized totals at every optimizer step.
    pub trace_steps: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lambda_prob: 0.5,
            max_candidates: 5,
            candidate_threshold: 0.5,
            init_scale: 10.0,
            schedule: StepSchedule::new(100),
            optimizer: OptimizerConfig::default(),
            variant: Variant::Mango,
            zoo: ZooConfig::default(),
            seed: 0,
            recompute_score_gradient: true,
            trace_steps: false,
        }
    }
}

impl AttackConfig {
    /// Defaults for the zeroth-order variant: S = 140, λ_s = 80, plus the
    /// settings [`AttackConfig::effective`] forces anyway.
    pub fn gray() -> Self {
        Self {
            weights: LossWeights { lambda_s: 80.0, ..LossWeights::default() },
            schedule: StepSchedule::new(140),
            variant: Variant::Gray,
            ..Self::default()
        }
        .effective()
    }

    /// The configuration actually used by the run: the gray variant always
    /// ranks by probability only and uses AMSGrad without reset.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.variant == Variant::Gray {
            cfg.lambda_prob = 1.0;
            cfg.optimizer.variant = OptimizerVariant::Amsgrad;
            cfg.optimizer.reset_on_quantize = false;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.lambda_prob) {
            return Err(Error::Config(format!("lambda_prob must lie in [0, 1], got {}", self.lambda_prob)));
        }
        if self.max_candidates == 0 {
            return Err(Error::Config("max_candidates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.candidate_threshold) {
            return Err(Error::Config(format!(
                "candidate_threshold must lie in [0, 1], got {}",
                self.candidate_threshold
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(format!("init_scale must be finite and >= 0, got {}", self.init_scale)));
        }
        if self.zoo.samples == 0 {
            return Err(Error::Config("zoo.samples must be positive".into()));
        }
        if !(self.zoo.noise_scale.is_finite() && self.zoo.noise_scale > 0.0) {
            return Err(Error::Config(format!("zoo.noise_scale must be positive, got {}", self.zoo.noise_scale)));
        }
        if self.zoo.similarity_floor.is_nan() {
            return Err(Error::Config("zoo.similarity_floor is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub token: usize,
    pub probability: f64,
    pub direction: f64,
    pub score: f64,
    pub rescaled_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub position: usize,
    pub entropy: f64,
    pub chosen_token: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Quantization gap of the whole sequence just before this round's commit.
    pub gap: f64,
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// State before an optimizer step.
    Step,
    /// State right after a round's commit (continuous total vs. its argmax
    /// completion).
    Quantize,
    /// The naive one-shot commit: total before vs. total after.
    OneShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: TraceKind,
    pub round: usize,
    pub step: usize,
    pub continuous_total: f64,
    pub quantized_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub variant: Variant,
    pub original: TokenSequence,
    pub label: usize,
    pub adversarial: TokenSequence,
    pub success: bool,
    /// The classifier already mispredicted the original; nothing was run.
    pub trivially_successful: bool,
    pub loss_trace: Vec<f64>,
    pub round_trace: Vec<RoundRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_trace: Vec<StepRecord>,
    pub final_breakdown: LossBreakdown,
    pub config: AttackConfig,
    pub seed: u64,
}

impl AttackResult {
    pub fn round_trace_csv(&self) -> String {
        let mut out = String::from("round,position,entropy,chosen_token,loss_before,loss_after,gap\n");
        for r in &self.round_trace {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round, r.position, r.entropy, r.chosen_token, r.loss_before, r.loss_after, r.gap
            ));
        }
        out
    }
}

/// Unfrozen position with the largest entropy (ties toward the smallest index).
pub fn select_vector(seq: &RelaxedSequence) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in seq.unfrozen_positions() {
        let h = entropy(seq.probabilities(i)?.view());
        if best.is_none_or(|(_, b)| h > b) {
            best = Some((i, h));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::FullyQuantized)
}

/// Cosine between the quantization step `onehot(k) − π` and `−∇_π L`;
/// 0 when either vector is (numerically) zero.
pub fn direction_score(pi: ArrayView1<f64>, grad_pi: ArrayView1<f64>, k: usize) -> f64 {
    let mut dot = 0.0;
    let mut step_sq = 0.0;
    for (j, (&p, &g)) in pi.iter().zip(grad_pi.iter()).enumerate() {
        let q = if j == k { 1.0 - p } else { -p };
        dot -= q * g;
        step_sq += q * q;
    }
    let step_norm = step_sq.sqrt();
    let grad_norm = grad_pi.dot(&grad_pi).sqrt();
    if step_norm < 1e-12 || grad_norm < 1e-12 {
        return 0.0;
    }
    (dot / (step_norm * grad_norm)).clamp(-1.0, 1.0)
}

/// Shortlisting parameters: λ_prob, M and T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateRule {
    pub lambda_prob: f64,
    pub max_candidates: usize,
    pub threshold: f64,
}

impl From<&AttackConfig> for CandidateRule {
    fn from(cfg: &AttackConfig) -> Self {
        Self { lambda_prob: cfg.lambda_prob, max_candidates: cfg.max_candidates, threshold: cfg.candidate_threshold }
    }
}

/// Scores every token, min-max rescales the scores to [0, 1] and keeps at
/// most `M` tokens whose rescaled score is at least `1 − T`, best first.
pub fn select_candidates(pi: ArrayView1<f64>, grad_pi: ArrayView1<f64>, cfg: &AttackConfig) -> Vec<CandidateScore> {
    select_candidates_among(pi, grad_pi, CandidateRule::from(cfg), None)
}

/// [`select_candidates`] restricted to tokens with `allowed[k]`.
pub fn select_candidates_among(
    pi: ArrayView1<f64>,
    grad_pi: ArrayView1<f64>,
    rule: CandidateRule,
    allowed: Option<&[bool]>,
) -> Vec<CandidateScore> {
    let mut pool: Vec<CandidateScore> = (0..pi.len())
        .filter(|&k| allowed.is_none_or(|a| a[k]))
        .map(|k| {
            let direction = direction_score(pi, grad_pi, k);
            CandidateScore {
                token: k,
                probability: pi[k],
                direction,
                score: rule.lambda_prob * pi[k] + (1.0 - rule.lambda_prob) * direction,
                rescaled_score: 1.0,
            }
        })
        .collect();
    let lo = pool.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
    let hi = pool.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        for c in &mut pool {
            c.rescaled_score = (c.score - lo) / span;
        }
    }
    let floor = 1.0 - rule.threshold;
    pool.retain(|c| c.rescaled_score >= floor);
    pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.token.cmp(&b.token)));
    pool.truncate(rule.max_candidates);
    pool
}

/// Commits position `i` to the candidate with the lowest total loss (ties
/// toward the earlier candidate in the list, i.e. higher score, then smaller
/// token). Makes exactly one loss evaluation per candidate.
pub fn evaluate_and_quantize(
    ctx: &LossContext<'_>,
    seq: &RelaxedSequence,
    i: usize,
    candidates: &[CandidateScore],
) -> Result<(RelaxedSequence, CandidateScore, LossBreakdown)> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to evaluate".into()));
    }
    if seq.is_frozen(i) {
        return Err(Error::AlreadyQuantized(i));
    }
    let evaluated = candidates
        .par_iter()
        .map(|c| {
            let trial = seq.quantized(i, c.token)?;
            let loss = ctx.evaluate(&trial)?;
            Ok((trial, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (j, (_, loss)) in evaluated.iter().enumerate() {
        if loss.total < evaluated[best].1.total {
            best = j;
        }
    }
    let (trial, loss) = evaluated.into_iter().nth(best).expect("nonempty");
    Ok((trial, candidates[best], loss))
}

/// Output of one zeroth-order gradient query.
#[derive(Debug, Clone)]
pub struct ZooEstimate {
    pub base_loss: f64,
    pub gradient: Array2<f64>,
    pub samples_used: usize,
    pub samples_skipped: usize,
}

/// `(1/K) Σ_i [L(θ + μ u_i) − L(θ)] / μ · u_i` over the given directions.
/// Directions whose perturbed loss is not finite are skipped and the mean is
/// taken over the remaining ones.
pub fn zoo_gradient_with_noise<F>(loss: F, theta: &Array2<f64>, noise: &[Array2<f64>], mu: f64) -> Result<ZooEstimate>
where
    F: Fn(&Array2<f64>) -> f64 + Sync,
{
    let base_loss = loss(theta);
    let values: Vec<f64> = noise.par_iter().map(|u| loss(&(theta + &(u * mu)))).collect();
    let mut gradient = Array2::zeros(theta.raw_dim());
    let mut used = 0;
    for (k, (u, value)) in noise.iter().zip(&values).enumerate() {
        let diff = (value - base_loss) / mu;
        if !diff.is_finite() {
            log::warn!("zeroth-order sample {k} skipped: perturbed loss {value}, base {base_loss}");
            continue;
        }
        gradient.scaled_add(diff, u);
        used += 1;
    }
    if used == 0 {
        return Err(Error::ZooAllSamplesSkipped { samples: noise.len() });
    }
    gradient /= used as f64;
    Ok(ZooEstimate { base_loss, gradient, samples_used: used, samples_skipped: noise.len() - used })
}

/// Zeroth-order gradient estimate with `cfg.samples` standard-normal
/// directions drawn from `rng`. Rows flagged in `frozen` get no noise.
pub fn zoo_gradient<F, R>(
    loss: F,
    theta: &Array2<f64>,
    frozen: &[bool],
    cfg: &ZooConfig,
    rng: &mut R,
) -> Result<ZooEstimate>
where
    F: Fn(&Array2<f64>) -> f64 + Sync,
    R: Rng + ?Sized,
{
    if cfg.samples == 0 || cfg.noise_scale.is_nan() || cfg.noise_scale <= 0.0 {
        return Err(Error::Config("zoo needs samples >= 1 and noise_scale > 0".into()));
    }
    if frozen.len() != theta.nrows() {
        return Err(Error::shape(theta.nrows(), frozen.len()));
    }
    let noise: Vec<Array2<f64>> = (0..cfg.samples)
        .map(|_| {
            let mut u = Array2::zeros(theta.raw_dim());
            for (i, mut row) in u.outer_iter_mut().enumerate() {
                if !frozen[i] {
                    row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                }
            }
            u
        })
        .collect();
    zoo_gradient_with_noise(loss, theta, &noise, cfg.noise_scale)
}

/// Per-position candidate masks for the gray variant: token `k` is allowed at
/// position `i` if it is the original token or its embedding cosine with the
/// original is at least `floor`.
pub fn similarity_masks(vocab: &Vocabulary, x: &TokenSequence, floor: f64) -> Result<Option<Vec<Vec<bool>>>> {
    if floor <= -1.0 {
        return Ok(None);
    }
    let table = vocab.embeddings().ok_or(Error::MissingEmbeddingTable)?;
    let norms: Vec<f64> = table.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let masks = x
        .ids()
        .iter()
        .map(|&orig| {
            (0..vocab.size())
                .map(|k| {
                    if k == orig {
                        return true;
                    }
                    let denom = norms[k] * norms[orig];
                    let cos = if denom > 0.0 { table.row(k).dot(&table.row(orig)) / denom } else { 0.0 };
                    cos >= floor
                })
                .collect()
        })
        .collect();
    Ok(Some(masks))
}

#[allow(clippy::large_enum_variant)]
enum GradientSource {
    Analytic,
    ZerothOrder(ChaCha8Rng),
}

struct Run<'c, 'a> {
    ctx: &'c LossContext<'a>,
    cfg: AttackConfig,
    source: GradientSource,
    loss_trace: Vec<f64>,
    step_trace: Vec<StepRecord>,
}

impl Run<'_, '_> {
    fn ensure_finite(total: f64, round: usize, step: usize) -> Result<()> {
        if total.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss { round, step, total })
        }
    }

    /// Runs `steps` optimizer updates; returns the `∇_π L` of the last step
    /// when gradients are analytic.
    fn optimize(
        &mut self,
        seq: &mut RelaxedSequence,
        opt: &mut OptimizerState,
        steps: usize,
        round: usize,
    ) -> Result<Option<Array2<f64>>> {
        let mut last_probs_grad = None;
        let frozen = seq.frozen_mask();
        for step in 0..steps {
            let (total, grad_logits) = match &mut self.source {
                GradientSource::Analytic => {
                    let g = self.ctx.gradient(seq)?;
                    last_probs_grad = Some(g.total_probs);
                    (g.breakdown.total, g.total_logits)
                }
                GradientSource::ZerothOrder(rng) => {
                    let ctx = self.ctx;
                    let snapshot = &*seq;
                    let est =
                        zoo_gradient(|th| ctx.total_at_logits(snapshot, th), seq.theta(), &frozen, &self.cfg.zoo, rng)?;
                    (est.base_loss, est.gradient)
                }
            };
            Self::ensure_finite(total, round, step)?;
            self.loss_trace.push(total);
            if self.cfg.trace_steps {
                let quantized_total = self.ctx.evaluate(&seq.argmax_quantized())?.total;
                self.step_trace.push(StepRecord {
                    kind: TraceKind::Step,
                    round,
                    step,
                    continuous_total: total,
                    quantized_total,
                });
            }
            opt.step(seq.theta_mut(), &grad_logits, &frozen)?;
        }
        Ok(last_probs_grad)
    }
}

fn check_inputs(
    classifier: &dyn Classifier,
    reference: &dyn ReferenceModel,
    vocab: &Vocabulary,
    x: &TokenSequence,
    cfg: &AttackConfig,
) -> Result<()> {
    cfg.validate()?;
    let v = vocab.size();
    if classifier.vocab_size() != v || reference.vocab_size() != v {
        return Err(Error::shape(v, (classifier.vocab_size(), reference.vocab_size())));
    }
    if let Some(&id) = x.ids().iter().find(|&&id| id >= v) {
        return Err(Error::TokenOutOfRange { id, size: v });
    }
    Ok(())
}

fn trivial_result(ctx: &LossContext<'_>, variant: Variant, cfg: &AttackConfig) -> Result<AttackResult> {
    let x = ctx.original().clone();
    Ok(AttackResult {
        variant,
        original: x.clone(),
        label: ctx.label(),
        final_breakdown: ctx.evaluate_tokens(&x)?,
        adversarial: x,
        success: true,
        trivially_successful: true,
        loss_trace: Vec::new(),
        round_trace: Vec::new(),
        step_trace: Vec::new(),
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

fn finish(
    ctx: &LossContext<'_>,
    run: Run<'_, '_>,
    seq: &RelaxedSequence,
    round_trace: Vec<RoundRecord>,
) -> Result<AttackResult> {
    let adversarial = seq.to_token_sequence()?;
    let final_breakdown = ctx.evaluate_tokens(&adversarial)?;
    Ok(AttackResult {
        variant: run.cfg.variant,
        original: ctx.original().clone(),
        label: ctx.label(),
        success: ctx.is_misclassified(&adversarial),
        adversarial,
        trivially_successful: false,
        loss_trace: run.loss_trace,
        round_trace,
        step_trace: run.step_trace,
        final_breakdown,
        seed: run.cfg.seed,
        config: run.cfg,
    })
}

fn quantization_loop(ctx: &LossContext<'_>, cfg: AttackConfig, masks: Option<Vec<Vec<bool>>>) -> Result<AttackResult> {
    let n = ctx.original().len();
    let mut seq = RelaxedSequence::initialize(ctx.original(), cfg.init_scale, ctx.vocab_size())?;
    let mut opt = OptimizerState::new(cfg.optimizer, seq.theta().dim());
    let source = match cfg.variant {
        Variant::Gray => GradientSource::ZerothOrder(ChaCha8Rng::seed_from_u64(cfg.seed)),
        _ => GradientSource::Analytic,
    };
    let rule = CandidateRule::from(&cfg);
    let mut run = Run { ctx, cfg, source, loss_trace: Vec::new(), step_trace: Vec::new() };
    let mut round_trace = Vec::with_capacity(n);

    for round in 0..n {
        let steps = run.cfg.schedule.steps_for_loop(round);
        let last_grad = run.optimize(&mut seq, &mut opt, steps, round)?;

        let (before, grad_probs) = match (&run.source, run.cfg.recompute_score_gradient, last_grad) {
            (GradientSource::ZerothOrder(_), _, _) => (ctx.evaluate(&seq)?, None),
            (GradientSource::Analytic, false, Some(g)) => (ctx.evaluate(&seq)?, Some(g)),
            (GradientSource::Analytic, _, _) => {
                let g = ctx.gradient(&seq)?;
                (g.breakdown, Some(g.total_probs))
            }
        };
        Run::ensure_finite(before.total, round, steps)?;
        let gap = ctx.quantization_gap(&seq)?;

        let position = select_vector(&seq)?;
        let pi = seq.probabilities(position)?;
        let grad_pi = match &grad_probs {
            Some(g) => g.row(position).to_owned(),
            None => Array1::zeros(pi.len()),
        };
        let allowed = masks.as_ref().map(|m| m[position].as_slice());
        let candidates = select_candidates_among(pi.view(), grad_pi.view(), rule, allowed);
        let (next, chosen, after) = evaluate_and_quantize(ctx, &seq, position, &candidates)?;
        Run::ensure_finite(after.total, round, steps)?;
        seq = next;
        if run.cfg.trace_steps {
            let quantized_total = ctx.evaluate(&seq.argmax_quantized())?.total;
            run.step_trace.push(StepRecord {
                kind: TraceKind::Quantize,
                round,
                step: steps,
                continuous_total: after.total,
                quantized_total,
            });
        }

        round_trace.push(RoundRecord {
            round,
            position,
            entropy: entropy(pi.view()),
            chosen_token: chosen.token,
            loss_before: before.total,
            loss_after: after.total,
            gap,
            candidates,
        });
        if run.cfg.optimizer.reset_on_quantize {
            opt.reset();
        }
    }
    finish(ctx, run, &seq, round_trace)
}

/// Multi-step quantization with analytic gradients.
pub fn run_mango(
    classifier: &dyn Classifier,
    reference: &dyn ReferenceModel,
    vocab: &Vocabulary,
    x: &TokenSequence,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig { variant: Variant::Mango, ..cfg.clone() };
    check_inputs(classifier, reference, vocab, x, &cfg)?;
    let ctx = LossContext::new(classifier, reference, x.clone(), y, cfg.weights, vocab.frequencies())?;
    if ctx.is_misclassified(x) {
        return trivial_result(&ctx, Variant::Mango, &cfg);
    }
    quantization_loop(&ctx, cfg, None)
}

/// One optimization phase of `S` steps, then argmax quantization of every
/// position at once.
pub fn run_naive(
    classifier: &dyn Classifier,
    reference: &dyn ReferenceModel,
    vocab: &Vocabulary,
    x: &TokenSequence,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig { variant: Variant::Naive, ..cfg.clone() };
    check_inputs(classifier, reference, vocab, x, &cfg)?;
    let ctx = LossContext::new(classifier, reference, x.clone(), y, cfg.weights, vocab.frequencies())?;
    if ctx.is_misclassified(x) {
        return trivial_result(&ctx, Variant::Naive, &cfg);
    }
    let mut seq = RelaxedSequence::initialize(x, cfg.init_scale, ctx.vocab_size())?;
    let mut opt = OptimizerState::new(cfg.optimizer, seq.theta().dim());
    let steps = cfg.schedule.initial_steps;
    let mut run =
        Run { ctx: &ctx, cfg, source: GradientSource::Analytic, loss_trace: Vec::new(), step_trace: Vec::new() };
    run.optimize(&mut seq, &mut opt, steps, 0)?;

    let before = ctx.evaluate(&seq)?;
    Run::ensure_finite(before.total, 0, steps)?;
    let quantized = seq.argmax_quantized();
    let after = ctx.evaluate(&quantized)?;
    Run::ensure_finite(after.total, 0, steps)?;
    let gap = after.total - before.total;
    if run.cfg.trace_steps {
        run.step_trace.push(StepRecord {
            kind: TraceKind::OneShot,
            round: 0,
            step: steps,
            continuous_total: before.total,
            quantized_total: after.total,
        });
    }

    let round_trace = (0..seq.len())
        .map(|i| {
            let pi = seq.probabilities(i)?;
            Ok(RoundRecord {
                round: 0,
                position: i,
                entropy: entropy(pi.view()),
                chosen_token: argmax(pi.view()),
                loss_before: before.total,
                loss_after: after.total,
                gap,
                candidates: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(&ctx, run, &quantized, round_trace)
}

/// Multi-step quantization driven by zeroth-order gradient estimates. The
/// classifier is only ever queried for forward logits.
pub fn run_gray(
    classifier: &dyn Classifier,
    reference: &dyn ReferenceModel,
    vocab: &Vocabulary,
    x: &TokenSequence,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig { variant: Variant::Gray, ..cfg.clone() }.effective();
    check_inputs(classifier, reference, vocab, x, &cfg)?;
    let masks = similarity_masks(vocab, x, cfg.zoo.similarity_floor)?;
    let ctx = LossContext::new(classifier, reference, x.clone(), y, cfg.weights, vocab.frequencies())?;
    if ctx.is_misclassified(x) {
        return trivial_result(&ctx, Variant::Gray, &cfg);
    }
    quantization_loop(&ctx, cfg, masks)
}

/// Dispatches on `cfg.variant`.
pub fn run_attack(
    classifier: &dyn Classifier,
    reference: &dyn ReferenceModel,
    vocab: &Vocabulary,
    x: &TokenSequence,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match cfg.variant {
        Variant::Mango => run_mango(classifier, reference, vocab, x, y, cfg),
        Variant::Naive => run_naive(classifier, reference, vocab, x, y, cfg),
        Variant::Gray => run_gray(classifier, reference, vocab, x, y, cfg),
    }
}

use std::fs;

use mango_core::attack::{
    run_attack, run_gray, run_mango, select_candidates, select_vector, AttackConfig, AttackResult, TraceKind, Variant,
};
use mango_core::harness::{self, BatchRecord, RunConfig, TaskSpec};
use mango_core::loss::{LossBreakdown, LossContext};
use mango_core::models::{ToyClassifier, ToyReferenceModel};
use mango_core::optimizers::OptimizerState;
use mango_core::relaxation::{entropy, RelaxedSequence, TokenSequence, Vocabulary};
use mango_core::Error;

fn small_spec() -> TaskSpec {
    TaskSpec { num_instances: 6, ..TaskSpec::default() }
}

fn quick() -> AttackConfig {
    AttackConfig { schedule: mango_core::optimizers::StepSchedule::new(30), ..AttackConfig::default() }
}

/// Re-derives a MANGO round trace from the public building blocks.
fn replay(ctx: &LossContext<'_>, cfg: &AttackConfig) -> Vec<(usize, usize, f64, f64, f64)> {
    let n = ctx.original().len();
    let mut seq = RelaxedSequence::initialize(ctx.original(), cfg.init_scale, ctx.vocab_size()).unwrap();
    let mut opt = OptimizerState::new(cfg.optimizer, seq.theta().dim());
    let mut rows = Vec::new();
    for round in 0..n {
        let frozen = seq.frozen_mask();
        for _ in 0..cfg.schedule.steps_for_loop(round) {
            let g = ctx.gradient(&seq).unwrap();
            opt.step(seq.theta_mut(), &g.total_logits, &frozen).unwrap();
        }
        let g = ctx.gradient(&seq).unwrap();
        let i = select_vector(&seq).unwrap();
        let pi = seq.probabilities(i).unwrap();
        let candidates = select_candidates(pi.view(), g.total_probs.row(i), cfg);
        let mut best: Option<(usize, f64)> = None;
        for c in &candidates {
            let total = ctx.evaluate(&seq.quantized(i, c.token).unwrap()).unwrap().total;
            if best.is_none_or(|(_, b)| total < b) {
                best = Some((c.token, total));
            }
        }
        let (token, after) = best.unwrap();
        rows.push((i, token, entropy(pi.view()), g.breakdown.total, after));
        seq.quantize(i, token).unwrap();
        opt.reset();
    }
    rows
}

#[test]
fn round_trace_matches_independent_replay() {
    let spec = small_spec();
    let (cls, refm, vocab) = (spec.classifier(), spec.reference(), spec.vocabulary().unwrap());
    let cfg = quick();
    for inst in spec.generate_task().unwrap() {
        let result = run_mango(&cls, &refm, &vocab, &inst.x, inst.label, &cfg).unwrap();
        let ctx = LossContext::new(&cls, &refm, inst.x.clone(), inst.label, cfg.weights, vocab.frequencies()).unwrap();
        let expected = replay(&ctx, &cfg);
        let got: Vec<_> = result
            .round_trace
            .iter()
            .map(|r| (r.position, r.chosen_token, r.entropy, r.loss_before, r.loss_after))
            .collect();
        assert_eq!(got, expected);
        let last = result.round_trace.last().unwrap();
        assert_eq!(last.loss_after, ctx.evaluate_tokens(&result.adversarial).unwrap().total);
        assert_eq!(result.final_breakdown.total, last.loss_after);
    }
}

#[test]
fn freezing_is_monotone_and_tokens_persist() {
    let spec = small_spec();
    let (cls, refm, vocab) = (spec.classifier(), spec.reference(), spec.vocabulary().unwrap());
    for cfg in
        [quick(), AttackConfig { schedule: mango_core::optimizers::StepSchedule::new(20), ..AttackConfig::gray() }]
    {
        for inst in spec.generate_task().unwrap() {
            let r = run_attack(&cls, &refm, &vocab, &inst.x, inst.label, &cfg).unwrap();
            let mut seen = Vec::new();
            for (k, rec) in r.round_trace.iter().enumerate() {
                assert_eq!(rec.round, k);
                assert!(!seen.contains(&rec.position));
                seen.push(rec.position);
                assert_eq!(r.adversarial.ids()[rec.position], rec.chosen_token);
                assert!(rec.candidates.iter().any(|c| c.token == rec.chosen_token));
            }
            assert_eq!(seen.len(), inst.x.len());
        }
    }
}

#[test]
fn attacks_are_deterministic() {
    let spec = small_spec();
    let (cls, refm, vocab) = (spec.classifier(), spec.reference(), spec.vocabulary().unwrap());
    let inst = spec.generate_task().unwrap().remove(1);
    let gray =
        AttackConfig { schedule: mango_core::optimizers::StepSchedule::new(20), seed: 9, ..AttackConfig::gray() };
    for cfg in [quick(), gray.clone()] {
        let a = run_attack(&cls, &refm, &vocab, &inst.x, inst.label, &cfg).unwrap();
        let b = run_attack(&cls, &refm, &vocab, &inst.x, inst.label, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
    let other = run_gray(&cls, &refm, &vocab, &inst.x, inst.label, &AttackConfig { seed: 10, ..gray.clone() }).unwrap();
    let base = run_gray(&cls, &refm, &vocab, &inst.x, inst.label, &gray).unwrap();
    assert_ne!(other.loss_trace, base.loss_trace);
}

#[test]
fn manifest_is_auditable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let out = harness::run_batch(&spec, &quick(), Some(dir.path())).unwrap();
    let audited = harness::audit_manifest(dir.path()).unwrap();
    assert_eq!(audited, out.manifest);

    let records = harness::read_results(dir.path().join(harness::RESULTS_FILE)).unwrap();
    assert_eq!(records.len(), 6);
    let successes = records.iter().filter(|r| r.result.as_ref().is_some_and(|r| r.success)).count();
    assert_eq!(out.manifest.metrics.successes, successes);
    assert_eq!(out.manifest.metrics.success_rate, Some(successes as f64 / 6.0));
    for name in &out.manifest.trace_files {
        let csv = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(csv.starts_with("round,position,entropy,chosen_token,loss_before,loss_after,gap\n"));
        assert_eq!(csv.lines().count(), spec.seq_len + 1);
    }

    let again = harness::run_batch(&spec, &quick(), None).unwrap();
    assert_eq!(again.manifest.hash().unwrap(), out.manifest.hash().unwrap());

    let path = dir.path().join(harness::RESULTS_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    assert!(harness::audit_manifest(dir.path()).is_err());
}

#[test]
fn per_instance_failures_do_not_stop_the_batch() {
    let spec = small_spec();
    let (cls, refm, vocab) = (spec.classifier(), spec.reference(), spec.vocabulary().unwrap());
    let mut instances = spec.generate_task().unwrap();
    instances[1].x = TokenSequence::new(vec![3, 15, 2], 16).unwrap();
    let records = harness::run_instances(&cls, &refm, &vocab, &instances, &quick());
    assert_eq!(records.len(), instances.len());
    assert!(records[1].result.is_none());
    assert!(records[1].error.as_deref().unwrap().contains("15"));
    assert!(records.iter().enumerate().all(|(i, r)| i == 1 || r.result.is_some()));
    let metrics = harness::BatchMetrics::from_records(&records);
    assert_eq!((metrics.failures, metrics.completed), (1, instances.len() - 1));
}

#[test]
fn gap_trace_is_self_consistent() {
    let spec = TaskSpec { num_instances: 3, ..small_spec() };
    let cfg = AttackConfig { trace_steps: true, ..quick() };
    let (cls, refm, vocab) = (spec.classifier(), spec.reference(), spec.vocabulary().unwrap());
    for inst in spec.generate_task().unwrap() {
        let r = run_mango(&cls, &refm, &vocab, &inst.x, inst.label, &cfg).unwrap();
        let quantize_rows: Vec<_> = r.step_trace.iter().filter(|s| s.kind == TraceKind::Quantize).collect();
        assert_eq!(quantize_rows.len(), inst.x.len());
        for (row, rec) in quantize_rows.iter().zip(&r.round_trace) {
            assert_eq!(row.continuous_total, rec.loss_after);
        }
        let steps: Vec<f64> =
            r.step_trace.iter().filter(|s| s.kind == TraceKind::Step).map(|s| s.continuous_total).collect();
        assert_eq!(steps, r.loss_trace);
        let last = r.step_trace.last().unwrap();
        assert_eq!(last.quantized_total, last.continuous_total);
    }

    let dir = tempfile::tempdir().unwrap();
    let traces =
        harness::gap_trace(&spec, &AttackConfig { variant: Variant::Naive, ..quick() }, Some(dir.path())).unwrap();
    for t in &traces {
        let csv = fs::read_to_string(dir.path().join(format!("gap_{}.csv", t.instance))).unwrap();
        assert_eq!(csv.lines().count(), t.rows.len() + 1);
        assert_eq!(t.rows.last().unwrap().kind, TraceKind::OneShot);
    }
    assert!(matches!(harness::gap_trace(&spec, &AttackConfig::gray(), None), Err(Error::Config(_))));
}

#[test]
fn naive_round_trace_shares_one_shot_gap() {
    let spec = small_spec();
    let (cls, refm, vocab) = (spec.classifier(), spec.reference(), spec.vocabulary().unwrap());
    let cfg = AttackConfig { variant: Variant::Naive, ..quick() };
    for inst in spec.generate_task().unwrap() {
        let r = run_attack(&cls, &refm, &vocab, &inst.x, inst.label, &cfg).unwrap();
        assert_eq!(r.round_trace.len(), inst.x.len());
        assert_eq!(r.loss_trace.len(), 30);
        for rec in &r.round_trace {
            assert_eq!(rec.gap, rec.loss_after - rec.loss_before);
            assert_eq!(r.adversarial.ids()[rec.position], rec.chosen_token);
        }
        assert_eq!(r.final_breakdown.total, r.round_trace[0].loss_after);
    }
}

#[test]
fn json_interfaces_round_trip() {
    let dir = tempfile::tempdir().unwrap();

    let vocab = TaskSpec::default().vocabulary().unwrap();
    let text = vocab.to_json_string().unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["tokens", "frequencies", "embeddings"] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    assert_eq!(Vocabulary::from_json_str(&text).unwrap(), vocab);

    let cls = ToyClassifier::new(3, 7, 4, 3, 2.0);
    let path = dir.path().join("cls.json");
    cls.save(&path).unwrap();
    assert_eq!(ToyClassifier::load(&path).unwrap(), cls);
    let refm = ToyReferenceModel::new(4, 7, 4, 5);
    let path = dir.path().join("ref.json");
    refm.save(&path).unwrap();
    assert_eq!(ToyReferenceModel::load(&path).unwrap(), refm);

    let b = LossBreakdown { margin: 1.5, fluency: -2.25, similarity: -3.0, total: -0.75 };
    let v: serde_json::Value = serde_json::to_value(b).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["fluency", "margin", "similarity", "total"]);

    let out = harness::run_batch(&TaskSpec { num_instances: 2, ..small_spec() }, &quick(), Some(dir.path())).unwrap();
    let lines: Vec<String> =
        fs::read_to_string(dir.path().join(harness::RESULTS_FILE)).unwrap().lines().map(String::from).collect();
    for (line, rec) in lines.iter().zip(&out.records) {
        let parsed: BatchRecord = serde_json::from_str(line).unwrap();
        assert_eq!(&parsed, rec);
        let result: &AttackResult = parsed.result.as_ref().unwrap();
        let reparsed: AttackResult = serde_json::from_str(&serde_json::to_string(result).unwrap()).unwrap();
        assert_eq!(&reparsed, result);
    }
}

#[test]
fn config_file_drives_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(
        &path,
        r#"
[task]
num_instances = 2
seq_len = 4

[attack]
variant = "naive"
steps = 10
seed = 5

[optimizer]
variant = "amsgrad"
lr = 0.2
beta1 = 0.8
beta2 = 0.99
eps = 1e-6
reset_on_quantize = false

[zoo]
samples = 8
noise_scale = 0.05
"#,
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let attack = cfg.attack_config().unwrap();
    assert_eq!(attack.variant, Variant::Naive);
    assert_eq!(attack.seed, 5);
    assert_eq!(attack.optimizer.lr, 0.2);
    assert!(!attack.optimizer.reset_on_quantize);
    let out = harness::run_batch(&cfg.task, &attack, None).unwrap();
    assert_eq!(out.records.len(), 2);
    assert!(out.records.iter().all(|r| r.result.as_ref().unwrap().adversarial.len() == 4));

    assert!(matches!(RunConfig::load(dir.path().join("missing.toml")), Err(Error::Io { .. })));
    fs::write(&path, "[optimizer]\nbeta1 = 1.5\n").unwrap();
    assert!(matches!(RunConfig::load(&path).unwrap().attack_config(), Err(Error::Config(_))));
}

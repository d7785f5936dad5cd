// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every criterion runs even when an
//! earlier one panics.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use unlearn_core::autodiff::{finite_difference, relative_error, Graph, ParamId};
use unlearn_core::capsule::{rank_one, Capsule, GateConfig};
use unlearn_core::dataset::ProbeType;
use unlearn_core::eval::{classify_mechanism, EvalReport, MechanismState};
use unlearn_core::healing::{
    dpo_loss, dpo_term, ewc_loss, ewc_term, kl_anchor_loss, kl_term, name_token_unlikelihood,
    name_unlikelihood_term, reference_logprobs, unlikelihood_loss, unlikelihood_term, AnchorRef, FisherDiagonal,
    LossWeights, PreferenceTuple,
};
use unlearn_core::model::{
    AdapterConfig, AdapterState, BaseMode, ForwardCtx, ModelConfig, Projection, Submodule, ToyModel,
    ADAPTER_PARAM_BASE,
};
use unlearn_core::pipeline::{Outcome, Pipeline, RunConfig, Stage};
use unlearn_core::probe::{ActivationRecord, AlignMode};
use unlearn_core::signature::{
    mine_primary, mine_subject, validate_layerwise, BootstrapConfig, ControlSource, MineConfig,
};
use unlearn_core::stats::{auc_bootstrap_ci, auc_roc, bootstrap_effect_size, classifier_metrics, cohens_d};
use unlearn_core::Error;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, t: Instant) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, format!("took {e:.1?}, limit {limit:?}"))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---- 1 ------------------------------------------------------------------

fn capsule_geometry() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_perp = 0.0f64;
    let mut worst_proj = 0.0f64;
    for i in 0..1000 {
        let d_len = rng.random_range(2..=96);
        let d = unit(&mut rng, d_len);
        let h: Vec<f64> = (0..d_len).map(|_| 3.0 * gauss(&mut rng)).collect();
        let alpha = rng.random_range(-1.5..1.5);
        let cap = Capsule {
            direction: d.clone(),
            alpha,
            tau: rng.random_range(0.1..4.0),
            k: rng.random_range(0.2..3.0),
            calib_mean: rng.random_range(-1.0..1.0),
            calib_std: rng.random_range(0.1..2.0),
            ..forged_capsule(d_len)
        };
        let gated = i % 2 == 0;
        let a_eff = if gated { cap.gate(cap.z(&h)) } else { alpha };
        let out = cap.apply(&h, gated).map_err(|e| e.to_string())?;
        let (ph, po) = (dot(&h, &d), dot(&out, &d));
        let perp_h: Vec<f64> = h.iter().zip(&d).map(|(x, u)| x - ph * u).collect();
        let perp_o: Vec<f64> = out.iter().zip(&d).map(|(x, u)| x - po * u).collect();
        let diff: Vec<f64> = perp_h.iter().zip(&perp_o).map(|(a, b)| a - b).collect();
        worst_perp = worst_perp.max(norm(&diff) / norm(&perp_h).max(1e-300));
        let expect = (1.0 + a_eff) * ph;
        let err = (po - expect).abs() / expect.abs().max(1e-12 * norm(&h));
        worst_proj = worst_proj.max(err);
    }
    ensure(worst_perp < 1e-6, format!("orthogonal complement moved by {worst_perp:e} relative"))?;
    ensure(worst_proj < 1e-6, format!("projection law off by {worst_proj:e} relative"))?;
    let mut worst_null = 0.0f64;
    for _ in 0..100 {
        let d = unit(&mut rng, 64);
        let c: f64 = rng.random_range(-10.0..10.0);
        let h: Vec<f64> = d.iter().map(|x| c * x).collect();
        let out = rank_one(&h, &d, -1.0);
        worst_null = worst_null.max(norm(&out) / norm(&h));
    }
    ensure(worst_null < 1e-6, format!("alpha=-1 on h parallel to d leaves {worst_null:e} of the norm"))?;
    within(Duration::from_secs(10), t)?;
    Ok(format!("1000 draws, complement {worst_perp:.1e}, projection {worst_proj:.1e}, null {worst_null:.1e}"))
}

fn forged_capsule(d: usize) -> Capsule {
    let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
    let axis = unit(&mut rng, d);
    let pos: Vec<Vec<f64>> = (0..20)
        .map(|_| axis.iter().map(|a| 2.0 * a + 0.1 * gauss(&mut rng)).collect())
        .collect();
    let neg: Vec<Vec<f64>> =
        (0..20).map(|_| (0..d).map(|_| 0.1 * gauss(&mut rng)).collect()).collect();
    let boot = BootstrapConfig { trials: 50, ..BootstrapConfig::default() };
    let sig = mine_primary("quill", 1, Submodule::Down, &pos, &neg, &boot).expect("planted signal");
    Capsule::forge(&sig, d, AlignMode::Truncate, &GateConfig::default()).expect("valid capsule")
}

// ---- 2 ------------------------------------------------------------------

fn tiny_policy(seed: u64) -> (ToyModel, ToyModel) {
    let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 12, vocab_size: 20, max_seq_len: 16, seed };
    let base = ToyModel::new(cfg.clone()).unwrap();
    let mut policy = base.clone();
    let ac = AdapterConfig { rank: 2, dropout: 0.0, seed, ..AdapterConfig::default() };
    let mut ad = AdapterState::new(&cfg, ac).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let ids: Vec<ParamId> = ad.trainable().into_iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in ad.tensor_mut(id).unwrap().data_mut() {
            *x = 0.3 * gauss(&mut rng);
        }
    }
    policy.attach_adapter(ad).unwrap();
    (base, policy)
}

fn adapter_vector(m: &ToyModel) -> (Vec<ParamId>, Vec<f64>) {
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    for (id, t) in m.adapter().unwrap().trainable() {
        ids.push(id);
        flat.extend_from_slice(t.data());
    }
    (ids, flat)
}

fn with_adapter(m: &ToyModel, ids: &[ParamId], flat: &[f64]) -> ToyModel {
    let mut out = m.clone();
    let ad = out.adapter_mut().unwrap();
    let mut at = 0;
    for &id in ids {
        let t = ad.tensor_mut(id).unwrap();
        let n = t.data().len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    out
}

/// Analytic adapter gradient of the scalar built by `build`, flattened in
/// `ids` order.
fn analytic(
    ids: &[ParamId],
    build: impl FnOnce(&mut Graph, &mut ForwardCtx<'_>) -> unlearn_core::Result<unlearn_core::autodiff::Var>,
) -> Vec<f64> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx { base: BaseMode::Frozen, adapter_grad: true, dropout_rng: None, hooks: None };
    let loss = build(&mut g, &mut ctx).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.keys().all(|id| id.0 >= ADAPTER_PARAM_BASE));
    let mut out = Vec::new();
    for id in ids {
        let t = &grads[id];
        out.extend_from_slice(t.data());
    }
    out
}

fn random_seq(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<u32> {
    let len = rng.random_range(lo..hi);
    (0..len).map(|_| rng.random_range(4..20)).collect()
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let step = 1e-5;
    let floor = 1e-8;
    let mut worst = [0.0f64; 5];
    let names = ["dpo", "unlikelihood", "name unlikelihood", "kl", "ewc"];
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
        let (base, policy) = tiny_policy(inst);
        let (ids, theta) = adapter_vector(&policy);
        let x = random_seq(&mut rng, 2, 5);
        let yp = random_seq(&mut rng, 1, 5);
        let ym = random_seq(&mut rng, 1, 5);
        let tuple = PreferenceTuple {
            prompt_id: format!("p{inst}"),
            x: x.clone(),
            y_plus: yp.clone(),
            y_minus: ym.clone(),
            trigger_z: 4.0,
            layer: 0,
            x_text: String::new(),
            y_plus_text: String::new(),
            y_minus_text: String::new(),
        };
        let beta = rng.random_range(0.05..2.0);
        let w = rng.random_range(0.5..2.0);
        let name_set: Vec<u32> = vec![rng.random_range(4..12), rng.random_range(12..20)];
        let anchors = vec![random_seq(&mut rng, 5, 6), random_seq(&mut rng, 3, 4)];
        let fisher = FisherDiagonal::estimate(&base, &anchors, &[Projection::Q, Projection::V, Projection::O]).unwrap();

        let refs = reference_logprobs(&base, &tuple).unwrap();
        let weights = LossWeights { beta, w, ..LossWeights::default() };
        let a = analytic(&ids, |g, ctx| dpo_term(g, &policy, &[&tuple], &[refs], &weights, ctx));
        let n = finite_difference(&theta, step, |v| dpo_loss(&with_adapter(&policy, &ids, v), &base, &tuple, beta, w).unwrap());
        worst[0] = worst[0].max(relative_error(&a, &n, floor));

        let a = analytic(&ids, |g, ctx| unlikelihood_term(g, &policy, &[(&x, &ym)], ctx));
        let n = finite_difference(&theta, step, |v| unlikelihood_loss(&with_adapter(&policy, &ids, v), &x, &ym).unwrap());
        worst[1] = worst[1].max(relative_error(&a, &n, floor));

        let a = analytic(&ids, |g, ctx| name_unlikelihood_term(g, &policy, &[(&x, &yp)], &name_set, ctx));
        let n = finite_difference(&theta, step, |v| {
            name_token_unlikelihood(&with_adapter(&policy, &ids, v), &x, &yp, &name_set).unwrap()
        });
        worst[2] = worst[2].max(relative_error(&a, &n, floor));

        let arefs: Vec<AnchorRef> = anchors.iter().map(|p| AnchorRef::new(&base, p).unwrap()).collect();
        let arefs: Vec<&AnchorRef> = arefs.iter().collect();
        let a = analytic(&ids, |g, ctx| kl_term(g, &policy, &arefs, ctx));
        let n = finite_difference(&theta, step, |v| kl_anchor_loss(&with_adapter(&policy, &ids, v), &base, &anchors).unwrap());
        worst[3] = worst[3].max(relative_error(&a, &n, floor));

        let a = analytic(&ids, |g, ctx| ewc_term(g, &policy, &fisher, ctx));
        let n = finite_difference(&theta, step, |v| ewc_loss(&with_adapter(&policy, &ids, v), &fisher).unwrap());
        worst[4] = worst[4].max(relative_error(&a, &n, floor));
    }
    for (name, e) in names.iter().zip(worst) {
        ensure(e < 1e-4, format!("{name}: max relative error {e:e}"))?;
    }
    within(Duration::from_secs(60), t)?;
    Ok(format!(
        "20 instances per term, max rel. err dpo {:.1e} ul {:.1e} ntul {:.1e} kl {:.1e} ewc {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    ))
}

// ---- 3 ------------------------------------------------------------------

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn statistics_oracles() -> Check {
    let t = Instant::now();
    let d = cohens_d(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).map_err(|e| e.to_string())?;
    ensure(d == 1.0, format!("cohens_d hand oracle gave {d}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let np = rng.random_range(1..12);
        let nn = rng.random_range(1..12);
        // Integer-valued scores force ties.
        let pos: Vec<f64> = (0..np).map(|_| rng.random_range(0..6) as f64).collect();
        let neg: Vec<f64> = (0..nn).map(|_| rng.random_range(0..6) as f64).collect();
        let (a, b) = (auc_roc(&pos, &neg), brute_auc(&pos, &neg));
        ensure((a - b).abs() < 1e-12, format!("set {i}: auc {a} vs pair count {b}"))?;
    }
    for (pos, neg) in [
        (vec![2.0, 3.0, 4.0], vec![-1.0, 0.0, 1.0]),
        (vec![0.51, 0.9, 10.0, 7.0], vec![0.5, -3.0, 0.2]),
    ] {
        let m = classifier_metrics(&pos, &neg).map_err(|e| e.to_string())?;
        ensure(m.auc_roc == 1.0 && m.eer == 0.0, format!("separable fixture gave auc {} eer {}", m.auc_roc, m.eer))?;
    }
    let pos: Vec<f64> = (0..40).map(|_| 1.0 + gauss(&mut rng)).collect();
    let neg: Vec<f64> = (0..40).map(|_| gauss(&mut rng)).collect();
    let a = bootstrap_effect_size(&pos, &neg, 500, 0.95, 17).map_err(|e| e.to_string())?;
    let b = bootstrap_effect_size(&pos, &neg, 500, 0.95, 17).map_err(|e| e.to_string())?;
    ensure(
        a.ci_low.to_bits() == b.ci_low.to_bits() && a.ci_high.to_bits() == b.ci_high.to_bits(),
        "effect-size bootstrap differs between identical seeds",
    )?;
    let ca = auc_bootstrap_ci(&pos, &neg, 500, 0.95, 17).map_err(|e| e.to_string())?;
    let cb = auc_bootstrap_ci(&pos, &neg, 500, 0.95, 17).map_err(|e| e.to_string())?;
    ensure(ca.0.to_bits() == cb.0.to_bits() && ca.1.to_bits() == cb.1.to_bits(), "AUC bootstrap not deterministic")?;
    within(Duration::from_secs(30), t)?;
    Ok("hand oracle exact, 50 AUC sets match pair counting, separable fixtures, seeded bootstrap bit-identical".into())
}

// ---- 4 ------------------------------------------------------------------

fn classifier_fixture() -> Check {
    use MechanismState::*;
    let t = Instant::now();
    // (model, SMR %, EL10, stated state)
    let rows = [
        ("Mistral 7B", 0.00, 0.020, TypeI),
        ("Llama 8B", 1.10, 0.054, TypeI),
        ("Mistral 3B", 0.52, 0.054, TypeI),
        ("Qwen 14B", 0.52, 1.350, TypeI),
        ("Qwen 8B", 3.33, 11.03, TypeII),
        ("DeepSeek 8B", 0.00, 6.19, TypeII),
        ("Llama 3B", 0.00, 3.06, TypeII),
        ("Qwen 3B", 0.43, 1.460, TypeIII),
        ("DeepSeek 3B", 45.6, 15.39, TypeIII),
    ];
    let wrong: Vec<String> = rows
        .iter()
        .filter_map(|&(m, s, e, want)| {
            let got = classify_mechanism(s, e, 5.0);
            (got != want).then(|| format!("{m} ({s}, {e}) -> {got}, table says {want}"))
        })
        .collect();
    ensure(wrong.is_empty(), format!("{}/9 rows disagree: {}", wrong.len(), wrong.join("; ")))?;
    within(Duration::from_secs(1), t)?;
    Ok("9/9 rows".into())
}

// ---- 5 ------------------------------------------------------------------

fn signature_recovery() -> Check {
    let t = Instant::now();
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let axis = unit(&mut rng, d);
    let mut records = Vec::new();
    for (subject, sign) in [("vessa", 1.0), ("orlin", -1.0)] {
        for i in 0..200 {
            let v: Vec<f32> =
                axis.iter().map(|a| (sign * 1.5 * a + 0.05 * gauss(&mut rng)) as f32).collect();
            records.push(ActivationRecord {
                prompt_id: format!("{subject}:{i}"),
                subject: subject.into(),
                probe_type: ProbeType::Direct,
                layer: 2,
                submodule: Submodule::Down,
                raw_dim: d,
                vector: v,
            });
        }
    }
    let sigs = mine_subject(&records, "vessa", &MineConfig::default()).map_err(|e| e.to_string())?;
    ensure(sigs.len() == 1, format!("expected one signature, got {}", sigs.len()))?;
    let s = &sigs[0];
    let cos = dot(&s.direction, &axis).abs();
    ensure(cos > 0.99, format!("|cosine| with planted axis {cos}"))?;
    ensure(s.effect.ci_low > 0.0 || s.effect.ci_high < 0.0, format!("CI [{}, {}] contains 0", s.effect.ci_low, s.effect.ci_high))?;
    let val = validate_layerwise(&records, &sigs, ControlSource::OtherSubjects, &BootstrapConfig::default())
        .map_err(|e| e.to_string())?;
    let m = &val[0].metrics;
    ensure(m.auc_roc == 1.0 && m.eer == 0.0, format!("validation auc {} eer {}", m.auc_roc, m.eer))?;
    within(Duration::from_secs(30), t)?;
    Ok(format!(
        "|cos| {cos:.5}, d {:.2} CI [{:.2}, {:.2}], AUC {} EER {}",
        s.effect.point_estimate, s.effect.ci_low, s.effect.ci_high, m.auc_roc, m.eer
    ))
}

// ---- 6, 7 ---------------------------------------------------------------

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: RunConfig,
    report: EvalReport,
    elapsed: Duration,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn full_run() -> &'static Result<Run, String> {
    static RUN: OnceLock<Result<Run, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path().join("full");
        let cfg = RunConfig::parse(
            "",
            &[format!("paths.root=\"{}\"", root.display()), format!("workers={}", workers())],
        )
        .map_err(|e| e.to_string())?;
        let p = Pipeline::new(cfg.clone());
        p.run_all().map_err(|e| e.to_string())?;
        let report: EvalReport = read_report(&p.eval_path())?;
        Ok(Run { _dir: dir, root, cfg, report, elapsed: t.elapsed() })
    })
}

fn read_report(p: &Path) -> Result<EvalReport, String> {
    serde_json::from_slice(&std::fs::read(p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn end_to_end() -> Check {
    let run = full_run().as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let r = &run.report;
    ensure(run.cfg.model.n_layers == 4, "model is not 4 layers")?;
    ensure(run.cfg.synth.n_subjects == 8, "corpus is not 8 subjects")?;
    ensure(r.base_fact_accuracy >= 95.0, format!("base fact accuracy {:.2}% < 95%", r.base_fact_accuracy))?;
    ensure(r.smr <= 5.0, format!("SMR {:.2}% > 5%", r.smr))?;
    ensure(r.el10 < 1.0, format!("EL10 {} >= 1", r.el10))?;
    ensure(r.mechanism_state == MechanismState::TypeI, format!("state {}", r.mechanism_state))?;
    ensure(r.utility_drift.abs() <= 5.0, format!("utility drift {:+.2}%", r.utility_drift))?;
    let drop = r.retained_fact_accuracy_base - r.retained_fact_accuracy;
    ensure(drop < 10.0, format!("retained accuracy dropped {drop:.2} points"))?;
    ensure(run.elapsed < Duration::from_secs(30 * 60), format!("took {:.0?}", run.elapsed))?;
    Ok(format!(
        "base acc {:.1}%, SMR {:.2}% (base {:.1}%), EL10 {:.4}, drift {:+.2}%, retained {:.2} -> {:.2}, {}, {:.0?}",
        r.base_fact_accuracy,
        r.smr,
        r.target_smr_base,
        r.el10,
        r.utility_drift,
        r.retained_fact_accuracy_base,
        r.retained_fact_accuracy,
        r.mechanism_state,
        run.elapsed
    ))
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let dest = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &dest)?;
        } else {
            std::fs::copy(e.path(), dest)?;
        }
    }
    Ok(())
}

fn ablation_direction() -> Check {
    let t = Instant::now();
    let run = full_run().as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("no_ntul");
    copy_dir(&run.root, &root).map_err(|e| e.to_string())?;
    let mut cfg = run.cfg.clone();
    cfg.paths.root = root;
    cfg.heal.weights.lambda_ntul = 0.0;
    cfg.eval.label = "no-ntul".into();
    let p = Pipeline::new(cfg);
    for s in Stage::ALL {
        let o = p.run(s).map_err(|e| e.to_string())?;
        let expect = if s < Stage::Heal { Outcome::Skipped } else { Outcome::Ran };
        ensure(o == expect, format!("stage {s} was {o:?}"))?;
    }
    let ab = read_report(&p.eval_path())?;
    let full = &run.report;
    ensure(ab.smr >= full.smr, format!("SMR {:.2}% < full {:.2}%", ab.smr, full.smr))?;
    ensure(ab.el10 >= full.el10, format!("EL10 {:.6} < full {:.6}", ab.el10, full.el10))?;
    within(Duration::from_secs(30 * 60), t)?;
    Ok(format!(
        "no NT-UL: SMR {:.2}% >= {:.2}%, EL10 {:.6} >= {:.6}, state {}",
        ab.smr, full.smr, ab.el10, full.el10, ab.mechanism_state
    ))
}

// ---- 8 ------------------------------------------------------------------

fn flip_byte(p: &Path, at_from_end: usize) {
    let mut b = std::fs::read(p).unwrap();
    let i = b.len() - at_from_end;
    b[i] ^= 0x40;
    std::fs::write(p, b).unwrap();
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn artifact_round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();

    let cap = forged_capsule(64);
    let cp = dir.path().join("a.capsule");
    cap.export(&cp).map_err(|e| e.to_string())?;
    let back = Capsule::load(&cp).map_err(|e| e.to_string())?;
    ensure(back == cap, "capsule changed across export/load")?;
    let cp2 = dir.path().join("b.capsule");
    back.export(&cp2).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&cp).unwrap() == std::fs::read(&cp2).unwrap(), "capsule re-export differs")?;
    flip_byte(&cp, 40);
    ensure(matches!(Capsule::load(&cp), Err(Error::Checksum(_))), "corrupted capsule not rejected by checksum")?;

    let (_, policy) = tiny_policy(8);
    let ad = policy.adapter().unwrap().clone();
    let ap = dir.path().join("a.adapter");
    ad.save(&ap).map_err(|e| e.to_string())?;
    let back = AdapterState::load(&ap).map_err(|e| e.to_string())?;
    ensure(back == ad, "adapter changed across save/load")?;
    let ap2 = dir.path().join("b.adapter");
    back.save(&ap2).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&ap).unwrap() == std::fs::read(&ap2).unwrap(), "adapter re-save differs")?;
    flip_byte(&ap, 50);
    ensure(matches!(AdapterState::load(&ap), Err(Error::Checksum(_))), "corrupted adapter not rejected by checksum")?;

    let run = full_run().as_ref().map_err(|e| format!("pipeline run unavailable for the no-op check: {e}"))?;
    let before = tree_bytes(&run.root);
    let p = Pipeline::new(run.cfg.clone());
    for s in Stage::ALL {
        let o = p.run(s).map_err(|e| e.to_string())?;
        ensure(o == Outcome::Skipped, format!("stage {s} reran with unchanged inputs"))?;
    }
    ensure(tree_bytes(&run.root) == before, "a skipped stage changed files")?;
    within(Duration::from_secs(10), t)?;
    Ok("capsule and adapter bit-exact, corruption -> checksum error, 7 stages skipped with files bit-identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("capsule geometry", capsule_geometry),
        ("gradient suite", gradient_suite),
        ("statistics oracles", statistics_oracles),
        ("mechanism classifier fixture", classifier_fixture),
        ("signature recovery", signature_recovery),
        ("end-to-end toy erasure", end_to_end),
        ("ablation direction (no NT-UL)", ablation_direction),
        ("artifact round-trips", artifact_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {} {name}: PASS [{secs:.1}s] {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL [{secs:.1}s] {d}", i + 1);
            }
        }
    }
    println!("acceptance: {}/8 passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

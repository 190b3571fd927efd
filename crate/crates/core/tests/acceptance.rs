//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use crackedge::compat::{check_compat, default_kl520_profile, strip_unsupported_head};
use crackedge::enef::{pack, unpack, unpack_archive, Metadata, FLAG_HEAD_STRIPPED};
use crackedge::graph::{build_reference_net, ViolationCode};
use crackedge::harness::{build_handcrafted_model, evaluate, synth_samples, SynthConfig};
use crackedge::optimize::{cluster_weights, compute_requant, distinct_count, kmeans_scalar, prune_magnitude};
use crackedge::runtime::{quantize_input, run_float, run_quant_int, time_pipeline, FloatClassifier, QuantClassifier};
use crackedge::Model;
use rand::Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn compat_gate() -> Outcome {
    let start = Instant::now();
    let net: Model = build_reference_net(&[16, 32, 64, 64, 128, 128], 256).map_err(|e| e.to_string())?;
    let profile = default_kl520_profile();
    let before = check_compat(&net, &profile);
    let unsupported = before.iter().filter(|v| v.code == ViolationCode::UnsupportedOp).count();
    ensure(before.len() == 1 && unsupported == 1, || format!("before strip: {before:?}"))?;
    let (stripped, removed) = strip_unsupported_head(&net, &profile).map_err(|e| e.to_string())?;
    let after = check_compat(&stripped, &profile);
    ensure(after.is_empty(), || format!("after strip: {after:?}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("1 UnsupportedOp before, 0 after stripping {} node(s), {elapsed:.2?}", removed.len()))
}

fn kernel_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..1000 {
        let mut r = rng(100_000 + seed);
        let g = random_net::<f64>(&mut r);
        let x = random_input(&g, &mut r);
        let got = run_float(&g, &x).map_err(|e| e.to_string())?.data;
        let want = oracle_float(&g, &x.data);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-5, || format!("seed {seed}: float error {worst:e}"))?;

        let qm = random_quantized(&g, &mut r);
        let xq = random_input(&g, &mut r);
        let q = quantize_input(&qm, &xq).map_err(|e| e.to_string())?;
        ensure(q == oracle_quantize_input(&qm, &xq.data), || format!("seed {seed}: input quantization differs"))?;
        let got = run_quant_int(&qm, &q).map_err(|e| e.to_string())?;
        ensure(got == oracle_int(&qm, &q), || format!("seed {seed}: int8 output differs"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 nets, float max error {worst:.1e}, int8 bit-exact, {elapsed:.2?}"))
}

fn requant_fidelity() -> Outcome {
    let n = 10_000;
    let (lo, hi) = (-16.0f64, 4.0f64);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let m = 2f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64);
        let r = compute_requant(m).map_err(|e| format!("{m}: {e}"))?;
        ensure(r.is_valid(), || format!("{m}: {r:?} not normalized"))?;
        worst = worst.max(((r.realized() - m) / m).abs());
    }
    ensure(worst <= 2f64.powi(-30), || format!("relative error {worst:e}"))?;
    Ok(format!("{n} multipliers, worst relative error {worst:.2e} (bound {:.2e})", 2f64.powi(-30)))
}

struct Fidelity {
    agreement: usize,
    float_acc: f64,
    quant: crackedge::harness::Evaluation,
}

fn fidelity_run() -> Result<Fidelity, String> {
    let samples = synth_samples(&SynthConfig { n_per_class: 500, seed: 42, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let model: Model = build_handcrafted_model();
    let (_, qm) = quantized_handcrafted(43);
    let f = evaluate(&FloatClassifier::new(&model), &samples, "handcrafted-f32", "synthetic-42")
        .map_err(|e| e.to_string())?;
    let qc = QuantClassifier::new(&qm).map_err(|e| e.to_string())?;
    let q = evaluate(&qc, &samples, "handcrafted-int8", "synthetic-42").map_err(|e| e.to_string())?;
    let agreement = f.predictions.iter().zip(&q.predictions).filter(|(a, b)| a == b).count();
    Ok(Fidelity { agreement, float_acc: f.report.accuracy, quant: q })
}

fn quant_fidelity(run: &Result<Fidelity, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let total = run.quant.predictions.len();
    let rate = run.agreement as f64 / total as f64;
    let gap = (run.float_acc - run.quant.report.accuracy).abs() * 100.0;
    ensure(total == 1000, || format!("{total} images"))?;
    ensure(rate >= 0.98, || format!("agreement {rate:.3}"))?;
    ensure(gap <= 2.0, || format!("accuracy gap {gap:.2} points"))?;
    Ok(format!("agreement {}/{total}, accuracy gap {gap:.2} points", run.agreement))
}

fn quant_accuracy(run: &Result<Fidelity, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let m = run.quant.report.matrix;
    ensure(m.total() == 1000, || format!("matrix totals {}", m.total()))?;
    ensure(run.quant.report.accuracy >= 0.93, || format!("accuracy {:.4}", run.quant.report.accuracy))?;
    Ok(format!(
        "accuracy {:.4} (tp {} fp {} fn {} tn {})",
        run.quant.report.accuracy, m.tp, m.fp, m.fn_, m.tn
    ))
}

fn metadata() -> Metadata {
    Metadata { model_name: "fuzz".into(), profile_name: "kl520".into(), flags: 0 }
}

fn enef_format() -> Outcome {
    let mut r = rng(6);
    let mut archives = Vec::new();
    for _ in 0..100 {
        let qm = random_quantized(&random_net::<f64>(&mut r), &mut r);
        let a = pack(&qm, &metadata()).map_err(|e| e.to_string())?;
        let b = pack(&qm, &metadata()).map_err(|e| e.to_string())?;
        ensure(a == b, || "archive bytes differ between runs".into())?;
        ensure(unpack(&a).map_err(|e| e.to_string())? == qm, || "round trip differs".into())?;
        archives.push(a);
    }

    let (mut panics, mut accepted) = (0, 0);
    for case in 0..10_000 {
        let bytes: Vec<u8> = if case % 2 == 0 {
            let n = r.gen_range(0..1024);
            let mut b: Vec<u8> = (0..n).map(|_| r.gen()).collect();
            if case % 4 == 0 && b.len() >= 16 {
                b[..4].copy_from_slice(b"ENEF");
                b[4..6].copy_from_slice(&1u16.to_le_bytes());
            }
            b
        } else {
            let mut b = archives[r.gen_range(0..archives.len())].clone();
            match r.gen_range(0..4) {
                0 => {
                    for _ in 0..r.gen_range(1..8) {
                        let i = r.gen_range(0..b.len());
                        b[i] ^= r.gen_range(1..=255u8);
                    }
                }
                1 => b.truncate(r.gen_range(0..b.len())),
                2 => {
                    let i = r.gen_range(0..b.len());
                    let extra: Vec<u8> = (0..r.gen_range(1..64)).map(|_| r.gen()).collect();
                    b.splice(i..i, extra);
                }
                _ => {
                    // Edit the body, then fix the checksum so decoding is exercised.
                    let body = b.len() - 4;
                    let i = r.gen_range(16..body);
                    b[i] = r.gen();
                    let crc = crackedge::enef::crc32(&b[..body]);
                    b[body..].copy_from_slice(&crc.to_le_bytes());
                }
            }
            b
        };
        match catch_unwind(AssertUnwindSafe(|| unpack_archive(&bytes))) {
            Err(_) => panics += 1,
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => {}
        }
    }
    ensure(panics == 0, || format!("{panics} panics in 10000 cases"))?;
    Ok(format!("100 bit-exact round trips, deterministic, 10000 fuzz cases without a crash ({accepted} decoded)"))
}

fn latency() -> Outcome {
    let (_, qm) = quantized_handcrafted(43);
    let meta = Metadata { model_name: qm.graph.name.clone(), profile_name: "kl520".into(), flags: FLAG_HEAD_STRIPPED };
    let bytes = pack(&qm, &meta).map_err(|e| e.to_string())?;
    let deployed = unpack_archive(&bytes).map_err(|e| e.to_string())?.model;
    let images: Vec<_> = synth_samples(&SynthConfig { n_per_class: 50, seed: 42, ..Default::default() })
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let stats = time_pipeline(&deployed, &images, 5).map_err(|e| e.to_string())?;
    let json = serde_json::to_value(&stats).map_err(|e| e.to_string())?;
    for key in ["n", "mean_ms", "p50_ms", "p95_ms", "pre_ms", "infer_ms", "post_ms"] {
        ensure(json.get(key).is_some(), || format!("latency lacks {key}"))?;
    }
    ensure(stats.n == 100, || format!("n = {}", stats.n))?;
    ensure(stats.mean_ms <= 100.0, || format!("mean {:.2} ms", stats.mean_ms))?;
    Ok(format!(
        "{} images, mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms (pre {:.2} / infer {:.2} / post {:.3})",
        stats.n, stats.mean_ms, stats.p50_ms, stats.p95_ms, stats.pre_ms, stats.infer_ms, stats.post_ms
    ))
}

fn optimization_passes() -> Outcome {
    let mut net: Model = build_reference_net(&[8, 8, 16, 16, 16, 16], 32).map_err(|e| e.to_string())?;
    let mut r = rng(8);
    randomize_weights(&mut net, &mut r);
    let weights: Vec<String> = net.weight_tensor_ids().into_iter().map(String::from).collect();
    for s in [0.25, 0.5, 0.9] {
        let pruned = prune_magnitude(&net, s).map_err(|e| e.to_string())?;
        for id in &weights {
            let w = &pruned.weights[id];
            let zeros = w.iter().filter(|v| **v == 0.0).count();
            let want = (s * w.len() as f64).floor() as usize;
            ensure(zeros == want, || format!("sparsity {s}, {id}: {zeros} zeros, want {want}"))?;
        }
    }
    for k in [4, 16] {
        let clustered = cluster_weights(&net, k, 50).map_err(|e| e.to_string())?;
        for id in &weights {
            let d = distinct_count(&clustered.weights[id]);
            ensure(d <= k, || format!("k {k}, {id}: {d} distinct values"))?;
            let values: Vec<f64> = net.weights[id].iter().map(|&v| v as f64).collect();
            let km = kmeans_scalar(&values, k, 50);
            let monotone = km.sse_history.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12));
            ensure(monotone, || format!("k {k}, {id}: SSE history {:?}", km.sse_history))?;
        }
    }
    Ok(format!("{} weight tensors: exact zero counts at 0.25/0.5/0.9, <= k values at k = 4/16", weights.len()))
}

fn shape_trace() -> Outcome {
    let net: Model = build_reference_net(&[16, 32, 64, 64, 128, 128], 256).map_err(|e| e.to_string())?;
    let trace = net.pool_trace();
    ensure(trace == [224, 112, 56, 28, 14, 7, 3], || format!("trace {trace:?}"))?;
    Ok(format!("{trace:?}"))
}

fn main() {
    let start = Instant::now();
    let fidelity = fidelity_run();
    let shared = start.elapsed().as_secs_f64();
    let criteria: Vec<(&str, Check)> = vec![
        ("compatibility gate", Box::new(compat_gate)),
        ("kernel oracle equivalence", Box::new(kernel_oracles)),
        ("requantization fidelity", Box::new(requant_fidelity)),
        ("quantization fidelity", Box::new(|| quant_fidelity(&fidelity))),
        ("quantized accuracy", Box::new(|| quant_accuracy(&fidelity))),
        ("ENEF round trip and fuzz", Box::new(enef_format)),
        ("end-to-end latency", Box::new(latency)),
        ("pruning and clustering", Box::new(optimization_passes)),
        ("shape trace", Box::new(shape_trace)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        // Criteria 4 and 5 share one evaluation run; charge it to the first.
        let secs = start.elapsed().as_secs_f64() + if i == 3 { shared } else { 0.0 };
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNATTAINABLE` still run at full tolerance and
//! print FAIL when they fail; they do not change the exit status.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use shear::dataload::{compute_delta, update_weights, DomainCorpus, LoaderMode, LoaderState, ReferenceMode};
use shear::masks::{HardConcreteConstants, HardConcreteMaskSet, MaskNoise, MaskValues};
use shear::model::{checkpoint, eval_logits, Batch, ModelConfig, TargetShape, TransformerWeights};
use shear::pruning::{gradcheck_weights, objective_gradient_errors, run_pruning, LagrangeState, PruneConfig, PruneOutcome};
use shear::scaling::{fit, FitMode, LossObservation};
use shear::sweep::budget_sweep;
use shear::synth::{generate_corpus, parse_domains};
use shear::trainer::{continue_pretrain, evaluate, train, EvalSet, RunPaths, TrainConfig};

const KNOWN_UNATTAINABLE: &[u32] = &[8];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn spread(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn round3(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

fn gradient_fidelity() -> Verdict {
    let toy = ModelConfig {
        n_layers: 1,
        hidden_dim: 8,
        n_heads: 2,
        head_dim: 4,
        intermediate_dim: 12,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    let cfg = PruneConfig {
        target: TargetShape {
            n_layers: 1,
            hidden_dim: 4,
            n_heads: 1,
            intermediate_dim: 6,
        },
        seq_len: 8,
        batch_size: 2,
        ..PruneConfig::default()
    };
    let windows: Vec<Vec<usize>> = (0..2).map(|s| (0..9).map(|i| (s * 37 + i * 11) % 256).collect()).collect();
    let batch = Batch::from_windows(&windows, 8).unwrap();
    let mut worst = (String::new(), 0.0f64);
    let mut checked = 0;
    for seed in [11u64, 12] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gradcheck_weights(&toy, &mut rng);
        let mut masks = HardConcreteMaskSet::new(&toy, HardConcreteConstants::default());
        for b in masks.buffers_mut() {
            b.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        let mut lagrange = LagrangeState::new(1, false);
        for b in lagrange.buffers_mut() {
            b.iter_mut().for_each(|x| *x = rng.gen_range(0.1..1.0));
        }
        let mut noise = MaskNoise::neutral(&masks);
        for v in [&mut noise.layer, &mut noise.hidden, &mut noise.head, &mut noise.int] {
            v.iter_mut().for_each(|u| *u = rng.gen_range(0.3..0.7));
        }
        for (name, e) in objective_gradient_errors(&w, &masks, &lagrange, &cfg, &batch, &noise, 1e-5).unwrap() {
            checked += 1;
            if e > worst.1 {
                worst = (name, e);
            }
        }
    }
    verdict(
        worst.1 <= 1e-4,
        format!("{checked} buffers over 2 states, worst {} rel err {:.2e} (tol 1e-4)", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------------------
// 2. hard-concrete statistics

/// Sampling map written out directly from the parametrization.
fn gate_oracle(u: f64, log_alpha: f64) -> f64 {
    let (beta, zeta, gamma) = (0.83, 1.1, -0.1);
    let s = 1.0 / (1.0 + (-((u.ln() - (1.0 - u).ln() + log_alpha) / beta)).exp());
    (s * (zeta - gamma) + gamma).clamp(0.0, 1.0)
}

fn hard_concrete_statistics() -> Verdict {
    let n = 100_000;
    let shape = ModelConfig {
        n_layers: 1,
        intermediate_dim: n,
        ..ModelConfig::default()
    };
    let set = HardConcreteMaskSet::new(&shape, HardConcreteConstants::default());
    let z = set.sample_values(&mut ChaCha8Rng::seed_from_u64(2024)).int.remove(0);
    assert_eq!(z.len(), n);

    let grid = 1_000_000;
    let pushed: Vec<f64> = (0..grid).map(|i| gate_oracle((i as f64 + 0.5) / grid as f64, 0.0)).collect();
    let frac = |xs: &[f64], pred: &dyn Fn(f64) -> bool| xs.iter().filter(|&&x| pred(x)).count() as f64 / xs.len() as f64;

    let p0 = frac(&z, &|x| x == 0.0);
    let p1 = frac(&z, &|x| x == 1.0);
    let mut worst_sigma = 0.0f64;
    let mut points = vec![(0.0, frac(&z, &|x| x <= 0.0), frac(&pushed, &|x| x <= 0.0))];
    for k in 1..10 {
        let x = k as f64 / 10.0;
        points.push((x, frac(&z, &|v| v <= x), frac(&pushed, &|v| v <= x)));
    }
    points.push((1.0, 1.0 - p1, 1.0 - frac(&pushed, &|x| x == 1.0)));
    for &(_, emp, oracle) in &points {
        let sigma = (oracle * (1.0 - oracle) / n as f64).sqrt();
        if sigma > 0.0 {
            worst_sigma = worst_sigma.max((emp - oracle).abs() / sigma);
        }
    }
    verdict(
        p0 > 0.0 && p1 > 0.0 && worst_sigma <= 3.0,
        format!("P(z=0)={p0:.4} P(z=1)={p1:.4}, worst CDF deviation {worst_sigma:.2} sigma over deciles (tol 3)"),
    )
}

// ---------------------------------------------------------------------------
// 5. update rule

fn update_rule() -> Verdict {
    let fixed = update_weights(&[0.2, 0.3, 0.5], &[0.0, 0.0, 0.0]).unwrap();
    let fixed_err = fixed.iter().zip([0.2, 0.3, 0.5]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let hand = update_weights(&[0.5, 0.5], &[2f64.ln(), 0.0]).unwrap();
    let hand_err = (hand[0] - 2.0 / 3.0).abs().max((hand[1] - 1.0 / 3.0).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum = 0.0f64;
    let mut bad = 0;
    for i in 0..10_000 {
        let k = rng.gen_range(2..=12);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-9..1.0f64).powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let delta: Vec<f64> = if i % 2 == 0 {
            (0..k).map(|_| rng.gen_range(0.0..40.0)).collect()
        } else {
            let losses: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..8.0)).collect();
            let reference: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..8.0)).collect();
            compute_delta(&losses, &reference).unwrap()
        };
        let out = update_weights(&w, &delta).unwrap();
        let sum: f64 = out.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        if out.len() != k || out.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            bad += 1;
        }
    }
    verdict(
        fixed_err <= 1e-12 && hand_err <= 1e-12 && bad == 0 && worst_sum <= 1e-12,
        format!(
            "fixed point err {fixed_err:.1e}, [ln2,0] case err {hand_err:.1e}, 1e4 fuzzed updates: {bad} off-simplex, worst |sum-1| {worst_sum:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. scaling fits

fn scaling_recovery() -> Verdict {
    let obs = |n: f64, d: f64, loss: f64| LossObservation {
        domain: "x".into(),
        model_size: n,
        data_size: d,
        loss,
    };
    let (c0, a, alpha) = (2.1, 25.0, 0.42);
    let fixed: Vec<_> = [3e3, 3e4, 3e5].iter().map(|&n| obs(n, 1e9, c0 + a / n.powf(alpha))).collect();
    let f = fit("x", &fixed, FitMode::FixedD).unwrap();
    let fixed_err = rel(f.c0(), c0).max(rel(f.a, a)).max(rel(f.alpha, alpha));

    let truth = [1.7, 40.0, 0.34, 400.0, 0.28];
    let law = |n: f64, d: f64| truth[0] + truth[1] / n.powf(truth[2]) + truth[3] / d.powf(truth[4]);
    let pts = [(1e3, 1e6), (1e4, 1e7), (1e5, 1e6), (1e6, 1e8), (3e4, 3e8)];
    let noise = Normal::new(0.0, 0.01).unwrap();
    let trials = 20;
    let mut errs = Vec::new();
    let mut failures = 0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<_> = pts
            .iter()
            .map(|&(n, d)| obs(n, d, law(n, d) * (1.0 + noise.sample(&mut rng))))
            .collect();
        match fit("x", &data, FitMode::Full) {
            Ok(f) => {
                let got = [f.e, f.a, f.alpha, f.b, f.beta];
                errs.push(got.iter().zip(truth).map(|(g, t)| rel(*g, t)).fold(0.0, f64::max));
            }
            Err(_) => failures += 1,
        }
    }
    let within = errs.iter().filter(|&&e| e <= 1e-2).count();
    errs.sort_by(f64::total_cmp);
    let median = errs.get(errs.len() / 2).copied().unwrap_or(f64::NAN);
    verdict(
        fixed_err <= 1e-4 && within == trials as usize,
        format!(
            "fixed-D exact: max rel err {fixed_err:.1e} (tol 1e-4); full mode, 5 points, 1% noise: {within}/{trials} trials recover all five parameters within 1e-2 ({failures} fit errors, median worst-parameter err {median:.3})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism and persistence

fn determinism(root: &Path) -> Verdict {
    let corpus_dir = root.join("det-corpus");
    generate_corpus(&corpus_dir, &parse_domains("default").unwrap(), 20_000, 4, false).unwrap();
    let corpus = DomainCorpus::load(&corpus_dir, 16_384).unwrap();
    let model = ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        head_dim: 8,
        intermediate_dim: 32,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: 30,
        batch_size: 4,
        seq_len: 16,
        eval_interval: 10,
        eval_batch: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let prune_cfg = PruneConfig {
        target: TargetShape {
            n_layers: 1,
            hidden_dim: 8,
            n_heads: 1,
            intermediate_dim: 16,
        },
        steps: 20,
        batch_size: 4,
        seq_len: 16,
        eval_interval: 5,
        eval_batch: 8,
        seed: 3,
        ..PruneConfig::default()
    };
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let init = TransformerWeights::init(&model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut l = LoaderState::new(LoaderState::uniform(2), vec![0.0; 2], 10, LoaderMode::Static, ReferenceMode::Source).unwrap();
        let src_dir = RunPaths::new(root.join(format!("det-src-{tag}")));
        let src = train(init, &corpus, &mut l, &train_cfg, "pretrain", Some(&src_dir)).unwrap();
        let mut l = LoaderState::new(LoaderState::uniform(2), src.final_losses.clone(), 5, LoaderMode::Dynamic, ReferenceMode::Source).unwrap();
        let prune_dir = RunPaths::new(root.join(format!("det-prune-{tag}")));
        let pruned = run_pruning(src.weights, &prune_cfg, &corpus, &mut l, Some(&prune_dir)).unwrap();
        let mut l = LoaderState {
            weights: pruned.final_domain_weights.clone(),
            eval_interval: 10,
            ..l
        };
        let ct_dir = RunPaths::new(root.join(format!("det-ct-{tag}")));
        continue_pretrain(pruned.extracted, &corpus, &mut l, &train_cfg, Some(&ct_dir)).unwrap();
        let read = |p: &RunPaths| std::fs::read(p.metrics()).unwrap();
        (read(&src_dir), read(&prune_dir), read(&ct_dir))
    };
    let a = run("a");
    let b = run("b");
    let metrics_equal = a == b && !a.0.is_empty() && !a.1.is_empty() && !a.2.is_empty();

    let ckpt = root.join("det-ct-a").join("checkpoint");
    let (w, _) = checkpoint::load(&ckpt).unwrap();
    let resaved = root.join("det-resaved");
    checkpoint::save(&resaved, &w, None).unwrap();
    let (w2, _) = checkpoint::load(&resaved).unwrap();
    let eval = EvalSet::new(&corpus, 16, 8).unwrap();
    let l1 = evaluate(&w, None, &eval).unwrap();
    let l2 = evaluate(&w2, None, &eval).unwrap();
    let bitwise = l1.iter().map(|x| x.to_bits()).eq(l2.iter().map(|x| x.to_bits()));
    let weights_bitwise = std::fs::read(ckpt.join("weights.bin")).unwrap() == std::fs::read(resaved.join("weights.bin")).unwrap();
    verdict(
        metrics_equal && bitwise && weights_bitwise,
        format!(
            "source/prune/ct metrics identical across reruns: {metrics_equal}; checkpoint round trip losses bitwise: {bitwise}, weights bitwise: {weights_bitwise}"
        ),
    )
}

// ---------------------------------------------------------------------------
// shared desk-scale pipeline pieces

fn desk_source(root: &Path, preset: &str) -> (DomainCorpus, TransformerWeights, Vec<f64>, f64) {
    let dir = root.join(format!("corpus-{preset}"));
    generate_corpus(&dir, &parse_domains(preset).unwrap(), 200_000, 1, false).unwrap();
    let corpus = DomainCorpus::load(&dir, 1 << 20).unwrap();
    let k = corpus.len();
    let init = TransformerWeights::init(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = TrainConfig {
        steps: 2500,
        batch_size: 8,
        seq_len: 64,
        lr: 3e-3,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    let mut loader = LoaderState::new(LoaderState::uniform(k), vec![0.0; k], 100, LoaderMode::Static, ReferenceMode::Source).unwrap();
    let t = Instant::now();
    let out = train(init, &corpus, &mut loader, &cfg, "pretrain", None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    (corpus, out.weights, out.final_losses, secs)
}

fn source_loader(k: usize, reference: &[f64]) -> LoaderState {
    LoaderState::new(LoaderState::uniform(k), reference.to_vec(), 50, LoaderMode::Dynamic, ReferenceMode::Source).unwrap()
}

// ---------------------------------------------------------------------------
// 3 + 4. shape exactness, equivalence and constraint convergence

fn shape_and_equivalence(outcome: &PruneOutcome, secs: f64) -> Verdict {
    let c = &outcome.extracted.config;
    let dims = (c.n_layers, c.hidden_dim, c.n_heads, c.intermediate_dim, c.head_dim);
    let dims_ok = dims == (3, 32, 2, 128, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let windows: Vec<Vec<usize>> = (0..32).map(|_| (0..65).map(|_| rng.gen_range(0..256)).collect()).collect();
    let batch = Batch::from_windows(&windows, 64).unwrap();
    let masked = eval_logits(&outcome.weights, Some(&MaskValues::from_binary(&outcome.binary, &outcome.scores)), &batch).unwrap();
    let dense = eval_logits(&outcome.extracted, None, &batch).unwrap();
    let gap = masked.data().iter().zip(dense.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        dims_ok && gap <= 1e-9 && secs < 600.0,
        format!(
            "extracted (L, d, H, m, head_dim) = {dims:?}, max |logit diff| over 32 random sequences {gap:.2e} (tol 1e-9), pruning {secs:.0}s (limit 600s)"
        ),
    )
}

fn constraint_convergence(outcome: &PruneOutcome) -> Verdict {
    let source = ModelConfig::default();
    let expected = [3.0, 32.0, (source.n_layers * 2) as f64, (source.n_layers * 128) as f64];
    let tail = outcome.tail_mean_sums(100);
    let errs: Vec<f64> = tail.iter().zip(expected).map(|(t, e)| rel(*t, e)).collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    verdict(
        worst <= 0.05,
        format!(
            "final-100-step mean sampled sums (layer, hidden, head, int) {:?} vs targets {expected:?}, worst rel err {worst:.4} (tol 0.05)",
            round3(&tail)
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. budget trend

fn budget_trend(corpus: &DomainCorpus, source: &TransformerWeights, reference: &[f64], source_secs: f64) -> Verdict {
    let t = Instant::now();
    let loader = source_loader(corpus.len(), reference);
    let result = budget_sweep(
        source,
        corpus,
        &PruneConfig::default(),
        &TrainConfig::default(),
        &[0.5, 1.0, 2.0],
        false,
        &loader,
        None,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64() + source_secs;
    let rows: Vec<String> = result
        .rows
        .iter()
        .map(|r| format!("{} steps: {:.4} {:?}", r.prune_steps, r.post_prune_mean, round3(&r.post_prune_losses)))
        .collect();
    verdict(
        result.monotone && secs < 2700.0,
        format!("post-pruning mean validation loss {}; monotone: {}; {secs:.0}s incl. source (limit 2700s)", rows.join(", "), result.monotone),
    )
}

// ---------------------------------------------------------------------------
// 6. loss-gap balancing

fn gap_balancing(root: &Path) -> Verdict {
    let t = Instant::now();
    let (corpus, source, reference, _) = desk_source(root, "four");
    let k = corpus.len();
    let mut loader = source_loader(k, &reference);
    let pruned = run_pruning(source, &PruneConfig::default(), &corpus, &mut loader, None).unwrap();
    let mut ratios = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut spreads = [0.0; 2];
        for (i, mode) in [LoaderMode::Static, LoaderMode::Dynamic].into_iter().enumerate() {
            let w0 = match mode {
                LoaderMode::Static => LoaderState::uniform(k),
                LoaderMode::Dynamic => pruned.final_domain_weights.clone(),
            };
            let mut l = LoaderState::new(w0, reference.clone(), 50, mode, ReferenceMode::Source).unwrap();
            let cfg = TrainConfig {
                steps: 1200,
                batch_size: 8,
                seq_len: 64,
                lr: 1e-3,
                eval_interval: 50,
                seed,
                ..TrainConfig::default()
            };
            let out = continue_pretrain(pruned.extracted.clone(), &corpus, &mut l, &cfg, None).unwrap();
            spreads[i] = spread(&compute_delta(&out.final_losses, &reference).unwrap());
        }
        let ratio = spreads[1] / spreads[0];
        lines.push(format!("seed {seed}: static {:.4} dynamic {:.4} ratio {ratio:.2}", spreads[0], spreads[1]));
        ratios.push(ratio);
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = ratios.iter().all(|r| *r <= 0.5);
    verdict(
        ok && secs < 1800.0,
        format!("gap spreads {}; every paired ratio <= 0.5: {ok}; {secs:.0}s total (limit 1800s)", lines.join("; ")),
    )
}

// ---------------------------------------------------------------------------

fn report(id: u32, name: &str, f: impl FnOnce() -> Verdict, failed: &mut Vec<u32>) {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id} {name}: {} ({:.1}s)", v.detail, t.elapsed().as_secs_f64());
    if !v.pass {
        failed.push(id);
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut failed = Vec::new();

    report(1, "gradient fidelity", gradient_fidelity, &mut failed);
    report(2, "hard-concrete statistics", hard_concrete_statistics, &mut failed);
    report(5, "update rule exactness", update_rule, &mut failed);
    report(8, "scaling-fit recovery", scaling_recovery, &mut failed);
    report(9, "determinism and persistence", || determinism(root), &mut failed);

    let setup = catch_unwind(AssertUnwindSafe(|| {
        let (corpus, source, reference, secs) = desk_source(root, "moderate");
        println!("  (moderate corpus source trained in {secs:.0}s, losses {:?})", round3(&reference));
        let mut loader = source_loader(corpus.len(), &reference);
        let t = Instant::now();
        let outcome = run_pruning(source.clone(), &PruneConfig::default(), &corpus, &mut loader, None).unwrap();
        (corpus, source, reference, secs, outcome, t.elapsed().as_secs_f64())
    }));
    match setup {
        Ok((corpus, source, reference, source_secs, outcome, prune_secs)) => {
            report(3, "shape exactness and equivalence", || shape_and_equivalence(&outcome, prune_secs), &mut failed);
            report(4, "constraint convergence", || constraint_convergence(&outcome), &mut failed);
            report(7, "budget-allocation trend", || budget_trend(&corpus, &source, &reference, source_secs), &mut failed);
        }
        Err(_) => {
            for (id, name) in [(3, "shape exactness and equivalence"), (4, "constraint convergence"), (7, "budget-allocation trend")] {
                println!("[FAIL] criterion {id} {name}: pipeline setup panicked");
                failed.push(id);
            }
        }
    }
    report(6, "loss-gap balancing", || gap_balancing(root), &mut failed);

    failed.sort();
    let known: Vec<u32> = failed.iter().copied().filter(|id| KNOWN_UNATTAINABLE.contains(id)).collect();
    let unexpected: Vec<u32> = failed.iter().copied().filter(|id| !KNOWN_UNATTAINABLE.contains(id)).collect();
    println!(
        "acceptance: {}/9 PASS; failed {failed:?} (known unattainable {known:?}, unexpected {unexpected:?})",
        9 - failed.len()
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

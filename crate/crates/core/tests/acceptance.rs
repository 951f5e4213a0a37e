//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use openset_core::autodiff::{digamma, finite_difference, max_relative_error, Tape, Tensor, Var};
use openset_core::evalbench::{
    aose, average_precision, generate_synthetic, recall_unknown, wilderness_impact, DataStage, PredictionRecord,
    WildernessImpact, DETECTION_FLOOR,
};
use openset_core::harness::{attribution_distribution, run_pipeline, Checkpoint, ExperimentConfig, PipelineOutcome};
use openset_core::losses::{
    adc, ced, ced_gt, ced_unknown, evidence, lambda_schedule, semantic_align, visual_align, CedItem, MemoryBank,
    ScheduleState,
};
use openset_core::mining::{global_aggregate, local_aggregate, Group, MiningVariant};
use openset_core::model::{latents_from_features, logits_from_features, region_features, ModelVars, ProposalKind};
use openset_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

// ---------------------------------------------------------------- 1

const K: usize = 3;
const C: usize = 3;
const D: usize = 5;
const DZ: usize = 3;

struct Problem {
    params: [Tensor; 3],
    pooled: Tensor,
    locals: Tensor,
    labels: Vec<usize>,
    items: Vec<CedItem>,
    bank: MemoryBank,
    tau: f64,
}

impl Problem {
    fn new(seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let labels: Vec<usize> = (0..n).map(|i| if i % 3 == 2 { K + 1 } else { rng.random_range(0..K) }).collect();
        let items = labels
            .iter()
            .map(|&gt| CedItem {
                gt,
                s_percept: rng.random_range(0.05..0.95),
                kind: if gt == K + 1 { ProposalKind::Background } else { ProposalKind::Foreground },
            })
            .collect();
        let mut bank = MemoryBank::new(4, DZ).unwrap();
        for class in (0..K).chain([K + 1]) {
            let zs: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, DZ)).collect();
            bank.update(&zs, &[class; 3]).unwrap();
        }
        Problem {
            params: [gaussian(&mut rng, &[C, D]), gaussian(&mut rng, &[D, DZ]), gaussian(&mut rng, &[K + 2, D])],
            pooled: gaussian(&mut rng, &[n, C]),
            locals: gaussian(&mut rng, &[n, C]),
            labels,
            items,
            bank,
            tau: 0.1,
        }
    }
}

type LossFn = fn(&mut Tape, &ModelVars, &Problem) -> Result<Var>;

fn logits(tape: &mut Tape, v: &ModelVars, p: &Problem) -> Result<Var> {
    let x = tape.constant(p.pooled.clone());
    let r = region_features(tape, x, v)?;
    logits_from_features(tape, r, v.prompts, p.tau)
}

fn alpha(tape: &mut Tape, v: &ModelVars, p: &Problem) -> Result<Var> {
    let l = logits(tape, v, p)?;
    Ok(evidence(tape, l))
}

const LOSSES: [(&str, LossFn); 6] = [
    ("semantic", |t, v, p| {
        let l = logits(t, v, p)?;
        semantic_align(t, l, &p.labels, K)
    }),
    ("visual", |t, v, p| {
        let x = t.constant(p.pooled.clone());
        let r = region_features(t, x, v)?;
        let z = latents_from_features(t, r, v.latent)?;
        Ok(visual_align(t, z, &p.labels, &p.bank, 0.1)?.0)
    }),
    ("ced unknown", |t, v, p| {
        let a = alpha(t, v, p)?;
        let rows = ced_unknown(t, a, &p.labels, K)?;
        Ok(t.sum(rows))
    }),
    ("ced gt", |t, v, p| {
        let a = alpha(t, v, p)?;
        let rows = ced_gt(t, a, &p.labels, K)?;
        Ok(t.sum(rows))
    }),
    ("ced", |t, v, p| {
        let a = alpha(t, v, p)?;
        Ok(ced(t, a, &p.items, K)?.0)
    }),
    ("adc", |t, v, p| {
        let x = t.constant(p.locals.clone());
        let r = region_features(t, x, v)?;
        let l = logits_from_features(t, r, v.prompts, p.tau)?;
        adc(t, l, &p.labels, K)
    }),
];

fn record(tape: &mut Tape, params: &[Tensor; 3]) -> ModelVars {
    ModelVars {
        pool_linear: tape.leaf(params[0].clone()),
        latent: tape.leaf(params[1].clone()),
        prompts: tape.leaf(params[2].clone()),
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, "");
    for seed in 0..20 {
        let p = Problem::new(seed);
        for (name, f) in LOSSES {
            let mut tape = Tape::new();
            let vars = record(&mut tape, &p.params);
            let out = f(&mut tape, &vars, &p).map_err(|e| format!("{name}: {e}"))?;
            let grads = tape.backward(out).map_err(|e| e.to_string())?;
            let handles = [vars.pool_linear, vars.latent, vars.prompts];
            for (slot, handle) in handles.iter().enumerate() {
                let analytic = grads.get(*handle).expect("leaf gradient");
                let numeric = finite_difference(&p.params[slot], 1e-6, |x| {
                    let mut params = p.params.clone();
                    params[slot] = x.clone();
                    let mut t = Tape::new();
                    let v = record(&mut t, &params);
                    let o = f(&mut t, &v, &p)?;
                    t.forward_scalar(o)
                })
                .map_err(|e| e.to_string())?;
                let err = max_relative_error(analytic, &numeric, 1e-6);
                if err > worst.0 {
                    worst = (err, name);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max rel err {:.2e} ({}), {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

/// Euler-Mascheroni constant from the Euler-Maclaurin expansion of the
/// harmonic numbers at n = 10^4.
fn euler_gamma_series() -> f64 {
    let n = 10_000u32;
    let h: f64 = (1..=n).rev().map(|k| 1.0 / k as f64).sum();
    let nf = n as f64;
    h - nf.ln() - 1.0 / (2.0 * nf) + 1.0 / (12.0 * nf.powi(2)) - 1.0 / (120.0 * nf.powi(4))
}

fn digamma_accuracy() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let x = 10f64.powf(-3.0 + 6.0 * i as f64 / 999.0);
        let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
        worst = worst.max((lhs - 1.0 / x).abs());
    }
    let psi1 = digamma(1.0).unwrap();
    let oracle = -euler_gamma_series();
    let err1 = (psi1 - oracle).abs();
    check(worst <= 1e-10 && err1 <= 1e-10, format!("recurrence max abs err {worst:.2e}, psi(1) err {err1:.2e}"))
}

// ---------------------------------------------------------------- 3

fn aggregation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (h, w, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..20));
        let mut g = gaussian(&mut rng, &[h, w, c]);
        if case % 4 == 0 {
            for v in g.data_mut().iter_mut() {
                if rng.random_bool(0.5) {
                    *v = 0.0;
                }
            }
        }
        let at = |i: usize, j: usize, k: usize| g.data()[(i * w + j) * c + k];
        let mut full = 0.0;
        let mut free = 0.0;
        for k in 0..c {
            let mut count = 0.0;
            let mut mass = 0.0;
            for i in 0..h {
                for j in 0..w {
                    if at(i, j, k) != 0.0 {
                        count += 1.0;
                    }
                    mass += at(i, j, k).abs();
                }
            }
            full += count * mass;
            free += mass;
        }
        full /= c as f64;
        free /= c as f64;
        worst = worst.max((global_aggregate(&g, MiningVariant::Full).unwrap() - full).abs());
        worst = worst.max((global_aggregate(&g, MiningVariant::CountFree).unwrap() - free).abs());
        let local = local_aggregate(&g).unwrap();
        for i in 0..h {
            for j in 0..w {
                let want = (0..c).map(|k| at(i, j, k).abs()).sum::<f64>() / c as f64;
                worst = worst.max((local.data()[i * w + j] - want).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("max abs deviation {worst:.2e} over 100 maps"))
}

// ---------------------------------------------------------------- 4

fn decoupling_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for _ in 0..50 {
        let k = rng.random_range(2..8);
        let n = rng.random_range(1..10);
        let classes = k + 2;
        let data: Vec<f64> = (0..n * classes).map(|_| 1.0 + rng.random_range(0.0..50.0f64).exp()).collect();
        let gts: Vec<usize> =
            (0..n).map(|_| if rng.random_bool(0.3) { k + 1 } else { rng.random_range(0..k) }).collect();
        let a = Tensor::matrix(n, classes, data).unwrap();
        for decouple_unknown in [true, false] {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone());
            let rows =
                if decouple_unknown { ced_unknown(&mut tape, x, &gts, k) } else { ced_gt(&mut tape, x, &gts, k) }
                    .map_err(|e| e.to_string())?;
            let total = tape.sum(rows);
            let g = tape.backward(total).map_err(|e| e.to_string())?;
            let g = g.get(x).expect("leaf gradient");
            for (i, &gt) in gts.iter().enumerate() {
                let excluded = if decouple_unknown { gt } else { k };
                let v = g.data()[i * classes + excluded];
                if v != 0.0 {
                    return Err(format!("nonzero gradient {v:e} on excluded column"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} excluded entries exactly zero"))
}

// ---------------------------------------------------------------- 5

fn schedule_contract() -> Outcome {
    let total = 300;
    let mut worst: f64 = 0.0;
    for lambda in [1e-1, 1e-4, 1e-6] {
        let at = |t| lambda_schedule(&ScheduleState::new(t, total, lambda, 1.0)).unwrap();
        worst = worst.max((at(0) - lambda).abs());
        worst = worst.max((at(total) - 1.0).abs());
        worst = worst.max((at(total / 2) - lambda.sqrt()).abs());
    }
    check(worst <= 1e-12, format!("max abs err {worst:.2e}"))
}

// ---------------------------------------------------------------- 6

enum Wi {
    /// true positives, known false positives, unknown false positives
    Defined(usize, usize, usize),
    /// max recall as numerator / denominator
    Undefined(usize, usize),
}

struct Golden {
    k: usize,
    /// (true label, predicted, confidence)
    rows: Vec<(usize, usize, f64)>,
    recall: Option<(usize, usize)>,
    aose: usize,
    wi: Wi,
    /// (class, AP as numerator / denominator)
    ap: Vec<(usize, usize, usize)>,
}

fn rep(n: usize, row: (usize, usize, f64)) -> Vec<(usize, usize, f64)> {
    vec![row; n]
}

fn golden_corpus() -> Vec<Golden> {
    let mut out = Vec::new();
    // P_K = 8/10 and six unknowns predicted known.
    let mut rows = rep(5, (0, 0, 0.9));
    rows.extend(rep(3, (1, 1, 0.9)));
    rows.extend(rep(2, (1, 0, 0.9)));
    rows.extend(rep(3, (2, 0, 0.9)));
    rows.extend(rep(3, (2, 1, 0.9)));
    rows.extend(rep(2, (2, 2, 0.9)));
    out.push(Golden {
        k: 2,
        rows,
        recall: Some((2, 8)),
        aose: 6,
        wi: Wi::Defined(8, 2, 6),
        ap: vec![(0, 1, 1), (1, 3, 5)],
    });

    let mut rows = rep(5, (0, 0, 0.9));
    rows.extend(rep(3, (2, 2, 0.8)));
    rows.push((2, 3, 0.5));
    out.push(Golden { k: 2, rows, recall: Some((3, 4)), aose: 0, wi: Wi::Defined(5, 0, 0), ap: vec![(0, 1, 1)] });

    let mut rows: Vec<_> = [0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5].iter().map(|&c| (0, 0, c)).collect();
    rows.extend([(2, 0, 0.92), (2, 0, 0.78), (2, 0, 0.58)]);
    out.push(Golden { k: 2, rows, recall: Some((0, 3)), aose: 3, wi: Wi::Defined(8, 0, 2), ap: vec![(0, 529, 650)] });

    let rows = vec![(0, 0, 0.9), (0, 0, 0.9), (0, 3, 0.3), (0, 3, 0.3), (2, 1, 0.04), (2, 1, 0.04), (2, 0, 0.5)];
    out.push(Golden { k: 2, rows, recall: Some((0, 3)), aose: 1, wi: Wi::Undefined(1, 2), ap: vec![(0, 1, 2)] });

    let rows = vec![
        (0, 0, 0.9),
        (0, 0, 0.8),
        (0, 1, 0.7),
        (1, 1, 0.95),
        (1, 1, 0.6),
        (2, 2, 0.85),
        (2, 0, 0.5),
        (2, 2, 0.4),
        (2, 2, 0.3),
        (2, 2, 0.25),
        (3, 2, 0.88),
        (3, 0, 0.65),
        (3, 3, 0.45),
        (3, 1, 0.35),
        (3, 3, 0.1),
    ];
    out.push(Golden {
        k: 3,
        rows,
        recall: Some((2, 5)),
        aose: 3,
        wi: Wi::Defined(8, 2, 3),
        ap: vec![(0, 2, 3), (1, 5, 6), (2, 16, 25)],
    });

    let mut rows = rep(3, (0, 3, 0.9));
    rows.extend(rep(2, (2, 3, 0.9)));
    out.push(Golden { k: 2, rows, recall: Some((0, 2)), aose: 0, wi: Wi::Undefined(0, 1), ap: vec![(0, 0, 1)] });

    let mut rows = rep(3, (0, 0, 1.0));
    rows.extend(rep(2, (1, 1, 1.0)));
    rows.extend(rep(3, (2, 2, 1.0)));
    rows.extend(rep(2, (3, 3, 1.0)));
    out.push(Golden {
        k: 2,
        rows,
        recall: Some((3, 3)),
        aose: 0,
        wi: Wi::Defined(5, 0, 0),
        ap: vec![(0, 1, 1), (1, 1, 1)],
    });

    let mut rows: Vec<_> = [0.9, 0.8, 0.6, 0.5, 0.4].iter().map(|&c| (0, 0, c)).collect();
    rows.extend(rep(4, (1, 1, 0.9)));
    rows.push((1, 0, 0.7));
    out.push(Golden { k: 1, rows, recall: Some((4, 5)), aose: 1, wi: Wi::Defined(4, 0, 1), ap: vec![(0, 9, 10)] });

    let rows = vec![
        (2, 0, 0.04),
        (2, 0, 0.05),
        (2, 1, 0.5),
        (2, 1, 0.049),
        (2, 2, 0.9),
        (2, 3, 0.2),
        (1, 1, 0.6),
        (1, 1, 0.3),
    ];
    out.push(Golden { k: 2, rows, recall: Some((1, 6)), aose: 2, wi: Wi::Defined(2, 0, 1), ap: vec![(1, 5, 6)] });

    let rows = vec![(2, 0, 0.7), (0, 0, 0.7), (0, 0, 0.7), (0, 1, 0.7), (0, 0, 0.5), (2, 2, 0.9)];
    out.push(Golden { k: 2, rows, recall: Some((1, 2)), aose: 1, wi: Wi::Undefined(3, 4), ap: vec![(0, 9, 16)] });

    let rows = vec![(0, 3, 0.9), (1, 1, 0.8), (0, 0, 0.2), (2, 2, 0.6), (3, 0, 0.7), (0, 0, 0.95)];
    out.push(Golden {
        k: 2,
        rows,
        recall: Some((1, 1)),
        aose: 0,
        wi: Wi::Undefined(3, 4),
        ap: vec![(0, 5, 9), (1, 1, 1)],
    });
    out
}

fn metric_oracles() -> Outcome {
    let corpus = golden_corpus();
    let close = |got: f64, num: usize, den: usize| (got - num as f64 / den as f64).abs() <= 1e-15;
    for (n, g) in corpus.iter().enumerate() {
        let preds: Vec<PredictionRecord> = g
            .rows
            .iter()
            .enumerate()
            .map(|(id, &(_, predicted, confidence))| PredictionRecord { id, predicted, confidence })
            .collect();
        let labels: Vec<usize> = g.rows.iter().map(|r| r.0).collect();
        let fail = |what: &str| Err(format!("set {n}: {what} mismatch"));
        if let Some((hits, total)) = g.recall {
            if !close(recall_unknown(&preds, &labels, g.k).unwrap(), hits, total) {
                return fail("R_U");
            }
        }
        if aose(&preds, &labels, g.k, DETECTION_FLOOR).unwrap() != g.aose {
            return fail("AOSE");
        }
        let ok = match (wilderness_impact(&preds, &labels, g.k, 0.8).unwrap(), &g.wi) {
            (WildernessImpact::Defined(p), Wi::Defined(tp, fpk, fpu)) => {
                (p.true_positives, p.known_false_positives, p.unknown_false_positives) == (*tp, *fpk, *fpu)
                    && close(p.wi, *fpu, tp + fpk)
            }
            (WildernessImpact::Undefined { max_recall }, Wi::Undefined(num, den)) => close(max_recall, *num, *den),
            _ => false,
        };
        if !ok {
            return fail("WI");
        }
        for &(class, num, den) in &g.ap {
            let got = average_precision(&preds, &labels, class).unwrap();
            if (got - num as f64 / den as f64).abs() > 1e-12 {
                return fail(&format!("AP of class {class} ({got} vs {num}/{den})"));
            }
        }
    }
    Ok(format!("{} golden sets agree", corpus.len()))
}

// ---------------------------------------------------------------- 7-10

fn pipeline(cfg: &ExperimentConfig, dir: &Path) -> std::result::Result<(PipelineOutcome, Duration), String> {
    let start = Instant::now();
    let o = run_pipeline(cfg, dir).map_err(|e| e.to_string())?;
    Ok((o, start.elapsed()))
}

fn ablation_mirror(full: &(PipelineOutcome, Duration), off: &(PipelineOutcome, Duration)) -> Outcome {
    let ru_off = off.0.metrics.recall_unknown.ok_or("no unknowns in test split")?;
    let ru_on = full.0.metrics.recall_unknown.ok_or("no unknowns in test split")?;
    let acc_off = off.0.metrics.known_accuracy.ok_or("no knowns")?;
    let acc_on = full.0.metrics.known_accuracy.ok_or("no knowns")?;
    let elapsed = full.1 + off.1;
    check(
        ru_off == 0.0 && ru_on >= 0.5 && (acc_on - acc_off).abs() <= 0.10 && elapsed < Duration::from_secs(300),
        format!(
            "R_U {ru_off:.3} -> {ru_on:.3}, known acc {acc_off:.3} -> {acc_on:.3}, paired runs {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn base_distribution(
    cfg: &ExperimentConfig,
    full: &PipelineOutcome,
) -> std::result::Result<(f64, usize, usize), String> {
    let ckpt = Checkpoint::load(&full.base.checkpoint).map_err(|e| e.to_string())?;
    let test = generate_synthetic(&cfg.synthetic, DataStage::Test).map_err(|e| e.to_string())?;
    let summary = attribution_distribution(&ckpt, &test, cfg).map_err(|e| e.to_string())?;
    let auroc = summary.a_global_auroc.ok_or("AUROC undefined")?;
    let q = cfg.eval.local_quantiles.iter().position(|&q| q == 0.95).ok_or("0.95 not among local quantiles")?;
    let count = |g: Group| summary.report.group(g).local_counts[q].count;
    Ok((auroc, count(Group::Known), count(Group::Unknown)))
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((fs::read(a), fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn determinism(full: &PipelineOutcome, again: &PipelineOutcome) -> Outcome {
    let pairs = [
        (&full.evaluation.metrics, &again.evaluation.metrics),
        (&full.evaluation.histogram, &again.evaluation.histogram),
        (&full.evaluation.local_counts, &again.evaluation.local_counts),
        (&full.evaluation.distribution, &again.evaluation.distribution),
        (&full.fewshot.checkpoint, &again.fewshot.checkpoint),
    ];
    let differing: Vec<String> = pairs
        .iter()
        .filter(|(a, b)| !same_bytes(a, b))
        .map(|(a, _)| a.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            "metrics, histograms and checkpoint byte-identical".into()
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

fn main() {
    let root: PathBuf = tempfile::tempdir().expect("temp dir").keep();
    let cfg = ExperimentConfig::default();
    let off_cfg = cfg.with_overrides(&["toggles.ced=false".into(), "toggles.adc=false".into()]).unwrap();

    let (full, off, again) = std::thread::scope(|s| {
        let a = s.spawn(|| pipeline(&cfg, &root.join("full")));
        let b = s.spawn(|| pipeline(&off_cfg, &root.join("off")));
        let c = s.spawn(|| pipeline(&cfg, &root.join("again")));
        (a.join().unwrap(), b.join().unwrap(), c.join().unwrap())
    });

    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient integrity", gradient_integrity()),
        ("2 digamma accuracy", digamma_accuracy()),
        ("3 aggregation oracles", aggregation_oracles()),
        ("4 decoupling invariants", decoupling_invariants()),
        ("5 schedule contract", schedule_contract()),
        ("6 metric oracles", metric_oracles()),
    ];
    let dist = full.as_ref().map_err(Clone::clone).and_then(|f| base_distribution(&cfg, &f.0));
    results.push((
        "7 ablation mirror",
        match (&full, &off) {
            (Ok(f), Ok(o)) => ablation_mirror(f, o),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        },
    ));
    results.push((
        "8 global attribution separation",
        dist.clone().and_then(|(auroc, _, _)| check(auroc >= 0.70, format!("base-checkpoint AUROC {auroc:.3}"))),
    ));
    results.push((
        "9 local attribution outliers",
        dist.and_then(|(_, known, unknown)| {
            check(unknown as f64 >= 1.5 * known as f64, format!("above known p95: unknown {unknown}, known {known}"))
        }),
    ));
    results.push((
        "10 determinism",
        match (&full, &again) {
            (Ok(f), Ok(a)) => determinism(&f.0, &a.0),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        },
    ));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("criterion {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d})");
            }
        }
    }
    let _ = fs::remove_dir_all(&root);
    println!("acceptance: {} passed, {} failed", results.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

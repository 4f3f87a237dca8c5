//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Every tolerance below is fixed.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::same_item_push)]

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use sfuda_core::adapt::{ablation_cells, median, run_adaptation, run_adaptation_audited, run_cells, AblationRun};
use sfuda_core::gradcheck::{run_gradient_checks, Fault};
use sfuda_core::losses::contrastive_loss;
use sfuda_core::memory::{exclusion_mask, ExclusionRule, FeatureBank, TemporalQueue};
use sfuda_core::numerics::{validate_simplex, ProbVector};
use sfuda_core::refine::{normalized_entropy, soft_vote, uncertainty_weight, WeightingMode};
use sfuda_core::report::write_metrics_csv;
use sfuda_core::RunConfig;

const GRAD_TRIALS: usize = 100;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(30);
const UNIFORM_WEIGHT_TOL: f64 = 1e-12;
const WEIGHT_SAMPLES: usize = 1000;
const MASK_INSTANCES: usize = 1000;
const KNN_BANKS: usize = 200;
const VOTE_TOL: f64 = 1e-12;
const CONTRASTIVE_INSTANCES: usize = 500;
const ALL_MASKED_TOL: f64 = 1e-12;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_GAIN_OVER_SOURCE: f64 = 0.10;
const MIN_GAIN_OVER_REFINEMENT: f64 = 0.03;
const RUN_TIME_LIMIT: Duration = Duration::from_secs(60);
const MIN_AUDITED_VECTORS: u64 = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn unit(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(r, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// Normalized exponentials, optionally sparsified; a Dirichlet(1) draw when
/// nothing is zeroed.
fn random_simplex(r: &mut ChaCha8Rng, classes: usize) -> ProbVector {
    loop {
        let mut v: Vec<f64> = (0..classes).map(|_| r.sample::<f64, _>(Exp1)).collect();
        if r.gen_bool(0.2) {
            let zero = r.gen_range(0..classes);
            v[zero] = 0.0;
        }
        let sum: f64 = v.iter().sum();
        if sum > 0.0 {
            if let Ok(p) = ProbVector::new(v.iter().map(|x| x / sum).collect()) {
                return p;
            }
        }
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let reports = match run_gradient_checks(GRAD_TRIALS, 2024, Fault::None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error {e}")),
    };
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .map(|r| r.worst.max_relative_error)
        .fold(0.0, f64::max);
    let failing: Vec<_> = reports.iter().filter(|r| !r.passes()).map(|r| r.name).collect();
    let suites: Vec<_> = reports.iter().map(|r| r.name).collect();
    let covered = [
        "classification_negative",
        "classification_positive",
        "classification_positive_plus_negative",
        "contrastive",
        "diversity",
    ]
    .iter()
    .all(|s| suites.contains(s));
    outcome(
        failing.is_empty() && covered && reports.iter().all(|r| r.trials == GRAD_TRIALS) && elapsed < GRAD_TIME_LIMIT,
        format!(
            "{} suites x {GRAD_TRIALS} trials, worst rel err {worst:.2e}, failing {failing:?}, {:.2}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn weighting_function() -> Outcome {
    let exp = WeightingMode::Exponential;
    let floor = (-1f64).exp();
    let mut ok = true;
    let mut worst_uniform: f64 = 0.0;
    for c in 2..=10 {
        for k in 0..c {
            ok &= uncertainty_weight(&ProbVector::one_hot(c, k), exp).unwrap() == 1.0;
        }
        let w = uncertainty_weight(&ProbVector::uniform(c), exp).unwrap();
        worst_uniform = worst_uniform.max((w - floor).abs());
    }
    ok &= worst_uniform <= UNIFORM_WEIGHT_TOL;

    let mut r = rng(11);
    let mut pairs: Vec<(f64, f64)> = (0..WEIGHT_SAMPLES)
        .map(|_| {
            let c = r.gen_range(2..=10);
            let p = random_simplex(&mut r, c);
            (normalized_entropy(&p).unwrap(), uncertainty_weight(&p, exp).unwrap())
        })
        .collect();
    let in_range = pairs.iter().all(|&(_, w)| (floor..=1.0).contains(&w));
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut order_violations = 0;
    for win in pairs.windows(2) {
        let ((h0, w0), (h1, w1)) = (win[0], win[1]);
        if (h1 > h0 && !(w1 < w0)) || (h1 == h0 && w1 != w0) {
            order_violations += 1;
        }
    }
    outcome(
        ok && in_range && order_violations == 0,
        format!(
            "one-hot exact, uniform err {worst_uniform:.1e}, {WEIGHT_SAMPLES} samples, {order_violations} monotonicity violations, range ok {in_range}"
        ),
    )
}

fn mask_oracle(query: &[usize], snapshot: &[usize]) -> bool {
    let n = query.len().min(snapshot.len());
    for back in 0..n {
        if query[query.len() - 1 - back] == snapshot[snapshot.len() - 1 - back] {
            return false;
        }
    }
    true
}

fn exclusion_mask_oracle() -> Outcome {
    let mut r = rng(12);
    let mut mismatches = 0;
    let mut entries = 0;
    for _ in 0..MASK_INSTANCES {
        let t = r.gen_range(1..=8);
        let c = r.gen_range(2..=10);
        let len = r.gen_range(1..=64);
        let history = |r: &mut ChaCha8Rng| -> Vec<usize> {
            let l = r.gen_range(1..=t);
            (0..l).map(|_| r.gen_range(0..c)).collect()
        };
        let query = history(&mut r);
        let snapshots: Vec<Vec<usize>> = (0..len).map(|_| history(&mut r)).collect();
        let keys: Vec<Vec<f64>> = (0..len).map(|_| unit(&mut r, 4)).collect();
        let mut queue = TemporalQueue::new(len).unwrap();
        queue.push(&keys, &snapshots).unwrap();
        let mask = exclusion_mask(&query, &queue, ExclusionRule::Aligned);
        entries += mask.len();
        if mask.len() != len {
            mismatches += len;
            continue;
        }
        mismatches += mask
            .iter()
            .zip(&snapshots)
            .filter(|(&m, s)| m != mask_oracle(&query, s))
            .count();
    }
    outcome(
        mismatches == 0,
        format!("{MASK_INSTANCES} instances, {entries} entries, {mismatches} mismatches"),
    )
}

fn knn_voting_oracle() -> Outcome {
    let mut r = rng(13);
    let mut knn_mismatches = 0;
    let mut worst_vote: f64 = 0.0;
    for _ in 0..KNN_BANKS {
        let m = r.gen_range(1..=512);
        let dim = r.gen_range(2..=16);
        let classes = r.gen_range(2..=6);
        let mut bank = FeatureBank::new(m).unwrap();
        let mut stored: Vec<(u64, Vec<f64>, ProbVector)> = Vec::with_capacity(m);
        let mut ids = HashSet::new();
        while stored.len() < m {
            let id = r.gen_range(0..10_000u64);
            if !ids.insert(id) {
                continue;
            }
            // occasional exact duplicates exercise the id tie-break
            let z = if !stored.is_empty() && r.gen_bool(0.05) {
                let j = r.gen_range(0..stored.len());
                stored[j].1.clone()
            } else {
                unit(&mut r, dim)
            };
            let p = random_simplex(&mut r, classes);
            bank.update(id, &z, &p).unwrap();
            stored.push((id, z, p));
        }
        let query = gaussian(&mut r, dim);
        let exclude = if r.gen_bool(0.5) {
            Some(stored[r.gen_range(0..m)].0)
        } else {
            None
        };
        let available = m - usize::from(exclude.is_some());
        if available == 0 {
            continue;
        }
        let k = r.gen_range(1..=available.min(32));
        let qn = {
            let n = query.iter().map(|x| x * x).sum::<f64>().sqrt();
            query.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let mut oracle: Vec<(f64, u64, &ProbVector)> = stored
            .iter()
            .filter(|(id, _, _)| Some(*id) != exclude)
            .map(|(id, z, p)| {
                let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos: f64 = qn.iter().zip(z).map(|(a, b)| a * b / zn).sum();
                (1.0 - cos, *id, p)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        oracle.truncate(k);
        let got = bank.knn_query(&query, k, exclude).unwrap();
        let same = got.len() == k
            && got
                .iter()
                .zip(&oracle)
                .all(|(n, o)| n.sample_id == o.1 && (n.distance - o.0).abs() < 1e-12);
        if !same {
            knn_mismatches += 1;
        }
        let preds: Vec<&ProbVector> = got.iter().map(|n| n.probs).collect();
        let vote = soft_vote(&preds).unwrap();
        for c in 0..classes {
            let direct = preds.iter().map(|p| p.as_slice()[c]).sum::<f64>() / preds.len() as f64;
            worst_vote = worst_vote.max((vote.as_slice()[c] - direct).abs());
        }
    }
    outcome(
        knn_mismatches == 0 && worst_vote <= VOTE_TOL,
        format!("{KNN_BANKS} banks, {knn_mismatches} k-NN mismatches, vote err {worst_vote:.1e}"),
    )
}

fn contrastive_masking() -> Outcome {
    let mut r = rng(14);
    let mut worst_masked: f64 = 0.0;
    let mut changed = 0;
    for _ in 0..CONTRASTIVE_INSTANCES {
        let dim = r.gen_range(2..=16);
        let n = r.gen_range(1..=32);
        let tau = r.gen_range(0.02..1.0);
        let q = unit(&mut r, dim);
        let k = unit(&mut r, dim);
        let keys: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, dim)).collect();
        let snaps = vec![vec![0usize]; n];
        let mut queue = TemporalQueue::new(n + 1).unwrap();
        queue.push(&keys, &snaps).unwrap();

        let all_masked = contrastive_loss(&q, &k, &queue, &vec![false; n], tau).unwrap();
        worst_masked = worst_masked.max(all_masked.value.abs());

        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let before = contrastive_loss(&q, &k, &queue, &mask, tau).unwrap();
        queue.push(&[unit(&mut r, dim)], &[vec![0]]).unwrap();
        mask.push(false);
        let after = contrastive_loss(&q, &k, &queue, &mask, tau).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if before.value.to_bits() != after.value.to_bits()
            || bits(&before.d_features[0]) != bits(&after.d_features[0])
        {
            changed += 1;
        }
    }
    outcome(
        worst_masked <= ALL_MASKED_TOL && changed == 0,
        format!("all-masked loss max {worst_masked:.1e}, {changed}/{CONTRASTIVE_INSTANCES} changed by a masked negative"),
    )
}

fn cell_runs<'a>(runs: &'a [AblationRun], cell: &str) -> Vec<&'a AblationRun> {
    runs.iter().filter(|r| r.cell == cell).collect()
}

fn med(runs: &[&AblationRun], f: impl Fn(&AblationRun) -> f64) -> f64 {
    median(&mut runs.iter().map(|r| f(r)).collect::<Vec<_>>())
}

fn end_to_end(runs: &[AblationRun]) -> Outcome {
    let full = cell_runs(runs, "full");
    let refinement = cell_runs(runs, "refinement");
    let source_only = med(&full, |r| r.result.source_only_target_accuracy);
    let final_acc = med(&full, |r| r.result.final_target_accuracy());
    let pl_initial = med(&full, |r| r.result.initial_pseudo_label_accuracy);
    let pl_final = med(&full, |r| r.result.final_pseudo_label_accuracy());
    let refinement_acc = med(&refinement, |r| r.result.final_target_accuracy());
    let slowest = full
        .iter()
        .chain(&refinement)
        .map(|r| r.result.wall_time)
        .max()
        .unwrap_or_default();
    let a = final_acc >= source_only + MIN_GAIN_OVER_SOURCE;
    let b = pl_final > pl_initial;
    let c = final_acc >= refinement_acc + MIN_GAIN_OVER_REFINEMENT;
    let d = slowest < RUN_TIME_LIMIT;
    outcome(
        full.len() == SEEDS.len() && a && b && c && d,
        format!(
            "(a) {final_acc:.4} vs source-only {source_only:.4} [{a}]; (b) pseudo-labels {pl_initial:.4} -> {pl_final:.4} [{b}]; (c) refinement-only {refinement_acc:.4} [{c}]; slowest run {:.1}s [{d}]",
            slowest.as_secs_f64()
        ),
    )
}

fn history_sweep(runs: &[AblationRun]) -> Outcome {
    let t5 = med(&cell_runs(runs, "history_5"), |r| r.result.final_target_accuracy());
    let t1 = med(&cell_runs(runs, "history_1"), |r| r.result.final_target_accuracy());
    outcome(t5 >= t1, format!("T=5 median {t5:.4}, T=1 median {t1:.4}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        seed: 7,
        ..RunConfig::default()
    };
    let mut files = Vec::new();
    for i in 0..2 {
        let result = run_adaptation(&config).unwrap();
        let path = dir.path().join(format!("run{i}.csv"));
        write_metrics_csv(&path, &result.metrics).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    outcome(
        files[0] == files[1] && !files[0].is_empty(),
        format!("{} bytes per metrics file, identical {}", files[0].len(), files[0] == files[1]),
    )
}

fn simplex_and_ema() -> Outcome {
    let (result, audit) = run_adaptation_audited(&RunConfig::default()).unwrap();
    let final_probs_ok = result
        .online
        .predict_batch(&[vec![0.3, -0.2], vec![5.0, 5.0]])
        .unwrap()
        .iter()
        .all(|(_, p)| validate_simplex(p.as_slice()).is_ok());
    let floor = (-1f64).exp();
    let weights_ok = audit.min_weight >= floor && audit.max_weight <= 1.0;
    outcome(
        audit.prob_vectors_checked >= MIN_AUDITED_VECTORS
            && audit.simplex_violations == 0
            && audit.ema_checks > 0
            && audit.envelope_violations == 0
            && weights_ok
            && final_probs_ok,
        format!(
            "{} vectors audited, {} simplex violations; {} EMA checks, {} envelope violations; weights in [{:.4}, {:.4}]",
            audit.prob_vectors_checked,
            audit.simplex_violations,
            audit.ema_checks,
            audit.envelope_violations,
            audit.min_weight,
            audit.max_weight
        ),
    )
}

fn main() -> ExitCode {
    let base = RunConfig::default();
    let wanted = ["full", "refinement", "history_1", "history_5"];
    let mut cells: Vec<_> = ablation_cells(&base)
        .into_iter()
        .filter(|c| wanted.contains(&c.name.as_str()))
        .collect();
    // history_5 is the default configuration; reuse the full runs
    let history_5 = cells.iter().position(|c| c.name == "history_5").unwrap();
    let full_config = cells.iter().find(|c| c.name == "full").unwrap().config.clone();
    let reuse_full = cells[history_5].config == full_config;
    if reuse_full {
        cells.remove(history_5);
    }

    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient integrity", gradient_integrity()),
        ("2 weighting function", weighting_function()),
        ("3 exclusion-mask oracle", exclusion_mask_oracle()),
        ("4 k-NN and voting oracle", knn_voting_oracle()),
        ("5 contrastive masking", contrastive_masking()),
    ];

    let mut runs = run_cells(&cells, &SEEDS).expect("adaptation runs");
    if reuse_full {
        let copies: Vec<AblationRun> = runs
            .iter()
            .filter(|r| r.cell == "full")
            .map(|r| AblationRun {
                cell: "history_5".into(),
                result: r.result.clone(),
            })
            .collect();
        runs.extend(copies);
    }
    results.push(("6 end-to-end adaptation trend", end_to_end(&runs)));
    results.push(("7 history-length sweep", history_sweep(&runs)));
    results.push(("8 determinism", determinism()));
    results.push(("9 simplex and EMA invariants", simplex_and_ema()));

    let mut all = true;
    for (name, o) in &results {
        all &= o.pass;
        println!("criterion {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.iter().filter(|(_, o)| o.pass).count(),
        results.len()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

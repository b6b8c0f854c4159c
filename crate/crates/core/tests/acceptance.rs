//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use deep2shallow::clustering::{adaptive_k, kmeans_fit};
use deep2shallow::experiment::{median, run_single, ExperimentConfig, RunOutcome};
use deep2shallow::losses::{mmd2, KernelSpec};
use deep2shallow::trainer::TrainMode;
use deep2shallow::{Matrix, SeededRng};

use common::{exhaustive_kmeans, max_fd_error, naive_mmd2, random_matrix, Component};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed.as_secs_f64() < limit_secs as f64
}

fn mmd_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 1 + rng.below(64);
        let m = 1 + rng.below(64);
        let d = 1 + rng.below(8);
        let x = random_matrix(&mut rng, n, d, 1.0);
        let y = random_matrix(&mut rng, m, d, 1.5);
        let sigma = rng.uniform_range(0.3, 4.0);
        let got = mmd2(&x, &y, &KernelSpec::fixed(sigma)).expect("mmd2").value;
        worst = worst.max((got - naive_mmd2(&x, &y, sigma)).abs());
    }
    let x = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let y = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
    let hand = mmd2(&x, &y, &KernelSpec::fixed(5.0)).expect("mmd2").value;
    let hand_err = (hand - (2.0 - 2.0 * (-0.5f64).exp())).abs();
    let elapsed = t.elapsed();
    verdict(
        worst < 1e-10 && hand_err < 1e-9 && within(elapsed, 10),
        format!("max |Δ| {worst:.2e} over 200 pairs, hand case {hand:.6} (|Δ| {hand_err:.1e}), {elapsed:.1?}"),
    )
}

fn clustering_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = SeededRng::new(77);
    let mut mismatches = 0;
    for case in 0..50 {
        let n = 3 + rng.below(8);
        let d = 1 + rng.below(3);
        let k = 2 + rng.below(n.min(4) - 1);
        let x = random_matrix(&mut rng, n, d, 2.0);
        let fit = kmeans_fit(&x, k, &mut rng.substream(&format!("case{case}")), 50, 100).expect("kmeans");
        let best = exhaustive_kmeans(&x, k);
        if (fit.objective - best).abs() > 1e-9 * best.max(1.0) {
            mismatches += 1;
        }
    }
    let x = Matrix::from_vec(4, 1, vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
    let k = adaptive_k(&x, 0.5, 8, &SeededRng::new(0), 10, 100).expect("adaptive_k").chosen_k;
    let elapsed = t.elapsed();
    verdict(
        mismatches == 0 && k == 2 && within(elapsed, 30),
        format!("{mismatches}/50 instances off the exhaustive optimum, adaptive K = {k}, {elapsed:.1?}"),
    )
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut worst = (0.0, String::new());
    for seed in 0..5 {
        let (err, at) = max_fd_error(seed, Component::Hybrid);
        if err > worst.0 {
            worst = (err, format!("seed {seed} {at}"));
        }
    }
    let elapsed = t.elapsed();
    verdict(
        worst.0 < 1e-4 && within(elapsed, 60),
        format!("max relative error {:.2e} ({}), {elapsed:.1?}", worst.0, worst.1),
    )
}

struct Runs {
    erm: Vec<RunOutcome>,
    debiasify: Vec<RunOutcome>,
    no_akd: Vec<RunOutcome>,
    erm_time: Duration,
    debiasify_time: Duration,
    no_akd_time: Duration,
}

fn train_all(config: &ExperimentConfig, mode: TrainMode) -> (Vec<RunOutcome>, Duration) {
    let t = Instant::now();
    let runs = config
        .seeds
        .iter()
        .map(|&s| run_single(config, mode, s).expect("training run"))
        .collect();
    (runs, t.elapsed())
}

fn desk_runs() -> Runs {
    let desk = common::desk();
    let (erm, erm_time) = train_all(&desk, TrainMode::Erm);
    let (debiasify, debiasify_time) = train_all(&desk, TrainMode::Debiasify);
    let mut ablation = desk.clone();
    ablation.train.alpha = 0.0;
    ablation.eval.probe = false;
    let (no_akd, no_akd_time) = train_all(&ablation, TrainMode::Debiasify);
    Runs {
        erm,
        debiasify,
        no_akd,
        erm_time,
        debiasify_time,
        no_akd_time,
    }
}

fn med(runs: &[RunOutcome], f: impl Fn(&RunOutcome) -> f64) -> f64 {
    median(&runs.iter().map(f).collect::<Vec<_>>())
}

fn unbiased(r: &RunOutcome) -> f64 {
    r.record.final_val.unbiased_accuracy
}

fn worst_group(r: &RunOutcome) -> f64 {
    r.record.final_val.worst_group_accuracy
}

fn simplicity_bias(runs: &Runs) -> Verdict {
    let gaps: Vec<f64> = runs.erm.iter().map(|r| unbiased(r) - worst_group(r)).collect();
    let gap = median(&gaps);
    verdict(
        gap >= 0.15 && within(runs.erm_time, 120),
        format!(
            "ERM median val unbiased {:.3}, worst-group {:.3}, median gap {:.1} points, {:.1?}",
            med(&runs.erm, unbiased),
            med(&runs.erm, worst_group),
            100.0 * gap,
            runs.erm_time
        ),
    )
}

fn efficacy(runs: &Runs) -> Verdict {
    let wg_gain: Vec<f64> = runs
        .debiasify
        .iter()
        .zip(&runs.erm)
        .map(|(d, e)| worst_group(d) - worst_group(e))
        .collect();
    let drop: Vec<f64> = runs
        .debiasify
        .iter()
        .zip(&runs.erm)
        .map(|(d, e)| unbiased(e) - unbiased(d))
        .collect();
    let (gain, drop) = (median(&wg_gain), median(&drop));
    let elapsed = runs.erm_time + runs.debiasify_time;
    verdict(
        gain >= 0.10 && drop < 0.03 && within(elapsed, 600),
        format!(
            "median paired worst-group gain {:+.1} points (need ≥ +10), unbiased drop {:+.1} points (need < 3), {elapsed:.1?}",
            100.0 * gain,
            100.0 * drop
        ),
    )
}

fn decodability(runs: &Runs) -> Verdict {
    let taps = &common::desk().train.shallow_taps;
    let probe = |rs: &[RunOutcome], layer: usize| {
        med(rs, |r| {
            r.decodability
                .iter()
                .find(|p| p.layer == layer && p.attribute == "a0")
                .expect("shallow tap is probed")
                .accuracy
        })
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for &layer in taps {
        let (e, d) = (probe(&runs.erm, layer), probe(&runs.debiasify, layer));
        pass &= d <= e;
        let tie = if d == e { " (tied)" } else { "" };
        parts.push(format!("block {layer}: debiasify {d:.3} vs ERM {e:.3}{tie}"));
    }
    let elapsed = runs.erm_time + runs.debiasify_time;
    verdict(
        pass && within(elapsed, 180),
        format!("median bias decodability {}, {elapsed:.1?}", parts.join("; ")),
    )
}

fn ablation(runs: &Runs) -> Verdict {
    let full = med(&runs.debiasify, worst_group);
    let none = med(&runs.no_akd, worst_group);
    let elapsed = runs.debiasify_time + runs.no_akd_time;
    verdict(
        none < full && within(elapsed, 600),
        format!("median val worst-group α = 0 {none:.3} vs full {full:.3}, {elapsed:.1?}"),
    )
}

fn identity(runs: &Runs) -> Verdict {
    let alpha = common::desk().train.alpha;
    let mut worst = 0.0f64;
    let mut lines = 0;
    for (rs, a) in [(&runs.erm, alpha), (&runs.debiasify, alpha), (&runs.no_akd, 0.0)] {
        for r in rs {
            for e in &r.record.epochs {
                worst = worst.max((e.l_hybrid - (e.l_ace + a * e.l_akd + e.l_kl)).abs());
                lines += 1;
            }
        }
    }
    verdict(worst <= 1e-12, format!("max |Δ| {worst:.1e} over {lines} logged epochs"))
}

fn determinism(runs: &Runs) -> Verdict {
    let desk = common::desk();
    let first = &runs.debiasify[0];
    let again = run_single(&desk, TrainMode::Debiasify, first.seed).expect("training run");
    let a = first.record.metrics_jsonl().expect("metrics");
    let b = again.record.metrics_jsonl().expect("metrics");
    verdict(
        a.as_bytes() == b.as_bytes(),
        format!("debiasify seed {} metrics log, {} bytes, identical = {}", first.seed, a.len(), a == b),
    )
}

fn main() {
    let mut verdicts = vec![
        ("MMD oracle", mmd_oracle()),
        ("K-means oracle", clustering_oracle()),
        ("gradient check", gradients()),
    ];
    let runs = desk_runs();
    verdicts.push(("simplicity bias", simplicity_bias(&runs)));
    verdicts.push(("debiasing efficacy", efficacy(&runs)));
    verdicts.push(("decodability direction", decodability(&runs)));
    verdicts.push(("AKD ablation", ablation(&runs)));
    verdicts.push(("loss identity", identity(&runs)));
    verdicts.push(("determinism", determinism(&runs)));

    let mut failed = 0;
    for (i, (name, v)) in verdicts.iter().enumerate() {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {} ({name}): {}", i + 1, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {}/{} criteria pass", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

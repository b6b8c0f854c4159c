//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code under test except to build inputs.

#![allow(dead_code)]

use deep2shallow::experiment::ExperimentConfig;
use deep2shallow::losses::{hybrid_loss, AkdOptions, HybridOptions, KernelSpec, LossBreakdown};
use deep2shallow::model::{backward_cached, forward, forward_cached, init_params, NetworkConfig, NetworkParams, TapGradients};
use deep2shallow::{Matrix, SeededRng};

pub const DESK_CONFIG: &str = include_str!("../../../../configs/desk.json");
pub const MINIMAL_CONFIG: &str = include_str!("../../../../configs/minimal.json");

pub fn desk() -> ExperimentConfig {
    ExperimentConfig::from_json(DESK_CONFIG, "desk.json").expect("desk config parses")
}

pub fn minimal() -> ExperimentConfig {
    ExperimentConfig::from_json(MINIMAL_CONFIG, "minimal.json").expect("minimal config parses")
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

/// Biased MMD² by explicit double loops over the three kernel sums.
pub fn naive_mmd2(x: &Matrix, y: &Matrix, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let mut d2 = 0.0;
        for t in 0..a.len() {
            d2 += (a[t] - b[t]) * (a[t] - b[t]);
        }
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (n, m) = (x.rows(), y.rows());
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            kxx += k(x.row(i), x.row(j));
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            kyy += k(y.row(i), y.row(j));
        }
    }
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += k(x.row(i), y.row(j));
        }
    }
    kxx / (n * n) as f64 + kyy / (m * m) as f64 - 2.0 * kxy / (n * m) as f64
}

/// Sum of squared distances to cluster means for a labelling.
pub fn partition_cost(x: &Matrix, labels: &[usize], k: usize) -> f64 {
    let p = x.cols();
    let mut sums = vec![vec![0.0; p]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for j in 0..p {
            sums[c][j] += x[(i, j)];
        }
    }
    let mut cost = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..p {
            let mean = sums[c][j] / counts[c] as f64;
            cost += (x[(i, j)] - mean).powi(2);
        }
    }
    cost
}

/// Minimum K-means objective over every partition of the rows into exactly
/// `k` non-empty parts, enumerated as restricted growth strings.
pub fn exhaustive_kmeans(x: &Matrix, k: usize) -> f64 {
    fn rec(x: &Matrix, k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        let n = x.rows();
        let i = labels.len();
        if n - i < k - used {
            return;
        }
        if i == n {
            *best = best.min(partition_cost(x, labels, k));
            return;
        }
        for c in 0..(used + 1).min(k) {
            labels.push(c);
            rec(x, k, labels, used.max(c + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(x, k, &mut Vec::with_capacity(x.rows()), 0, &mut best);
    best
}

/// Adjusted Rand index from the pair-counting definition, by enumerating
/// every pair of samples.
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let total: f64 = both + only_a + only_b + neither;
    let same_a = both + only_a;
    let same_b = both + only_b;
    let expected = same_a * same_b / total;
    let max = 0.5 * (same_a + same_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// value is near zero from being judged on round-off alone.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fraction of correct predictions.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Plain full-batch logistic regression with an intercept, by gradient
/// descent on standardized features. Returns the fitted predictor.
pub fn fit_logistic(x: &Matrix, y: &[usize], steps: usize, lr: f64) -> impl Fn(&[f64]) -> usize {
    let (n, p) = x.shape();
    let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..p)
        .map(|j| {
            let v = (0..n).map(|i| (x[(i, j)] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            v.sqrt().max(1e-12)
        })
        .collect();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    for _ in 0..steps {
        let mut gw = vec![0.0; p];
        let mut gb = 0.0;
        for i in 0..n {
            let z: f64 = b + (0..p).map(|j| w[j] * (x[(i, j)] - mean[j]) / sd[j]).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - y[i] as f64;
            gb += r;
            for j in 0..p {
                gw[j] += r * (x[(i, j)] - mean[j]) / sd[j];
            }
        }
        b -= lr * gb / n as f64;
        for j in 0..p {
            w[j] -= lr * gw[j] / n as f64;
        }
    }
    move |row: &[f64]| {
        let z: f64 = b + (0..p).map(|j| w[j] * (row[j] - mean[j]) / sd[j]).sum::<f64>();
        usize::from(z > 0.0)
    }
}

pub enum Component {
    Ace,
    Akd,
    Kl,
    Hybrid,
}

fn pick(b: &LossBreakdown, c: &Component) -> (f64, TapGradients) {
    match c {
        Component::Ace => (b.l_ace, b.ace_grads.clone()),
        Component::Akd => (b.l_akd, b.akd_grads.clone()),
        Component::Kl => (b.l_kl, b.kl_grads.clone()),
        Component::Hybrid => (b.l_hybrid, b.grads.clone()),
    }
}

/// Largest relative error between backprop and central differences
/// (h = 1e-5) over every scalar parameter, for one loss component.
pub fn max_fd_error(seed: u64, component: Component) -> (f64, String) {
    let mut rng = SeededRng::new(seed).substream("fd");
    let config = NetworkConfig::new(6, [8, 7, 6, 8], 3).with_taps(vec![1, 2]);
    let mut params = init_params(&config, &SeededRng::new(seed)).unwrap();
    // Zero init biases can put whole pre-activation rows exactly on the ReLU
    // kink, where central differences are meaningless; move off it.
    for d in params.blocks.iter_mut() {
        d.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    }
    let n = 16;
    let x = random_matrix(&mut rng, n, 6, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let assignments: Vec<Vec<usize>> = (0..2).map(|t| (0..n).map(|i| (i / 3 + t) % 2).collect()).collect();
    let opts = HybridOptions {
        alpha: 0.1,
        akd: AkdOptions {
            kernel: KernelSpec::fixed(0.8),
            ..AkdOptions::default()
        },
        ..HybridOptions::default()
    };
    let value = |p: &NetworkParams| {
        let taps = forward(p, &x).unwrap();
        pick(&hybrid_loss(&taps, &labels, &assignments, &opts).unwrap(), &component).0
    };
    let cache = forward_cached(&params, &x).unwrap();
    let (_, upstream) = pick(
        &hybrid_loss(cache.outputs(), &labels, &assignments, &opts).unwrap(),
        &component,
    );
    let grads = backward_cached(&params, &cache, &upstream).unwrap();
    let names: Vec<String> = grads.tensors().iter().map(|(n, _)| n.clone()).collect();
    let flat: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, g)| g.to_vec()).collect();
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (t, g) in flat.iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let err = relative_error(analytic, numeric, 1e-5);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: {analytic} vs {numeric}", names[t]));
            }
        }
    }
    worst
}

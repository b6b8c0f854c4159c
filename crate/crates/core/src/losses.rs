//! Averaged two-head cross-entropy, RBF-kernel MMD², the attribute
//! distillation sum, the shallow‖deep KL term and their hybrid, each with
//! exact gradients w.r.t. the tap outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TapGradients, TapOutputs};
use crate::numerics::{squared_distance, Matrix};

/// RBF bandwidth choice. `k(x, y) = exp(-‖x - y‖² / (2σ²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample, held constant for
    /// gradients; falls back to 1 when the median is zero.
    MedianHeuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

impl KernelSpec {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => Err(Error::validation(
                "kernel.bandwidth",
                format!("explicit bandwidth must be positive, got {s}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Distribution distance used inside the attribute distillation sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Mmd,
    /// Symmetric KL divergence between diagonal Gaussian fits of both sets.
    GaussianKl,
}

/// Variance floor for the diagonal Gaussian fits.
pub const GAUSSIAN_VARIANCE_FLOOR: f64 = 1e-3;

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Precondition(format!(
            "label {l} outside [0, {})",
            logits.cols()
        )));
    }
    Ok(())
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let ls = log_softmax_row(logits.row(i));
        for (o, l) in out.row_mut(i).iter_mut().zip(ls) {
            *o = l.exp();
        }
    }
    out
}

/// Batch-mean cross-entropy and its gradient `(softmax − onehot) / n`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let ls = log_softmax_row(logits.row(i));
        total -= ls[label];
        for (g, l) in grad.row_mut(i).iter_mut().zip(&ls) {
            *g = l.exp() / n;
        }
        grad[(i, label)] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

/// `½ (mean_t CE(c_s^t, y) + CE(c_d, y))`; with a single shallow tap this is
/// the plain two-head average.
pub fn ace_loss(taps: &TapOutputs, labels: &[usize]) -> Result<(f64, TapGradients)> {
    let mut grads = taps.zeros_like();
    let (deep, g_deep) = cross_entropy(&taps.deep_logits, labels)?;
    grads.deep_logits.axpy(0.5, &g_deep)?;
    let per_tap = 1.0 / taps.shallow.len() as f64;
    let mut shallow = 0.0;
    for (tap, g) in taps.shallow.iter().zip(&mut grads.shallow) {
        let (v, g_s) = cross_entropy(&tap.logits, labels)?;
        shallow += per_tap * v;
        g.logits.axpy(0.5 * per_tap, &g_s)?;
    }
    Ok((0.5 * (shallow + deep), grads))
}

/// Value and input gradients of a set distance.
#[derive(Clone, Debug)]
pub struct SetDistance {
    pub value: f64,
    pub grad_x: Matrix,
    pub grad_y: Matrix,
    /// Bandwidth actually used (MMD only).
    pub sigma: Option<f64>,
}

/// Median of the pooled pairwise Euclidean distances of `x ∪ y`.
pub fn median_heuristic(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = x.row_iter().chain(y.row_iter()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(squared_distance(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Sums `w · k(a_i, b_j)` over all pairs and accumulates the gradient w.r.t.
/// each `a_i` into `grad_a` (and each `b_j` into `grad_b` when given).
fn kernel_block(
    a: &Matrix,
    b: &Matrix,
    inv_two_sigma2: f64,
    w: f64,
    grad_a: &mut Matrix,
    mut grad_b: Option<&mut Matrix>,
) -> f64 {
    let mut sum = 0.0;
    let scale = 2.0 * inv_two_sigma2 * w;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            let bj = b.row(j);
            let k = (-squared_distance(ai, bj) * inv_two_sigma2).exp();
            sum += k;
            // ∂k/∂a = -k (a - b) / σ²
            let c = scale * k;
            let ga = grad_a.row_mut(i);
            for d in 0..ai.len() {
                ga[d] -= c * (ai[d] - bj[d]);
            }
            if let Some(gb) = grad_b.as_deref_mut() {
                let gb = gb.row_mut(j);
                for d in 0..ai.len() {
                    gb[d] += c * (ai[d] - bj[d]);
                }
            }
        }
    }
    w * sum
}

/// Biased (V-statistic) MMD² between the rows of `x` and `y`.
pub fn mmd2(x: &Matrix, y: &Matrix, kernel: &KernelSpec) -> Result<SetDistance> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Precondition("MMD needs two non-empty sets".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "MMD sets have widths {} and {}",
            x.cols(),
            y.cols()
        )));
    }
    kernel.validate()?;
    if precedes(y, x) {
        let d = mmd2_ordered(y, x, kernel);
        return Ok(SetDistance {
            grad_x: d.grad_y,
            grad_y: d.grad_x,
            ..d
        });
    }
    Ok(mmd2_ordered(x, y, kernel))
}

/// Canonical order of two sets, so that `mmd2(x, y)` and `mmd2(y, x)` run the
/// same floating-point operations.
fn precedes(a: &Matrix, b: &Matrix) -> bool {
    a.rows()
        .cmp(&b.rows())
        .then_with(|| {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .is_lt()
}

fn mmd2_ordered(x: &Matrix, y: &Matrix, kernel: &KernelSpec) -> SetDistance {
    let sigma = match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => median_heuristic(x, y),
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (m, r) = (x.rows() as f64, y.rows() as f64);

    // within-set terms: each point appears on both sides, hence the doubling
    let mut scratch = Matrix::zeros(x.rows(), x.cols());
    let kxx = kernel_block(x, x, inv, 1.0 / (m * m), &mut scratch, None);
    let mut grad_x = scratch.scale(2.0);
    let mut scratch = Matrix::zeros(y.rows(), y.cols());
    let kyy = kernel_block(y, y, inv, 1.0 / (r * r), &mut scratch, None);
    let mut grad_y = scratch.scale(2.0);
    let kxy = kernel_block(x, y, inv, -2.0 / (m * r), &mut grad_x, Some(&mut grad_y));

    SetDistance {
        value: kxx + kyy + kxy,
        grad_x,
        grad_y,
        sigma: Some(sigma),
    }
}

struct DiagonalGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn fit_diagonal(x: &Matrix) -> DiagonalGaussian {
    let mean = x.column_means();
    let n = x.rows() as f64;
    let mut var = vec![0.0; x.cols()];
    for row in x.row_iter() {
        for ((v, xi), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (xi - m) * (xi - m) / n;
        }
    }
    for v in &mut var {
        *v += GAUSSIAN_VARIANCE_FLOOR;
    }
    DiagonalGaussian { mean, var }
}

/// `KL(P‖Q) + KL(Q‖P)` between diagonal Gaussian fits of the two sets:
/// `½ Σ_d [v₁/v₂ + v₂/v₁ − 2 + (μ₁ − μ₂)² (1/v₁ + 1/v₂)]`, with biased
/// variances plus a fixed floor.
pub fn gaussian_symmetric_kl(x: &Matrix, y: &Matrix) -> Result<SetDistance> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Precondition("KL distance needs two non-empty sets".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "KL sets have widths {} and {}",
            x.cols(),
            y.cols()
        )));
    }
    let p = fit_diagonal(x);
    let q = fit_diagonal(y);
    let mut value = 0.0;
    let dims = x.cols();
    let (mut g_mu_p, mut g_var_p) = (vec![0.0; dims], vec![0.0; dims]);
    let (mut g_mu_q, mut g_var_q) = (vec![0.0; dims], vec![0.0; dims]);
    for d in 0..dims {
        let (v1, v2) = (p.var[d], q.var[d]);
        let diff = p.mean[d] - q.mean[d];
        value += 0.5 * (v1 / v2 + v2 / v1 - 2.0 + diff * diff * (1.0 / v1 + 1.0 / v2));
        g_mu_p[d] = diff * (1.0 / v1 + 1.0 / v2);
        g_mu_q[d] = -g_mu_p[d];
        g_var_p[d] = 0.5 * (1.0 / v2 - v2 / (v1 * v1) - diff * diff / (v1 * v1));
        g_var_q[d] = 0.5 * (1.0 / v1 - v1 / (v2 * v2) - diff * diff / (v2 * v2));
    }
    let chain = |set: &Matrix, fit: &DiagonalGaussian, g_mu: &[f64], g_var: &[f64]| {
        let n = set.rows() as f64;
        Matrix::from_fn(set.rows(), dims, |i, d| {
            g_mu[d] / n + g_var[d] * 2.0 * (set[(i, d)] - fit.mean[d]) / n
        })
    };
    Ok(SetDistance {
        value,
        grad_x: chain(x, &p, &g_mu_p, &g_var_p),
        grad_y: chain(y, &q, &g_mu_q, &g_var_q),
        sigma: None,
    })
}

pub fn set_distance(
    x: &Matrix,
    y: &Matrix,
    kind: DistanceKind,
    kernel: &KernelSpec,
) -> Result<SetDistance> {
    match kind {
        DistanceKind::Mmd => mmd2(x, y, kernel),
        DistanceKind::GaussianKl => gaussian_symmetric_kl(x, y),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AkdOptions {
    pub kernel: KernelSpec,
    pub distance: DistanceKind,
    /// Cluster terms with fewer batch samples than this are skipped.
    pub min_cluster_batch: usize,
}

impl Default for AkdOptions {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            distance: DistanceKind::Mmd,
            min_cluster_batch: 2,
        }
    }
}

/// One `(tap, class, cluster)` term of the distillation sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AkdTerm {
    pub tap: usize,
    pub class: usize,
    pub cluster: usize,
    pub class_count: usize,
    pub cluster_count: usize,
    /// `None` when the term was skipped.
    pub value: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AkdOutput {
    pub value: f64,
    pub grads: TapGradients,
    pub terms: Vec<AkdTerm>,
}

impl AkdOutput {
    pub fn skipped(&self) -> usize {
        self.terms.iter().filter(|t| t.value.is_none()).count()
    }
}

/// `Σ_t Σ_y Σ_k D²(P_y, P_{k,y})`, where `P_y` is the deep features of the
/// class-`y` batch samples and `P_{k,y}` the aligned tap-`t` features of the
/// class-`y` samples assigned to cluster `k`. `assignments[t][i]` is sample
/// `i`'s cluster at tap `t`. Terms are visited in `(t, y, k)` order.
pub fn akd_loss(
    taps: &TapOutputs,
    labels: &[usize],
    assignments: &[Vec<usize>],
    options: &AkdOptions,
) -> Result<AkdOutput> {
    let n = taps.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if assignments.len() != taps.shallow.len() || assignments.iter().any(|a| a.len() != n) {
        return Err(Error::Precondition(
            "every sample needs a cluster assignment at every shallow tap".into(),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut grads = taps.zeros_like();
    let mut terms = Vec::new();
    let mut value = 0.0;

    for (t, tap) in taps.shallow.iter().enumerate() {
        for class in 0..num_classes {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            let num_clusters = members.iter().map(|&i| assignments[t][i] + 1).max().unwrap_or(0);
            let deep = taps.deep_features.select_rows(&members);
            for cluster in 0..num_clusters {
                let in_cluster: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&i| assignments[t][i] == cluster)
                    .collect();
                if in_cluster.is_empty() {
                    continue;
                }
                let mut term = AkdTerm {
                    tap: t,
                    class,
                    cluster,
                    class_count: members.len(),
                    cluster_count: in_cluster.len(),
                    value: None,
                };
                if in_cluster.len() >= options.min_cluster_batch.max(1) {
                    let shallow = tap.features.select_rows(&in_cluster);
                    let d = set_distance(&deep, &shallow, options.distance, &options.kernel)?;
                    value += d.value;
                    grads.deep_features.scatter_add_rows(&members, &d.grad_x);
                    grads.shallow[t].features.scatter_add_rows(&in_cluster, &d.grad_y);
                    term.value = Some(d.value);
                }
                terms.push(term);
            }
        }
    }
    Ok(AkdOutput {
        value,
        grads,
        terms,
    })
}

/// Mean over samples (and taps) of `KL(softmax(c_s) ‖ softmax(c_d))`. With
/// `detach_deep` the deep logits receive no gradient.
pub fn kl_loss(taps: &TapOutputs, detach_deep: bool) -> Result<(f64, TapGradients)> {
    let n = taps.rows();
    if n == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut grads = taps.zeros_like();
    let per_tap = 1.0 / taps.shallow.len() as f64;
    let scale = per_tap / n as f64;
    let mut total = 0.0;
    for (tap, g) in taps.shallow.iter().zip(&mut grads.shallow) {
        if tap.logits.shape() != taps.deep_logits.shape() {
            return Err(Error::Shape(format!(
                "shallow logits {:?} vs deep logits {:?}",
                tap.logits.shape(),
                taps.deep_logits.shape()
            )));
        }
        for i in 0..n {
            let ls = log_softmax_row(tap.logits.row(i));
            let ld = log_softmax_row(taps.deep_logits.row(i));
            let kl: f64 = ls
                .iter()
                .zip(&ld)
                .map(|(s, d)| s.exp() * (s - d))
                .sum();
            total += scale * kl;
            let gs = g.logits.row_mut(i);
            for c in 0..ls.len() {
                let p = ls[c].exp();
                gs[c] = scale * p * (ls[c] - ld[c] - kl);
            }
            if !detach_deep {
                let gd = grads.deep_logits.row_mut(i);
                for c in 0..ls.len() {
                    gd[c] += scale * (ld[c].exp() - ls[c].exp());
                }
            }
        }
    }
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridOptions {
    pub alpha: f64,
    pub akd: AkdOptions,
    pub use_kl: bool,
    /// Block distillation gradients from reaching the deep features.
    pub detach_deep_in_akd: bool,
    /// Block KL gradients from reaching the deep logits.
    pub detach_deep_in_kl: bool,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            akd: AkdOptions::default(),
            use_kl: true,
            detach_deep_in_akd: false,
            detach_deep_in_kl: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub l_ace: f64,
    pub l_akd: f64,
    pub l_kl: f64,
    pub l_hybrid: f64,
    pub alpha: f64,
    pub ace_grads: TapGradients,
    pub akd_grads: TapGradients,
    pub kl_grads: TapGradients,
    /// `ace + α·akd + kl`
    pub grads: TapGradients,
    pub akd_terms: Vec<AkdTerm>,
}

impl LossBreakdown {
    pub fn akd_skipped(&self) -> usize {
        self.akd_terms.iter().filter(|t| t.value.is_none()).count()
    }

    pub fn is_finite(&self) -> bool {
        self.l_ace.is_finite()
            && self.l_akd.is_finite()
            && self.l_kl.is_finite()
            && self.l_hybrid.is_finite()
    }
}

/// `L_ACE + α·L_AKD + L_KL`.
pub fn hybrid_loss(
    taps: &TapOutputs,
    labels: &[usize],
    assignments: &[Vec<usize>],
    options: &HybridOptions,
) -> Result<LossBreakdown> {
    if !(options.alpha >= 0.0 && options.alpha.is_finite()) {
        return Err(Error::validation("alpha", "must be finite and non-negative"));
    }
    let (l_ace, ace_grads) = ace_loss(taps, labels)?;
    let akd = akd_loss(taps, labels, assignments, &options.akd)?;
    let mut akd_grads = akd.grads;
    if options.detach_deep_in_akd {
        akd_grads.deep_features = Matrix::zeros(taps.rows(), taps.deep_features.cols());
    }
    let (l_kl, kl_grads) = if options.use_kl {
        kl_loss(taps, options.detach_deep_in_kl)?
    } else {
        (0.0, taps.zeros_like())
    };

    let mut grads = ace_grads.clone();
    if options.alpha != 0.0 {
        grads.axpy(options.alpha, &akd_grads)?;
    }
    if options.use_kl {
        grads.axpy(1.0, &kl_grads)?;
    }
    Ok(LossBreakdown {
        l_ace,
        l_akd: akd.value,
        l_kl,
        l_hybrid: l_ace + options.alpha * akd.value + l_kl,
        alpha: options.alpha,
        ace_grads,
        akd_grads,
        kl_grads,
        grads,
        akd_terms: akd.terms,
    })
}

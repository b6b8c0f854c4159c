//! Per-class K-means over shallow features with an adaptive cluster count.
//!
//! For each class the shallow features are projected with a class-specific
//! PCA, L2-normalized, and clustered for K = 1, 2, … until the mean
//! within-cluster variance `(1/(n·p)) Σᵢ ‖xᵢ − c(xᵢ)‖²` drops below γ. The
//! resulting cluster indices are the pseudo-attribute labels used by the
//! distillation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pca_fit, pca_transform, squared_distance, Matrix, PcaModel, PcaTarget, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// `Σᵢ ‖xᵢ − c(xᵢ)‖²`
    pub objective: f64,
    /// `objective / (n · p)`
    pub mean_within_cluster_variance: f64,
    /// Objective after each assignment step of the returned run.
    pub objective_trace: Vec<f64>,
}

/// Index of the nearest centroid; the lowest index wins ties.
pub fn nearest_centroid(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.row_iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective(x: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    x.row_iter()
        .zip(assignments)
        .map(|(p, &k)| squared_distance(p, centroids.row(k)))
        .sum()
}

/// k-means++: first centroid uniform, later ones with probability
/// proportional to the squared distance to the nearest chosen centroid.
fn seed_plus_plus(x: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = x.row_iter().map(|p| squared_distance(p, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            rng.below(n)
        } else {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn lloyd(x: &Matrix, mut centroids: Matrix, max_iters: usize) -> (Matrix, Vec<usize>, Vec<f64>) {
    let (n, p) = x.shape();
    let k = centroids.rows();
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for iter in 0..max_iters.max(1) {
        let next: Vec<usize> = x.row_iter().map(|pt| nearest_centroid(pt, &centroids).0).collect();
        let converged = next == assignments;
        assignments = next;
        trace.push(objective(x, &centroids, &assignments));
        if converged || iter + 1 == max_iters.max(1) {
            break;
        }
        let mut sums = Matrix::zeros(k, p);
        let mut counts = vec![0usize; k];
        for (pt, &a) in x.row_iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(pt) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        // empty clusters move to the points farthest from their centroids
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&i, &j| {
                        let di = squared_distance(x.row(i), centroids.row(assignments[i]));
                        let dj = squared_distance(x.row(j), centroids.row(assignments[j]));
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap_or(0);
                taken.push(far);
                let point = x.row(far).to_vec();
                centroids.row_mut(c).copy_from_slice(&point);
            }
        }
    }
    (centroids, assignments, trace)
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// objective (earliest wins ties).
pub fn kmeans_fit(
    x: &Matrix,
    k: usize,
    rng: &mut SeededRng,
    restarts: usize,
    max_iters: usize,
) -> Result<KMeansFit> {
    let (n, p) = x.shape();
    if k == 0 || n < k {
        return Err(Error::Precondition(format!(
            "K-means needs 1 <= K <= n, got K = {k}, n = {n}"
        )));
    }
    if p == 0 {
        return Err(Error::Precondition("K-means needs at least one feature".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = seed_plus_plus(x, k, rng);
        let (centroids, assignments, trace) = lloyd(x, init, max_iters);
        let obj = *trace.last().expect("at least one assignment step");
        if best.as_ref().is_none_or(|b| obj < b.objective) {
            best = Some(KMeansFit {
                centroids,
                assignments,
                objective: obj,
                mean_within_cluster_variance: obj / (n * p) as f64,
                objective_trace: trace,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveK {
    pub chosen_k: usize,
    /// No K up to the cap met the threshold.
    pub cap_reached: bool,
    /// Mean within-cluster variance for K = 1..=chosen_k.
    pub variances: Vec<f64>,
    pub fit: KMeansFit,
}

/// Smallest K in `1..=k_max` whose mean within-cluster variance is below
/// `gamma`; `k_max` (capped at n) with `cap_reached` when none is. K = k is
/// fitted with substream `k{k}` of `rng`.
pub fn adaptive_k(
    x: &Matrix,
    gamma: f64,
    k_max: usize,
    rng: &SeededRng,
    restarts: usize,
    max_iters: usize,
) -> Result<AdaptiveK> {
    if x.rows() == 0 {
        return Err(Error::Precondition("cannot cluster an empty set".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Precondition(format!("gamma must be positive, got {gamma}")));
    }
    if k_max == 0 {
        return Err(Error::Precondition("K_max must be at least 1".into()));
    }
    let cap = k_max.min(x.rows());
    let mut variances = Vec::new();
    for k in 1..=cap {
        let fit = kmeans_fit(x, k, &mut rng.substream(&format!("k{k}")), restarts, max_iters)?;
        variances.push(fit.mean_within_cluster_variance);
        if fit.mean_within_cluster_variance < gamma || k == cap {
            return Ok(AdaptiveK {
                chosen_k: k,
                cap_reached: fit.mean_within_cluster_variance >= gamma,
                variances,
                fit,
            });
        }
    }
    unreachable!("loop returns at k == cap")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSettings {
    pub gamma: f64,
    pub k_max: usize,
    /// Bypasses the adaptive rule.
    pub fixed_k: Option<usize>,
    /// PCA width; `None` keeps `min(32, class count − 1, feature dim)`.
    pub pca_dims: Option<usize>,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            gamma: 0.02,
            k_max: 16,
            fixed_k: None,
            pca_dims: None,
            restarts: 10,
            max_iters: 100,
        }
    }
}

impl ClusterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation("gamma", "must be positive"));
        }
        if self.k_max == 0 {
            return Err(Error::validation("k_max", "must be at least 1"));
        }
        if self.fixed_k == Some(0) {
            return Err(Error::validation("fixed_k", "must be at least 1"));
        }
        if self.pca_dims == Some(0) {
            return Err(Error::validation("pca_dims", "must be at least 1"));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::validation("restarts/max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassClusters {
    pub class: usize,
    pub pca: PcaModel,
    pub centroids: Matrix,
    pub k: usize,
    pub cap_reached: bool,
    /// Variance sequence evaluated by the adaptive rule (just the fixed K in
    /// fixed mode).
    pub variances: Vec<f64>,
    pub mean_within_cluster_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub gamma: f64,
    pub classes: Vec<ClassClusters>,
    /// Pseudo-attribute of every sample the model was built from.
    pub assignments: Vec<usize>,
}

fn l2_normalize_rows(x: &mut Matrix) {
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

fn embed(pca: &PcaModel, x: &Matrix) -> Result<Matrix> {
    let mut z = pca_transform(pca, x)?;
    l2_normalize_rows(&mut z);
    Ok(z)
}

impl ClusterModel {
    pub fn k_per_class(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.k).collect()
    }

    fn class(&self, y: usize) -> Result<&ClassClusters> {
        self.classes.get(y).filter(|c| c.class == y).ok_or(Error::UnseenClass(y))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Clusters the features of each class `0..num_classes` separately. Class `y`
/// uses substream `class{y}` of `rng`.
pub fn build_cluster_model(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    settings: &ClusterSettings,
    rng: &SeededRng,
) -> Result<ClusterModel> {
    settings.validate()?;
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let mut assignments = vec![0; labels.len()];
    let mut classes = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::DegenerateClass {
                class,
                count: members.len(),
            });
        }
        let x = features.select_rows(&members);
        let dims = settings
            .pca_dims
            .unwrap_or(32)
            .min(members.len() - 1)
            .min(x.cols());
        let pca = pca_fit(&x, PcaTarget::Dims(dims))?;
        let z = embed(&pca, &x)?;
        let class_rng = rng.substream(&format!("class{class}"));
        let (fit, k, cap_reached, variances) = match settings.fixed_k {
            Some(k) => {
                let k = k.min(z.rows());
                let fit = kmeans_fit(&z, k, &mut class_rng.substream(&format!("k{k}")), settings.restarts, settings.max_iters)?;
                let v = fit.mean_within_cluster_variance;
                (fit, k, false, vec![v])
            }
            None => {
                let a = adaptive_k(&z, settings.gamma, settings.k_max, &class_rng, settings.restarts, settings.max_iters)?;
                (a.fit, a.chosen_k, a.cap_reached, a.variances)
            }
        };
        for (&i, &c) in members.iter().zip(&fit.assignments) {
            assignments[i] = c;
        }
        classes.push(ClassClusters {
            class,
            pca,
            centroids: fit.centroids,
            k,
            cap_reached,
            variances,
            mean_within_cluster_variance: fit.mean_within_cluster_variance,
        });
    }
    Ok(ClusterModel {
        gamma: settings.gamma,
        classes,
        assignments,
    })
}

/// Nearest-centroid cluster of each sample in its class's normalized PCA
/// space.
pub fn assign(model: &ClusterModel, features: &Matrix, labels: &[usize]) -> Result<Vec<usize>> {
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.classes.len()) {
        return Err(Error::UnseenClass(y));
    }
    let mut out = vec![0; labels.len()];
    for class in model.classes.iter().map(|c| c.class) {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let cc = model.class(class)?;
        let z = embed(&cc.pca, &features.select_rows(&members))?;
        for (r, &i) in members.iter().enumerate() {
            out[i] = nearest_centroid(z.row(r), &cc.centroids).0;
        }
    }
    Ok(out)
}

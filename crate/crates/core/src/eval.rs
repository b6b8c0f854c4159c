//! Group-wise accuracy and linear decodability probes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub y: usize,
    pub a: Vec<usize>,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Non-empty groups ordered by `(y, a)`.
    pub groups: Vec<GroupAccuracy>,
    /// Unweighted mean of the group accuracies.
    pub unbiased_accuracy: f64,
    pub worst_group_accuracy: f64,
    /// Plain sample-weighted accuracy.
    pub overall_accuracy: f64,
    /// Groups of `universe` with no samples.
    pub empty_groups: Vec<(usize, Vec<usize>)>,
}

/// Accuracy per `(y, a)` group. `attributes[i]` is sample `i`'s attribute
/// tuple; `universe` lists every group that should be reported, so that
/// missing ones show up in `empty_groups`.
pub fn group_metrics(
    predictions: &[usize],
    labels: &[usize],
    attributes: &[Vec<usize>],
    universe: &[(usize, Vec<usize>)],
) -> Result<GroupMetrics> {
    if predictions.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    if predictions.len() != labels.len() || labels.len() != attributes.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels and {} attribute tuples",
            predictions.len(),
            labels.len(),
            attributes.len()
        )));
    }
    let mut tally: BTreeMap<(usize, Vec<usize>), (usize, usize)> = BTreeMap::new();
    for ((&p, &y), a) in predictions.iter().zip(labels).zip(attributes) {
        let e = tally.entry((y, a.clone())).or_insert((0, 0));
        e.0 += 1;
        e.1 += usize::from(p == y);
    }
    let groups: Vec<GroupAccuracy> = tally
        .iter()
        .map(|((y, a), &(count, correct))| GroupAccuracy {
            y: *y,
            a: a.clone(),
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        })
        .collect();
    let unbiased = groups.iter().map(|g| g.accuracy).sum::<f64>() / groups.len() as f64;
    let worst = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    let correct: usize = groups.iter().map(|g| g.correct).sum();
    let empty_groups = universe
        .iter()
        .filter(|k| !tally.contains_key(*k))
        .cloned()
        .collect();
    Ok(GroupMetrics {
        groups,
        unbiased_accuracy: unbiased,
        worst_group_accuracy: worst,
        overall_accuracy: correct as f64 / predictions.len() as f64,
        empty_groups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    /// Stops once the gradient norm falls below this.
    pub tolerance: f64,
    /// Fraction of every stratum used for fitting; the rest is held out.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            learning_rate: 0.1,
            tolerance: 1e-6,
            train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

/// Fitted affine softmax classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Matrix,
    bias: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.standardize(x).matmul(&self.weight)?;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// Full-batch gradient descent on the mean cross-entropy of an affine
/// softmax classifier. Features are standardized with the fitting set's
/// column statistics (constant columns are left unscaled).
pub fn fit_linear_probe(
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<(LinearProbe, usize, f64)> {
    let mean = x.column_means();
    let scale: Vec<f64> = (0..x.cols())
        .map(|j| {
            let var = x.row_iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / x.rows() as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weight: Matrix::zeros(x.cols(), num_classes),
        bias: vec![0.0; num_classes],
    };
    let xs = probe.standardize(x);
    let mut loss = f64::NAN;
    let mut steps = 0;
    for _ in 0..config.max_steps {
        let mut z = xs.matmul(&probe.weight)?;
        z.add_row_vector(&probe.bias)?;
        let (l, g) = cross_entropy(&z, labels)?;
        loss = l;
        let gw = xs.t_matmul(&g)?;
        let gb = g.column_sums();
        let norm = (gw.as_slice().iter().chain(&gb).map(|v| v * v).sum::<f64>()).sqrt();
        if norm < config.tolerance {
            break;
        }
        probe.weight.axpy(-config.learning_rate, &gw)?;
        for (b, g) in probe.bias.iter_mut().zip(gb) {
            *b -= config.learning_rate * g;
        }
        steps += 1;
    }
    Ok((probe, steps, loss))
}

/// Linear decodability of `labels` from frozen `features`.
///
/// Samples are split per stratum (by default the label itself) into a fitting
/// part and a held-out part; the reported accuracy is measured on the
/// held-out part. With group-balanced strata the held-out part is balanced too.
pub fn decodability_probe(
    features: &Matrix,
    labels: &[usize],
    strata: Option<&[usize]>,
    rng: &SeededRng,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut v = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if distinct < 2 {
        return Err(Error::Precondition(
            "probe labels take a single value".into(),
        ));
    }
    let strata = strata.unwrap_or(labels);
    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        by_stratum.entry(s).or_default().push(i);
    }
    let mut shuffle = rng.substream("probe-split");
    let (mut fit_idx, mut held_idx) = (Vec::new(), Vec::new());
    for members in by_stratum.values_mut() {
        shuffle.shuffle(members);
        let cut = ((members.len() as f64 * config.train_fraction).round() as usize)
            .clamp(usize::from(members.len() > 1), members.len().saturating_sub(1).max(1));
        fit_idx.extend_from_slice(&members[..cut]);
        held_idx.extend_from_slice(&members[cut..]);
    }
    if held_idx.is_empty() {
        return Err(Error::Precondition("probe has no held-out samples".into()));
    }
    let fit_x = features.select_rows(&fit_idx);
    let fit_y: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
    let (probe, steps, final_loss) = fit_linear_probe(&fit_x, &fit_y, num_classes, config)?;
    let accuracy_on = |idx: &[usize]| -> Result<f64> {
        let pred = probe.predict(&features.select_rows(idx))?;
        Ok(pred.iter().zip(idx).filter(|(p, &i)| **p == labels[i]).count() as f64 / idx.len() as f64)
    };
    Ok(ProbeResult {
        accuracy: accuracy_on(&held_idx)?,
        train_accuracy: accuracy_on(&fit_idx)?,
        steps,
        final_loss,
        train_size: fit_idx.len(),
        heldout_size: held_idx.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub method: String,
    pub attribute: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodabilityReport {
    pub layers: Vec<LayerProbe>,
    pub probe: ProbeConfig,
}

impl DecodabilityReport {
    /// Rows `layer,method,attribute,accuracy`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_probe_csv(path, &self.layers)
    }
}

pub fn write_probe_csv(path: &Path, rows: &[LayerProbe]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "method", "attribute", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.method.clone(),
            r.attribute.clone(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Adjusted Rand index between two labelings of the same samples. Returns 1
/// when both labelings are a single block (or the input has fewer than two
/// samples), where the index is otherwise undefined.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let pairs = |c: usize| (c * c.saturating_sub(1)) as f64 / 2.0;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&u, &v) in a.iter().zip(b) {
        *joint.entry((u, v)).or_default() += 1;
        *rows.entry(u).or_default() += 1;
        *cols.entry(v).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

impl GroupMetrics {
    /// Rows `y,a,count,correct,accuracy` with `a` joined by `-`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("y,a,count,correct,accuracy\n");
        for g in &self.groups {
            let a: Vec<String> = g.a.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{},{},{},{}\n", g.y, a.join("-"), g.count, g.correct, g.accuracy));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn universe() -> Vec<(usize, Vec<usize>)> {
        vec![(0, vec![0]), (0, vec![1]), (1, vec![0]), (1, vec![1])]
    }

    #[test]
    fn hand_computed_groups() {
        // groups (0,0) 2/2, (0,1) 2/2, (1,0) 1/2, (1,1) 1/2
        let y = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let a: Vec<Vec<usize>> = [0, 0, 1, 1, 0, 0, 1, 1].iter().map(|&v| vec![v]).collect();
        let pred = vec![0, 0, 0, 0, 1, 0, 1, 0];
        let m = group_metrics(&pred, &y, &a, &universe()).unwrap();
        assert_eq!(m.unbiased_accuracy, 0.75);
        assert_eq!(m.worst_group_accuracy, 0.5);
        let all = group_metrics(&y, &y, &a, &universe()).unwrap();
        assert_eq!((all.unbiased_accuracy, all.worst_group_accuracy), (1.0, 1.0));
    }

    #[test]
    fn unbiased_is_unweighted() {
        // (0,0): 9 of 9 right; (0,1): 0 of 1 → unbiased 0.5, overall 0.9
        let y = vec![0; 10];
        let mut a: Vec<Vec<usize>> = vec![vec![0]; 9];
        a.push(vec![1]);
        let pred = vec![0; 9].into_iter().chain([1]).collect::<Vec<_>>();
        let m = group_metrics(&pred, &y, &a, &universe()).unwrap();
        assert_eq!(m.unbiased_accuracy, 0.5);
        assert_eq!(m.overall_accuracy, 0.9);
        assert_eq!(m.empty_groups, vec![(1, vec![0]), (1, vec![1])]);
    }

    #[test]
    fn empty_slice_is_an_error() {
        assert!(group_metrics(&[], &[], &[], &universe()).is_err());
        assert!(group_metrics(&[0], &[0, 1], &[vec![0]], &universe()).is_err());
    }

    #[test]
    fn one_hot_features_decode_perfectly() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let x = Matrix::from_fn(40, 2, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
        let r = decodability_probe(&x, &labels, None, &SeededRng::new(1), &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn single_valued_labels_are_rejected() {
        let x = Matrix::zeros(6, 2);
        assert!(decodability_probe(&x, &[1; 6], None, &SeededRng::new(1), &ProbeConfig::default()).is_err());
    }

    #[test]
    fn ari_hand_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 3, 3]), 1.0);
        // contingency [[1,1],[1,1]]: index 0, expected 2*2/6
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((v - (0.0 - 2.0 / 3.0) / (2.0 - 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]), 1.0);
    }
}

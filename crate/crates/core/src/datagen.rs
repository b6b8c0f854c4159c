//! Synthetic classification data with a controllable spurious attribute.
//!
//! Each sample has a class `y` and one label per bias attribute. In the train
//! split an attribute takes its class-aligned value `y mod cardinality` with
//! probability `ρ`, otherwise a uniformly drawn other value. Validation and
//! test splits are group-balanced: sample `i` of a split belongs to group
//! `i mod G`, so every `(y, a)` group appears.
//!
//! Features are Gaussian with a shared standard deviation σ:
//!
//! | block | dims | mean |
//! |---|---|---|
//! | core | `core_signal_dims` | `(core_margin / √2) · e_y` |
//! | bias `j` | `signal_dims_j` | `(margin_j / √2) · e_{a_j}` |
//! | noise | `noise_dims` | `0` |
//!
//! so two class means are `core_margin` apart (likewise for attribute values).
//!
//! Random draws come from named substreams of the generator's stream:
//! `labels` (one `below(C)` per train sample), `bias/{j}/align` (one uniform
//! per train sample, aligned when `< ρ`), `bias/{j}/value` (one `below(card-1)`
//! per misaligned sample) and `features` (normals in sample order train, val,
//! test; within a sample core, bias blocks, noise).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasAttribute {
    pub name: String,
    pub cardinality: usize,
    pub alignment_ratio: f64,
    pub signal_dims: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSpec {
    pub num_classes: usize,
    pub bias_attributes: Vec<BiasAttribute>,
    pub core_signal_dims: usize,
    pub noise_dims: usize,
    pub core_margin: f64,
    pub noise_std: f64,
}

impl Default for BiasSpec {
    /// Two classes, one binary bias aligned 95% of the time,
    /// 2 core + 2 bias + 16 noise dims.
    fn default() -> Self {
        Self {
            num_classes: 2,
            bias_attributes: vec![BiasAttribute {
                name: "background".into(),
                cardinality: 2,
                alignment_ratio: 0.95,
                signal_dims: 2,
                margin: 7.0,
            }],
            core_signal_dims: 2,
            noise_dims: 16,
            core_margin: 4.0,
            noise_std: 1.0,
        }
    }
}

impl BiasSpec {
    pub fn feature_dim(&self) -> usize {
        self.core_signal_dims
            + self.bias_attributes.iter().map(|a| a.signal_dims).sum::<usize>()
            + self.noise_dims
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.bias_attributes.iter().map(|a| a.cardinality).collect()
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.cardinalities().iter().product::<usize>()
    }

    /// Column ranges of the core block and of each bias block.
    pub fn core_columns(&self) -> std::ops::Range<usize> {
        0..self.core_signal_dims
    }

    pub fn bias_columns(&self, attribute: usize) -> std::ops::Range<usize> {
        let start = self.core_signal_dims
            + self.bias_attributes[..attribute]
                .iter()
                .map(|a| a.signal_dims)
                .sum::<usize>();
        start..start + self.bias_attributes[attribute].signal_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "must be at least 2"));
        }
        if self.core_signal_dims < self.num_classes {
            return Err(Error::validation(
                "core_signal_dims",
                format!("needs one dimension per class ({})", self.num_classes),
            ));
        }
        if !(self.core_margin > 0.0 && self.core_margin.is_finite()) {
            return Err(Error::validation("core_margin", "must be positive"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::validation("noise_std", "must be positive"));
        }
        if self.bias_attributes.is_empty() {
            return Err(Error::validation("bias_attributes", "needs at least one attribute"));
        }
        for (j, a) in self.bias_attributes.iter().enumerate() {
            let field = |f: &str| format!("bias_attributes[{j}].{f}");
            if a.cardinality < 2 {
                return Err(Error::validation(field("cardinality"), "must be at least 2"));
            }
            if !(0.0..=1.0).contains(&a.alignment_ratio) {
                return Err(Error::validation(
                    field("alignment_ratio"),
                    format!("{} is outside [0, 1]", a.alignment_ratio),
                ));
            }
            if a.signal_dims < a.cardinality {
                return Err(Error::validation(
                    field("signal_dims"),
                    format!("needs one dimension per value ({})", a.cardinality),
                ));
            }
            if !(a.margin > 0.0 && a.margin.is_finite()) {
                return Err(Error::validation(field("margin"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn group_id(&self, y: usize, a: &[usize]) -> usize {
        group_index(y, a, &self.cardinalities())
    }

    pub fn group_key(&self, id: usize) -> (usize, Vec<usize>) {
        group_key(id, &self.cardinalities())
    }
}

/// Group index of `(y, a)`, mixed radix with `y` most significant.
pub fn group_index(y: usize, a: &[usize], cardinalities: &[usize]) -> usize {
    a.iter()
        .zip(cardinalities)
        .fold(y, |acc, (&v, &card)| acc * card + v)
}

/// Inverse of [`group_index`].
pub fn group_key(mut id: usize, cardinalities: &[usize]) -> (usize, Vec<usize>) {
    let mut a = vec![0; cardinalities.len()];
    for (slot, card) in a.iter_mut().zip(cardinalities).rev() {
        *slot = id % card;
        id /= card;
    }
    (id, a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 400,
            test: 400,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedDataset {
    pub num_classes: usize,
    pub cardinalities: Vec<usize>,
    pub x: Matrix,
    pub y: Vec<usize>,
    /// `a[j][i]`: value of bias attribute `j` for sample `i`.
    pub a: Vec<Vec<usize>>,
    pub group_id: Vec<usize>,
    pub split: Vec<Split>,
}

/// A split's rows copied out of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSlice {
    pub indices: Vec<usize>,
    pub x: Matrix,
    pub y: Vec<usize>,
    /// Per-sample attribute tuples.
    pub a: Vec<Vec<usize>>,
    pub group_id: Vec<usize>,
}

impl DataSlice {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Values of attribute `j` for every sample.
    pub fn attribute(&self, j: usize) -> Vec<usize> {
        self.a.iter().map(|t| t[j]).collect()
    }
}

impl BiasedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.cardinalities.iter().product::<usize>()
    }

    pub fn attributes_of(&self, i: usize) -> Vec<usize> {
        self.a.iter().map(|col| col[i]).collect()
    }

    pub fn group_id_of(&self, y: usize, a: &[usize]) -> usize {
        group_index(y, a, &self.cardinalities)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn slice(&self, split: Split) -> DataSlice {
        let indices = self.indices(split);
        DataSlice {
            x: self.x.select_rows(&indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            a: indices.iter().map(|&i| self.attributes_of(i)).collect(),
            group_id: indices.iter().map(|&i| self.group_id[i]).collect(),
            indices,
        }
    }

    /// Checks label ranges and that group ids agree with `(y, a)`.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.x.rows() != n || self.split.len() != n || self.group_id.len() != n {
            return Err(Error::Shape("dataset columns have different lengths".into()));
        }
        if self.a.len() != self.cardinalities.len() || self.a.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("attribute columns do not match the layout".into()));
        }
        for i in 0..n {
            if self.y[i] >= self.num_classes {
                return Err(Error::Precondition(format!("sample {i}: label {} out of range", self.y[i])));
            }
            let a = self.attributes_of(i);
            if a.iter().zip(&self.cardinalities).any(|(v, c)| v >= c) {
                return Err(Error::Precondition(format!("sample {i}: attribute out of range")));
            }
            if self.group_id[i] != self.group_id_of(self.y[i], &a) {
                return Err(Error::Precondition(format!(
                    "sample {i}: group id {} does not match (y, a)",
                    self.group_id[i]
                )));
            }
        }
        Ok(())
    }

    /// Writes the dataset with header `feature_0.., y, a_0.., group_id, split`.
    /// Features are written with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.x.cols()).map(|j| format!("feature_{j}")).collect();
        header.push("y".into());
        header.extend((0..self.a.len()).map(|j| format!("a_{j}")));
        header.push("group_id".into());
        header.push("split".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(self.y[i].to_string());
            rec.extend(self.a.iter().map(|col| col[i].to_string()));
            rec.push(self.group_id[i].to_string());
            rec.push(self.split[i].as_str().into());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by [`BiasedDataset::write_csv`]. The class count
    /// and cardinalities are the largest observed values plus one.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let parse_err = |message: String| Error::Parse {
            what: path.display().to_string(),
            message,
        };
        let d = header.iter().take_while(|h| h.starts_with("feature_")).count();
        let num_attrs = header.iter().filter(|h| h.starts_with("a_")).count();
        let expected = d + num_attrs + 3;
        if header.len() != expected || &header[d] != "y" {
            return Err(parse_err(format!("unexpected header {header:?}")));
        }
        let mut data = Vec::new();
        let mut y = Vec::new();
        let mut a = vec![Vec::new(); num_attrs];
        let mut group_id = Vec::new();
        let mut split = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let int = |k: usize| {
                field(k)
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("row {}: column {k}: {e}", line + 1)))
            };
            for k in 0..d {
                data.push(
                    field(k)
                        .parse::<f64>()
                        .map_err(|e| parse_err(format!("row {}: column {k}: {e}", line + 1)))?,
                );
            }
            y.push(int(d)?);
            for (j, col) in a.iter_mut().enumerate() {
                col.push(int(d + 1 + j)?);
            }
            group_id.push(int(d + 1 + num_attrs)?);
            let s = field(d + 2 + num_attrs);
            split.push(Split::parse(s).ok_or_else(|| parse_err(format!("row {}: bad split {s:?}", line + 1)))?);
        }
        let x = Matrix::from_vec(y.len(), d, data)?;
        let ds = BiasedDataset {
            num_classes: y.iter().max().map_or(0, |m| m + 1),
            cardinalities: a.iter().map(|c| c.iter().max().map_or(0, |m| m + 1)).collect(),
            x,
            y,
            a,
            group_id,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn generate(spec: &BiasSpec, sizes: SplitSizes, rng: &SeededRng) -> Result<BiasedDataset> {
    spec.validate()?;
    let groups = spec.num_groups();
    if sizes.total() < 10 * groups {
        return Err(Error::Precondition(format!(
            "{} samples for {groups} groups; at least {} are required",
            sizes.total(),
            10 * groups
        )));
    }
    if sizes.val < groups || sizes.test < groups {
        return Err(Error::Precondition(format!(
            "val and test splits need at least one sample per group ({groups})"
        )));
    }
    let cards = spec.cardinalities();
    let num_attrs = cards.len();
    let n = sizes.total();
    let mut y = Vec::with_capacity(n);
    let mut a = vec![Vec::with_capacity(n); num_attrs];
    let mut split = Vec::with_capacity(n);

    let mut label_rng = rng.substream("labels");
    let mut align_rngs: Vec<SeededRng> = (0..num_attrs)
        .map(|j| rng.substream(&format!("bias/{j}/align")))
        .collect();
    let mut value_rngs: Vec<SeededRng> = (0..num_attrs)
        .map(|j| rng.substream(&format!("bias/{j}/value")))
        .collect();
    for _ in 0..sizes.train {
        let label = label_rng.below(spec.num_classes);
        y.push(label);
        for (j, attr) in spec.bias_attributes.iter().enumerate() {
            let aligned = label % attr.cardinality;
            let value = if align_rngs[j].uniform() < attr.alignment_ratio {
                aligned
            } else {
                let other = value_rngs[j].below(attr.cardinality - 1);
                if other < aligned {
                    other
                } else {
                    other + 1
                }
            };
            a[j].push(value);
        }
        split.push(Split::Train);
    }
    for (part, count) in [(Split::Val, sizes.val), (Split::Test, sizes.test)] {
        for i in 0..count {
            let (label, attrs) = spec.group_key(i % groups);
            y.push(label);
            for (col, v) in a.iter_mut().zip(attrs) {
                col.push(v);
            }
            split.push(part);
        }
    }

    let d = spec.feature_dim();
    let sigma = spec.noise_std;
    let mut feature_rng = rng.substream("features");
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let core_scale = spec.core_margin / std::f64::consts::SQRT_2;
        for k in 0..spec.core_signal_dims {
            let mean = if k == y[i] { core_scale } else { 0.0 };
            data.push(mean + sigma * feature_rng.normal());
        }
        for (j, attr) in spec.bias_attributes.iter().enumerate() {
            let scale = attr.margin / std::f64::consts::SQRT_2;
            for k in 0..attr.signal_dims {
                let mean = if k == a[j][i] { scale } else { 0.0 };
                data.push(mean + sigma * feature_rng.normal());
            }
        }
        for _ in 0..spec.noise_dims {
            data.push(sigma * feature_rng.normal());
        }
    }

    let group_id = (0..n)
        .map(|i| {
            let attrs: Vec<usize> = a.iter().map(|c| c[i]).collect();
            spec.group_id(y[i], &attrs)
        })
        .collect();
    let ds = BiasedDataset {
        num_classes: spec.num_classes,
        cardinalities: cards,
        x: Matrix::from_vec(n, d, data)?,
        y,
        a,
        group_id,
        split,
    };
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group_id: usize,
    pub y: usize,
    pub a: Vec<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Sample counts of every `(y, a)` group per split, ordered by group id
/// (i.e. by `(y, a)` lexicographically). Groups with no samples are listed
/// with zero counts.
pub fn group_table(ds: &BiasedDataset) -> Vec<GroupRow> {
    let mut counts: BTreeMap<usize, [usize; 3]> = (0..ds.num_groups()).map(|g| (g, [0; 3])).collect();
    for i in 0..ds.len() {
        let slot = match ds.split[i] {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        counts.entry(ds.group_id[i]).or_insert([0; 3])[slot] += 1;
    }
    counts
        .into_iter()
        .map(|(g, [train, val, test])| {
            let (y, a) = group_key(g, &ds.cardinalities);
            GroupRow {
                group_id: g,
                y,
                a,
                train,
                val,
                test,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_ratio(rho: f64) -> BiasSpec {
        let mut s = BiasSpec::default();
        s.bias_attributes[0].alignment_ratio = rho;
        s
    }

    #[test]
    fn full_alignment_has_empty_minority_groups() {
        let ds = generate(&spec_with_ratio(1.0), SplitSizes::default(), &SeededRng::new(1)).unwrap();
        for i in ds.indices(Split::Train) {
            assert_eq!(ds.a[0][i], ds.y[i] % 2);
        }
        let table = group_table(&ds);
        assert_eq!(table.len(), 4);
        let empty: Vec<_> = table.iter().filter(|r| r.train == 0).map(|r| (r.y, r.a[0])).collect();
        assert_eq!(empty, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn half_alignment_concentrates() {
        let sizes = SplitSizes {
            train: 10000,
            val: 4,
            test: 4,
        };
        let ds = generate(&spec_with_ratio(0.5), sizes, &SeededRng::new(2)).unwrap();
        let aligned = ds
            .indices(Split::Train)
            .iter()
            .filter(|&&i| ds.a[0][i] == ds.y[i] % 2)
            .count() as f64
            / 10000.0;
        assert!((0.45..=0.55).contains(&aligned), "{aligned}");
    }

    #[test]
    fn eval_splits_are_group_balanced() {
        let ds = generate(&BiasSpec::default(), SplitSizes::default(), &SeededRng::new(3)).unwrap();
        ds.validate().unwrap();
        for row in group_table(&ds) {
            assert_eq!(row.val, 100);
            assert_eq!(row.test, 100);
        }
    }

    #[test]
    fn counts_sum_per_split() {
        let sizes = SplitSizes {
            train: 537,
            val: 41,
            test: 43,
        };
        let ds = generate(&BiasSpec::default(), sizes, &SeededRng::new(4)).unwrap();
        let table = group_table(&ds);
        assert_eq!(table.iter().map(|r| r.train).sum::<usize>(), 537);
        assert_eq!(table.iter().map(|r| r.val).sum::<usize>(), 41);
        assert_eq!(table.iter().map(|r| r.test).sum::<usize>(), 43);
        assert!(table.iter().all(|r| r.val >= 1 && r.test >= 1));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            generate(&spec_with_ratio(1.2), SplitSizes::default(), &SeededRng::new(1)),
            Err(Error::Validation { .. })
        ));
        let tiny = SplitSizes {
            train: 20,
            val: 4,
            test: 4,
        };
        assert!(matches!(
            generate(&BiasSpec::default(), tiny, &SeededRng::new(1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn group_ids_round_trip() {
        let mut spec = BiasSpec::default();
        spec.num_classes = 3;
        spec.core_signal_dims = 3;
        spec.bias_attributes.push(BiasAttribute {
            name: "second".into(),
            cardinality: 3,
            alignment_ratio: 0.8,
            signal_dims: 3,
            margin: 2.0,
        });
        for g in 0..spec.num_groups() {
            let (y, a) = spec.group_key(g);
            assert_eq!(spec.group_id(y, &a), g);
        }
        let ds = generate(&spec, SplitSizes { train: 400, val: 36, test: 36 }, &SeededRng::new(9)).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.x.cols(), spec.feature_dim());
    }
}

//! Four-block ReLU network with shallow taps, per-tap auxiliary branches
//! (alignment layer + classifier) and a deep classifier.
//!
//! ```text
//! x ─ block1 ─ block2 ─ block3 ─ block4 ─ deep classifier ─ c_d
//!                │
//!                └─ align ─ shallow classifier ─ c_s
//! ```
//!
//! Every block is `relu(h · W + b)`. The alignment layer is affine and maps a
//! tap's width to the deep width, so shallow and deep feature sets live in the
//! same space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const NUM_BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub block_widths: [usize; NUM_BLOCKS],
    pub num_classes: usize,
    /// 1-based block indices feeding an auxiliary branch, strictly before the
    /// deep tap (block 4).
    #[serde(default = "default_shallow_taps")]
    pub shallow_taps: Vec<usize>,
}

fn default_shallow_taps() -> Vec<usize> {
    vec![2]
}

impl NetworkConfig {
    pub fn new(input_dim: usize, block_widths: [usize; NUM_BLOCKS], num_classes: usize) -> Self {
        Self {
            input_dim,
            block_widths,
            num_classes,
            shallow_taps: default_shallow_taps(),
        }
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Self {
        self.shallow_taps = taps;
        self
    }

    pub fn deep_width(&self) -> usize {
        self.block_widths[NUM_BLOCKS - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::validation("input_dim", "must be at least 1"));
        }
        if let Some(i) = self.block_widths.iter().position(|&w| w == 0) {
            return Err(Error::validation(
                format!("block_widths[{i}]"),
                "must be at least 1",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "must be at least 2"));
        }
        if self.shallow_taps.is_empty() {
            return Err(Error::validation("shallow_taps", "needs at least one tap"));
        }
        for (i, &b) in self.shallow_taps.iter().enumerate() {
            if !(1..NUM_BLOCKS).contains(&b) {
                return Err(Error::validation(
                    format!("shallow_taps[{i}]"),
                    format!("block {b} is not in 1..=3"),
                ));
            }
            if i > 0 && b <= self.shallow_taps[i - 1] {
                return Err(Error::validation(
                    "shallow_taps",
                    "must be strictly increasing",
                ));
            }
        }
        Ok(())
    }
}

/// Affine map `x · weight + bias`, with `weight` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    fn uniform(input: usize, output: usize, bound: f64, rng: &mut SeededRng) -> Self {
        Self {
            weight: Matrix::from_fn(input, output, |_, _| rng.uniform_range(-bound, bound)),
            bias: vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }

    /// Accumulates parameter gradients for upstream `grad_out` and returns the
    /// gradient w.r.t. the input.
    fn backward(&self, input: &Matrix, grad_out: &Matrix, grads: &mut Dense) -> Result<Matrix> {
        grads.weight.axpy(1.0, &input.t_matmul(grad_out)?)?;
        for (g, s) in grads.bias.iter_mut().zip(grad_out.column_sums()) {
            *g += s;
        }
        grad_out.matmul_t(&self.weight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxBranch {
    /// 1-based block this branch reads from.
    pub block: usize,
    pub align: Dense,
    pub classifier: Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub blocks: Vec<Dense>,
    pub aux: Vec<AuxBranch>,
    pub deep_classifier: Dense,
}

/// Gradients share the parameter layout.
pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let mut widths = vec![config.input_dim];
        widths.extend_from_slice(&config.block_widths);
        let deep = config.deep_width();
        Self {
            blocks: (0..NUM_BLOCKS)
                .map(|i| Dense::zeros(widths[i], widths[i + 1]))
                .collect(),
            aux: config
                .shallow_taps
                .iter()
                .map(|&b| AuxBranch {
                    block: b,
                    align: Dense::zeros(widths[b], deep),
                    classifier: Dense::zeros(deep, config.num_classes),
                })
                .collect(),
            deep_classifier: Dense::zeros(deep, config.num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.weight.rows(), d.weight.cols());
        Self {
            blocks: self.blocks.iter().map(z).collect(),
            aux: self
                .aux
                .iter()
                .map(|a| AuxBranch {
                    block: a.block,
                    align: z(&a.align),
                    classifier: z(&a.classifier),
                })
                .collect(),
            deep_classifier: z(&self.deep_classifier),
        }
    }

    fn denses(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("block{}", i + 1), d))
            .collect();
        for a in &self.aux {
            out.push((format!("tap{}.align", a.block), &a.align));
            out.push((format!("tap{}.classifier", a.block), &a.classifier));
        }
        out.push(("deep_classifier".into(), &self.deep_classifier));
        out
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.denses()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), d.weight.as_slice()),
                    (format!("{name}.bias"), d.bias.as_slice()),
                ]
            })
            .collect()
    }

    /// Mutable tensors in the same order as [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for d in &mut self.blocks {
            out.push(d.weight.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        for a in &mut self.aux {
            out.push(a.align.weight.as_mut_slice());
            out.push(a.align.bias.as_mut_slice());
            out.push(a.classifier.weight.as_mut_slice());
            out.push(a.classifier.bias.as_mut_slice());
        }
        out.push(self.deep_classifier.weight.as_mut_slice());
        out.push(self.deep_classifier.bias.as_mut_slice());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].weight.rows()
    }

    /// Checks that the parameter shapes match `config`.
    pub fn check_shapes(&self, config: &NetworkConfig) -> Result<()> {
        let expected = NetworkParams::zeros(config);
        let got: Vec<_> = self.denses().into_iter().map(|(n, d)| (n, d.weight.shape(), d.bias.len())).collect();
        let want: Vec<_> = expected.denses().into_iter().map(|(n, d)| (n, d.weight.shape(), d.bias.len())).collect();
        if got != want {
            return Err(Error::Shape(format!(
                "parameters {got:?} do not match configuration {want:?}"
            )));
        }
        Ok(())
    }
}

/// Variance-scaled uniform initialization with zero biases: ReLU blocks use
/// `U(±sqrt(6 / fan_in))`, the linear heads `U(±sqrt(3 / fan_in))`. Each tensor
/// draws from its own named substream of `rng`.
pub fn init_params(config: &NetworkConfig, rng: &SeededRng) -> Result<NetworkParams> {
    config.validate()?;
    let mut params = NetworkParams::zeros(config);
    for (i, block) in params.blocks.iter_mut().enumerate() {
        let (fan_in, fan_out) = block.weight.shape();
        let mut r = rng.substream(&format!("block{}", i + 1));
        *block = Dense::uniform(fan_in, fan_out, (6.0 / fan_in as f64).sqrt(), &mut r);
    }
    for aux in &mut params.aux {
        let (fan_in, fan_out) = aux.align.weight.shape();
        let mut r = rng.substream(&format!("tap{}.align", aux.block));
        aux.align = Dense::uniform(fan_in, fan_out, (3.0 / fan_in as f64).sqrt(), &mut r);
        let (fan_in, fan_out) = aux.classifier.weight.shape();
        let mut r = rng.substream(&format!("tap{}.classifier", aux.block));
        aux.classifier = Dense::uniform(fan_in, fan_out, (3.0 / fan_in as f64).sqrt(), &mut r);
    }
    let (fan_in, fan_out) = params.deep_classifier.weight.shape();
    let mut r = rng.substream("deep_classifier");
    params.deep_classifier = Dense::uniform(fan_in, fan_out, (3.0 / fan_in as f64).sqrt(), &mut r);
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShallowTap {
    pub block: usize,
    /// Post-alignment features, `n × deep width`.
    pub features: Matrix,
    /// `c_s`, `n × C`.
    pub logits: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapOutputs {
    pub shallow: Vec<ShallowTap>,
    pub deep_features: Matrix,
    /// `c_d`, `n × C`.
    pub deep_logits: Matrix,
}

/// Upstream gradients of a scalar loss w.r.t. every tap output.
pub type TapGradients = TapOutputs;

impl TapOutputs {
    pub fn rows(&self) -> usize {
        self.deep_features.rows()
    }

    /// Features of the first (primary) shallow tap.
    pub fn shallow_features(&self) -> &Matrix {
        &self.shallow[0].features
    }

    pub fn shallow_logits(&self) -> &Matrix {
        &self.shallow[0].logits
    }

    pub fn zeros_like(&self) -> TapOutputs {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        TapOutputs {
            shallow: self
                .shallow
                .iter()
                .map(|t| ShallowTap {
                    block: t.block,
                    features: z(&t.features),
                    logits: z(&t.logits),
                })
                .collect(),
            deep_features: z(&self.deep_features),
            deep_logits: z(&self.deep_logits),
        }
    }

    /// `self += c · other`
    pub fn axpy(&mut self, c: f64, other: &TapOutputs) -> Result<()> {
        if self.shallow.len() != other.shallow.len() {
            return Err(Error::Shape("tap counts differ".into()));
        }
        for (a, b) in self.shallow.iter_mut().zip(&other.shallow) {
            a.features.axpy(c, &b.features)?;
            a.logits.axpy(c, &b.logits)?;
        }
        self.deep_features.axpy(c, &other.deep_features)?;
        self.deep_logits.axpy(c, &other.deep_logits)
    }

    pub fn is_finite(&self) -> bool {
        self.shallow
            .iter()
            .all(|t| t.features.is_finite() && t.logits.is_finite())
            && self.deep_features.is_finite()
            && self.deep_logits.is_finite()
    }

    fn same_shape(&self, other: &TapOutputs) -> bool {
        self.shallow.len() == other.shallow.len()
            && self.shallow.iter().zip(&other.shallow).all(|(a, b)| {
                a.features.shape() == b.features.shape() && a.logits.shape() == b.logits.shape()
            })
            && self.deep_features.shape() == other.deep_features.shape()
            && self.deep_logits.shape() == other.deep_logits.shape()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    /// Pre-activations `z_k` of blocks 1..=4.
    pre: Vec<Matrix>,
    /// Post-activations `h_k = relu(z_k)` of blocks 1..=4.
    post: Vec<Matrix>,
    outputs: TapOutputs,
}

impl ForwardCache {
    pub fn outputs(&self) -> &TapOutputs {
        &self.outputs
    }

    pub fn into_outputs(self) -> TapOutputs {
        self.outputs
    }

    /// Output of block `k` (1-based).
    pub fn block_output(&self, k: usize) -> &Matrix {
        &self.post[k - 1]
    }
}

pub fn forward(params: &NetworkParams, x: &Matrix) -> Result<TapOutputs> {
    Ok(forward_cached(params, x)?.outputs)
}

pub fn forward_cached(params: &NetworkParams, x: &Matrix) -> Result<ForwardCache> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "network expects {} input features, got {}",
            params.input_dim(),
            x.cols()
        )));
    }
    let mut pre = Vec::with_capacity(NUM_BLOCKS);
    let mut post: Vec<Matrix> = Vec::with_capacity(NUM_BLOCKS);
    for block in &params.blocks {
        let z = block.forward(post.last().unwrap_or(x))?;
        post.push(z.map(|v| v.max(0.0)));
        pre.push(z);
    }
    let shallow = params
        .aux
        .iter()
        .map(|aux| {
            let features = aux.align.forward(&post[aux.block - 1])?;
            let logits = aux.classifier.forward(&features)?;
            Ok(ShallowTap {
                block: aux.block,
                features,
                logits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let deep_features = post[NUM_BLOCKS - 1].clone();
    let deep_logits = params.deep_classifier.forward(&deep_features)?;
    Ok(ForwardCache {
        input: x.clone(),
        pre,
        post,
        outputs: TapOutputs {
            shallow,
            deep_features,
            deep_logits,
        },
    })
}

/// Raw outputs of every block, for probing.
pub fn block_activations(params: &NetworkParams, x: &Matrix) -> Result<Vec<Matrix>> {
    Ok(forward_cached(params, x)?.post)
}

/// Reverse-mode gradients of a scalar loss given its gradients w.r.t. the tap
/// outputs recorded in `cache`.
pub fn backward_cached(
    params: &NetworkParams,
    cache: &ForwardCache,
    upstream: &TapGradients,
) -> Result<Gradients> {
    if !cache.outputs.same_shape(upstream) {
        return Err(Error::Shape(
            "upstream gradients do not match the tap outputs".into(),
        ));
    }
    let mut grads = params.zeros_like();
    let mut grad_post: Vec<Matrix> = cache
        .post
        .iter()
        .map(|h| Matrix::zeros(h.rows(), h.cols()))
        .collect();

    let mut g_deep = upstream.deep_features.clone();
    g_deep.axpy(
        1.0,
        &params.deep_classifier.backward(
            &cache.outputs.deep_features,
            &upstream.deep_logits,
            &mut grads.deep_classifier,
        )?,
    )?;
    grad_post[NUM_BLOCKS - 1].axpy(1.0, &g_deep)?;

    for (i, aux) in params.aux.iter().enumerate() {
        let tap = &cache.outputs.shallow[i];
        let up = &upstream.shallow[i];
        let mut g_features = up.features.clone();
        g_features.axpy(
            1.0,
            &aux
                .classifier
                .backward(&tap.features, &up.logits, &mut grads.aux[i].classifier)?,
        )?;
        let g_block = aux.align.backward(
            &cache.post[aux.block - 1],
            &g_features,
            &mut grads.aux[i].align,
        )?;
        grad_post[aux.block - 1].axpy(1.0, &g_block)?;
    }

    for k in (0..NUM_BLOCKS).rev() {
        let z = &cache.pre[k];
        let mut g_pre = grad_post[k].clone();
        for (g, &zv) in g_pre.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if zv <= 0.0 {
                *g = 0.0;
            }
        }
        let input = if k == 0 { &cache.input } else { &cache.post[k - 1] };
        let g_in = params.blocks[k].backward(input, &g_pre, &mut grads.blocks[k])?;
        if k > 0 {
            grad_post[k - 1].axpy(1.0, &g_in)?;
        }
    }
    Ok(grads)
}

pub fn backward(params: &NetworkParams, x: &Matrix, upstream: &TapGradients) -> Result<Gradients> {
    let cache = forward_cached(params, x)?;
    backward_cached(params, &cache, upstream)
}

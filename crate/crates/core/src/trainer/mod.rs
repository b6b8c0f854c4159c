//! Three-phase training: warm-up on the averaged two-head cross-entropy,
//! per-class clustering of shallow features, then the hybrid distillation
//! objective. An ERM baseline (deep head only) and an ACE-only mode run
//! through the same loop.

mod checkpoint;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{AdamW, BETA1, BETA2, EPSILON};

use crate::clustering::{assign, build_cluster_model, ClusterModel, ClusterSettings};
use crate::datagen::{group_key, BiasedDataset, DataSlice, Split};
use crate::error::{Error, Result};
use crate::eval::{adjusted_rand_index, group_metrics, GroupMetrics};
use crate::losses::{ace_loss, cross_entropy, hybrid_loss, AkdOptions, DistanceKind, HybridOptions, KernelSpec};
use crate::model::{
    backward_cached, forward, forward_cached, init_params, ForwardCache, NetworkConfig, NetworkParams, ShallowTap,
    NUM_BLOCKS,
};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Cross-entropy on the deep classifier only.
    Erm,
    /// Averaged two-head cross-entropy for every epoch.
    Ace,
    /// Warm-up, clustering, hybrid distillation.
    #[default]
    Debiasify,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Erm => "erm",
            TrainMode::Ace => "ace",
            TrainMode::Debiasify => "debiasify",
        }
    }
}

/// Which shallow representation the cluster model is built on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterFeatures {
    /// Output of the tapped block itself.
    #[default]
    Block,
    /// Output of the tap's alignment layer.
    Aligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub block_widths: [usize; NUM_BLOCKS],
    pub shallow_taps: Vec<usize>,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub use_kl: bool,
    pub gamma: f64,
    pub k_max: usize,
    pub fixed_k: Option<usize>,
    pub pca_dims: Option<usize>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    /// Rebuild the cluster model every this many epochs after warm-up; 0
    /// clusters once.
    pub recluster_every: usize,
    pub cluster_features: ClusterFeatures,
    pub distance_kind: DistanceKind,
    pub kernel: KernelSpec,
    pub min_cluster_batch: usize,
    pub detach_deep_in_akd: bool,
    pub detach_deep_in_kl: bool,
    pub seed: u64,
    /// Seed of the batch-order stream when it should differ from `seed`.
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Debiasify,
            block_widths: [32, 32, 32, 32],
            shallow_taps: vec![2],
            warmup_epochs: 5,
            total_epochs: 50,
            batch_size: 100,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            alpha: 0.1,
            use_kl: true,
            gamma: 0.02,
            k_max: 16,
            fixed_k: None,
            pca_dims: None,
            kmeans_restarts: 10,
            kmeans_max_iters: 100,
            recluster_every: 0,
            cluster_features: ClusterFeatures::Block,
            distance_kind: DistanceKind::Mmd,
            kernel: KernelSpec::default(),
            min_cluster_batch: 2,
            detach_deep_in_akd: false,
            detach_deep_in_kl: false,
            seed: 0,
            shuffle_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("gamma", self.gamma)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("alpha", "must be non-negative"));
        }
        if self.total_epochs == 0 {
            return Err(Error::validation("total_epochs", "must be at least 1"));
        }
        if self.mode == TrainMode::Debiasify && self.warmup_epochs >= self.total_epochs {
            return Err(Error::validation(
                "warmup_epochs",
                format!("must be less than total_epochs ({})", self.total_epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.min_cluster_batch == 0 {
            return Err(Error::validation("min_cluster_batch", "must be at least 1"));
        }
        self.kernel.validate()?;
        self.cluster_settings().validate()?;
        self.network(1, 2).validate()
    }

    pub fn network(&self, input_dim: usize, num_classes: usize) -> NetworkConfig {
        NetworkConfig::new(input_dim, self.block_widths, num_classes).with_taps(self.shallow_taps.clone())
    }

    pub fn cluster_settings(&self) -> ClusterSettings {
        ClusterSettings {
            gamma: self.gamma,
            k_max: self.k_max,
            fixed_k: self.fixed_k,
            pca_dims: self.pca_dims,
            restarts: self.kmeans_restarts,
            max_iters: self.kmeans_max_iters,
        }
    }

    pub fn hybrid_options(&self) -> HybridOptions {
        HybridOptions {
            alpha: self.alpha,
            akd: AkdOptions {
                kernel: self.kernel,
                distance: self.distance_kind,
                min_cluster_batch: self.min_cluster_batch,
            },
            use_kl: self.use_kl,
            detach_deep_in_akd: self.detach_deep_in_akd,
            detach_deep_in_kl: self.detach_deep_in_kl,
        }
    }

    fn is_distilling(&self, epoch: usize) -> bool {
        self.mode == TrainMode::Debiasify && epoch >= self.warmup_epochs
    }

    fn clusters_at(&self, epoch: usize) -> bool {
        self.mode == TrainMode::Debiasify
            && (epoch == self.warmup_epochs
                || (self.recluster_every > 0
                    && epoch > self.warmup_epochs
                    && (epoch - self.warmup_epochs) % self.recluster_every == 0))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ace: f64,
    pub l_akd: f64,
    pub l_kl: f64,
    pub l_hybrid: f64,
    pub val_unbiased_acc: f64,
    pub val_worst_group_acc: f64,
    #[serde(rename = "K_per_class")]
    pub k_per_class: Vec<usize>,
    /// Cluster counts of every tap, when more than one is distilled.
    #[serde(rename = "K_per_tap", default, skip_serializing_if = "Option::is_none")]
    pub k_per_tap: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringEvent {
    pub epoch: usize,
    pub tap_block: usize,
    pub k_per_class: Vec<usize>,
    pub cap_reached: Vec<bool>,
    pub mean_within_cluster_variance: Vec<f64>,
    /// Agreement between clusters and the hidden bias attribute 0 within
    /// each class. Diagnostic only; training never reads bias labels.
    pub bias_ari: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val: GroupMetrics,
    pub test: GroupMetrics,
    #[serde(skip)]
    pub params: Option<NetworkParams>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mode: TrainMode,
    pub epochs: Vec<EpochRecord>,
    pub clustering_events: Vec<ClusteringEvent>,
    pub final_train_accuracy: f64,
    pub final_val: GroupMetrics,
    pub final_test: GroupMetrics,
    /// Epoch with the best validation unbiased accuracy.
    pub best: BestEpoch,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub final_params: Option<NetworkParams>,
    #[serde(skip)]
    pub network: Option<NetworkConfig>,
    /// Cluster models in force at the end of training.
    #[serde(skip)]
    pub cluster_models: Option<Vec<ClusterModel>>,
}

impl RunRecord {
    /// The metrics log, one JSON object per epoch.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Accumulated loss sums over one epoch.
#[derive(Default)]
struct EpochSums {
    ace: f64,
    akd: f64,
    kl: f64,
    hybrid: f64,
    batches: usize,
}

/// Training state that survives a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub params: NetworkParams,
    pub optimizer: AdamW,
    pub cluster_models: Option<Vec<ClusterModel>>,
    pub records: Vec<EpochRecord>,
    pub clustering_events: Vec<ClusteringEvent>,
    pub best: Option<(usize, GroupMetrics, GroupMetrics, NetworkParams)>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    network: NetworkConfig,
    ds: &'a BiasedDataset,
    train: DataSlice,
    val: DataSlice,
    test: DataSlice,
    universe: Vec<(usize, Vec<usize>)>,
    root: SeededRng,
    shuffle_root: SeededRng,
    state: TrainState,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, ds: &'a BiasedDataset) -> Result<Self> {
        config.validate()?;
        ds.validate()?;
        let network = config.network(ds.x.cols(), ds.num_classes);
        let root = SeededRng::new(config.seed);
        let params = init_params(&network, &root.substream("init"))?;
        let optimizer = AdamW::new(&params, config.learning_rate, config.weight_decay);
        let state = TrainState {
            epochs_done: 0,
            params,
            optimizer,
            cluster_models: None,
            records: Vec::new(),
            clustering_events: Vec::new(),
            best: None,
        };
        Self::with_state(config, ds, network, state)
    }

    /// Continues a run from a saved state.
    pub fn resume(config: &TrainConfig, ds: &'a BiasedDataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        ds.validate()?;
        let network = config.network(ds.x.cols(), ds.num_classes);
        state.params.check_shapes(&network)?;
        Self::with_state(config, ds, network, state)
    }

    fn with_state(
        config: &TrainConfig,
        ds: &'a BiasedDataset,
        network: NetworkConfig,
        state: TrainState,
    ) -> Result<Self> {
        let train = ds.slice(Split::Train);
        if train.is_empty() {
            return Err(Error::Precondition("dataset has no training samples".into()));
        }
        let root = SeededRng::new(config.seed);
        let shuffle_root = SeededRng::new(config.shuffle_seed.unwrap_or(config.seed));
        Ok(Self {
            config: config.clone(),
            network,
            ds,
            train,
            val: ds.slice(Split::Val),
            test: ds.slice(Split::Test),
            universe: (0..ds.num_groups()).map(|g| group_key(g, &ds.cardinalities)).collect(),
            root,
            shuffle_root,
            state,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.network
    }

    pub fn params(&self) -> &NetworkParams {
        &self.state.params
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_done >= self.config.total_epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            network: self.network.clone(),
            train: self.config.clone(),
            params: self.state.params.clone(),
            state: Some(Box::new(self.state.clone())),
        }
    }

    fn evaluate(&self, params: &NetworkParams, slice: &DataSlice) -> Result<GroupMetrics> {
        let pred = predict(params, &slice.x)?;
        group_metrics(&pred, &slice.y, &slice.a, &self.universe)
    }

    fn recluster(&mut self, epoch: usize) -> Result<()> {
        let cache = forward_cached(&self.state.params, &self.train.x)?;
        let taps = cache.outputs();
        let settings = self.config.cluster_settings();
        let stream = self.root.substream("clustering").substream(&format!("epoch{epoch}"));
        let bias: Vec<usize> = self.train.attribute(0);
        let mut models = Vec::with_capacity(taps.shallow.len());
        for tap in &taps.shallow {
            let model = build_cluster_model(
                cluster_input(&cache, tap, self.config.cluster_features),
                &self.train.y,
                self.ds.num_classes,
                &settings,
                &stream.substream(&format!("tap{}", tap.block)),
            )
            .map_err(|e| Error::AtEpoch {
                epoch,
                source: Box::new(e),
            })?;
            let bias_ari = (0..self.ds.num_classes)
                .map(|c| {
                    let idx: Vec<usize> = (0..self.train.len()).filter(|&i| self.train.y[i] == c).collect();
                    let clusters: Vec<usize> = idx.iter().map(|&i| model.assignments[i]).collect();
                    let truth: Vec<usize> = idx.iter().map(|&i| bias[i]).collect();
                    adjusted_rand_index(&clusters, &truth)
                })
                .collect();
            self.state.clustering_events.push(ClusteringEvent {
                epoch,
                tap_block: tap.block,
                k_per_class: model.k_per_class(),
                cap_reached: model.classes.iter().map(|c| c.cap_reached).collect(),
                mean_within_cluster_variance: model
                    .classes
                    .iter()
                    .map(|c| c.mean_within_cluster_variance)
                    .collect(),
                bias_ari,
            });
            models.push(model);
        }
        self.state.cluster_models = Some(models);
        Ok(())
    }

    fn train_batch(&mut self, epoch: usize, batch: usize, idx: &[usize], sums: &mut EpochSums) -> Result<()> {
        let x = self.train.x.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.train.y[i]).collect();
        let cache = forward_cached(&self.state.params, &x)?;
        let taps = cache.outputs();

        let (ace, akd, kl, hybrid, upstream) = if self.config.mode == TrainMode::Erm {
            let (l, g) = cross_entropy(&taps.deep_logits, &y)?;
            let mut up = taps.zeros_like();
            up.deep_logits = g;
            (l, 0.0, 0.0, l, up)
        } else if self.config.is_distilling(epoch) {
            let models = self
                .state
                .cluster_models
                .as_ref()
                .ok_or_else(|| Error::Precondition("distillation started without clusters".into()))?;
            let assignments = taps
                .shallow
                .iter()
                .zip(models)
                .map(|(tap, model)| assign(model, cluster_input(&cache, tap, self.config.cluster_features), &y))
                .collect::<Result<Vec<_>>>()?;
            let b = hybrid_loss(taps, &y, &assignments, &self.config.hybrid_options())?;
            (b.l_ace, b.l_akd, b.l_kl, b.l_hybrid, b.grads)
        } else {
            let (l, g) = ace_loss(taps, &y)?;
            (l, 0.0, 0.0, l, g)
        };

        if !(ace.is_finite() && akd.is_finite() && kl.is_finite() && hybrid.is_finite() && upstream.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch,
                dump: format!(
                    "l_ace={ace} l_akd={akd} l_kl={kl} l_hybrid={hybrid}\nsamples={idx:?}\nlabels={y:?}\nparams_finite={}\ntaps_finite={}",
                    self.state.params.is_finite(),
                    taps.is_finite()
                ),
            });
        }
        let grads = backward_cached(&self.state.params, &cache, &upstream)?;
        self.state.optimizer.update(&mut self.state.params, &grads);
        sums.ace += ace;
        sums.akd += akd;
        sums.kl += kl;
        sums.hybrid += hybrid;
        sums.batches += 1;
        Ok(())
    }

    /// Runs the next epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done;
        if epoch >= self.config.total_epochs {
            return Err(Error::Precondition("training already finished".into()));
        }
        if self.config.clusters_at(epoch) {
            self.recluster(epoch)?;
        }
        let order = self
            .shuffle_root
            .substream("shuffle")
            .substream(&format!("epoch{epoch}"))
            .permutation(self.train.len());
        let mut sums = EpochSums::default();
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            self.train_batch(epoch, b, idx, &mut sums)?;
        }
        let n = sums.batches as f64;
        let val = self.evaluate(&self.state.params, &self.val)?;
        let k_per_tap: Option<Vec<Vec<usize>>> = self
            .state
            .cluster_models
            .as_ref()
            .map(|ms| ms.iter().map(ClusterModel::k_per_class).collect());
        let record = EpochRecord {
            epoch,
            l_ace: sums.ace / n,
            l_akd: sums.akd / n,
            l_kl: sums.kl / n,
            l_hybrid: sums.hybrid / n,
            val_unbiased_acc: val.unbiased_accuracy,
            val_worst_group_acc: val.worst_group_accuracy,
            k_per_class: k_per_tap.as_ref().map(|k| k[0].clone()).unwrap_or_default(),
            k_per_tap: k_per_tap.filter(|k| k.len() > 1),
        };
        let improved = self
            .state
            .best
            .as_ref()
            .is_none_or(|(_, best, _, _)| val.unbiased_accuracy > best.unbiased_accuracy);
        if improved {
            let test = self.evaluate(&self.state.params, &self.test)?;
            self.state.best = Some((epoch, val, test, self.state.params.clone()));
        }
        self.state.records.push(record.clone());
        self.state.epochs_done += 1;
        Ok(record)
    }

    /// Runs the remaining epochs and assembles the run record.
    pub fn finish(mut self) -> Result<RunRecord> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        let params = &self.state.params;
        let train_pred = predict(params, &self.train.x)?;
        let final_train_accuracy = train_pred
            .iter()
            .zip(&self.train.y)
            .filter(|(p, y)| p == y)
            .count() as f64
            / self.train.len() as f64;
        let final_val = self.evaluate(params, &self.val)?;
        let final_test = self.evaluate(params, &self.test)?;
        let (epoch, val, test, best_params) = self.state.best.clone().expect("at least one epoch ran");
        Ok(RunRecord {
            seed: self.config.seed,
            mode: self.config.mode,
            epochs: self.state.records.clone(),
            clustering_events: self.state.clustering_events.clone(),
            final_train_accuracy,
            final_val,
            final_test,
            best: BestEpoch {
                epoch,
                val,
                test,
                params: Some(best_params),
            },
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            final_params: Some(self.state.params.clone()),
            network: Some(self.network.clone()),
            cluster_models: self.state.cluster_models.clone(),
        })
    }
}

fn cluster_input<'c>(cache: &'c ForwardCache, tap: &'c ShallowTap, which: ClusterFeatures) -> &'c Matrix {
    match which {
        ClusterFeatures::Block => cache.block_output(tap.block),
        ClusterFeatures::Aligned => &tap.features,
    }
}

/// Deep-classifier predictions.
pub fn predict(params: &NetworkParams, x: &Matrix) -> Result<Vec<usize>> {
    Ok(forward(params, x)?.deep_logits.argmax_rows())
}

pub fn train(config: &TrainConfig, ds: &BiasedDataset) -> Result<RunRecord> {
    Trainer::new(config, ds)?.finish()
}

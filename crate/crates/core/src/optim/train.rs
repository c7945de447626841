use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, AdamConfig, AdamState};
use super::variant::{apply_variant, VariantFlags};
use crate::dataio::{assemble_batch, windows, DatasetBundle, Normalizer, Split};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::{forecast_split, DEFAULT_MAPE_THRESHOLD};
use crate::graphops::RegionGraph;
use crate::model::{adjacency_from_weights, Mode, ModelConfig, ModelParams, NoiseStream, Session};
use crate::objective::{total_loss, LossReport, DEFAULT_LAMBDA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub latent_dim: usize,
    /// History steps per window.
    pub history: usize,
    pub seed: u64,
    pub variant: VariantFlags,
    pub clip_norm: f64,
    pub mape_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            lambda: DEFAULT_LAMBDA,
            alpha: 3.0,
            latent_dim: 8,
            history: 6,
            seed: 7,
            variant: VariantFlags::default(),
            clip_norm: 5.0,
            mape_threshold: DEFAULT_MAPE_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.history == 0 || self.latent_dim == 0 {
            return Err(Error::Config("batch_size, history and latent_dim must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.variant.check()
    }

    /// Model configuration for data with `cond_dim` condition channels.
    pub fn model_config(&self, cond_dim: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(cond_dim, self.latent_dim, self.alpha);
        cfg.arch = apply_variant(&self.variant)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: Split,
    pub recon_nll: f64,
    pub kl_eps: f64,
    pub kl_z: f64,
    pub pred_l2: f64,
    pub acyclicity: f64,
    pub total: f64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
}

impl LogRecord {
    fn from_loss(epoch: usize, split: Split, l: &LossReport) -> Self {
        LogRecord {
            epoch,
            split,
            recon_nll: l.recon_nll,
            kl_eps: l.kl_eps,
            kl_z: l.kl_z,
            pred_l2: l.pred_l2,
            acyclicity: l.acyclicity,
            total: l.total,
            mae: None,
            rmse: None,
            mape: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters after the last epoch.
    pub final_params: ModelParams,
    /// Parameters of the epoch with the lowest validation MAE.
    pub best_params: ModelParams,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub log: Vec<LogRecord>,
    /// `Ã` after each epoch (empty for variants without a causal graph).
    pub adjacency: Vec<Tensor>,
    pub normalizer: Normalizer,
}

/// Seeds derived from the run seed for the three random streams.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

/// Current `Ã` of a model, if it has a causal graph.
pub fn learned_adjacency(params: &ModelParams) -> Option<Tensor> {
    params
        .layout()
        .causal
        .map(|id| adjacency_from_weights(params.get(id), params.config().alpha))
}

/// Trains from a fresh initialization.
pub fn fit(bundle: &DatasetBundle, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    let model_cfg = config.model_config(bundle.cond_dim())?;
    let params = ModelParams::init(model_cfg, stream_seed(config.seed, 0))?;
    fit_from(bundle, config, params)
}

/// Trains starting from `params`.
pub fn fit_from(bundle: &DatasetBundle, config: &TrainConfig, mut params: ModelParams) -> Result<FitResult> {
    config.validate()?;
    bundle.validate()?;
    if params.config().cond_dim != bundle.cond_dim() {
        return Err(Error::Validation(format!(
            "model expects {} condition channels, data has {}",
            params.config().cond_dim,
            bundle.cond_dim()
        )));
    }
    let graph = RegionGraph::new(bundle.graph.clone())?;
    let normalizer = Normalizer::fit(bundle)?;
    let data = normalizer.normalize(bundle)?;
    let mut train = windows(&bundle.splits, Split::Train, config.history)?;
    if train.is_empty() {
        return Err(Error::Validation("training split has no windows".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 1));
    let mut noise = NoiseStream::new(stream_seed(config.seed, 2));
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        params.tensors(),
    );

    let mut log = Vec::new();
    let mut adjacency = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut best_val_mae = f64::INFINITY;

    for epoch in 1..=config.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossReport::default();
        for (bi, chunk) in train.chunks(config.batch_size).enumerate() {
            let batch = assemble_batch(&data, chunk)?;
            let tape = Tape::new();
            let session = Session::new(&tape, &params, &graph, true)?;
            let step = session
                .rollout(&batch, &mut Mode::Train(&mut noise))
                .and_then(|out| total_loss(&tape, &out, &batch, config.lambda));
            let (root, report) = step.map_err(|e| diverged(epoch, bi, e))?;
            tape.backward(root)?;
            let mut grads: Vec<Tensor> = session
                .vars()
                .iter()
                .map(|&v| tape.grad(v).ok_or_else(|| Error::Tape("missing parameter gradient".into())))
                .collect::<Result<_>>()?;
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite gradient for {}", params.names()[bad]),
                });
            }
            clip_global_norm(&mut grads, config.clip_norm);
            let names = params.names().to_vec();
            adam.step(params.tensors_mut(), &grads, &names)?;
            epoch_loss.add_weighted(&report, chunk.len() as f64 / train.len() as f64);
        }
        log.push(LogRecord::from_loss(epoch, Split::Train, &epoch_loss));

        let val = forecast_split(
            &params,
            &graph,
            bundle,
            &normalizer,
            &data,
            Split::Val,
            config.history,
            config.batch_size,
            config.lambda,
            config.mape_threshold,
        )
        .map_err(|e| diverged(epoch, 0, e))?;
        let mut rec = LogRecord::from_loss(epoch, Split::Val, &val.loss);
        rec.mae = Some(val.metrics.mean_mae);
        rec.rmse = Some(val.metrics.mean_rmse);
        rec.mape = val.metrics.mean_mape;
        log::info!(
            "epoch {epoch}: train total {:.4}, val total {:.4}, val MAE {:.4}",
            epoch_loss.total,
            val.loss.total,
            val.metrics.mean_mae
        );
        log.push(rec);
        if val.metrics.mean_mae < best_val_mae {
            best_val_mae = val.metrics.mean_mae;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(a) = learned_adjacency(&params) {
            adjacency.push(a);
        }
    }

    Ok(FitResult {
        final_params: params,
        best_params,
        best_epoch,
        best_val_mae,
        log,
        adjacency,
        normalizer,
    })
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            epoch,
            batch,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

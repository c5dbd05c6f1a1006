//! The learned pipeline end to end: encode every cloud of a window,
//! self-attend, select, cross-attend, decode poses.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, AttentionWeights, SelectionConfig, CROSS_PREFIX, SELF_PREFIX};
use crate::cloudproc::PointCloud;
use crate::diffnum::{backward, checkpoint, Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::geom3d::{compose, PoseSet, RigidTransform};
use crate::posedecode::{self, DecodedPoses, DecoderConfig, LossWeights, PairMode, PairSelection};

const CHECKPOINT_FORMAT: &str = "mwreg-model-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub self_attention: StageConfig,
    pub cross_attention: StageConfig,
    pub selection: SelectionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub pairs: PairMode,
    /// Largest window the model is trained on; inference may use less.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            self_attention: StageConfig { heads: 4, layers: 4 },
            cross_attention: StageConfig { heads: 4, layers: 4 },
            selection: SelectionConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            pairs: PairMode::Consecutive,
            window: 10,
        }
    }
}

impl ModelConfig {
    /// 64 tokens × 128 channels, 2 heads and one layer per attention stage.
    pub fn toy() -> Self {
        ModelConfig {
            self_attention: StageConfig { heads: 2, layers: 1 },
            cross_attention: StageConfig { heads: 2, layers: 1 },
            ..Self::default()
        }
    }

    pub fn self_attention_config(&self) -> AttentionConfig {
        AttentionConfig::new(self.self_attention.heads, self.self_attention.layers, self.encoder.channels_out)
    }

    pub fn cross_attention_config(&self) -> AttentionConfig {
        AttentionConfig::new(
            self.cross_attention.heads,
            self.cross_attention.layers,
            self.selection.descriptor_dim(self.encoder.channels_out),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.selection.validate(self.encoder.channels_out)?;
        self.self_attention_config().validate()?;
        self.cross_attention_config().validate()?;
        self.loss.validate()?;
        if self.window < 2 {
            return Err(Error::InvalidConfig(format!("window must be at least 2, got {}", self.window)));
        }
        Ok(())
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub poses: DecodedPoses,
    /// `N × dim` per-cloud descriptors before cross-attention.
    pub descriptors: Var,
    pub self_weights: Vec<AttentionWeights>,
    pub cross_weights: AttentionWeights,
}

/// Records the pipeline for one window of preprocessed clouds.
pub fn forward(tape: &mut Tape, params: &ParamStore, cfg: &ModelConfig, clouds: &[PointCloud]) -> Result<ForwardPass> {
    if clouds.len() < 2 {
        return Err(Error::SingleCloud);
    }
    let self_cfg = cfg.self_attention_config();
    let mut rows = Vec::with_capacity(clouds.len());
    let mut self_weights = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        let enc = encoder::encode(tape, params, &cfg.encoder, cloud)?;
        let (x, w) = attention::self_attention(tape, params, &self_cfg, enc.tokens, &enc.mask)?;
        let (_, d) = attention::select_features(tape, x, &enc.mask, &cfg.selection)?;
        rows.push(d);
        self_weights.push(w);
    }
    let descriptors = tape.concat(&rows, 0)?;
    let (crossed, cross_weights) = attention::cross_attention(tape, params, &cfg.cross_attention_config(), descriptors)?;
    let poses = posedecode::decode_poses(tape, params, &cfg.decoder, crossed)?;
    Ok(ForwardPass {
        poses,
        descriptors,
        self_weights,
        cross_weights,
    })
}

/// Records forward pass and loss against `truth` on a fresh tape.
pub fn window_loss(params: &ParamStore, cfg: &ModelConfig, clouds: &[PointCloud], truth: &PoseSet) -> Result<(Tape, Var)> {
    if clouds.len() != truth.len() {
        return Err(Error::LengthMismatch(clouds.len(), truth.len()));
    }
    let mut tape = Tape::new();
    let fp = forward(&mut tape, params, cfg, clouds)?;
    let pairs = PairSelection::from_mode(cfg.pairs, clouds.len())?;
    let loss = posedecode::loss_on_tape(&mut tape, &fp.poses, truth, &pairs, &cfg.loss)?;
    Ok((tape, loss))
}

/// Per-cloud descriptor (the input row of cross-attention) of one cloud.
pub fn cloud_descriptor(params: &ParamStore, cfg: &ModelConfig, cloud: &PointCloud) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = encoder::encode(&mut tape, params, &cfg.encoder, cloud)?;
    let (x, _) = attention::self_attention(&mut tape, params, &cfg.self_attention_config(), enc.tokens, &enc.mask)?;
    let (_, d) = attention::select_features(&mut tape, x, &enc.mask, &cfg.selection)?;
    Ok(tape.value(d).clone())
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&mut params, &config.encoder, &mut rng)?;
        attention::init_params(&mut params, SELF_PREFIX, &config.self_attention_config(), &mut rng)?;
        attention::init_params(&mut params, CROSS_PREFIX, &config.cross_attention_config(), &mut rng)?;
        let dim = config.selection.descriptor_dim(config.encoder.channels_out);
        posedecode::init_params(&mut params, &config.decoder, dim, &mut rng)?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Poses of one window, anchored at its first cloud.
    pub fn predict_window(&self, clouds: &[PointCloud]) -> Result<PoseSet> {
        if clouds.len() == 1 {
            return Ok(PoseSet::identity(1));
        }
        let mut tape = Tape::new();
        let fp = forward(&mut tape, &self.params, &self.config, clouds)?;
        fp.poses.to_pose_set(&tape)
    }

    /// Poses of a whole sequence from windows of `window` clouds that
    /// overlap by one; each window is chained onto the pose of its first
    /// cloud. Windows larger than the trained one are refused.
    pub fn predict_sequence(&self, clouds: &[PointCloud], window: usize) -> Result<PoseSet> {
        if window > self.config.window {
            return Err(Error::WindowTooLarge {
                requested: window,
                trained: self.config.window,
            });
        }
        if window < 2 {
            return Err(Error::InvalidConfig(format!("inference window must be at least 2, got {window}")));
        }
        if clouds.is_empty() {
            return Ok(PoseSet::new(Vec::new()));
        }
        let mut poses = vec![RigidTransform::identity()];
        let mut start = 0;
        while start + 1 < clouds.len() {
            let end = (start + window).min(clouds.len());
            let local = self.predict_window(&clouds[start..end])?;
            let base = poses[start];
            for k in 1..local.len() {
                poses.push(compose(&base, &local[k]));
            }
            start = end - 1;
        }
        Ok(PoseSet::new(poses))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "window": self.config.window,
            "config": self.config,
        });
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        if meta.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        config.validate()?;
        let expected = Model::init(config.clone(), 0)?;
        for (name, t) in expected.params.iter() {
            match params.value(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen"))),
            }
        }
        Ok(Model { config, params })
    }
}

/// A model plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        Trainer {
            model,
            adam: Adam::new(adam),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Forward, backward and one Adam update on a single window; returns the
    /// loss before the update.
    pub fn train_step(&mut self, clouds: &[PointCloud], truth: &PoseSet) -> Result<f64> {
        let window = self.model.config.window;
        if clouds.len() > window {
            return Err(Error::WindowTooLarge {
                requested: clouds.len(),
                trained: window,
            });
        }
        let (tape, loss) = window_loss(&self.model.params, &self.model.config, clouds, truth)?;
        let value = tape.value(loss).item()?;
        backward(&tape, loss, &mut self.model.params)?;
        drop(tape);
        self.adam.step(&mut self.model.params)?;
        Ok(value)
    }
}

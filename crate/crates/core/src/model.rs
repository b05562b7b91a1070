//! Full model: encoders, memory layer, final localization map and classifier.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::spatial_attention_graph;
use crate::autodiff::{Graph, Var};
use crate::encoders::{encode_audio, encode_visual, EncoderConfig, AUDIO_PREFIX, VISUAL_PREFIX};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{substream, STREAM_INIT};
use crate::stm::{
    memory_layer_graph, memory_update, Ablation, LayerParams, LayerVars, MemoryBank,
    MemoryLayerOutput, MemorySlots, Modality, TimestepDiagnostics,
};
use crate::tensor::Tensor;
use crate::training::{classify, fuse};

pub const CLASSIFIER_HIDDEN: &str = "classifier.hidden";
pub const CLASSIFIER_OUT: &str = "classifier.out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub visual: EncoderConfig,
    pub audio: EncoderConfig,
    /// Attention heads `L` per temporal attention.
    pub heads: usize,
    /// Memory capacity `K`.
    pub memory_capacity: usize,
    pub ablation: Ablation,
    /// Event classes plus the background class (index 0).
    pub num_classes: usize,
    /// Store memory entries as constants, so no gradient crosses timesteps.
    pub detach_memory: bool,
    /// Standard deviation of the noise added to identity-initialized projections.
    pub projection_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual: EncoderConfig::visual_default(),
            audio: EncoderConfig::audio_default(),
            heads: 1,
            memory_capacity: 3,
            ablation: Ablation::Full,
            num_classes: 6,
            detach_memory: true,
            projection_init_std: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn joint_dim(&self) -> usize {
        self.visual.joint_dim
    }

    pub fn with_joint_dim(mut self, c: usize) -> Self {
        self.visual.joint_dim = c;
        self.audio.joint_dim = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.audio.validate()?;
        if self.visual.joint_dim != self.audio.joint_dim {
            return Err(Error::Argument(format!(
                "visual joint dim {} differs from audio joint dim {}",
                self.visual.joint_dim, self.audio.joint_dim
            )));
        }
        if self.heads == 0 {
            return Err(Error::Argument("heads must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Argument("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Visual feature-map extents `(h, w)`.
    pub fn visual_extent(&self) -> Result<(usize, usize)> {
        self.visual.output_extent()
    }
}

/// Graph nodes for one timestep.
#[derive(Debug, Clone, Copy)]
pub struct TimestepVars {
    pub x_a: Var,
    pub x_v: Var,
    pub layer: LayerVars,
    /// Final `h×w` localization map.
    pub final_alpha: Var,
    pub fused: Var,
    pub logits: Var,
}

/// Eager result of one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepOutput {
    pub layer: MemoryLayerOutput,
    pub final_alpha: Tensor,
    pub logits: Tensor,
    pub diagnostics: TimestepDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, STREAM_INIT);
        let mut params = ParamStore::new();
        config
            .visual
            .init_params(VISUAL_PREFIX, &mut params, &mut rng)?;
        config
            .audio
            .init_params(AUDIO_PREFIX, &mut params, &mut rng)?;
        let c = config.joint_dim();
        let noise = Normal::new(0.0, config.projection_init_std.max(0.0))
            .map_err(|e| Error::Argument(e.to_string()))?;
        for m in [Modality::Audio, Modality::Visual, Modality::AudioVisual] {
            for l in 0..config.heads {
                let (q, k) = m.head_param_names(l);
                params.insert(q, noisy_identity(c, &noise, &mut rng));
                params.insert(k, noisy_identity(c, &noise, &mut rng));
            }
        }
        let d = 2 * c;
        params.insert(
            format!("{CLASSIFIER_HIDDEN}.weight"),
            he_matrix(d, d, &mut rng)?,
        );
        params.insert(format!("{CLASSIFIER_HIDDEN}.bias"), Tensor::zeros(&[d]));
        params.insert(
            format!("{CLASSIFIER_OUT}.weight"),
            he_matrix(d, config.num_classes, &mut rng)?,
        );
        params.insert(
            format!("{CLASSIFIER_OUT}.bias"),
            Tensor::zeros(&[config.num_classes]),
        );
        Ok(Self { config, params })
    }

    /// Sets every classifier weight and bias to zero.
    pub fn zero_classifier(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("classifier."))
            .cloned()
            .collect();
        for n in names {
            let shape = self.params.get(&n).expect("listed").shape().to_vec();
            self.params.insert(n, Tensor::zeros(&shape));
        }
    }

    pub fn forward_timestep(
        &self,
        g: &mut Graph,
        bound: &Bound,
        frame: Var,
        audio: Var,
        slots: &MemorySlots,
    ) -> Result<TimestepVars> {
        let x_v = encode_visual(&self.config.visual, g, bound, frame)?;
        let x_a = encode_audio(&self.config.audio, g, bound, audio)?;
        let lp = LayerParams::bind(bound, self.config.heads)?;
        let layer = memory_layer_graph(g, x_a, x_v, slots, &lp, self.config.ablation)?;
        let final_alpha = spatial_attention_graph(g, layer.x_a_dot, layer.x_av_ddot)?.alpha;
        let fused = fuse(g, layer.x_av_ddot, layer.x_a_dot)?;
        let logits = classify(g, bound, fused)?;
        Ok(TimestepVars {
            x_a,
            x_v,
            layer,
            final_alpha,
            fused,
            logits,
        })
    }

    /// Runs a whole clip on one graph. The bank starts empty; with
    /// `detach_memory` its entries are re-inserted as constants.
    pub fn forward_clip(
        &self,
        g: &mut Graph,
        bound: &Bound,
        frames: &[Tensor],
        audio: &[Tensor],
    ) -> Result<Vec<TimestepVars>> {
        check_alignment(frames, audio)?;
        let k = self.config.memory_capacity;
        let mut history: Vec<(Var, Var, Var)> = Vec::new();
        let mut out = Vec::with_capacity(frames.len());
        for (f, a) in frames.iter().zip(audio) {
            let fv = g.constant(f.clone());
            let av = g.constant(a.clone());
            let start = history.len().saturating_sub(k);
            let mut slots = MemorySlots::default();
            for &(ma, mv, mav) in &history[start..] {
                let (ma, mv, mav) = if self.config.detach_memory {
                    (
                        g.constant(g.value(ma).clone()),
                        g.constant(g.value(mv).clone()),
                        g.constant(g.value(mav).clone()),
                    )
                } else {
                    (ma, mv, mav)
                };
                slots.audio.push(ma);
                slots.visual.push(mv);
                slots.av.push(mav);
            }
            let tv = self.forward_timestep(g, bound, fv, av, &slots)?;
            if k > 0 {
                history.push((tv.x_a, tv.x_v, tv.layer.x_av_dot));
            }
            out.push(tv);
        }
        Ok(out)
    }

    /// Mean per-timestep cross-entropy against `labels`.
    pub fn clip_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        frames: &[Tensor],
        audio: &[Tensor],
        labels: &[usize],
    ) -> Result<(Var, Vec<TimestepVars>)> {
        if labels.len() != frames.len() {
            return Err(Error::Alignment(format!(
                "{} labels for {} timesteps",
                labels.len(),
                frames.len()
            )));
        }
        let steps = self.forward_clip(g, bound, frames, audio)?;
        let mut total: Option<Var> = None;
        for (tv, &y) in steps.iter().zip(labels) {
            let l = g.cross_entropy(tv.logits, y)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Argument("empty clip".into()))?;
        let loss = g.scale(total, 1.0 / steps.len() as f64)?;
        Ok((loss, steps))
    }

    /// Inference over a clip with an explicit [`MemoryBank`], one graph per
    /// timestep.
    pub fn process_video(
        &self,
        frames: &[Tensor],
        audio: &[Tensor],
    ) -> Result<Vec<TimestepOutput>> {
        check_alignment(frames, audio)?;
        let mut bank = MemoryBank::new(self.config.memory_capacity);
        let mut out = Vec::with_capacity(frames.len());
        for (t, (f, a)) in frames.iter().zip(audio).enumerate() {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let fv = g.constant(f.clone());
            let av = g.constant(a.clone());
            let slots = bank.slots(&mut g);
            let tv = self.forward_timestep(&mut g, &bound, fv, av, &slots)?;
            let layer = MemoryLayerOutput::from_graph(&g, &tv.layer);
            let final_alpha = g.value(tv.final_alpha).clone();
            let logits = g.value(tv.logits).clone();
            bank = memory_update(bank, g.value(tv.x_a), g.value(tv.x_v), &layer.x_av_dot)?;
            let diagnostics = TimestepDiagnostics::new(t, &layer, &final_alpha);
            out.push(TimestepOutput {
                layer,
                final_alpha,
                logits,
                diagnostics,
            });
        }
        Ok(out)
    }

    /// Writes `checkpoint.bin` and `model_config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join(CHECKPOINT_FILE))?;
        std::fs::write(
            dir.join(MODEL_CONFIG_FILE),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    /// Loads a checkpoint file; the model config is read from
    /// `model_config.json` beside it.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
        let config: ModelConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MODEL_CONFIG_FILE))?)?;
        config.validate()?;
        let params = ParamStore::load(checkpoint)?;
        let reference = Model::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint lacks {name}"))),
            }
        }
        Ok(Self { config, params })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";

fn check_alignment(frames: &[Tensor], audio: &[Tensor]) -> Result<()> {
    if frames.len() != audio.len() {
        return Err(Error::Alignment(format!(
            "{} frames but {} audio segments",
            frames.len(),
            audio.len()
        )));
    }
    if frames.is_empty() {
        return Err(Error::Alignment("clip has no timesteps".into()));
    }
    Ok(())
}

fn noisy_identity<R: Rng>(c: usize, noise: &Normal<f64>, rng: &mut R) -> Tensor {
    let mut t = Tensor::identity(c);
    for v in t.data_mut() {
        *v += noise.sample(rng);
    }
    t
}

fn he_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let normal =
        Normal::new(0.0, (2.0 / rows as f64).sqrt()).map_err(|e| Error::Argument(e.to_string()))?;
    Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
}

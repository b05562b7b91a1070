//! The spatio-temporal memory layer and the memory bank feeding it.
//!
//! Per timestep the layer runs uni-modal temporal attention on the audio and
//! visual maps, cross-modal spatial attention on the propagated pair, and
//! cross-modal temporal attention on the resulting audio-visual map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    spatial_attention_graph, temporal_attention_graph, HeadProjection, HeadVars,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Which temporal attentions are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Uni-modal and cross-modal memory.
    Full,
    /// Uni-modal memory only; the cross-modal temporal step is skipped.
    UniOnly,
    /// No temporal attention at all.
    NoTemporal,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::UniOnly, Ablation::NoTemporal];

    pub fn unimodal_memory(self) -> bool {
        matches!(self, Ablation::Full | Ablation::UniOnly)
    }

    pub fn crossmodal_memory(self) -> bool {
        matches!(self, Ablation::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::UniOnly => "uni",
            Ablation::NoTemporal => "none",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "c+u" => Ok(Ablation::Full),
            "uni" | "uni_only" | "u" => Ok(Ablation::UniOnly),
            "none" | "no_temporal" => Ok(Ablation::NoTemporal),
            other => Err(Error::Argument(format!("unknown ablation {other:?}"))),
        }
    }
}

/// The three ablation variants, keyed by name.
pub fn ablation_configs() -> [(&'static str, Ablation); 3] {
    [
        ("full", Ablation::Full),
        ("uni_only", Ablation::UniOnly),
        ("no_temporal", Ablation::NoTemporal),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
    AudioVisual,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Visual => "v",
            Modality::AudioVisual => "av",
        }
    }

    pub fn head_param_names(self, head: usize) -> (String, String) {
        let base = format!("temporal.{}.head{head}", self.tag());
        (format!("{base}.query"), format!("{base}.key"))
    }
}

/// Head projections for the three modalities, bound to a graph.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub audio: Vec<HeadVars>,
    pub visual: Vec<HeadVars>,
    pub av: Vec<HeadVars>,
}

impl LayerParams {
    pub fn bind(bound: &Bound, heads: usize) -> Result<Self> {
        let get = |m: Modality| -> Result<Vec<HeadVars>> {
            (0..heads)
                .map(|l| {
                    let (q, k) = m.head_param_names(l);
                    Ok(HeadVars {
                        query: bound.get(&q)?,
                        key: bound.get(&k)?,
                    })
                })
                .collect()
        };
        Ok(Self {
            audio: get(Modality::Audio)?,
            visual: get(Modality::Visual)?,
            av: get(Modality::AudioVisual)?,
        })
    }
}

/// Eager head projections for the three modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct StmParams {
    pub audio: Vec<HeadProjection>,
    pub visual: Vec<HeadProjection>,
    pub av: Vec<HeadProjection>,
}

impl StmParams {
    pub fn identity(c: usize, heads: usize) -> Self {
        let h = vec![HeadProjection::identity(c); heads];
        Self {
            audio: h.clone(),
            visual: h.clone(),
            av: h,
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        for (m, heads) in [
            (Modality::Audio, &self.audio),
            (Modality::Visual, &self.visual),
            (Modality::AudioVisual, &self.av),
        ] {
            for (l, h) in heads.iter().enumerate() {
                let (q, k) = m.head_param_names(l);
                store.insert(q, h.query.clone());
                store.insert(k, h.key.clone());
            }
        }
    }

    pub fn heads(&self) -> usize {
        self.audio.len()
    }
}

/// Memory entries visible to one timestep, already placed on a graph.
#[derive(Debug, Clone, Default)]
pub struct MemorySlots {
    pub audio: Vec<Var>,
    pub visual: Vec<Var>,
    pub av: Vec<Var>,
}

impl MemorySlots {
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }
}

/// Graph nodes produced by one memory-layer step.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub x_a_dot: Var,
    pub x_v_dot: Var,
    pub alpha: Var,
    pub x_av_dot: Var,
    pub x_av_ddot: Var,
    pub beta_a: Option<Var>,
    pub beta_v: Option<Var>,
    pub beta_av: Option<Var>,
}

pub fn memory_layer_graph(
    g: &mut Graph,
    x_a: Var,
    x_v: Var,
    slots: &MemorySlots,
    params: &LayerParams,
    ablation: Ablation,
) -> Result<LayerVars> {
    if slots.visual.len() != slots.audio.len() || slots.av.len() != slots.audio.len() {
        return Err(Error::Invariant(format!(
            "memory lists differ in length: audio {}, visual {}, av {}",
            slots.audio.len(),
            slots.visual.len(),
            slots.av.len()
        )));
    }
    let (x_a_dot, beta_a, x_v_dot, beta_v) = if ablation.unimodal_memory() {
        let ta = temporal_attention_graph(g, x_a, &slots.audio, &params.audio)?;
        let tv = temporal_attention_graph(g, x_v, &slots.visual, &params.visual)?;
        (ta.x_dot, Some(ta.beta), tv.x_dot, Some(tv.beta))
    } else {
        (x_a, None, x_v, None)
    };
    let spatial = spatial_attention_graph(g, x_a_dot, x_v_dot)?;
    let (x_av_ddot, beta_av) = if ablation.crossmodal_memory() {
        let tav = temporal_attention_graph(g, spatial.x_av, &slots.av, &params.av)?;
        (tav.x_dot, Some(tav.beta))
    } else {
        (spatial.x_av, None)
    };
    Ok(LayerVars {
        x_a_dot,
        x_v_dot,
        alpha: spatial.alpha,
        x_av_dot: spatial.x_av,
        x_av_ddot,
        beta_a,
        beta_v,
        beta_av,
    })
}

/// Bounded FIFO of past audio, visual and audio-visual feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    audio: Vec<Tensor>,
    visual: Vec<Tensor>,
    av: Vec<Tensor>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            audio: Vec::new(),
            visual: Vec::new(),
            av: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    /// Oldest entry first.
    pub fn audio(&self) -> &[Tensor] {
        &self.audio
    }

    pub fn visual(&self) -> &[Tensor] {
        &self.visual
    }

    pub fn av(&self) -> &[Tensor] {
        &self.av
    }

    /// Builds a bank from explicit lists, checking its invariants.
    pub fn from_entries(
        capacity: usize,
        audio: Vec<Tensor>,
        visual: Vec<Tensor>,
        av: Vec<Tensor>,
    ) -> Result<Self> {
        let bank = Self {
            capacity,
            audio,
            visual,
            av,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.audio.len();
        if self.visual.len() != n || self.av.len() != n {
            return Err(Error::Invariant(format!(
                "memory lists differ in length: audio {n}, visual {}, av {}",
                self.visual.len(),
                self.av.len()
            )));
        }
        if n > self.capacity {
            return Err(Error::Invariant(format!(
                "{n} entries exceed capacity {}",
                self.capacity
            )));
        }
        for (name, list) in [
            ("audio", &self.audio),
            ("visual", &self.visual),
            ("av", &self.av),
        ] {
            if let Some(first) = list.first() {
                if list.iter().any(|t| t.shape() != first.shape()) {
                    return Err(Error::Invariant(format!("{name} memory mixes shapes")));
                }
            }
        }
        Ok(())
    }

    /// Appends a new entry triple, evicting the oldest beyond capacity.
    pub fn push(&mut self, x_a: Tensor, x_v: Tensor, x_av_dot: Tensor) -> Result<()> {
        for (name, list, t) in [
            ("audio", &self.audio, &x_a),
            ("visual", &self.visual, &x_v),
            ("av", &self.av, &x_av_dot),
        ] {
            if let Some(first) = list.first() {
                if first.shape() != t.shape() {
                    return Err(Error::dim(format!(
                        "{name} memory holds {:?}, pushed {:?}",
                        first.shape(),
                        t.shape()
                    )));
                }
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        self.audio.push(x_a);
        self.visual.push(x_v);
        self.av.push(x_av_dot);
        if self.audio.len() > self.capacity {
            self.audio.remove(0);
            self.visual.remove(0);
            self.av.remove(0);
        }
        Ok(())
    }

    /// Places the entries on `g` as constants.
    pub fn slots(&self, g: &mut Graph) -> MemorySlots {
        MemorySlots {
            audio: self.audio.iter().map(|t| g.constant(t.clone())).collect(),
            visual: self.visual.iter().map(|t| g.constant(t.clone())).collect(),
            av: self.av.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.audio.clear();
        self.visual.clear();
        self.av.clear();
    }
}

/// Adds `(x_a, x_v, x_av_dot)` as the newest entry. Stored tensors are plain
/// values, so no gradient reaches earlier timesteps through the bank.
pub fn memory_update(
    mut bank: MemoryBank,
    x_a: &Tensor,
    x_v: &Tensor,
    x_av_dot: &Tensor,
) -> Result<MemoryBank> {
    bank.push(x_a.clone(), x_v.clone(), x_av_dot.clone())?;
    Ok(bank)
}

/// Eager result of one memory-layer step.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayerOutput {
    pub x_av_ddot: Tensor,
    pub x_a_dot: Tensor,
    pub x_v_dot: Tensor,
    pub x_av_dot: Tensor,
    /// Spatial attention on the propagated uni-modal maps.
    pub alpha: Tensor,
    /// Temporal weights; `[1.0]` when the corresponding attention is inactive.
    pub beta_a: Tensor,
    pub beta_v: Tensor,
    pub beta_av: Tensor,
}

impl MemoryLayerOutput {
    pub(crate) fn from_graph(g: &Graph, v: &LayerVars) -> Self {
        let beta =
            |b: Option<Var>| b.map_or_else(|| Tensor::from_vec(vec![1.0]), |b| g.value(b).clone());
        Self {
            x_av_ddot: g.value(v.x_av_ddot).clone(),
            x_a_dot: g.value(v.x_a_dot).clone(),
            x_v_dot: g.value(v.x_v_dot).clone(),
            x_av_dot: g.value(v.x_av_dot).clone(),
            alpha: g.value(v.alpha).clone(),
            beta_a: beta(v.beta_a),
            beta_v: beta(v.beta_v),
            beta_av: beta(v.beta_av),
        }
    }
}

pub fn memory_layer_forward(
    x_a: &Tensor,
    x_v: &Tensor,
    bank: &MemoryBank,
    params: &StmParams,
    ablation: Ablation,
) -> Result<MemoryLayerOutput> {
    bank.validate()?;
    let mut g = Graph::new();
    let a = g.constant(x_a.clone());
    let v = g.constant(x_v.clone());
    let slots = bank.slots(&mut g);
    let mut consts = |heads: &[HeadProjection]| -> Vec<HeadVars> {
        heads
            .iter()
            .map(|h| HeadVars {
                query: g.constant(h.query.clone()),
                key: g.constant(h.key.clone()),
            })
            .collect()
    };
    let lp = LayerParams {
        audio: consts(&params.audio),
        visual: consts(&params.visual),
        av: consts(&params.av),
    };
    let out = memory_layer_graph(&mut g, a, v, &slots, &lp, ablation)?;
    Ok(MemoryLayerOutput::from_graph(&g, &out))
}

/// Per-timestep debugging record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepDiagnostics {
    pub t: usize,
    pub beta_a: Vec<f64>,
    pub beta_v: Vec<f64>,
    pub beta_av: Vec<f64>,
    pub alpha_sum: f64,
    pub alpha_max: f64,
    pub alpha_argmax: usize,
    pub final_alpha_sum: f64,
    pub final_alpha_argmax: usize,
}

impl TimestepDiagnostics {
    pub fn new(t: usize, layer: &MemoryLayerOutput, final_alpha: &Tensor) -> Self {
        let argmax = |x: &Tensor| {
            x.data()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
        };
        let (alpha_argmax, alpha_max) = argmax(&layer.alpha);
        Self {
            t,
            beta_a: layer.beta_a.data().to_vec(),
            beta_v: layer.beta_v.data().to_vec(),
            beta_av: layer.beta_av.data().to_vec(),
            alpha_sum: layer.alpha.sum(),
            alpha_max,
            alpha_argmax,
            final_alpha_sum: final_alpha.sum(),
            final_alpha_argmax: argmax(final_alpha).0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|i| (i as f64 * 0.61 + phase).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn push_and_evict() {
        let mut bank = MemoryBank::new(4);
        let mut pushed = Vec::new();
        for i in 0..5 {
            let av = map(&[2, 2, 2], i as f64);
            pushed.push(av.clone());
            bank = memory_update(bank, &map(&[2, 2, 2], 0.0), &map(&[3, 3, 2], 0.0), &av).unwrap();
            if i == 0 {
                assert_eq!(bank.len(), 1);
            }
        }
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.av()[0], pushed[1]);
        assert_eq!(bank.av()[3], pushed[4]);
    }

    #[test]
    fn push_rejects_shape_change() {
        let mut bank = MemoryBank::new(2);
        bank.push(
            map(&[2, 2, 2], 0.0),
            map(&[2, 2, 2], 0.0),
            map(&[2, 2, 2], 0.0),
        )
        .unwrap();
        let err = bank
            .push(
                map(&[2, 3, 2], 0.0),
                map(&[2, 2, 2], 0.0),
                map(&[2, 2, 2], 0.0),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn inconsistent_bank_is_invariant_error() {
        let err = MemoryBank::from_entries(
            3,
            vec![map(&[2, 2, 2], 0.0)],
            vec![],
            vec![map(&[2, 2, 2], 0.0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn empty_bank_reduces_to_spatial_attention() {
        let xa = map(&[2, 2, 3], 0.2);
        let xv = map(&[3, 3, 3], 1.1);
        let out = memory_layer_forward(
            &xa,
            &xv,
            &MemoryBank::new(3),
            &StmParams::identity(3, 2),
            Ablation::Full,
        )
        .unwrap();
        assert_eq!(out.x_a_dot, xa);
        assert_eq!(out.x_v_dot, xv);
        assert_eq!(out.x_av_ddot, out.x_av_dot);
        let (alpha, x_av) = crate::attention::spatial_attention(&xa, &xv).unwrap();
        assert_eq!(out.alpha, alpha.weights);
        assert_eq!(out.x_av_dot, x_av);
    }

    #[test]
    fn bank_of_copies_matches_empty_bank() {
        let xa = map(&[2, 2, 3], 0.2);
        let xv = map(&[3, 3, 3], 1.1);
        let params = StmParams::identity(3, 1);
        let empty =
            memory_layer_forward(&xa, &xv, &MemoryBank::new(2), &params, Ablation::Full).unwrap();
        let mut bank = MemoryBank::new(2);
        for _ in 0..2 {
            bank.push(xa.clone(), xv.clone(), empty.x_av_dot.clone())
                .unwrap();
        }
        let full = memory_layer_forward(&xa, &xv, &bank, &params, Ablation::Full).unwrap();
        assert!(full.x_av_ddot.max_abs_diff(&empty.x_av_ddot) < 1e-12);
        assert!(full.x_a_dot.max_abs_diff(&empty.x_a_dot) < 1e-12);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("full".parse::<Ablation>().unwrap(), Ablation::Full);
        assert_eq!("uni".parse::<Ablation>().unwrap(), Ablation::UniOnly);
        assert_eq!("none".parse::<Ablation>().unwrap(), Ablation::NoTemporal);
        assert!("all".parse::<Ablation>().is_err());
    }

    #[test]
    fn uni_only_differs_only_at_crossmodal_stage() {
        let xa = map(&[2, 2, 2], 0.4);
        let xv = map(&[2, 2, 2], 2.0);
        let mut bank = MemoryBank::new(2);
        bank.push(
            map(&[2, 2, 2], 3.0),
            map(&[2, 2, 2], 5.0),
            map(&[2, 2, 2], 7.0),
        )
        .unwrap();
        let p = StmParams::identity(2, 1);
        let full = memory_layer_forward(&xa, &xv, &bank, &p, Ablation::Full).unwrap();
        let uni = memory_layer_forward(&xa, &xv, &bank, &p, Ablation::UniOnly).unwrap();
        assert_eq!(full.x_a_dot, uni.x_a_dot);
        assert_eq!(full.x_v_dot, uni.x_v_dot);
        assert_eq!(full.x_av_dot, uni.x_av_dot);
        assert_ne!(full.x_av_ddot, uni.x_av_ddot);
        assert_eq!(uni.x_av_ddot, uni.x_av_dot);
    }

    #[test]
    fn no_temporal_ignores_bank() {
        let xa = map(&[2, 2, 2], 0.4);
        let xv = map(&[2, 2, 2], 2.0);
        let mut bank = MemoryBank::new(2);
        bank.push(
            map(&[2, 2, 2], 3.0),
            map(&[2, 2, 2], 5.0),
            map(&[2, 2, 2], 7.0),
        )
        .unwrap();
        let p = StmParams::identity(2, 1);
        let with = memory_layer_forward(&xa, &xv, &bank, &p, Ablation::NoTemporal).unwrap();
        let without =
            memory_layer_forward(&xa, &xv, &MemoryBank::new(0), &p, Ablation::NoTemporal).unwrap();
        assert_eq!(with, without);
    }
}

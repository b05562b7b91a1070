//! Small convolutional encoders projecting visual frames and audio grids
//! into the shared `C`-dimensional joint space.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_extent, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            out_channels,
        }
    }
}

/// Geometry of one encoder: valid convolutions with ReLU, then a 1×1
/// projection to `joint_dim` channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub joint_dim: usize,
    pub convs: Vec<ConvSpec>,
    /// Apply ReLU after the projection, making features non-negative.
    #[serde(default)]
    pub final_relu: bool,
}

impl EncoderConfig {
    /// 64×64×3 frames down to an 8×8 grid.
    pub fn visual_default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            in_channels: 3,
            joint_dim: 16,
            convs: vec![ConvSpec::new(4, 4, 16), ConvSpec::new(2, 2, 16)],
            final_relu: true,
        }
    }

    /// 32×32×1 spectrogram grids down to 4×4.
    pub fn audio_default() -> Self {
        Self {
            input_height: 32,
            input_width: 32,
            in_channels: 1,
            joint_dim: 16,
            convs: vec![ConvSpec::new(4, 4, 16), ConvSpec::new(2, 2, 16)],
            final_relu: true,
        }
    }

    /// Spatial extents of the output feature map.
    pub fn output_extent(&self) -> Result<(usize, usize)> {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for (i, c) in self.convs.iter().enumerate() {
            match (
                conv_out_extent(h, c.kernel, c.stride),
                conv_out_extent(w, c.kernel, c.stride),
            ) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(Error::Argument(format!(
                        "conv layer {i} (kernel {}, stride {}) does not fit {h}x{w}",
                        c.kernel, c.stride
                    )))
                }
            }
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_dim == 0 || self.in_channels == 0 {
            return Err(Error::Argument(
                "encoder channel counts must be positive".into(),
            ));
        }
        if self.convs.iter().any(|c| c.out_channels == 0) {
            return Err(Error::Argument(
                "conv layer with zero output channels".into(),
            ));
        }
        let (h, w) = self.output_extent()?;
        if h < 2 || w < 2 {
            return Err(Error::Argument(format!(
                "encoder output {h}x{w} is smaller than 2x2"
            )));
        }
        Ok(())
    }

    fn layer_channels(&self) -> Vec<(usize, usize, usize)> {
        let mut cin = self.in_channels;
        let mut out = Vec::new();
        for c in &self.convs {
            out.push((c.kernel, cin, c.out_channels));
            cin = c.out_channels;
        }
        out.push((1, cin, self.joint_dim));
        out
    }

    fn layer_names(prefix: &str, n_convs: usize) -> Vec<String> {
        (0..n_convs)
            .map(|i| format!("{prefix}.conv{i}"))
            .chain(std::iter::once(format!("{prefix}.proj")))
            .collect()
    }

    /// He-initialized weights and zero biases, registered under `prefix`.
    pub fn init_params<R: Rng>(
        &self,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        let names = Self::layer_names(prefix, self.convs.len());
        for (name, (k, cin, cout)) in names.iter().zip(self.layer_channels()) {
            let fan_in = (k * k * cin) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                .map_err(|e| Error::Argument(e.to_string()))?;
            let w: Vec<f64> = (0..k * k * cin * cout)
                .map(|_| normal.sample(rng))
                .collect();
            store.insert(
                format!("{name}.weight"),
                Tensor::new(&[k, k, cin, cout], w)?,
            );
            store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
        Ok(())
    }

    /// Encodes an `H×W×ch` input into an `h×w×C` feature map.
    pub fn encode(&self, g: &mut Graph, params: &Bound, prefix: &str, input: Var) -> Result<Var> {
        let s = g.shape(input);
        if s != [self.input_height, self.input_width, self.in_channels] {
            return Err(Error::Shape(format!(
                "{prefix} encoder expects {}x{}x{}, got {s:?}",
                self.input_height, self.input_width, self.in_channels
            )));
        }
        let names = Self::layer_names(prefix, self.convs.len());
        let mut x = input;
        for (name, spec) in names.iter().zip(&self.convs) {
            let w = params.get(&format!("{name}.weight"))?;
            let b = params.get(&format!("{name}.bias"))?;
            x = g.conv2d(x, w, b, spec.stride)?;
            x = g.relu(x)?;
        }
        let proj = names.last().expect("projection layer");
        let w = params.get(&format!("{proj}.weight"))?;
        let b = params.get(&format!("{proj}.bias"))?;
        x = g.conv2d(x, w, b, 1)?;
        if self.final_relu {
            x = g.relu(x)?;
        }
        Ok(x)
    }
}

pub const VISUAL_PREFIX: &str = "visual";
pub const AUDIO_PREFIX: &str = "audio";

/// Visual encoder entry point.
pub fn encode_visual(
    cfg: &EncoderConfig,
    g: &mut Graph,
    params: &Bound,
    frame: Var,
) -> Result<Var> {
    cfg.encode(g, params, VISUAL_PREFIX, frame)
}

/// Audio encoder entry point.
pub fn encode_audio(cfg: &EncoderConfig, g: &mut Graph, params: &Bound, spec: Var) -> Result<Var> {
    cfg.encode(g, params, AUDIO_PREFIX, spec)
}

//! Cross-modal spatial attention and multi-modal temporal attention.
//!
//! Spatial attention scores every visual position by the dot product of its
//! feature vector with the mean-pooled audio vector and normalizes over all
//! positions. Temporal attention compares the pooled current map against the
//! pooled memory maps through per-head query/key projections, normalizes over
//! the current step plus the `K` memory entries, averages the per-head
//! distributions, and propagates memory as the weighted sum of the raw maps.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial attention output on a graph.
#[derive(Debug, Clone, Copy)]
pub struct SpatialVars {
    /// `h×w` weights summing to one.
    pub alpha: Var,
    /// `h×w×C` attention-weighted visual features.
    pub x_av: Var,
}

/// One head's query and key projections, each `C×C`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalVars {
    /// `K+1` weights: the current step first, then memory entries in order.
    pub beta: Var,
    pub x_dot: Var,
}

pub fn spatial_attention_graph(g: &mut Graph, x_a: Var, x_v: Var) -> Result<SpatialVars> {
    let (sa, sv) = (g.shape(x_a).to_vec(), g.shape(x_v).to_vec());
    if sa.len() != 3 || sv.len() != 3 || sa[2] != sv[2] {
        return Err(Error::dim(format!(
            "spatial attention of audio {sa:?} and visual {sv:?}"
        )));
    }
    let (h, w, c) = (sv[0], sv[1], sv[2]);
    let pooled = g.global_avg_pool(x_a)?;
    let pooled = g.reshape(pooled, &[c, 1])?;
    let flat = g.reshape(x_v, &[h * w, c])?;
    let logits = g.matmul(flat, pooled)?;
    let alpha = g.softmax(logits, 0)?;
    let alpha = g.reshape(alpha, &[h, w])?;
    let x_av = g.scale_channels(x_v, alpha)?;
    Ok(SpatialVars { alpha, x_av })
}

/// Temporal attention of `x_t` over `memory`. With no memory the current
/// map is returned unchanged and `beta` is the constant `[1.0]`.
pub fn temporal_attention_graph(
    g: &mut Graph,
    x_t: Var,
    memory: &[Var],
    heads: &[HeadVars],
) -> Result<TemporalVars> {
    let shape = g.shape(x_t).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("temporal attention query {shape:?}")));
    }
    if let Some(m) = memory.iter().find(|&&m| g.shape(m) != shape.as_slice()) {
        return Err(Error::dim(format!(
            "memory entry {:?} does not match query {shape:?}",
            g.shape(*m)
        )));
    }
    if memory.is_empty() {
        let beta = g.constant(Tensor::from_vec(vec![1.0]));
        return Ok(TemporalVars { beta, x_dot: x_t });
    }
    if heads.is_empty() {
        return Err(Error::Argument(
            "temporal attention needs at least one head".into(),
        ));
    }
    let c = shape[2];
    for h in heads {
        for &p in &[h.query, h.key] {
            if g.shape(p) != [c, c] {
                return Err(Error::dim(format!(
                    "projection {:?} for joint dimension {c}",
                    g.shape(p)
                )));
            }
        }
    }
    let candidates: Vec<Var> = std::iter::once(x_t).chain(memory.iter().copied()).collect();
    let n = candidates.len();

    let query = g.global_avg_pool(x_t)?;
    let query = g.reshape(query, &[1, c])?;
    let mut pooled = Vec::with_capacity(n);
    for &m in &candidates {
        let p = g.global_avg_pool(m)?;
        pooled.push(g.reshape(p, &[1, c])?);
    }
    let keys = g.concat(&pooled, 0)?;

    let scale = 1.0 / (c as f64).sqrt();
    let mut total: Option<Var> = None;
    for h in heads {
        let q = g.matmul(query, h.query)?;
        let k = g.matmul(keys, h.key)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, scale)?;
        let attn = g.softmax(logits, 1)?;
        total = Some(match total {
            None => attn,
            Some(t) => g.add(t, attn)?,
        });
    }
    let summed = total.expect("at least one head");
    let beta = g.scale(summed, 1.0 / heads.len() as f64)?;

    let numel: usize = shape.iter().product();
    let mut rows = Vec::with_capacity(n);
    for &m in &candidates {
        rows.push(g.reshape(m, &[1, numel])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let mixed = g.matmul(beta, stacked)?;
    let x_dot = g.reshape(mixed, &shape)?;
    let beta = g.reshape(beta, &[n])?;
    Ok(TemporalVars { beta, x_dot })
}

/// Eager spatial attention result.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttention {
    pub weights: Tensor,
}

/// Eager temporal attention result.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttention {
    /// Head-averaged weights over the current step and each memory entry.
    pub weights: Tensor,
}

/// Projection pair for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub query: Tensor,
    pub key: Tensor,
}

impl HeadProjection {
    pub fn identity(c: usize) -> Self {
        Self {
            query: Tensor::identity(c),
            key: Tensor::identity(c),
        }
    }
}

pub fn spatial_attention(x_a: &Tensor, x_v: &Tensor) -> Result<(SpatialAttention, Tensor)> {
    let mut g = Graph::new();
    let a = g.constant(x_a.clone());
    let v = g.constant(x_v.clone());
    let out = spatial_attention_graph(&mut g, a, v)?;
    Ok((
        SpatialAttention {
            weights: g.value(out.alpha).clone(),
        },
        g.value(out.x_av).clone(),
    ))
}

pub fn temporal_attention(
    x_t: &Tensor,
    memory: &[Tensor],
    heads: &[HeadProjection],
) -> Result<(TemporalAttention, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let mem: Vec<Var> = memory.iter().map(|m| g.constant(m.clone())).collect();
    let hv: Vec<HeadVars> = heads
        .iter()
        .map(|h| HeadVars {
            query: g.constant(h.query.clone()),
            key: g.constant(h.key.clone()),
        })
        .collect();
    let out = temporal_attention_graph(&mut g, x, &mem, &hv)?;
    Ok((
        TemporalAttention {
            weights: g.value(out.beta).clone(),
        },
        g.value(out.x_dot).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(&[h, w, c], (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn constant_visual_map_gives_uniform_alpha() {
        let xv = Tensor::full(&[3, 4, 2], 0.8);
        let xa = map(2, 2, 2, |i| i as f64 * 0.3);
        let (alpha, _) = spatial_attention(&xa, &xv).unwrap();
        for &a in alpha.weights.data() {
            assert!((a - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        let xv = Tensor::new(&[2, 2, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let xa = Tensor::full(&[2, 2, 1], 1.0);
        let (alpha, _) = spatial_attention(&xa, &xv).unwrap();
        let e = std::f64::consts::E;
        let z = e + 3.0;
        let want = [e / z, 1.0 / z, 1.0 / z, 1.0 / z];
        for (a, w) in alpha.weights.data().iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
        // The commonly quoted four-digit values are rounded loosely.
        assert!((want[0] - 0.4755).abs() < 5e-4 && (want[1] - 0.1748).abs() < 5e-4);
    }

    #[test]
    fn convex_combination_bound() {
        let xv = map(3, 3, 2, |i| ((i * 7) % 5) as f64 * 0.4);
        let xa = map(2, 2, 2, |i| (i as f64 * 0.9).sin());
        let (_, x_av) = spatial_attention(&xa, &xv).unwrap();
        let best = (0..9)
            .map(|p| xv.data()[p * 2] + xv.data()[p * 2 + 1])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(x_av.sum() <= best + 1e-12);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let xv = Tensor::zeros(&[2, 2, 3]);
        let xa = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            spatial_attention(&xa, &xv),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn empty_memory_is_identity() {
        let x = map(2, 3, 2, |i| i as f64 - 2.5);
        let (beta, x_dot) = temporal_attention(&x, &[], &[HeadProjection::identity(2)]).unwrap();
        assert_eq!(beta.weights.data(), &[1.0]);
        assert_eq!(x_dot, x);
    }

    #[test]
    fn identical_memory_splits_evenly() {
        let x = map(2, 2, 3, |i| (i as f64).cos());
        let (beta, x_dot) =
            temporal_attention(&x, std::slice::from_ref(&x), &[HeadProjection::identity(3)]).unwrap();
        assert_eq!(beta.weights.data(), &[0.5, 0.5]);
        assert!(x_dot.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn hand_computed_scaled_logits() {
        // Pooled query [1,0]; pooled past key [0,1].
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let past = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let (beta, _) = temporal_attention(&x, &[past], &[HeadProjection::identity(2)]).unwrap();
        let l = 1.0 / 2f64.sqrt();
        let want0 = l.exp() / (l.exp() + 1.0);
        let b = beta.weights.data();
        assert!((b[0] - want0).abs() < 1e-12);
        assert!((b[0] - 0.6698).abs() < 1e-4 && (b[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn mismatched_memory_is_dimension_error() {
        let x = Tensor::zeros(&[2, 2, 2]);
        let m = Tensor::zeros(&[2, 3, 2]);
        let err = temporal_attention(&x, &[m], &[HeadProjection::identity(2)]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}

//! Independent reference implementations and input generators shared by the
//! integration tests and the acceptance harness.
//!
//! The oracles deliberately avoid the library's graph and tensor operations:
//! everything is written as plain loops over `f64` slices.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stm_core::attention::HeadProjection;
use stm_core::encoders::{ConvSpec, EncoderConfig};
use stm_core::localization::BBox;
use stm_core::model::ModelConfig;
use stm_core::stm::{Ablation, MemoryBank, StmParams};
use stm_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Memory layer, scalar loops
// ---------------------------------------------------------------------------

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn pool(t: &Tensor) -> Vec<f64> {
    let (h, w, c) = dims(t);
    let d = t.data();
    let mut out = vec![0.0; c];
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out[k] += d[(i * w + j) * c + k];
            }
        }
    }
    for v in &mut out {
        *v /= (h * w) as f64;
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Row vector `v` times the `c×c` matrix `m`.
fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let c = v.len();
    (0..c)
        .map(|j| (0..c).map(|i| v[i] * m.data()[i * c + j]).sum())
        .collect()
}

pub struct NaiveTemporal {
    pub beta: Vec<f64>,
    pub x_dot: Vec<f64>,
}

pub fn naive_temporal(x: &Tensor, memory: &[Tensor], heads: &[HeadProjection]) -> NaiveTemporal {
    if memory.is_empty() {
        return NaiveTemporal {
            beta: vec![1.0],
            x_dot: x.data().to_vec(),
        };
    }
    let (_, _, c) = dims(x);
    let candidates: Vec<&Tensor> = std::iter::once(x).chain(memory.iter()).collect();
    let query = pool(x);
    let mut beta = vec![0.0; candidates.len()];
    for head in heads {
        let q = vecmat(&query, &head.query);
        let logits: Vec<f64> = candidates
            .iter()
            .map(|cand| {
                let k = vecmat(&pool(cand), &head.key);
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                dot / (c as f64).sqrt()
            })
            .collect();
        for (b, a) in beta.iter_mut().zip(softmax(&logits)) {
            *b += a;
        }
    }
    for b in &mut beta {
        *b /= heads.len() as f64;
    }
    let mut x_dot = vec![0.0; x.numel()];
    for (b, cand) in beta.iter().zip(&candidates) {
        for (o, v) in x_dot.iter_mut().zip(cand.data()) {
            *o += b * v;
        }
    }
    NaiveTemporal { beta, x_dot }
}

/// Spatial attention weights and the weighted visual map.
pub fn naive_spatial(
    x_a: &[f64],
    a_shape: &[usize],
    x_v: &[f64],
    v_shape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (m, n, c) = (a_shape[0], a_shape[1], a_shape[2]);
    let mut p = vec![0.0; c];
    for cell in 0..m * n {
        for k in 0..c {
            p[k] += x_a[cell * c + k];
        }
    }
    for v in &mut p {
        *v /= (m * n) as f64;
    }
    let cells = v_shape[0] * v_shape[1];
    let logits: Vec<f64> = (0..cells)
        .map(|cell| (0..c).map(|k| x_v[cell * c + k] * p[k]).sum())
        .collect();
    let alpha = softmax(&logits);
    let mut x_av = vec![0.0; cells * c];
    for cell in 0..cells {
        for k in 0..c {
            x_av[cell * c + k] = alpha[cell] * x_v[cell * c + k];
        }
    }
    (alpha, x_av)
}

pub struct NaiveLayer {
    pub x_a_dot: Vec<f64>,
    pub x_v_dot: Vec<f64>,
    pub alpha: Vec<f64>,
    pub x_av_dot: Vec<f64>,
    pub x_av_ddot: Vec<f64>,
    pub beta_a: Vec<f64>,
    pub beta_v: Vec<f64>,
    pub beta_av: Vec<f64>,
}

pub fn naive_layer(
    x_a: &Tensor,
    x_v: &Tensor,
    bank: &MemoryBank,
    params: &StmParams,
    ablation: Ablation,
) -> NaiveLayer {
    let uni = matches!(ablation, Ablation::Full | Ablation::UniOnly);
    let cross = matches!(ablation, Ablation::Full);
    let (a, v) = if uni {
        (
            naive_temporal(x_a, bank.audio(), &params.audio),
            naive_temporal(x_v, bank.visual(), &params.visual),
        )
    } else {
        (
            naive_temporal(x_a, &[], &params.audio),
            naive_temporal(x_v, &[], &params.visual),
        )
    };
    let (alpha, x_av_dot) = naive_spatial(&a.x_dot, x_a.shape(), &v.x_dot, x_v.shape());
    let av = if cross {
        let t = Tensor::new(x_v.shape(), x_av_dot.clone()).unwrap();
        naive_temporal(&t, bank.av(), &params.av)
    } else {
        NaiveTemporal {
            beta: vec![1.0],
            x_dot: x_av_dot.clone(),
        }
    };
    NaiveLayer {
        x_a_dot: a.x_dot,
        x_v_dot: v.x_dot,
        alpha,
        x_av_dot,
        x_av_ddot: av.x_dot,
        beta_a: a.beta,
        beta_v: v.beta,
        beta_av: av.beta,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A random small-geometry memory-layer instance.
pub struct LayerInstance {
    pub x_a: Tensor,
    pub x_v: Tensor,
    pub bank: MemoryBank,
    pub params: StmParams,
}

pub fn random_projection(rng: &mut impl Rng, c: usize) -> Tensor {
    uniform(rng, &[c, c], -1.0, 1.0)
}

pub fn random_layer_instance<R: Rng>(rng: &mut R) -> LayerInstance {
    let c = rng.random_range(1..=4);
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (m, n) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = rng.random_range(0..=3);
    let heads = rng.random_range(1..=3);
    let heads_for = |rng: &mut R| -> Vec<HeadProjection> {
        (0..heads)
            .map(|_| HeadProjection {
                query: random_projection(rng, c),
                key: random_projection(rng, c),
            })
            .collect()
    };
    let params = StmParams {
        audio: heads_for(rng),
        visual: heads_for(rng),
        av: heads_for(rng),
    };
    let audio = (0..k)
        .map(|_| uniform(rng, &[m, n, c], -2.0, 2.0))
        .collect();
    let visual = (0..k)
        .map(|_| uniform(rng, &[h, w, c], -2.0, 2.0))
        .collect();
    let av = (0..k)
        .map(|_| uniform(rng, &[h, w, c], -1.0, 1.0))
        .collect();
    LayerInstance {
        x_a: uniform(rng, &[m, n, c], -2.0, 2.0),
        x_v: uniform(rng, &[h, w, c], -2.0, 2.0),
        bank: MemoryBank::from_entries(k, audio, visual, av).unwrap(),
        params,
    }
}

// ---------------------------------------------------------------------------
// Post-processing and metric oracles
// ---------------------------------------------------------------------------

fn bin(v: f64) -> u64 {
    ((v.clamp(0.0, 1.0) * 256.0) as u64).min(255)
}

/// Exhaustive Otsu: every split `t ∈ 1..256` is scored from the pixels
/// directly with `σ² ∝ (S·n₀ − s₀·N)² / (n₀·n₁)`, compared by exact
/// cross-multiplication. Returns `t/256` of the first maximizer, 0 if none.
pub fn otsu_oracle(values: &[f64]) -> f64 {
    let bins: Vec<u64> = values.iter().map(|&v| bin(v)).collect();
    let n = bins.len() as u128;
    let total: u128 = bins.iter().map(|&b| b as u128).sum();
    let mut best: Option<(u64, u128, u128)> = None;
    for t in 1..256u64 {
        let n0 = bins.iter().filter(|&&b| b < t).count() as u128;
        let s0: u128 = bins.iter().filter(|&&b| b < t).map(|&b| b as u128).sum();
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (total * n0) as i128 - (s0 * n) as i128;
        let num = (d * d) as u128;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.map_or(0.0, |(t, _, _)| t as f64 / 256.0)
}

/// Component box and pixel count from a depth-first flood fill.
pub fn components_oracle(mask: &[bool], h: usize, w: usize) -> Vec<((u32, u32, u32, u32), usize)> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut x0, mut y0, mut x1, mut y1, mut area) = (w, h, 0, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(((x0 as u32, y0 as u32, x1 as u32, y1 as u32), area));
    }
    out.sort();
    out
}

fn iou_by_pixels(a: &BBox, b: &BBox) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    let xmax = a.x1.max(b.x1);
    let ymax = a.y1.max(b.y1);
    for y in 0..ymax {
        for x in 0..xmax {
            let (ia, ib) = (
                a.contains(x as usize, y as usize),
                b.contains(x as usize, y as usize),
            );
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// The unique subset `S` of boxes such that no two members of `S` overlap
/// beyond the threshold and every box outside `S` overlaps some
/// higher-ranked member of `S`, found by enumerating all subsets. Ranking is
/// by descending score, ties broken by input order. Returns input indices in
/// rank order.
pub fn nms_oracle(boxes: &[BBox], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n <= 12, "subset enumeration is exponential");
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| {
        boxes[b]
            .score
            .unwrap()
            .partial_cmp(&boxes[a].score.unwrap())
            .unwrap()
            .then(a.cmp(&b))
    });
    let pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (r, &i) in rank.iter().enumerate() {
            p[i] = r;
        }
        p
    };
    let overlap: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| iou_by_pixels(&boxes[i], &boxes[j]) > thr)
                .collect()
        })
        .collect();
    let mut found = None;
    for subset in 0u32..(1 << n) {
        let member = |i: usize| subset & (1 << i) != 0;
        let independent =
            (0..n).all(|i| (0..n).all(|j| i == j || !(member(i) && member(j) && overlap[i][j])));
        let covered = (0..n)
            .all(|i| member(i) || (0..n).any(|j| member(j) && pos[j] < pos[i] && overlap[i][j]));
        if independent && covered {
            assert!(found.is_none(), "survivor set is not unique");
            found = Some(subset);
        }
    }
    let subset = found.expect("a survivor set exists");
    rank.into_iter()
        .filter(|&i| subset & (1 << i) != 0)
        .collect()
}

/// cIoU by enumerating pixels into explicit sets.
pub fn ciou_oracle(alpha: &[f64], g: &[bool], tau: f64) -> f64 {
    let a: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > tau).collect();
    let gt: Vec<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    let numerator = a.iter().filter(|i| gt.contains(i)).count();
    let a_minus_g = a.iter().filter(|i| !gt.contains(i)).count();
    numerator as f64 / (gt.len() + a_minus_g) as f64
}

pub fn random_box(rng: &mut impl Rng, h: u32, w: u32) -> BBox {
    let x0 = rng.random_range(0..w - 1);
    let y0 = rng.random_range(0..h - 1);
    let x1 = rng.random_range(x0 + 1..=w);
    let y1 = rng.random_range(y0 + 1..=h);
    BBox::new(x0, y0, x1, y1).unwrap()
}

/// A map whose values cluster on a few levels, so histogram ties occur.
pub fn random_otsu_map(rng: &mut impl Rng) -> Tensor {
    let h = rng.random_range(1..=24);
    let w = rng.random_range(1..=24);
    let levels: Vec<f64> = (0..rng.random_range(1..=6))
        .map(|_| rng.random::<f64>())
        .collect();
    let quantized = rng.random_bool(0.5);
    let data = (0..h * w)
        .map(|_| {
            if quantized {
                levels[rng.random_range(0..levels.len())]
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    Tensor::new(&[h, w], data).unwrap()
}

// ---------------------------------------------------------------------------
// Tiny end-to-end model
// ---------------------------------------------------------------------------

/// `C=4`, `h=w=2`, `K=1`: 4×4×3 frames and 4×4×1 audio grids. Memory
/// stays attached so the loss is a smooth function of every parameter along
/// every path; a detached bank is a deliberate stop-gradient that finite
/// differences would see through.
pub fn tiny_model_config() -> ModelConfig {
    let enc = |channels: usize| EncoderConfig {
        input_height: 4,
        input_width: 4,
        in_channels: channels,
        joint_dim: 4,
        convs: vec![ConvSpec::new(2, 2, 3)],
        final_relu: true,
    };
    ModelConfig {
        visual: enc(3),
        audio: enc(1),
        heads: 2,
        memory_capacity: 1,
        num_classes: 3,
        projection_init_std: 0.3,
        detach_memory: false,
        ..ModelConfig::default()
    }
}

pub fn tiny_clip(rng: &mut impl Rng, t: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let frames = (0..t).map(|_| uniform(rng, &[4, 4, 3], 0.0, 1.0)).collect();
    let audio = (0..t).map(|_| uniform(rng, &[4, 4, 1], 0.0, 1.0)).collect();
    (frames, audio)
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

use stm_core::attention::{spatial_attention_graph, temporal_attention_graph, HeadVars};
use stm_core::autodiff::{Graph, Var};
use stm_core::gradcheck::{check_gradients, GradCheckReport, DEFAULT_TOLERANCE};
use stm_core::model::Model;
use stm_core::params::Bound;
use stm_core::stm::{memory_layer_graph, LayerParams, MemorySlots};
use stm_core::training::fuse;

/// Uniform values kept at least `gap` away from zero, so ReLU kinks sit
/// outside the finite-difference stencil.
fn off_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    uniform(rng, shape, -1.0, 1.0).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

fn heads_from(vars: &[Var]) -> Vec<HeadVars> {
    vars.chunks(2)
        .map(|p| HeadVars {
            query: p[0],
            key: p[1],
        })
        .collect()
}

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> stm_core::Result<Var>>;

/// Every differentiable op and composite stage, checked at random inputs
/// drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(seed);
    let target = r.random_range(0..5usize);
    let mut cases: Vec<(&'static str, Op, Vec<Tensor>)> = vec![
        (
            "matmul",
            Box::new(|g, v| g.matmul(v[0], v[1])),
            vec![
                uniform(&mut r, &[3, 4], -1.0, 1.0),
                uniform(&mut r, &[4, 2], -1.0, 1.0),
            ],
        ),
        (
            "transpose",
            Box::new(|g, v| g.transpose(v[0])),
            vec![uniform(&mut r, &[3, 4], -1.0, 1.0)],
        ),
        (
            "add",
            Box::new(|g, v| g.add(v[0], v[1])),
            vec![
                uniform(&mut r, &[2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 3], -1.0, 1.0),
            ],
        ),
        (
            "add_bias",
            Box::new(|g, v| g.add_bias(v[0], v[1])),
            vec![
                uniform(&mut r, &[3, 4], -1.0, 1.0),
                uniform(&mut r, &[4], -1.0, 1.0),
            ],
        ),
        (
            "mul",
            Box::new(|g, v| g.mul(v[0], v[1])),
            vec![
                uniform(&mut r, &[2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 3], -1.0, 1.0),
            ],
        ),
        (
            "scale_channels",
            Box::new(|g, v| g.scale_channels(v[0], v[1])),
            vec![
                uniform(&mut r, &[2, 3, 4], -1.0, 1.0),
                uniform(&mut r, &[2, 3], -1.0, 1.0),
            ],
        ),
        (
            "scale",
            Box::new(|g, v| g.scale(v[0], -1.7)),
            vec![uniform(&mut r, &[5], -1.0, 1.0)],
        ),
        (
            "relu",
            Box::new(|g, v| g.relu(v[0])),
            vec![off_zero(&mut r, &[6], 0.05)],
        ),
        (
            "concat",
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            vec![
                uniform(&mut r, &[2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 2], -1.0, 1.0),
            ],
        ),
        (
            "sum_axes",
            Box::new(|g, v| g.sum_axes(v[0], &[0, 2])),
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)],
        ),
        (
            "sum_all",
            Box::new(|g, v| g.sum_all(v[0])),
            vec![uniform(&mut r, &[3, 2], -1.0, 1.0)],
        ),
        (
            "reshape",
            Box::new(|g, v| g.reshape(v[0], &[3, 2])),
            vec![uniform(&mut r, &[2, 3], -1.0, 1.0)],
        ),
        (
            "softmax_rows",
            Box::new(|g, v| g.softmax(v[0], 1)),
            vec![uniform(&mut r, &[3, 4], -2.0, 2.0)],
        ),
        (
            "softmax_cols",
            Box::new(|g, v| g.softmax(v[0], 0)),
            vec![uniform(&mut r, &[3, 4], -2.0, 2.0)],
        ),
        (
            "global_avg_pool",
            Box::new(|g, v| g.global_avg_pool(v[0])),
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)],
        ),
        (
            "conv2d",
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2)),
            vec![
                uniform(&mut r, &[5, 5, 2], -1.0, 1.0),
                uniform(&mut r, &[3, 3, 2, 3], -1.0, 1.0),
                uniform(&mut r, &[3], -1.0, 1.0),
            ],
        ),
        (
            "cross_entropy",
            Box::new(move |g, v| g.cross_entropy(v[0], target)),
            vec![uniform(&mut r, &[5], -2.0, 2.0)],
        ),
        (
            "spatial_attention",
            Box::new(|g, v| {
                let s = spatial_attention_graph(g, v[0], v[1])?;
                let a = g.reshape(s.alpha, &[6])?;
                let x = g.reshape(s.x_av, &[18])?;
                g.concat(&[a, x], 0)
            }),
            vec![
                uniform(&mut r, &[2, 2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 3, 3], -1.0, 1.0),
            ],
        ),
        (
            "temporal_attention",
            Box::new(|g, v| {
                let t = temporal_attention_graph(g, v[0], &v[1..3], &heads_from(&v[3..7]))?;
                let x = g.reshape(t.x_dot, &[12])?;
                g.concat(&[t.beta, x], 0)
            }),
            vec![
                uniform(&mut r, &[2, 2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 2, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 3], -1.0, 1.0),
            ],
        ),
        (
            "memory_layer",
            Box::new(|g, v| {
                let slots = MemorySlots {
                    audio: vec![v[2]],
                    visual: vec![v[3]],
                    av: vec![v[4]],
                };
                let lp = LayerParams {
                    audio: heads_from(&v[5..7]),
                    visual: heads_from(&v[7..9]),
                    av: heads_from(&v[9..11]),
                };
                let out = memory_layer_graph(g, v[0], v[1], &slots, &lp, Ablation::Full)?;
                let x = g.reshape(out.x_av_ddot, &[8])?;
                let a = g.reshape(out.x_a_dot, &[8])?;
                g.concat(&[x, a], 0)
            }),
            {
                let mut t: Vec<Tensor> = (0..5)
                    .map(|_| uniform(&mut r, &[2, 2, 2], -1.0, 1.0))
                    .collect();
                t.extend((0..6).map(|_| uniform(&mut r, &[2, 2], -1.0, 1.0)));
                t
            },
        ),
        (
            "fuse",
            Box::new(|g, v| fuse(g, v[0], v[1])),
            vec![
                uniform(&mut r, &[2, 2, 3], -1.0, 1.0),
                uniform(&mut r, &[3, 2, 3], -1.0, 1.0),
            ],
        ),
    ];
    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, op, inputs) in cases.drain(..) {
        out.push((
            name,
            check_gradients(op, &inputs, DEFAULT_TOLERANCE).unwrap(),
        ));
    }
    out.push(("tiny_model_pipeline", tiny_model_gradcheck(seed)));
    out
}

/// Gradient check of the clip loss with respect to every parameter of the
/// tiny model: encoders, memory layer, fusion, classifier.
pub fn tiny_model_gradcheck(seed: u64) -> GradCheckReport {
    let mut model = Model::init(tiny_model_config(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    // Zero biases feeding a dead unit put a ReLU input exactly on its kink.
    let biases: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| n.ends_with(".bias"))
        .cloned()
        .collect();
    for name in biases {
        let shape = model.params.get(&name).unwrap().shape().to_vec();
        model.params.insert(name, off_zero(&mut r, &shape, 0.05));
    }
    let (frames, audio) = tiny_clip(&mut r, 2);
    let labels = [r.random_range(1..3usize), r.random_range(0..3usize)];
    let names = model.params.names().to_vec();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    check_gradients(
        |g, vars| {
            let bound = Bound::from_vars(&names, vars);
            Ok(model.clip_loss(g, &bound, &frames, &audio, &labels)?.0)
        },
        &inputs,
        DEFAULT_TOLERANCE,
    )
    .unwrap()
}

//! Turning attention maps into boxes: min-max normalization, bilinear
//! resizing, Otsu thresholding, connected components, and proposal
//! grounding with non-maximum suppression.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::attention::spatial_attention;
use crate::error::{Error, Result};
use crate::metrics::box_iou;
use crate::tensor::Tensor;

/// Smallest component, in pixels, that [`extract_boxes`] keeps by default.
pub const DEFAULT_MIN_AREA: usize = 4;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
/// Number of histogram bins used by [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;

/// Axis-aligned box in half-open pixel coordinates `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Argument(format!(
                "box ({x0},{y0},{x1},{y1}) has no area"
            )));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// Center in pixel units, doubled to stay integral.
    pub fn center2(&self) -> (i64, i64) {
        (
            i64::from(self.x0) + i64::from(self.x1),
            i64::from(self.y0) + i64::from(self.y1),
        )
    }

    /// Whether the box lies within a `width × height` frame.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 as usize <= width && self.y1 as usize <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x)
            && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    /// Same rectangle, ignoring scores.
    pub fn same_rect(&self, other: &BBox) -> bool {
        (self.x0, self.y0, self.x1, self.y1) == (other.x0, other.y0, other.x1, other.y1)
    }
}

/// Candidate object masks from an external region-proposal source.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub masks: Vec<Tensor>,
    pub source: String,
}

impl ProposalSet {
    pub fn new(masks: Vec<Tensor>, source: impl Into<String>) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            if m.rank() != 2 {
                return Err(Error::dim(format!(
                    "proposal mask {i} has shape {:?}",
                    m.shape()
                )));
            }
            if !m.data().iter().any(|&v| v > 0.0) {
                return Err(Error::Argument(format!("proposal mask {i} is empty")));
            }
        }
        Ok(Self {
            masks,
            source: source.into(),
        })
    }

    /// Rasterizes rectangles into filled masks of `height × width`.
    pub fn from_boxes(
        boxes: &[BBox],
        height: usize,
        width: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        let masks = boxes
            .iter()
            .map(|b| {
                if !b.fits(width, height) {
                    return Err(Error::Argument(format!(
                        "proposal {b:?} exceeds {width}x{height} frame"
                    )));
                }
                Ok(rasterize(std::slice::from_ref(b), height, width))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(masks, source)
    }
}

/// Binary `height × width` map of pixels covered by any of `boxes`.
pub fn rasterize(boxes: &[BBox], height: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[height, width]);
    let d = t.data_mut();
    for b in boxes {
        for y in b.y0 as usize..(b.y1 as usize).min(height) {
            for x in b.x0 as usize..(b.x1 as usize).min(width) {
                d[y * width + x] = 1.0;
            }
        }
    }
    t
}

/// Final localization map from the memory layer's propagated outputs.
pub fn final_attention(x_a_dot: &Tensor, x_av_ddot: &Tensor) -> Result<Tensor> {
    Ok(spatial_attention(x_a_dot, x_av_ddot)?.0.weights)
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let min = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 && range.is_finite() {
        map.map(|v| (v - min) / range)
    } else {
        map.map(|_| 0.0)
    }
}

/// Corner-aligned bilinear resize of an `h×w` map to `height × width`.
pub fn bilinear_resize(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::dim(format!("bilinear_resize of {:?}", map.shape())));
    }
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "resize target {height}x{width} is smaller than 1x1"
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if (h, w) == (height, width) {
        return Ok(map.clone());
    }
    let src = map.data();
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| coord(x, width, w)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(&[height, width], out)
}

/// Histogram bin of a `[0, 1]` value.
pub fn otsu_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Between-class variance `ω₀ω₁(μ₀−μ₁)²` (up to the constant `1/N²`) of a
/// split, as an exact fraction `(numerator, denominator)`.
///
/// With class counts `n0, n1` and bin-index sums `s0, s1` the variance is
/// `(s0·n1 − s1·n0)² / (N² · n0 · n1)`.
pub fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    let d = i128::from(s0) * i128::from(n1) - i128::from(s1) * i128::from(n0);
    let num = (d * d) as u128;
    (num, u128::from(n0) * u128::from(n1))
}

/// `a/b > c/d` for non-negative fractions with positive denominators.
pub(crate) fn fraction_gt(a: (u128, u128), c: (u128, u128)) -> bool {
    // 128-bit products suffice for maps up to 256×256 pixels.
    a.0.checked_mul(c.1)
        .zip(c.0.checked_mul(a.1))
        .map(|(l, r)| l > r)
        .unwrap_or_else(|| (a.0 as f64 / a.1 as f64) > (c.0 as f64 / c.1 as f64))
}

/// Otsu threshold of a `[0, 1]` map over 256 uniform bins.
///
/// Candidate `t` splits bins `< t` from bins `≥ t`; the returned value is
/// `t / 256`, the lower edge of the first foreground bin. Ties go to the
/// lowest `t`. Returns 0 when no split puts pixels on both sides.
pub fn otsu_threshold(map: &Tensor) -> f64 {
    let mut hist = [0u64; OTSU_BINS];
    for &v in map.data() {
        hist[otsu_bin(v)] += 1;
    }
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let mut best: Option<(usize, (u128, u128))> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 1..OTSU_BINS {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let var = between_class_variance(n0, s0, n1, total_s - s0);
        if best.is_none_or(|(_, b)| fraction_gt(var, b)) {
            best = Some((t, var));
        }
    }
    best.map_or(0.0, |(t, _)| t as f64 / OTSU_BINS as f64)
}

/// Foreground mask: pixels whose bin is at or above the threshold's bin.
/// A zero threshold (no split) yields an empty mask.
pub fn binarize(map: &Tensor, threshold: f64) -> Tensor {
    if threshold <= 0.0 {
        return map.map(|_| 0.0);
    }
    let t = (threshold * OTSU_BINS as f64).round() as usize;
    map.map(|v| if otsu_bin(v) >= t { 1.0 } else { 0.0 })
}

/// Union-find over pixel labels.
struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// A labeled 8-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub bbox: BBox,
    /// Pixel count.
    pub area: usize,
    /// Row-major pixel indices.
    pub pixels: Vec<usize>,
}

/// Two-pass 8-connected labeling of pixels with value > 0.5.
pub fn connected_components(binary: &Tensor) -> Result<Vec<Component>> {
    if binary.rank() != 2 {
        return Err(Error::dim(format!(
            "component labeling of {:?}",
            binary.shape()
        )));
    }
    let (h, w) = (binary.shape()[0], binary.shape()[1]);
    let fg: Vec<bool> = binary.data().iter().map(|&v| v > 0.5).collect();
    let mut ds = DisjointSet::new(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg[i] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            if x > 0 && fg[i - 1] {
                ds.union(i, i - 1);
            }
            if y > 0 {
                let up = i - w;
                if fg[up] {
                    ds.union(i, up);
                }
                if x > 0 && fg[up - 1] {
                    ds.union(i, up - 1);
                }
                if x + 1 < w && fg[up + 1] {
                    ds.union(i, up + 1);
                }
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in (0..h * w).filter(|&i| fg[i]) {
        by_root.entry(ds.find(i)).or_default().push(i);
    }
    let mut comps = Vec::with_capacity(by_root.len());
    for pixels in by_root.into_values() {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &pixels {
            let (y, x) = (p / w, p % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        comps.push(Component {
            bbox: BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)?,
            area: pixels.len(),
            pixels,
        });
    }
    Ok(comps)
}

/// Tight boxes of 8-connected components with at least `min_area` pixels,
/// largest component first.
pub fn extract_boxes(binary: &Tensor, min_area: usize) -> Result<Vec<BBox>> {
    let mut comps: Vec<Component> = connected_components(binary)?
        .into_iter()
        .filter(|c| c.area >= min_area)
        .collect();
    comps.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.bbox.y0.cmp(&b.bbox.y0))
            .then(a.bbox.x0.cmp(&b.bbox.x0))
    });
    Ok(comps.into_iter().map(|c| c.bbox).collect())
}

/// Normalized map → Otsu → components.
pub fn contour_boxes(normalized: &Tensor, min_area: usize) -> Result<Vec<BBox>> {
    let t = otsu_threshold(normalized);
    extract_boxes(&binarize(normalized, t), min_area)
}

/// Upsamples a feature-grid attention map to frame size and normalizes it.
pub fn frame_attention(alpha: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    Ok(normalize_map(&bilinear_resize(alpha, height, width)?))
}

/// Greedy NMS: boxes in descending score order (stable for ties) suppress
/// later boxes whose IoU with them exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (boxes[a].score.unwrap_or(0.0), boxes[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa)
    });
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| box_iou(k, &boxes[i]) <= iou_threshold) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// Scores each proposal by the attention mass inside its mask, then applies NMS.
pub fn ground_proposals(
    alpha_norm: &Tensor,
    proposals: &ProposalSet,
    nms_iou: f64,
) -> Result<Vec<BBox>> {
    let mut scored = Vec::with_capacity(proposals.masks.len());
    for (i, m) in proposals.masks.iter().enumerate() {
        if m.shape() != alpha_norm.shape() {
            return Err(Error::dim(format!(
                "proposal mask {i} is {:?}, attention map is {:?}",
                m.shape(),
                alpha_norm.shape()
            )));
        }
        let score: f64 = m
            .data()
            .iter()
            .zip(alpha_norm.data())
            .map(|(a, b)| a * b)
            .sum();
        let bbox = extract_boxes(m, 1)?
            .into_iter()
            .reduce(|a, b| {
                BBox::new(
                    a.x0.min(b.x0),
                    a.y0.min(b.y0),
                    a.x1.max(b.x1),
                    a.y1.max(b.y1),
                )
                .expect("union of valid boxes")
            })
            .ok_or_else(|| Error::Argument(format!("proposal mask {i} is empty")))?;
        scored.push(bbox.with_score(score));
    }
    Ok(nms(&scored, nms_iou))
}

/// BFS flood fill; kept for callers that want labels without union-find.
pub fn flood_fill_labels(binary: &Tensor) -> Result<(Vec<usize>, usize)> {
    if binary.rank() != 2 {
        return Err(Error::dim(format!("flood fill of {:?}", binary.shape())));
    }
    let (h, w) = (binary.shape()[0], binary.shape()[1]);
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if binary.data()[start] <= 0.5 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if binary.data()[q] > 0.5 && labels[q] == 0 {
                        labels[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok((labels, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn box_requires_area() {
        assert!(BBox::new(2, 2, 2, 5).is_err());
        assert_eq!(BBox::new(0, 0, 3, 4).unwrap().area(), 12);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_map(&Tensor::from_vec(vec![0.1, 0.3]));
        assert_eq!(n.data(), &[0.0, 1.0]);
        assert_eq!(normalize_map(&Tensor::full(&[3], 0.7)).data(), &[0.0; 3]);
        assert_eq!(
            normalize_map(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).data(),
            &[0.0, 0.5, 1.0]
        );
    }

    #[test]
    fn resize_examples() {
        let c = bilinear_resize(&Tensor::full(&[2, 2], 5.0), 4, 4).unwrap();
        assert!(c.data().iter().all(|&v| v == 5.0));
        let r = bilinear_resize(&grid(2, 2, &[0.0, 1.0, 0.0, 1.0]), 2, 3).unwrap();
        assert_eq!(r.at(&[0, 1]), 0.5);
        assert_eq!(r.at(&[1, 1]), 0.5);
        let m = grid(2, 3, &[1.0, 7.0, -2.0, 0.5, 3.0, 9.0]);
        assert_eq!(bilinear_resize(&m, 2, 3).unwrap(), m);
        assert!(bilinear_resize(&m, 0, 3).is_err());
    }

    #[test]
    fn resize_is_exact_on_affine_ramps() {
        let m = Tensor::new(
            &[3, 4],
            (0..12)
                .map(|i| 2.0 * (i / 4) as f64 - 0.5 * (i % 4) as f64)
                .collect(),
        )
        .unwrap();
        let r = bilinear_resize(&m, 7, 10).unwrap();
        for y in 0..7 {
            for x in 0..10 {
                let sy = y as f64 * 2.0 / 6.0;
                let sx = x as f64 * 3.0 / 9.0;
                assert!((r.at(&[y, x]) - (2.0 * sy - 0.5 * sx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn otsu_examples() {
        let half: Vec<f64> = (0..64).map(|i| if i < 32 { 0.0 } else { 1.0 }).collect();
        let t = otsu_threshold(&grid(8, 8, &half));
        assert!(t > 0.0 && t < 1.0);
        assert_eq!(t, 1.0 / 256.0);

        let clusters: Vec<f64> = (0..100).map(|i| if i < 50 { 0.1 } else { 0.9 }).collect();
        let t = otsu_threshold(&grid(10, 10, &clusters));
        assert!(t > 0.1 && t <= 0.9);
        let mask = binarize(&grid(10, 10, &clusters), t);
        assert_eq!(mask.sum(), 50.0);

        assert_eq!(otsu_threshold(&Tensor::full(&[4, 4], 0.3)), 0.0);
        assert_eq!(binarize(&Tensor::full(&[4, 4], 0.0), 0.0).sum(), 0.0);
    }

    #[test]
    fn single_block_box() {
        let mut m = Tensor::zeros(&[8, 8]);
        for y in 2..5 {
            for x in 2..5 {
                m.set(&[y, x], 1.0);
            }
        }
        let boxes = extract_boxes(&m, DEFAULT_MIN_AREA).unwrap();
        assert_eq!(boxes, vec![BBox::new(2, 2, 5, 5).unwrap()]);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.set(&[1, 1], 1.0);
        m.set(&[2, 2], 1.0);
        let comps = connected_components(&m).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area, 2);
        assert!(extract_boxes(&m, DEFAULT_MIN_AREA).unwrap().is_empty());
        assert_eq!(
            extract_boxes(&m, 1).unwrap(),
            vec![BBox::new(1, 1, 3, 3).unwrap()]
        );
    }

    #[test]
    fn empty_map_has_no_boxes() {
        assert!(extract_boxes(&Tensor::zeros(&[5, 5]), 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn boxes_sorted_by_area() {
        let mut m = Tensor::zeros(&[10, 10]);
        for y in 0..2 {
            for x in 0..2 {
                m.set(&[y, x], 1.0);
            }
        }
        for y in 5..9 {
            for x in 5..9 {
                m.set(&[y, x], 1.0);
            }
        }
        let b = extract_boxes(&m, 1).unwrap();
        assert_eq!(b[0], BBox::new(5, 5, 9, 9).unwrap());
        assert_eq!(b[1], BBox::new(0, 0, 2, 2).unwrap());
    }

    #[test]
    fn grounding_examples() {
        let alpha = normalize_map(&grid(4, 4, &(0..16).map(|i| i as f64).collect::<Vec<_>>()));
        let whole =
            ProposalSet::from_boxes(&[BBox::new(0, 0, 4, 4).unwrap()], 4, 4, "test").unwrap();
        let out = ground_proposals(&alpha, &whole, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].score.unwrap() - alpha.sum()).abs() < 1e-12);

        let mut a = Tensor::zeros(&[4, 4]);
        a.set(&[0, 0], 0.6);
        a.set(&[1, 1], 0.4);
        let props = ProposalSet::from_boxes(
            &[
                BBox::new(0, 0, 2, 2).unwrap(),
                BBox::new(2, 2, 4, 4).unwrap(),
            ],
            4,
            4,
            "test",
        )
        .unwrap();
        let out = ground_proposals(&a, &props, 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out[0].score.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(out[1].score.unwrap(), 0.0);
        assert!(out[0].same_rect(&BBox::new(0, 0, 2, 2).unwrap()));
    }

    #[test]
    fn grounding_rejects_extent_mismatch() {
        let props = ProposalSet::from_boxes(&[BBox::new(0, 0, 2, 2).unwrap()], 4, 4, "t").unwrap();
        let err = ground_proposals(&Tensor::zeros(&[5, 4]), &props, 0.5).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn final_attention_constant_is_uniform() {
        let xa = Tensor::full(&[2, 2, 3], 0.4);
        let xav = Tensor::full(&[4, 4, 3], 1.5);
        let a = final_attention(&xa, &xav).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn final_attention_peaks_at_dominant_cell() {
        let xa = Tensor::full(&[2, 2, 2], 1.0);
        let mut xav = Tensor::full(&[3, 3, 2], 0.1);
        xav.set(&[2, 1, 0], 2.0);
        xav.set(&[2, 1, 1], 2.0);
        let a = final_attention(&xa, &xav).unwrap();
        let arg = a
            .data()
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        assert_eq!(arg, 2 * 3 + 1);
    }
}

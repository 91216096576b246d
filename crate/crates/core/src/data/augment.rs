use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// One geometric augmentation. Probabilistic ops fire with probability `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    CenterCrop { side: usize },
    RandomRotate { max_deg: f64 },
    HorizontalFlip { p: f64 },
    VerticalFlip { p: f64 },
    GridDistortion { steps: usize, limit: f64, p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub ops: Vec<AugmentOp>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            ops: vec![
                AugmentOp::RandomRotate { max_deg: 90.0 },
                AugmentOp::HorizontalFlip { p: 0.5 },
                AugmentOp::VerticalFlip { p: 0.5 },
                AugmentOp::GridDistortion {
                    steps: 5,
                    limit: 0.3,
                    p: 0.5,
                },
            ],
            seed: 0,
        }
    }
}

fn check_probability(p: f64, op: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{op}: probability {p} outside [0,1]"
        )))
    }
}

impl AugmentSpec {
    /// No ops at all.
    pub fn identity() -> Self {
        Self {
            ops: Vec::new(),
            seed: 0,
        }
    }

    /// `image_side` is the side of the samples the spec will be applied to.
    pub fn validate(&self, image_side: usize) -> Result<()> {
        let mut side = image_side;
        for op in &self.ops {
            match *op {
                AugmentOp::CenterCrop { side: s } => {
                    if s == 0 || s > side {
                        return Err(Error::Config(format!(
                            "center_crop: side {s} not in 1..={side}"
                        )));
                    }
                    side = s;
                }
                AugmentOp::RandomRotate { max_deg } => {
                    if !(0.0..=180.0).contains(&max_deg) {
                        return Err(Error::Config(format!(
                            "random_rotate: max_deg {max_deg} outside [0,180]"
                        )));
                    }
                }
                AugmentOp::HorizontalFlip { p } => check_probability(p, "horizontal_flip")?,
                AugmentOp::VerticalFlip { p } => check_probability(p, "vertical_flip")?,
                AugmentOp::GridDistortion { steps, limit, p } => {
                    check_probability(p, "grid_distortion")?;
                    check_grid(steps, limit)?;
                }
            }
        }
        Ok(())
    }

    /// Side length after every crop in the spec has been applied.
    pub fn output_side(&self, image_side: usize) -> usize {
        self.ops.iter().fold(image_side, |side, op| match *op {
            AugmentOp::CenterCrop { side: s } => s.min(side),
            _ => side,
        })
    }
}

fn check_grid(steps: usize, limit: f64) -> Result<()> {
    if steps < 2 {
        return Err(Error::Config(format!(
            "grid_distortion: steps must be at least 2, got {steps}"
        )));
    }
    if !(0.0..1.0).contains(&limit) {
        return Err(Error::Config(format!(
            "grid_distortion: limit {limit} outside [0,1)"
        )));
    }
    Ok(())
}

/// The random stream for one sample in one epoch. Independent of the order
/// in which samples are visited.
pub fn sample_rng(seed: u64, sample_id: &str, epoch: usize) -> ChaCha8Rng {
    let epoch = (epoch as u64).to_le_bytes();
    ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[b"augment", sample_id.as_bytes(), &epoch],
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left/right.
    Horizontal,
    /// Mirror top/bottom.
    Vertical,
}

fn dims(t: &Tensor<f32>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn rebuild(sample: &Sample, image: Vec<f32>, mask: Vec<f32>, h: usize, w: usize) -> Sample {
    let c = sample.channels();
    Sample {
        id: sample.id.clone(),
        image: Tensor::new(vec![c, h, w], image).expect("image extent"),
        mask: Tensor::new(vec![1, h, w], mask).expect("mask extent"),
    }
}

fn crop_plane(t: &Tensor<f32>, top: usize, left: usize, side: usize) -> Vec<f32> {
    let (c, h, w) = dims(t);
    let src = t.data();
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for r in top..top + side {
            let row = ch * h * w + r * w;
            out.extend_from_slice(&src[row + left..row + left + side]);
        }
    }
    out
}

/// The centred `side`×`side` window, offset `floor((H − side)/2)` from the
/// top and `floor((W − side)/2)` from the left.
pub fn center_crop(sample: &Sample, side: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if side == 0 || side > h || side > w {
        return Err(Error::InvalidArgument(format!(
            "center_crop: side {side} does not fit a {h}×{w} sample"
        )));
    }
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    let image = crop_plane(&sample.image, top, left, side);
    let mask = crop_plane(&sample.mask, top, left, side);
    Ok(rebuild(sample, image, mask, side, side))
}

fn flip_plane(t: &Tensor<f32>, axis: FlipAxis) -> Vec<f32> {
    let (c, h, w) = dims(t);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = match axis {
                    FlipAxis::Horizontal => (r, w - 1 - col),
                    FlipAxis::Vertical => (h - 1 - r, col),
                };
                out[ch * h * w + r * w + col] = src[ch * h * w + sr * w + sc];
            }
        }
    }
    out
}

pub fn flip(sample: &Sample, axis: FlipAxis) -> Sample {
    let image = flip_plane(&sample.image, axis);
    let mask = flip_plane(&sample.mask, axis);
    rebuild(sample, image, mask, sample.height(), sample.width())
}

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = (sy - y0) as f32;
    let fx = (sx - x0) as f32;
    let at = |y: f64, x: f64| -> f32 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0);
    let bottom = (1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0);
    (1.0 - fy) * top + fy * bottom
}

fn nearest(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let (y, x) = (sy.round(), sx.round());
    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Resamples image (bilinear) and mask (nearest) through `source`, which maps
/// an output pixel `(row, col)` to fractional source coordinates. Anything
/// sampled outside the frame reads as 0.
fn remap(sample: &Sample, source: impl Fn(usize, usize) -> (f64, f64)) -> Sample {
    let (c, h, w) = dims(&sample.image);
    let plane = h * w;
    let img = sample.image.data();
    let msk = sample.mask.data();
    let mut image = vec![0.0; c * plane];
    let mut mask = vec![0.0; plane];
    for r in 0..h {
        for col in 0..w {
            let (sy, sx) = source(r, col);
            let o = r * w + col;
            for ch in 0..c {
                image[ch * plane + o] = bilinear(&img[ch * plane..(ch + 1) * plane], h, w, sy, sx);
            }
            mask[o] = nearest(msk, h, w, sy, sx);
        }
    }
    rebuild(sample, image, mask, h, w)
}

fn exact_cos_sin(angle_deg: f64) -> (f64, f64) {
    let quarter = angle_deg / 90.0;
    if quarter == quarter.round() {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let rad = angle_deg.to_radians();
        (rad.cos(), rad.sin())
    }
}

/// Rotates counter-clockwise by `angle_deg` about the image centre. Right
/// angles use exact trigonometry, so a 90° turn of a square sample is a pure
/// index permutation: `out(r, c) = in(c, H − 1 − r)`.
pub fn rotate(sample: &Sample, angle_deg: f64) -> Sample {
    let (cos, sin) = exact_cos_sin(angle_deg);
    if cos == 1.0 {
        return sample.clone();
    }
    let cy = (sample.height() as f64 - 1.0) / 2.0;
    let cx = (sample.width() as f64 - 1.0) / 2.0;
    remap(sample, |r, c| {
        let x = c as f64 - cx;
        let y = r as f64 - cy;
        let sx = cos * x - sin * y;
        let sy = sin * x + cos * y;
        (sy + cy, sx + cx)
    })
}

/// Per-pixel source coordinate along one axis of `len` pixels whose `steps`
/// equal cells are stretched by `factors` and renormalized to the original
/// extent. Both ends stay fixed.
fn axis_map(len: usize, factors: &[f64]) -> Vec<f64> {
    let steps = factors.len();
    let extent = len.saturating_sub(1) as f64;
    let total: f64 = factors.iter().sum();
    let mut nodes = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    nodes.push(0.0);
    for f in &factors[..steps - 1] {
        acc += f / total * extent;
        nodes.push(acc);
    }
    nodes.push(extent);

    let cell = extent / steps as f64;
    (0..len)
        .map(|i| {
            if i + 1 == len {
                return extent;
            }
            let x = i as f64;
            let k = ((x / cell).floor() as usize).min(steps - 1);
            let t = (x - k as f64 * cell) / cell;
            nodes[k] + t * (nodes[k + 1] - nodes[k])
        })
        .collect()
}

/// Piecewise-linear warp with `steps` cells per axis, each cell's extent
/// scaled by a factor drawn uniformly from `[1 − limit, 1 + limit]`.
pub fn grid_distortion<R: Rng + ?Sized>(
    sample: &Sample,
    steps: usize,
    limit: f64,
    rng: &mut R,
) -> Result<Sample> {
    check_grid(steps, limit)?;
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| 1.0 + limit * (2.0 * rng.random::<f64>() - 1.0))
            .collect()
    };
    let fx = draw(steps);
    let fy = draw(steps);
    if fx.iter().chain(&fy).all(|&f| f == 1.0) {
        return Ok(sample.clone());
    }
    let map_x = axis_map(sample.width(), &fx);
    let map_y = axis_map(sample.height(), &fy);
    Ok(remap(sample, |r, c| (map_y[r], map_x[c])))
}

fn fires<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Applies `spec.ops` in order. Every probabilistic op consumes its coin
/// flip whether or not it fires.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<Sample> {
    let mut out = sample.clone();
    for op in &spec.ops {
        out = match *op {
            AugmentOp::CenterCrop { side } => center_crop(&out, side)?,
            AugmentOp::RandomRotate { max_deg } => {
                let angle = if max_deg > 0.0 {
                    rng.random_range(-max_deg..=max_deg)
                } else {
                    0.0
                };
                rotate(&out, angle)
            }
            AugmentOp::HorizontalFlip { p } => {
                if fires(rng, p) {
                    flip(&out, FlipAxis::Horizontal)
                } else {
                    out
                }
            }
            AugmentOp::VerticalFlip { p } => {
                if fires(rng, p) {
                    flip(&out, FlipAxis::Vertical)
                } else {
                    out
                }
            }
            AugmentOp::GridDistortion { steps, limit, p } => {
                if fires(rng, p) {
                    grid_distortion(&out, steps, limit, rng)?
                } else {
                    out
                }
            }
        };
    }
    Ok(out)
}

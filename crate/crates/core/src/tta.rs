//! Gradient-free denoising of dense features by averaging over shifted and
//! flipped views restored to their original token positions.
//!
//! Pipeline per view `i`: `transform(image, coords, θᵢ)` → teacher →
//! `inverse_restore` → streaming sum with per-location counts → mean.
//! View 0 is always the identity so every location is covered at least once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Scalar;
use crate::vit::{FeatureGrid, ViTModel};

/// Anything that maps an image to a dense feature grid.
pub trait FeatureExtractor<S: Scalar = f32> {
    fn extract(&self, image: &Image) -> Result<FeatureGrid<S>>;
}

impl<S: Scalar> FeatureExtractor<S> for ViTModel<S> {
    fn extract(&self, image: &Image) -> Result<FeatureGrid<S>> {
        self.forward_features(image)
    }
}

impl<S: Scalar, F> FeatureExtractor<S> for F
where
    F: Fn(&Image) -> Result<FeatureGrid<S>>,
{
    fn extract(&self, image: &Image) -> Result<FeatureGrid<S>> {
        self(image)
    }
}

/// One shift-and-flip view. Shifts are in pixels and multiples of the patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct AugmentationParams {
    pub shift_x: i64,
    pub shift_y: i64,
    pub flip: bool,
}

impl AugmentationParams {
    pub const IDENTITY: Self = Self {
        shift_x: 0,
        shift_y: 0,
        flip: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Fill colour for vacated pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Mid-grey, the zero of the centred input space.
    #[default]
    MeanColor,
    /// Literal white.
    White,
}

impl PadMode {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            PadMode::MeanColor => [0.5; 3],
            PadMode::White => [1.0; 3],
        }
    }
}

/// Round `px` to the nearest multiple of `k` (ties toward zero), then step
/// toward zero while the result exceeds `bound`.
pub fn quantize_shift(px: f64, k: usize, bound: f64) -> i64 {
    let k = k as f64;
    let steps = px / k;
    let mut q = steps.abs().floor();
    if steps.abs() - q > 0.5 {
        q += 1.0;
    }
    while q > 0.0 && q * k > bound + 1e-9 {
        q -= 1.0;
    }
    (q.copysign(steps) * k) as i64
}

/// Sample `n` views: the first is the identity, the rest draw independent
/// per-axis shift fractions from `U[-max_shift_frac, max_shift_frac]` and a
/// Bernoulli(`flip_prob`) flip.
pub fn sample_aug_params<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    max_shift_frac: f64,
    flip_prob: f64,
    k: usize,
    extents: (usize, usize),
) -> Result<Vec<AugmentationParams>> {
    if n == 0 {
        return Err(Error::invalid("at least one augmentation (the identity) is required"));
    }
    if !(0.0..1.0).contains(&max_shift_frac) || !(0.0..=1.0).contains(&flip_prob) || k == 0 {
        return Err(Error::invalid("shift fraction must lie in [0, 1), flip probability in [0, 1]"));
    }
    let (h, w) = extents;
    let mut out = Vec::with_capacity(n);
    out.push(AugmentationParams::IDENTITY);
    for _ in 1..n {
        let fx = if max_shift_frac > 0.0 { rng.gen_range(-max_shift_frac..=max_shift_frac) } else { 0.0 };
        let fy = if max_shift_frac > 0.0 { rng.gen_range(-max_shift_frac..=max_shift_frac) } else { 0.0 };
        let flip = rng.gen_bool(flip_prob);
        out.push(AugmentationParams {
            shift_x: quantize_shift(fx * w as f64, k, max_shift_frac * w as f64),
            shift_y: quantize_shift(fy * h as f64, k, max_shift_frac * h as f64),
            flip,
        });
    }
    Ok(out)
}

/// Per-token source coordinates `(u, v)` in `[0, 1]`, `u` left to right and
/// `v` top to bottom; `None` marks tokens with no source (padding).
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    rows: usize,
    cols: usize,
    coords: Vec<Option<(f32, f32)>>,
}

impl CoordGrid {
    /// Token-centre coordinates of an un-augmented grid.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let mut coords = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                coords.push(Some((
                    (c as f32 + 0.5) / cols as f32,
                    (r as f32 + 0.5) / rows as f32,
                )));
            }
        }
        Self { rows, cols, coords }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<(f32, f32)> {
        self.coords[row * self.cols + col]
    }

    /// Source token `(row, col)` that `(row, col)` came from.
    pub fn source(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        self.get(row, col).map(|(u, v)| {
            let c = ((u * self.cols as f32).floor() as usize).min(self.cols - 1);
            let r = ((v * self.rows as f32).floor() as usize).min(self.rows - 1);
            (r, c)
        })
    }

    pub fn valid_count(&self) -> usize {
        self.coords.iter().filter(|c| c.is_some()).count()
    }

    fn shifted(&self, dc: i64, dr: i64) -> Self {
        let mut coords = vec![None; self.coords.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (sr, sc) = (r as i64 - dr, c as i64 - dc);
                if sr >= 0 && sc >= 0 && (sr as usize) < self.rows && (sc as usize) < self.cols {
                    coords[r * self.cols + c] = self.coords[sr as usize * self.cols + sc as usize];
                }
            }
        }
        Self { coords, ..*self }
    }

    fn flipped(&self) -> Self {
        let mut coords = self.coords.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                coords[r * self.cols + c] = self.coords[r * self.cols + (self.cols - 1 - c)];
            }
        }
        Self { coords, ..*self }
    }

    /// Transport the grid through `theta` (shift first, then flip).
    pub fn transformed(&self, theta: &AugmentationParams, k: usize) -> Self {
        let moved = self.shifted(theta.shift_x / k as i64, theta.shift_y / k as i64);
        if theta.flip {
            moved.flipped()
        } else {
            moved
        }
    }
}

/// Apply `theta` to an image and its coordinate grid: shift by
/// `(shift_x, shift_y)` with `pad` filling vacated pixels, then flip.
pub fn transform(
    image: &Image,
    coords: &CoordGrid,
    theta: &AugmentationParams,
    k: usize,
    pad: PadMode,
) -> Result<(Image, CoordGrid)> {
    if k == 0 || theta.shift_x % k as i64 != 0 || theta.shift_y % k as i64 != 0 {
        return Err(Error::invalid(format!("shift {theta:?} is not a multiple of patch size {k}")));
    }
    if image.height() / k != coords.rows() || image.width() / k != coords.cols() {
        return Err(Error::invalid("coordinate grid does not match the image token grid"));
    }
    let shifted = if theta.shift_x == 0 && theta.shift_y == 0 {
        image.clone()
    } else {
        image.shifted(theta.shift_x, theta.shift_y, pad.rgb())
    };
    let out = if theta.flip { shifted.flipped() } else { shifted };
    Ok((out, coords.transformed(theta, k)))
}

/// Write each valid token back to its pre-augmentation location. Returns the
/// placed grid and a mask of written locations.
pub fn inverse_restore<S: Scalar>(features: &FeatureGrid<S>, coords: &CoordGrid) -> Result<(FeatureGrid<S>, Vec<bool>)> {
    if features.rows() != coords.rows() || features.cols() != coords.cols() {
        return Err(Error::shape(
            "inverse_restore",
            format!(
                "features {}x{} vs coords {}x{}",
                features.rows(),
                features.cols(),
                coords.rows(),
                coords.cols()
            ),
        ));
    }
    let mut placed = FeatureGrid::zeros(features.rows(), features.cols(), features.dim());
    let mut mask = vec![false; features.len()];
    for r in 0..coords.rows() {
        for c in 0..coords.cols() {
            if let Some((tr, tc)) = coords.source(r, c) {
                let idx = tr * coords.cols() + tc;
                assert!(!mask[idx], "two tokens restored to ({tr}, {tc})");
                mask[idx] = true;
                placed.token_mut(tr, tc).copy_from_slice(features.token(r, c));
            }
        }
    }
    Ok((placed, mask))
}

/// Reduction used by [`MeanAccumulator`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summation {
    #[default]
    Sequential,
    /// Kahan-compensated.
    Compensated,
}

/// Streaming per-location sum and occurrence count.
#[derive(Clone, Debug)]
pub struct MeanAccumulator<S: Scalar = f32> {
    sum: FeatureGrid<S>,
    carry: Vec<S>,
    count: Vec<u32>,
    summation: Summation,
}

impl<S: Scalar> MeanAccumulator<S> {
    pub fn new(rows: usize, cols: usize, dim: usize, summation: Summation) -> Self {
        Self {
            sum: FeatureGrid::zeros(rows, cols, dim),
            carry: vec![S::zero(); rows * cols * dim],
            count: vec![0; rows * cols],
            summation,
        }
    }

    pub fn add(&mut self, placed: &FeatureGrid<S>, mask: &[bool]) -> Result<()> {
        if !placed.same_extents(&self.sum) || mask.len() != placed.len() {
            return Err(Error::shape("accumulate_mean", "views must share grid extents"));
        }
        let d = placed.dim();
        let compensated = self.summation == Summation::Compensated;
        let sums = self.sum.values_mut();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            self.count[i] += 1;
            let src = &placed.values()[i * d..(i + 1) * d];
            let dst = &mut sums[i * d..(i + 1) * d];
            if compensated {
                let carry = &mut self.carry[i * d..(i + 1) * d];
                for ((s, c), &x) in dst.iter_mut().zip(carry.iter_mut()).zip(src) {
                    let y = x - *c;
                    let t = *s + y;
                    *c = (t - *s) - y;
                    *s = t;
                }
            } else {
                for (s, &x) in dst.iter_mut().zip(src) {
                    *s += x;
                }
            }
        }
        Ok(())
    }

    /// Dimension-wise mean with coverage counts attached.
    pub fn finish(self) -> Result<FeatureGrid<S>> {
        let cols = self.sum.cols();
        if let Some(i) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::Uncovered { row: i / cols, col: i % cols });
        }
        let d = self.sum.dim();
        let mut out = self.sum;
        for (tok, &n) in out.values_mut().chunks_mut(d).zip(&self.count) {
            let n = S::lit(f64::from(n));
            tok.iter_mut().for_each(|v| *v /= n);
        }
        out.with_coverage(self.count)
    }
}

/// Mean of restored views with per-location coverage counts.
pub fn accumulate_mean<S: Scalar>(placed: &[(FeatureGrid<S>, Vec<bool>)]) -> Result<FeatureGrid<S>> {
    accumulate_mean_with(placed, Summation::Sequential)
}

pub fn accumulate_mean_with<S: Scalar>(placed: &[(FeatureGrid<S>, Vec<bool>)], summation: Summation) -> Result<FeatureGrid<S>> {
    let (first, _) = placed.first().ok_or_else(|| Error::invalid("no views to accumulate"))?;
    let mut acc = MeanAccumulator::new(first.rows(), first.cols(), first.dim(), summation);
    for (grid, mask) in placed {
        acc.add(grid, mask)?;
    }
    acc.finish()
}

/// Denoising settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub n_augmentations: usize,
    pub max_shift_frac: f64,
    pub flip_prob: f64,
    pub pad: PadMode,
    pub summation: Summation,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            n_augmentations: 10,
            max_shift_frac: 0.15,
            flip_prob: 0.5,
            pad: PadMode::MeanColor,
            summation: Summation::Sequential,
        }
    }
}

/// Denoise with explicit views. `params[0]` should be the identity.
pub fn denoise_with_params<S: Scalar, T: FeatureExtractor<S> + ?Sized>(
    teacher: &T,
    image: &Image,
    params: &[AugmentationParams],
    k: usize,
    pad: PadMode,
    summation: Summation,
) -> Result<FeatureGrid<S>> {
    if params.is_empty() {
        return Err(Error::invalid("no augmentation parameters"));
    }
    if k == 0 || image.height() % k != 0 || image.width() % k != 0 {
        return Err(Error::invalid("image is not divisible by the patch size"));
    }
    let base = CoordGrid::identity(image.height() / k, image.width() / k);
    let mut acc: Option<MeanAccumulator<S>> = None;
    for theta in params {
        let (view, coords) = transform(image, &base, theta, k, pad)?;
        let feats = teacher.extract(&view)?;
        let (placed, mask) = inverse_restore(&feats, &coords)?;
        acc.get_or_insert_with(|| MeanAccumulator::new(placed.rows(), placed.cols(), placed.dim(), summation))
            .add(&placed, &mask)?;
    }
    acc.expect("params non-empty").finish()
}

/// Sample `cfg.n_augmentations` views from `rng` and denoise.
pub fn denoise<S: Scalar, T: FeatureExtractor<S> + ?Sized, R: Rng + ?Sized>(
    teacher: &T,
    image: &Image,
    k: usize,
    cfg: &DenoiseConfig,
    rng: &mut R,
) -> Result<FeatureGrid<S>> {
    let params = sample_aug_params(
        rng,
        cfg.n_augmentations,
        cfg.max_shift_frac,
        cfg.flip_prob,
        k,
        (image.height(), image.width()),
    )?;
    denoise_with_params(teacher, image, &params, k, cfg.pad, cfg.summation)
}

/// Denoise features computed elsewhere: `views[i]` are the teacher features
/// of the image augmented with `params[i]`.
pub fn denoise_views<S: Scalar>(
    views: &[FeatureGrid<S>],
    params: &[AugmentationParams],
    k: usize,
    summation: Summation,
) -> Result<FeatureGrid<S>> {
    if views.len() != params.len() || views.is_empty() {
        return Err(Error::invalid(format!(
            "{} feature views for {} augmentation records",
            views.len(),
            params.len()
        )));
    }
    let base = CoordGrid::identity(views[0].rows(), views[0].cols());
    let mut acc = MeanAccumulator::new(views[0].rows(), views[0].cols(), views[0].dim(), summation);
    for (feats, theta) in views.iter().zip(params) {
        let coords = base.transformed(theta, k);
        let (placed, mask) = inverse_restore(feats, &coords)?;
        acc.add(&placed, &mask)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests;

//! Synthetic scenes with known labels and a grid-anchored artifact injector.
//!
//! Artifacts are tied to token-grid coordinates, never to image content:
//! shifting the input moves the content under a fixed artifact pattern.
//! That is the property augmentation averaging relies on.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::Scalar;
use crate::vit::{FeatureGrid, ViTModel};

/// Relative size of the fixed perturbation added after low-norm rescaling.
pub const LOW_NORM_JITTER: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactMode {
    #[default]
    HighNorm,
    LowNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    #[default]
    TokenGrid,
}

/// Where a model with baked-in artifacts applies them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactSite {
    /// On the dense output (after the head).
    #[default]
    Output,
    /// On the patch tokens of the residual stream entering block `i`;
    /// `i == depth` means right before the final norm.
    Residual(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactSpec {
    pub mode: ArtifactMode,
    /// Bernoulli rate per token position.
    pub density: f64,
    pub amplitude: f64,
    pub anchor: Anchor,
    /// Independent random direction per affected position (zero mean over
    /// positions). When false all positions share one direction.
    pub zero_mean: bool,
    pub seed: u64,
    pub site: ArtifactSite,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            mode: ArtifactMode::HighNorm,
            density: 0.1,
            amplitude: 2.0,
            anchor: Anchor::TokenGrid,
            zero_mean: true,
            seed: 0,
            site: ArtifactSite::Output,
        }
    }
}

impl ArtifactSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::Config(format!("artifact density {} not in (0, 1)", self.density)));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::Config("artifact amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

/// A concrete artifact pattern for one grid size.
#[derive(Clone, Debug)]
pub struct ArtifactField {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub mode: ArtifactMode,
    pub amplitude: f64,
    /// Row-major affected flags.
    pub affected: Vec<bool>,
    /// Unit direction per cell, `rows*cols*dim` (zero where unaffected).
    pub directions: Vec<f64>,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl ArtifactField {
    /// Placement depends only on `(spec.seed, rows, cols)`; never on content.
    pub fn generate(spec: &ArtifactSpec, rows: usize, cols: usize, dim: usize) -> Self {
        let cells = rows * cols;
        let mut place = rng::stream(spec.seed, "artifact-placement");
        let mut affected: Vec<bool> = (0..cells).map(|_| place.gen_bool(spec.density.clamp(0.0, 1.0))).collect();
        if !affected.iter().any(|&a| a) {
            let i = place.gen_range(0..cells);
            affected[i] = true;
        }
        let mut dirs = rng::stream(spec.seed, "artifact-vectors");
        let shared = unit_vector(dim, &mut dirs);
        let mut directions = vec![0.0; cells * dim];
        for (i, _) in affected.iter().enumerate().filter(|(_, &a)| a) {
            let u = if spec.zero_mean { unit_vector(dim, &mut dirs) } else { shared.clone() };
            directions[i * dim..(i + 1) * dim].copy_from_slice(&u);
        }
        Self {
            rows,
            cols,
            dim,
            mode: spec.mode,
            amplitude: spec.amplitude,
            affected,
            directions,
        }
    }

    pub fn affected_count(&self) -> usize {
        self.affected.iter().filter(|&&a| a).count()
    }

    /// Per-cell multiplicative factor and `rows*cols*dim` additive offsets
    /// for the given clean grid. Offsets scale with the mean clean norm.
    pub fn scale_offset<S: Scalar>(&self, clean: &FeatureGrid<S>) -> (Vec<f64>, Vec<f64>) {
        let norms = clean.norms();
        let mean_norm = norms.iter().map(|n| n.as_f64()).sum::<f64>() / norms.len() as f64;
        let (scale, mut offset) = self.scale_unit_offset();
        offset.iter_mut().for_each(|o| *o *= mean_norm);
        (scale, offset)
    }

    /// As [`ArtifactField::scale_offset`] with offsets per unit of mean
    /// clean norm, for callers that carry the norm themselves.
    pub fn scale_unit_offset(&self) -> (Vec<f64>, Vec<f64>) {
        let a = self.amplitude;
        let (factor, magnitude) = match self.mode {
            ArtifactMode::HighNorm => (1.0, a),
            ArtifactMode::LowNorm => (1.0 / (1.0 + a), LOW_NORM_JITTER * a / (1.0 + a)),
        };
        let scale = self.affected.iter().map(|&on| if on { factor } else { 1.0 }).collect();
        let offset = self.directions.iter().map(|&u| u * magnitude).collect();
        (scale, offset)
    }

    pub fn apply<S: Scalar>(&self, clean: &FeatureGrid<S>) -> FeatureGrid<S> {
        let (scale, offset) = self.scale_offset(clean);
        let mut out = clean.clone();
        let d = self.dim;
        for (i, tok) in out.values_mut().chunks_mut(d).enumerate() {
            if !self.affected[i] {
                continue;
            }
            for (k, v) in tok.iter_mut().enumerate() {
                *v = S::lit(v.as_f64() * scale[i] + offset[i * d + k]);
            }
        }
        out
    }
}

/// Add grid-anchored artifacts to a clean feature grid.
pub fn inject_artifacts<S: Scalar>(features: &FeatureGrid<S>, spec: &ArtifactSpec) -> Result<FeatureGrid<S>> {
    if spec.density * (features.len() as f64) < 1.0 {
        return Err(Error::invalid(format!(
            "density {} affects fewer than one of {} positions",
            spec.density,
            features.len()
        )));
    }
    if spec.amplitude == 0.0 {
        return Ok(features.clone());
    }
    let field = ArtifactField::generate(spec, features.rows(), features.cols(), features.dim());
    Ok(field.apply(features))
}

/// The frozen noisy teacher: `clean` with `spec` baked into its forward pass.
/// With [`ArtifactSite::Output`] this is exactly `inject_artifacts ∘ forward_features`.
pub fn noisy_teacher<S: Scalar>(clean: &ViTModel<S>, spec: &ArtifactSpec) -> ViTModel<S> {
    let mut teacher = clean.clone();
    teacher.artifacts = (spec.amplitude > 0.0).then(|| spec.clone());
    teacher
}

/// `Σ_{p affected} ‖noisy(p) − clean(p)‖²`.
pub fn artifact_energy<S: Scalar>(noisy: &FeatureGrid<S>, clean: &FeatureGrid<S>, affected: &[bool]) -> f64 {
    noisy
        .tokens()
        .zip(clean.tokens())
        .zip(affected)
        .filter(|(_, &a)| a)
        .map(|((n, c), _)| n.iter().zip(c).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub num_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Including background (class 0).
    pub num_classes: usize,
    /// Per-class RGB colours; generated from the seed when empty.
    pub palette: Vec<[f32; 3]>,
    /// Dimension of the per-class query prototypes.
    pub prototype_dim: usize,
    /// Per-pixel uniform noise amplitude.
    pub texture_noise: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch_size: 8,
            num_shapes: 3,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Stripe],
            num_classes: 4,
            palette: Vec::new(),
            prototype_dim: 64,
            texture_noise: 0.02,
            seed: 0,
        }
    }
}

/// A generated scene with token-level ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Per-pixel class, row-major `height*width`.
    pub pixel_labels: Vec<u32>,
    /// Per-patch majority class, row-major `rows*cols`.
    pub labels: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    /// Orthonormal class prototypes, `num_classes` vectors of `prototype_dim`.
    pub prototypes: Vec<Vec<f32>>,
}

/// Per-class colours for a spec (explicit palette or seeded random).
pub fn palette(spec: &SceneSpec) -> Vec<[f32; 3]> {
    if !spec.palette.is_empty() {
        return spec.palette.clone();
    }
    let mut r = rng::stream(spec.seed, "scene-palette");
    (0..spec.num_classes)
        .map(|_| [r.gen_range(0.05..0.95), r.gen_range(0.05..0.95), r.gen_range(0.05..0.95)])
        .collect()
}

/// Orthonormal prototypes by Gram-Schmidt on seeded Gaussian vectors.
pub fn prototypes(num_classes: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if num_classes > dim {
        return Err(Error::invalid(format!(
            "{num_classes} classes cannot have orthonormal prototypes in dimension {dim}"
        )));
    }
    let mut r = rng::stream(seed, "scene-prototypes");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while basis.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis.into_iter().map(|b| b.into_iter().map(|x| x as f32).collect()).collect())
}

/// Majority class per `k×k` patch; ties go to the smaller class index.
pub fn patch_labels(pixel_labels: &[u32], height: usize, width: usize, k: usize, num_classes: usize) -> Vec<u32> {
    let (rows, cols) = (height / k, width / k);
    let mut out = Vec::with_capacity(rows * cols);
    let mut counts = vec![0usize; num_classes.max(1)];
    for pr in 0..rows {
        for pc in 0..cols {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in pr * k..(pr + 1) * k {
                for x in pc * k..(pc + 1) * k {
                    counts[pixel_labels[y * width + x] as usize] += 1;
                }
            }
            let best = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            out.push(best as u32);
        }
    }
    out
}

/// Render a scene. Deterministic per `spec.seed`.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    let k = spec.patch_size;
    if k == 0 || spec.height % k != 0 || spec.width % k != 0 {
        return Err(Error::invalid(format!(
            "scene {}x{} is not divisible by patch size {k}",
            spec.height, spec.width
        )));
    }
    if spec.num_classes == 0 {
        return Err(Error::invalid("scene needs at least the background class"));
    }
    let colors = palette(spec);
    if colors.len() != spec.num_classes {
        return Err(Error::invalid(format!(
            "palette has {} colours for {} classes",
            colors.len(),
            spec.num_classes
        )));
    }
    let protos = prototypes(spec.num_classes, spec.prototype_dim, spec.seed)?;
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u32; h * w];
    let mut r = rng::stream(spec.seed, "scene-layout");
    if spec.num_classes > 1 && !spec.kinds.is_empty() {
        for _ in 0..spec.num_shapes {
            let class = r.gen_range(1..spec.num_classes) as u32;
            let kind = *spec.kinds.choose(&mut r).expect("kinds non-empty");
            match kind {
                ShapeKind::Rectangle => {
                    let rh = r.gen_range(h / 6..=h / 2).max(1);
                    let rw = r.gen_range(w / 6..=w / 2).max(1);
                    let top = r.gen_range(0..=h - rh);
                    let left = r.gen_range(0..=w - rw);
                    for y in top..top + rh {
                        labels[y * w + left..y * w + left + rw].fill(class);
                    }
                }
                ShapeKind::Disk => {
                    let rad = r.gen_range((h.min(w) as f64 / 10.0)..=(h.min(w) as f64 / 4.0));
                    let cy = r.gen_range(0.0..h as f64);
                    let cx = r.gen_range(0.0..w as f64);
                    for y in 0..h {
                        for x in 0..w {
                            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                            if dy * dy + dx * dx <= rad * rad {
                                labels[y * w + x] = class;
                            }
                        }
                    }
                }
                ShapeKind::Stripe => {
                    let vertical = r.gen_bool(0.5);
                    let extent = if vertical { w } else { h };
                    let thick = r.gen_range(extent / 8..=extent / 4).max(1);
                    let start = r.gen_range(0..=extent - thick);
                    for y in 0..h {
                        for x in 0..w {
                            let t = if vertical { x } else { y };
                            if (start..start + thick).contains(&t) {
                                labels[y * w + x] = class;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut noise = rng::stream(spec.seed, "scene-texture");
    let mut data = Vec::with_capacity(h * w * 3);
    for &l in &labels {
        let c = colors[l as usize];
        for ch in c {
            let n = if spec.texture_noise > 0.0 {
                noise.gen_range(-spec.texture_noise..spec.texture_noise)
            } else {
                0.0
            };
            data.push((ch + n).clamp(0.0, 1.0));
        }
    }
    let image = Image::new(h, w, data)?;
    let patch = patch_labels(&labels, h, w, k, spec.num_classes);
    Ok(Scene {
        image,
        pixel_labels: labels,
        labels: patch,
        rows: h / k,
        cols: w / k,
        prototypes: protos,
    })
}

/// Features built directly from prototypes: token `p` equals the prototype
/// of its label. Linearly separable by construction.
pub fn prototype_features(scene: &Scene) -> FeatureGrid<f32> {
    let d = scene.prototypes[0].len();
    FeatureGrid::from_fn(scene.rows, scene.cols, d, |r, c, k| {
        scene.prototypes[scene.labels[r * scene.cols + c] as usize][k]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::percentile_nearest_rank;
    use crate::vit::ViTConfig;

    fn grid(seed: u64) -> FeatureGrid<f32> {
        let mut r = rng::stream(seed, "grid");
        FeatureGrid::from_fn(8, 8, 16, |_, _, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let g = grid(1);
        let spec = ArtifactSpec { amplitude: 0.0, ..Default::default() };
        assert_eq!(inject_artifacts(&g, &spec).unwrap(), g);
        let spec = ArtifactSpec { amplitude: 0.0, mode: ArtifactMode::LowNorm, ..Default::default() };
        assert_eq!(inject_artifacts(&g, &spec).unwrap(), g);
    }

    #[test]
    fn too_sparse_density_is_rejected() {
        let g = FeatureGrid::<f32>::zeros(2, 2, 4);
        let spec = ArtifactSpec { density: 0.1, ..Default::default() };
        assert!(inject_artifacts(&g, &spec).is_err());
    }

    #[test]
    fn high_norm_artifacts_exceed_p95_of_clean_tokens() {
        let model = ViTModel::<f32>::init(ViTConfig::default(), 3).unwrap();
        for seed in 0..20 {
            let scene = gen_scene(&SceneSpec { seed, ..Default::default() }).unwrap();
            let clean = model.forward_features(&scene.image).unwrap();
            let spec = ArtifactSpec { seed, amplitude: 2.0, ..Default::default() };
            let noisy = inject_artifacts(&clean, &spec).unwrap();
            let field = ArtifactField::generate(&spec, clean.rows(), clean.cols(), clean.dim());
            let norms = noisy.norms();
            let unaffected: Vec<f64> = norms.iter().zip(&field.affected).filter(|(_, &a)| !a).map(|(n, _)| f64::from(*n)).collect();
            let p95 = percentile_nearest_rank(&unaffected, 95.0);
            for (n, &a) in norms.iter().zip(&field.affected) {
                if a {
                    assert!(f64::from(*n) > p95, "seed {seed}: {n} <= {p95}");
                }
            }
        }
    }

    #[test]
    fn low_norm_artifacts_fall_below_p5() {
        let model = ViTModel::<f32>::init(ViTConfig::default(), 3).unwrap();
        for seed in 0..5 {
            let scene = gen_scene(&SceneSpec { seed, ..Default::default() }).unwrap();
            let clean = model.forward_features(&scene.image).unwrap();
            let spec = ArtifactSpec { seed, amplitude: 2.0, mode: ArtifactMode::LowNorm, ..Default::default() };
            let noisy = inject_artifacts(&clean, &spec).unwrap();
            let field = ArtifactField::generate(&spec, 8, 8, 64);
            let norms = noisy.norms();
            let unaffected: Vec<f64> = norms.iter().zip(&field.affected).filter(|(_, &a)| !a).map(|(n, _)| f64::from(*n)).collect();
            let p5 = percentile_nearest_rank(&unaffected, 5.0);
            for (n, &a) in norms.iter().zip(&field.affected) {
                if a {
                    assert!(f64::from(*n) < p5);
                }
            }
        }
    }

    #[test]
    fn placement_ignores_content() {
        let spec = ArtifactSpec { seed: 11, ..Default::default() };
        let a = grid(1);
        let b = grid(2);
        let fa = ArtifactField::generate(&spec, a.rows(), a.cols(), a.dim());
        let na = inject_artifacts(&a, &spec).unwrap();
        let nb = inject_artifacts(&b, &spec).unwrap();
        for (i, &on) in fa.affected.iter().enumerate() {
            let (r, c) = (i / 8, i % 8);
            assert_eq!(on, na.token(r, c) != a.token(r, c));
            assert_eq!(on, nb.token(r, c) != b.token(r, c));
        }
    }

    #[test]
    fn output_site_teacher_equals_forward_then_inject() {
        let cfg = ViTConfig { embed_dim: 16, depth: 2, num_heads: 2, image_height: 32, image_width: 32, ..Default::default() };
        let clean = ViTModel::<f32>::init(cfg, 4).unwrap();
        let scene = gen_scene(&SceneSpec { height: 32, width: 32, prototype_dim: 16, ..Default::default() }).unwrap();
        let spec = ArtifactSpec { seed: 5, density: 0.2, ..Default::default() };
        let teacher = noisy_teacher(&clean, &spec);
        let via_model = teacher.forward_features(&scene.image).unwrap();
        let composed = inject_artifacts(&clean.forward_features(&scene.image).unwrap(), &spec).unwrap();
        for (a, b) in via_model.values().iter().zip(composed.values()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(via_model, teacher.forward_features(&scene.image).unwrap());
        assert!(artifact_energy(&via_model, &clean.forward_features(&scene.image).unwrap(), &ArtifactField::generate(&spec, 4, 4, 16).affected) > 0.0);
        let silent = noisy_teacher(&clean, &ArtifactSpec { amplitude: 0.0, ..spec });
        assert_eq!(silent.forward_features(&scene.image).unwrap(), clean.forward_features(&scene.image).unwrap());
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec { seed: 7, ..Default::default() };
        assert_eq!(gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
    }

    #[test]
    fn no_shapes_means_background() {
        let s = gen_scene(&SceneSpec { num_shapes: 0, ..Default::default() }).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let p = prototypes(2, 8, 3).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let d: f32 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6);
            }
        }
        assert!(prototypes(9, 8, 0).is_err());
        assert!(gen_scene(&SceneSpec { num_classes: 5, prototype_dim: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn patch_labels_flip_equivariant() {
        let s = gen_scene(&SceneSpec { seed: 3, ..Default::default() }).unwrap();
        let (h, w) = (64, 64);
        let mut flipped = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                flipped[y * w + x] = s.pixel_labels[y * w + (w - 1 - x)];
            }
        }
        let fl = patch_labels(&flipped, h, w, 8, 4);
        for r in 0..s.rows {
            for c in 0..s.cols {
                assert_eq!(fl[r * s.cols + c], s.labels[r * s.cols + (s.cols - 1 - c)]);
            }
        }
        assert_eq!(patch_labels(&s.pixel_labels, h, w, 8, 4), s.labels);
    }
}

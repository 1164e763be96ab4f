//! Self-distillation of register tokens.
//!
//! The student starts as an exact copy of the teacher plus fresh registers.
//! Each step regresses the student's dense output onto the TTA-denoised
//! teacher features with `1 − mean per-patch cosine + MSE`, updating only the
//! parameter groups in the [`UnlockMask`] with AdamW.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{cosine_percentiles, CosinePercentiles, COSINE_EPS};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tta::{denoise, DenoiseConfig, FeatureExtractor};
use crate::vit::{decays, FeatureGrid, ParamGroup, ViTModel};

/// `1 − mean_p cos(target_p, predicted_p) + mean((target − predicted)²)`.
pub fn distill_loss<S: Scalar>(target: &FeatureGrid<S>, predicted: &FeatureGrid<S>) -> Result<f64> {
    if !target.same_extents(predicted) {
        return Err(Error::shape(
            "distill_loss",
            format!(
                "target {}x{}x{} vs predicted {}x{}x{}",
                target.rows(),
                target.cols(),
                target.dim(),
                predicted.rows(),
                predicted.cols(),
                predicted.dim()
            ),
        ));
    }
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(target.to_tensor().cast());
    let p = tape.constant(predicted.to_tensor().cast());
    let loss = distill_loss_tape(&mut tape, t, p)?;
    Ok(tape.value(loss).item())
}

/// Tape form of [`distill_loss`]; both inputs are `[patches, d]`. Gradients
/// reach `target` only if it was recorded as a trainable leaf, so callers pass
/// it as a constant.
pub fn distill_loss_tape<S: Scalar>(tape: &mut Tape<S>, target: Var, predicted: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(predicted) {
        return Err(Error::shape(
            "distill_loss",
            format!("target {:?} vs predicted {:?}", tape.shape(target), tape.shape(predicted)),
        ));
    }
    let cos = tape.cosine_rows(target, predicted, S::lit(COSINE_EPS))?;
    let mean_cos = tape.mean(cos);
    let diff = tape.sub(target, predicted)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    let one_minus = tape.scale(mean_cos, -S::one());
    let one_minus = tape.add_scalar(one_minus, S::one());
    tape.add(one_minus, mse)
}

/// Exponential decay from `initial_lr` at step 0 to `final_lr` at `total`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &DistillConfig) -> f64 {
    let total = total_steps.max(1) as f64;
    cfg.initial_lr * (cfg.final_lr / cfg.initial_lr).powf(step as f64 / total)
}

/// Group names accepted by [`build_unlock_mask`].
pub const GROUP_NAMES: [&str; 6] = [
    "registers",
    "positional_embeddings",
    "patch_embedding",
    "final_block",
    "class_token",
    "final_norm",
];

/// The unlock set used in the reference configuration.
pub const REFERENCE_UNLOCK: [&str; 4] = ["registers", "positional_embeddings", "patch_embedding", "final_block"];

/// Which parameter groups receive updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlockMask {
    pub registers: bool,
    pub positional_embeddings: bool,
    pub patch_embedding: bool,
    pub final_block: bool,
    pub class_token: bool,
    pub final_norm: bool,
    /// Extra blocks unlocked by index (`block:i`).
    pub blocks: BTreeSet<usize>,
    depth: usize,
}

impl UnlockMask {
    pub fn is_unlocked(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Registers => self.registers,
            ParamGroup::PositionalEmbedding => self.positional_embeddings,
            ParamGroup::PatchEmbedding => self.patch_embedding,
            ParamGroup::ClassToken => self.class_token,
            ParamGroup::FinalNorm => self.final_norm,
            ParamGroup::Block(i) => self.blocks.contains(&i) || (self.final_block && i + 1 == self.depth),
        }
    }

    /// `(unlocked, total)` scalar parameter counts for `model`.
    pub fn counts<S: Scalar>(&self, model: &ViTModel<S>) -> (usize, usize) {
        let mut unlocked = 0;
        let mut total = 0;
        for p in model.params() {
            total += p.tensor.len();
            if self.is_unlocked(p.group) {
                unlocked += p.tensor.len();
            }
        }
        (unlocked, total)
    }

    pub fn is_empty(&self) -> bool {
        !(self.registers
            || self.positional_embeddings
            || self.patch_embedding
            || self.final_block
            || self.class_token
            || self.final_norm)
            && self.blocks.is_empty()
    }
}

/// Build a mask from group names (see [`GROUP_NAMES`], plus `block:i`).
/// Registers are always unlocked when the model has any.
pub fn build_unlock_mask<S: Scalar, G: AsRef<str>>(model: &ViTModel<S>, groups: &[G]) -> Result<UnlockMask> {
    let depth = model.config.depth;
    let mut mask = UnlockMask { depth, ..Default::default() };
    for g in groups {
        match g.as_ref() {
            "registers" => mask.registers = true,
            "positional_embeddings" => mask.positional_embeddings = true,
            "patch_embedding" => mask.patch_embedding = true,
            "final_block" => mask.final_block = true,
            "class_token" => mask.class_token = true,
            "final_norm" => mask.final_norm = true,
            other => {
                let idx = other
                    .strip_prefix("block:")
                    .and_then(|i| i.parse::<usize>().ok())
                    .filter(|&i| i < depth)
                    .ok_or_else(|| Error::UnknownGroup(other.to_string()))?;
                mask.blocks.insert(idx);
            }
        }
    }
    if model.num_registers() > 0 {
        mask.registers = true;
    }
    Ok(mask)
}

/// How training images are cropped before use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropPolicy {
    /// Resize so the shorter side equals this, bicubic.
    pub resize_shorter: Option<usize>,
    /// Random square crop of this side.
    pub square: Option<usize>,
}

impl CropPolicy {
    pub fn apply<R: rand::Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        let resized = match self.resize_shorter {
            Some(s) => image.resize_shorter_side(s)?,
            None => image.clone(),
        };
        match self.square {
            Some(side) => resized.random_square_crop(side, rng),
            None => Ok(resized),
        }
    }
}

/// Whether denoised targets are recomputed on every visit or once per image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Fresh augmentations (and crops) every time an image is visited.
    #[default]
    Recompute,
    /// One target per image, computed up front. Crops are disabled.
    Cached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub n_augmentations: usize,
    pub num_registers: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub crop: CropPolicy,
    pub target_mode: TargetMode,
    pub unlock: Vec<String>,
    /// Evaluate cosine percentiles every this many steps (0 disables).
    pub eval_every: usize,
    pub max_shift_frac: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            n_augmentations: 10,
            num_registers: 16,
            initial_lr: 3e-4,
            final_lr: 1e-5,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 1,
            steps: Some(2000),
            crop: CropPolicy::default(),
            target_mode: TargetMode::Recompute,
            unlock: REFERENCE_UNLOCK.iter().map(|s| s.to_string()).collect(),
            eval_every: 0,
            max_shift_frac: 0.15,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Optimisation preset used for the DINOv2-style backbone.
    pub fn dinov2() -> Self {
        Self {
            initial_lr: 1e-4,
            final_lr: 5e-6,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.initial_lr) {
            return Err(Error::Config(format!(
                "need 0 < final_lr ({}) <= initial_lr ({})",
                self.final_lr, self.initial_lr
            )));
        }
        if self.batch_size == 0 || self.n_augmentations == 0 {
            return Err(Error::Config("batch_size and n_augmentations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn denoise_config(&self) -> DenoiseConfig {
        DenoiseConfig {
            n_augmentations: self.n_augmentations,
            max_shift_frac: self.max_shift_frac,
            flip_prob: self.flip_prob,
            ..DenoiseConfig::default()
        }
    }

    /// Number of optimiser steps for a dataset of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size))
    }
}

/// AdamW with decoupled weight decay. Moments are kept per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &DistillConfig) -> Self {
        Self {
            betas: cfg.betas,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` holds `(name, gradient)` for unlocked
    /// parameters only; all other tensors are left untouched.
    pub fn step<S: Scalar>(&mut self, model: &mut ViTModel<S>, grads: &[(String, Tensor<S>)], lr: f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let by_name: HashMap<&str, &Tensor<S>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for p in model.params_mut() {
            let Some(g) = by_name.get(p.name.as_str()) else { continue };
            let n = p.tensor.len();
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let wd = if decays(&p.name) { self.weight_decay } else { 0.0 };
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let x = w.as_f64();
                let updated = x - lr * (mhat / (vhat.sqrt() + self.eps) + wd * x);
                *w = S::lit(updated);
            }
        }
    }
}

/// Loss and named gradients of the mean batch loss w.r.t. unlocked parameters.
pub fn loss_and_grads<S: Scalar>(
    student: &ViTModel<S>,
    images: &[Image],
    targets: &[FeatureGrid<S>],
    mask: &UnlockMask,
) -> Result<(f64, Vec<(String, Tensor<S>)>)> {
    if images.len() != targets.len() || images.is_empty() {
        return Err(Error::invalid(format!("{} images with {} targets", images.len(), targets.len())));
    }
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, &|_, g| mask.is_unlocked(g));
    let mut losses = Vec::with_capacity(images.len());
    for (img, target) in images.iter().zip(targets) {
        let trace = student.forward_tape(&mut tape, &bound, img)?;
        if trace.grid != (target.rows(), target.cols()) {
            return Err(Error::shape(
                "train_step",
                format!("student grid {:?} vs target {}x{}", trace.grid, target.rows(), target.cols()),
            ));
        }
        let t = tape.constant(target.to_tensor());
        losses.push(distill_loss_tape(&mut tape, t, trace.features)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    if losses.len() > 1 {
        total = tape.scale(total, S::lit(1.0 / losses.len() as f64));
    }
    let loss = tape.value(total).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    let mut grads = tape.backward(total)?;
    let named = student
        .params()
        .into_iter()
        .zip(bound.vars())
        .filter_map(|(p, &v)| grads.take(v).map(|g| (p.name, g)))
        .collect();
    Ok((loss, named))
}

/// One optimiser step on a batch with precomputed (constant) targets.
pub fn train_step<S: Scalar>(
    student: &mut ViTModel<S>,
    images: &[Image],
    targets: &[FeatureGrid<S>],
    mask: &UnlockMask,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(student, images, targets, mask)?;
    opt.step(student, &grads, lr);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval: Option<CosinePercentiles>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Percentiles before the first step, against the evaluation targets.
    pub initial_eval: Option<CosinePercentiles>,
    pub final_eval: Option<CosinePercentiles>,
    pub unlocked_params: usize,
    pub total_params: usize,
}

/// Denoised target for one image.
pub fn compute_target<S: Scalar, T: FeatureExtractor<S> + ?Sized>(
    teacher: &T,
    image: &Image,
    k: usize,
    cfg: &DistillConfig,
    stream_index: u64,
) -> Result<FeatureGrid<S>> {
    let mut r = rng::indexed_stream(cfg.seed, "augmentation", stream_index);
    denoise(teacher, image, k, &cfg.denoise_config(), &mut r)
}

/// Targets for evaluation, drawn from a stream separate from training.
pub fn evaluation_targets<S: Scalar, T: FeatureExtractor<S> + ?Sized>(
    teacher: &T,
    images: &[Image],
    k: usize,
    cfg: &DistillConfig,
) -> Result<Vec<FeatureGrid<S>>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut r = rng::indexed_stream(cfg.seed, "eval-augmentation", i as u64);
            denoise(teacher, img, k, &cfg.denoise_config(), &mut r)
        })
        .collect()
}

/// Cosine percentiles of the student against fixed targets.
pub fn evaluate<S: Scalar>(student: &ViTModel<S>, images: &[Image], targets: &[FeatureGrid<S>]) -> Result<CosinePercentiles> {
    let preds = images.iter().map(|i| student.forward_features(i)).collect::<Result<Vec<_>>>()?;
    cosine_percentiles(&preds, targets)
}

/// Train `student` on `dataset` for the configured budget.
///
/// Batches walk the dataset in a per-epoch shuffled order. With
/// [`TargetMode::Cached`] every image gets one denoised target up front;
/// otherwise targets (and crops) are redrawn at each visit.
pub fn run_distillation<S: Scalar, T: FeatureExtractor<S> + ?Sized>(
    teacher: &T,
    mut student: ViTModel<S>,
    dataset: &[Image],
    cfg: &DistillConfig,
) -> Result<(ViTModel<S>, TrainingLog)> {
    cfg.validate()?;
    let mask = build_unlock_mask(&student, &cfg.unlock)?;
    let (unlocked, total) = mask.counts(&student);
    let mut log = TrainingLog { unlocked_params: unlocked, total_params: total, ..Default::default() };
    let steps = cfg.total_steps(dataset.len());
    if dataset.is_empty() || steps == 0 {
        return Ok((student, log));
    }
    let k = student.config.patch_size;
    let cached = match cfg.target_mode {
        TargetMode::Cached => Some(
            dataset
                .iter()
                .enumerate()
                .map(|(i, img)| compute_target(teacher, img, k, cfg, i as u64))
                .collect::<Result<Vec<_>>>()?,
        ),
        TargetMode::Recompute => None,
    };
    let eval_targets = if cfg.eval_every > 0 {
        Some(match &cached {
            Some(c) => c.clone(),
            None => evaluation_targets(teacher, dataset, k, cfg)?,
        })
    } else {
        None
    };
    if let Some(t) = &eval_targets {
        log.initial_eval = Some(evaluate(&student, dataset, t)?);
    }

    let mut opt = AdamW::new(cfg);
    let mut order_rng = rng::stream(cfg.seed, "batch-order");
    let mut crop_rng = rng::stream(cfg.seed, "crop");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut visit: u64 = 0;
    for step in 0..steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            match &cached {
                Some(c) => {
                    images.push(dataset[idx].clone());
                    targets.push(c[idx].clone());
                }
                None => {
                    let img = cfg.crop.apply(&dataset[idx], &mut crop_rng)?;
                    targets.push(compute_target(teacher, &img, k, cfg, dataset.len() as u64 + visit)?);
                    images.push(img);
                    visit += 1;
                }
            }
        }
        let lr = lr_schedule(step, steps, cfg);
        let loss = if mask.is_empty() {
            loss_and_grads(&student, &images, &targets, &mask)?.0
        } else {
            train_step(&mut student, &images, &targets, &mask, &mut opt, lr)?
        };
        let eval = match &eval_targets {
            Some(t) if (step + 1) % cfg.eval_every == 0 => Some(evaluate(&student, dataset, t)?),
            _ => None,
        };
        log.entries.push(LogEntry { step, loss, lr, eval });
    }
    if let Some(t) = &eval_targets {
        log.final_eval = Some(evaluate(&student, dataset, t)?);
    }
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::vit::{init_student_from_teacher, ViTConfig};

    fn grid1(v: [f32; 2]) -> FeatureGrid<f32> {
        FeatureGrid::new(1, 1, 2, v.to_vec()).unwrap()
    }

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    fn image(seed: u64) -> Image {
        use rand::Rng;
        let mut r = rng::stream(seed, "distill-test-image");
        Image::new(16, 16, (0..16 * 16 * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn loss_anchor_values() {
        assert_eq!(distill_loss(&grid1([1.0, 0.0]), &grid1([1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(distill_loss(&grid1([1.0, 0.0]), &grid1([0.0, 1.0])).unwrap(), 2.0);
        assert_eq!(distill_loss(&grid1([1.0, 0.0]), &grid1([-1.0, 0.0])).unwrap(), 4.0);
        let a = FeatureGrid::<f32>::from_fn(3, 2, 5, |r, c, k| (r * 7 + c * 3 + k) as f32 * 0.37 - 2.0);
        assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
        assert!(distill_loss(&a, &FeatureGrid::zeros(2, 3, 5)).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = DistillConfig::default();
        assert!((lr_schedule(0, 100, &cfg) - 3e-4).abs() < 1e-18);
        assert!((lr_schedule(100, 100, &cfg) - 1e-5).abs() < 1e-18);
        let mid = 3e-4 * (1.0f64 / 30.0).sqrt();
        assert!((lr_schedule(50, 100, &cfg) - mid).abs() < 1e-12);
        assert!((mid - 5.477e-5).abs() < 1e-8);
        let d = DistillConfig::dinov2();
        assert_eq!((d.initial_lr, d.final_lr, d.batch_size), (1e-4, 5e-6, 8));
        assert!(DistillConfig { final_lr: 1e-3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn unlock_mask_counts() {
        let teacher = ViTModel::<f32>::init(tiny_config(), 0).unwrap();
        let student = init_student_from_teacher(&teacher, 4, 0);
        let regs = build_unlock_mask(&student, &["registers"]).unwrap();
        assert_eq!(regs.counts(&student).0, 4 * 16);
        // Registers are implied whenever the model has them.
        let implied = build_unlock_mask::<f32, &str>(&student, &[]).unwrap();
        assert_eq!(implied, regs);
        let none = build_unlock_mask::<f32, &str>(&teacher, &[]).unwrap();
        assert_eq!(none.counts(&teacher).0, 0);
        assert!(none.is_empty());
        assert!(matches!(build_unlock_mask(&student, &["decoder"]), Err(Error::UnknownGroup(_))));
        assert!(build_unlock_mask(&student, &["block:2"]).is_err());

        let reference = build_unlock_mask(&student, &REFERENCE_UNLOCK).unwrap();
        for p in student.params() {
            let expect = matches!(
                p.group,
                ParamGroup::Registers | ParamGroup::PositionalEmbedding | ParamGroup::PatchEmbedding | ParamGroup::Block(1)
            );
            assert_eq!(reference.is_unlocked(p.group), expect, "{}", p.name);
        }
        let extra = build_unlock_mask(&student, &["block:0"]).unwrap();
        assert!(extra.is_unlocked(ParamGroup::Block(0)));
        assert!(!extra.is_unlocked(ParamGroup::Block(1)));
    }

    #[test]
    fn frozen_everything_is_a_no_op() {
        let teacher = ViTModel::<f32>::init(tiny_config(), 1).unwrap();
        let student = init_student_from_teacher(&teacher, 0, 0);
        let cfg = DistillConfig {
            unlock: vec![],
            steps: Some(3),
            batch_size: 2,
            n_augmentations: 2,
            ..Default::default()
        };
        let data: Vec<Image> = (0..3).map(image).collect();
        let (after, log) = run_distillation(&teacher, student.clone(), &data, &cfg).unwrap();
        assert_eq!(after, student);
        assert_eq!(log.entries.len(), 3);
        assert_eq!(log.unlocked_params, 0);
    }

    #[test]
    fn zero_budget_returns_student_unchanged() {
        let teacher = ViTModel::<f32>::init(tiny_config(), 1).unwrap();
        let student = init_student_from_teacher(&teacher, 2, 0);
        let cfg = DistillConfig { steps: None, epochs: 0, ..Default::default() };
        let (after, log) = run_distillation(&teacher, student.clone(), &[image(0)], &cfg).unwrap();
        assert_eq!(after, student);
        assert!(log.entries.is_empty());
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let teacher = ViTModel::<f32>::init(tiny_config(), 2).unwrap();
        let mut noisy = teacher.clone();
        noisy.artifacts = Some(crate::bench::ArtifactSpec { density: 0.25, seed: 3, ..Default::default() });
        let mut student = init_student_from_teacher(&teacher, 2, 0);
        let images: Vec<Image> = (0..2).map(image).collect();
        let cfg = DistillConfig { n_augmentations: 4, initial_lr: 3e-3, final_lr: 1e-3, ..Default::default() };
        let targets: Vec<FeatureGrid<f32>> = images
            .iter()
            .enumerate()
            .map(|(i, img)| compute_target(&noisy, img, 8, &cfg, i as u64).unwrap())
            .collect();
        let mask = build_unlock_mask(&student, &REFERENCE_UNLOCK).unwrap();
        let mut opt = AdamW::new(&cfg);
        let mut losses = Vec::new();
        for step in 0..50 {
            let lr = lr_schedule(step, 50, &cfg);
            losses.push(train_step(&mut student, &images, &targets, &mask, &mut opt, lr).unwrap());
        }
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses[49] < losses[0], "first {} last {}", losses[0], losses[49]);
    }

    #[test]
    fn register_gradient_matches_finite_differences() {
        let teacher = ViTModel::<f64>::init(tiny_config(), 4).unwrap();
        let student = init_student_from_teacher(&teacher, 2, 5);
        let img = image(9);
        let target = FeatureGrid::<f64>::from_fn(2, 2, 16, |r, c, k| ((r * 5 + c * 3 + k) as f64 * 0.61).sin());
        let bank = student.registers.clone().unwrap();
        let err = grad_check(
            |tape, regs| {
                let mut b = student.bind(tape, &|_, _| false);
                b.replace_registers(regs);
                let trace = student.forward_tape(tape, &b, &img)?;
                let t = tape.constant(target.to_tensor());
                distill_loss_tape(tape, t, trace.features)
            },
            &bank,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn adamw_skips_decay_on_exempt_parameters() {
        let teacher = ViTModel::<f64>::init(tiny_config(), 0).unwrap();
        let mut model = init_student_from_teacher(&teacher, 1, 0);
        let before = model.clone();
        let cfg = DistillConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(&cfg);
        let zero = |name: &str, m: &ViTModel<f64>| {
            let p = m.params().into_iter().find(|p| p.name == name).unwrap();
            (name.to_string(), Tensor::zeros(p.tensor.shape().to_vec()))
        };
        let grads = vec![zero("registers", &model), zero("patch_embed.weight", &model)];
        opt.step(&mut model, &grads, 0.1);
        // Zero gradient: only decoupled decay moves a parameter.
        assert_eq!(model.registers, before.registers);
        for (a, b) in model.patch_weight.data().iter().zip(before.patch_weight.data()) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-12);
        }
        assert_eq!(model.pos_embed, before.pos_embed);
    }
}

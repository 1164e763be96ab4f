use super::{extract_patches, interp, FeatureGrid, HeadMode, ParamGroup, ViTModel};
use crate::bench::{ArtifactField, ArtifactSite};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Additive attention-logit bias `-‖p − q‖² / (2σ²)` over patch pairs, in
/// token-index units. Rows and columns cover the full sequence; pairs that
/// involve the class token or a register get zero.
#[derive(Clone, Debug)]
pub struct NeighborhoodBias;

impl NeighborhoodBias {
    /// `[prefix + rows*cols]²` bias matrix, where `prefix = 1 + m`.
    pub fn matrix<S: Scalar>(rows: usize, cols: usize, prefix: usize, sigma: f64) -> Result<Tensor<S>> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("neighborhood sigma must be positive"));
        }
        let n = prefix + rows * cols;
        let denom = 2.0 * sigma * sigma;
        Ok(Tensor::from_fn([n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            if i < prefix || j < prefix {
                return S::zero();
            }
            let (p, q) = (i - prefix, j - prefix);
            let dr = (p / cols) as f64 - (q / cols) as f64;
            let dc = (p % cols) as f64 - (q % cols) as f64;
            S::lit(-(dr * dr + dc * dc) / denom)
        }))
    }
}

/// Tape handles for every model parameter, in [`ViTModel::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    has_registers: bool,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn patch_weight(&self) -> Var {
        self.vars[0]
    }
    fn patch_bias(&self) -> Var {
        self.vars[1]
    }
    fn pos_embed(&self) -> Var {
        self.vars[2]
    }
    fn cls_pos(&self) -> Var {
        self.vars[3]
    }
    fn cls_token(&self) -> Var {
        self.vars[4]
    }
    pub fn registers(&self) -> Option<Var> {
        self.has_registers.then(|| self.vars[5])
    }

    /// Swap the register handle, e.g. for a leaf under gradient checking.
    pub fn replace_registers(&mut self, v: Var) {
        assert!(self.has_registers, "model has no registers");
        self.vars[5] = v;
    }

    /// Swap the handle of parameter `index` in [`ViTModel::params`] order.
    pub fn replace(&mut self, index: usize, v: Var) {
        self.vars[index] = v;
    }
    fn block(&self, i: usize) -> &[Var] {
        let start = 5 + usize::from(self.has_registers) + 12 * i;
        &self.vars[start..start + 12]
    }
    fn norm(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Intermediate results of a recorded forward pass.
pub struct ForwardTrace {
    /// `[rows*cols, d]` dense output.
    pub features: Var,
    pub grid: (usize, usize),
    /// Final-block attention probabilities per head (`[n, n]` each), when the
    /// plain head ran the final block.
    pub final_attention: Vec<Var>,
}

impl<S: Scalar> ViTModel<S> {
    /// Record every parameter on `tape`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: &dyn Fn(&str, ParamGroup) -> bool) -> Bound {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                let rg = trainable(&p.name, p.group);
                tape.leaf(p.tensor.clone(), rg)
            })
            .collect();
        Bound {
            vars,
            has_registers: self.registers.is_some(),
        }
    }

    /// Patch embedding: `[rows*cols, d]` tokens, each a function of its own patch only.
    pub fn patchify_embed(&self, image: &Image) -> Result<FeatureGrid<S>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &|_, _| false);
        let (tokens, grid) = self.embed_patches(&mut tape, &b, image)?;
        FeatureGrid::from_tensor(grid.0, grid.1, tape.value(tokens))
    }

    fn embed_patches(&self, tape: &mut Tape<S>, b: &Bound, image: &Image) -> Result<(Var, (usize, usize))> {
        let k = self.config.patch_size;
        let patches = tape.constant(extract_patches::<S>(image, k)?);
        let tokens = tape.linear(patches, b.patch_weight(), b.patch_bias())?;
        Ok((tokens, (image.height() / k, image.width() / k)))
    }

    /// Token sequence `[class, registers.., patches..]` with positional
    /// embeddings on class and patch tokens.
    pub fn assemble_tokens(&self, tape: &mut Tape<S>, b: &Bound, patch_tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let d = self.config.embed_dim;
        let base = self.config.grid();
        let pos = if grid == base {
            b.pos_embed()
        } else {
            let r = tape.constant(interp::grid_resize_matrix::<S>(base, grid));
            tape.matmul(r, b.pos_embed())?
        };
        let patches = tape.add(patch_tokens, pos)?;
        let cls = tape.add(b.cls_token(), b.cls_pos())?;
        let cls = tape.reshape(cls, [1, d])?;
        let mut parts = vec![cls];
        if let Some(r) = b.registers() {
            parts.push(r);
        }
        parts.push(patches);
        tape.concat(&parts, 0)
    }

    fn apply_artifacts(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        prefix: usize,
        grid: (usize, usize),
    ) -> Result<Var> {
        let Some(spec) = &self.artifacts else {
            return Ok(x);
        };
        let n = tape.shape(x)[0];
        let d = self.config.embed_dim;
        let patches = if prefix == 0 { x } else { tape.slice(x, 0, prefix, n)? };
        let p = grid.0 * grid.1;
        let field = ArtifactField::generate(spec, grid.0, grid.1, d);
        let (scale, unit) = field.scale_unit_offset();
        let scale = tape.constant(Tensor::from_fn([p, d], |i| S::lit(scale[i / d])));
        let unit = tape.constant(Tensor::from_fn([p, d], |i| S::lit(unit[i])));
        // The offset magnitude tracks the mean token norm, differentiably.
        let norms = tape.l2_norm(patches);
        let mean_norm = tape.mean(norms);
        let mean_norm = tape.reshape(mean_norm, [1, 1])?;
        let ones_p = tape.constant(Tensor::full(vec![p, 1], S::one()));
        let ones_d = tape.constant(Tensor::full(vec![1, d], S::one()));
        let column = tape.matmul(ones_p, mean_norm)?;
        let magnitude = tape.matmul(column, ones_d)?;
        let offset = tape.mul(unit, magnitude)?;
        let scaled = tape.mul(patches, scale)?;
        let perturbed = tape.add(scaled, offset)?;
        if prefix == 0 {
            return Ok(perturbed);
        }
        let head = tape.slice(x, 0, 0, prefix)?;
        tape.concat(&[head, perturbed], 0)
    }

    fn site_is(&self, site: ArtifactSite) -> bool {
        self.artifacts.as_ref().is_some_and(|a| a.site == site)
    }

    fn attention(
        &self,
        tape: &mut Tape<S>,
        h: Var,
        blk: &[Var],
        bias: Option<Var>,
        capture: &mut Vec<Var>,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let qkv = tape.linear(h, blk[2], blk[3])?;
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for j in 0..self.config.num_heads {
            let q = tape.slice(qkv, 1, j * dh, (j + 1) * dh)?;
            let k = tape.slice(qkv, 1, d + j * dh, d + (j + 1) * dh)?;
            let v = tape.slice(qkv, 1, 2 * d + j * dh, 2 * d + (j + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let mut logits = tape.scale(logits, scale);
            if let Some(bias) = bias {
                logits = tape.add(logits, bias)?;
            }
            let probs = tape.softmax_rows(logits);
            capture.push(probs);
            heads.push(tape.matmul(probs, v)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        tape.linear(merged, blk[4], blk[5])
    }

    fn block_forward(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        blk: &[Var],
        bias: Option<Var>,
        capture: &mut Vec<Var>,
    ) -> Result<Var> {
        let eps = S::lit(self.config.layer_norm_eps);
        let h = tape.layer_norm(x, blk[0], blk[1], eps)?;
        let a = self.attention(tape, h, blk, bias, capture)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, blk[6], blk[7], eps)?;
        let h = tape.linear(h, blk[8], blk[9])?;
        let h = tape.gelu(h);
        let h = tape.linear(h, blk[10], blk[11])?;
        tape.add(x, h)
    }

    /// Record the full forward pass and return the dense output handle.
    pub fn forward_tape(&self, tape: &mut Tape<S>, b: &Bound, image: &Image) -> Result<ForwardTrace> {
        let d = self.config.embed_dim;
        let depth = self.config.depth;
        let eps = S::lit(self.config.layer_norm_eps);
        let prefix = 1 + self.num_registers();
        let (tokens, grid) = self.embed_patches(tape, b, image)?;
        let mut x = self.assemble_tokens(tape, b, tokens, grid)?;
        let n = tape.shape(x)[0];
        debug_assert_eq!(n, prefix + grid.0 * grid.1);

        let run_final_block = self.config.head_mode == HeadMode::Plain;
        let mut final_attention = Vec::new();
        for i in 0..depth {
            if self.site_is(ArtifactSite::Residual(i)) {
                x = self.apply_artifacts(tape, x, prefix, grid)?;
            }
            let last = i + 1 == depth;
            if last && !run_final_block {
                break;
            }
            let bias = match (last, self.config.neighborhood_sigma) {
                (true, Some(sigma)) => Some(tape.constant(NeighborhoodBias::matrix::<S>(grid.0, grid.1, prefix, sigma)?)),
                _ => None,
            };
            let mut capture = Vec::new();
            x = self.block_forward(tape, x, b.block(i), bias, &mut capture)?;
            if last {
                final_attention = capture;
            }
        }

        let (norm_w, norm_b) = b.norm();
        let out = match self.config.head_mode {
            HeadMode::Plain => {
                if self.site_is(ArtifactSite::Residual(depth)) {
                    x = self.apply_artifacts(tape, x, prefix, grid)?;
                }
                let patches = tape.slice(x, 0, prefix, n)?;
                tape.layer_norm(patches, norm_w, norm_b, eps)?
            }
            HeadMode::ValueHead => {
                let blk = b.block(depth - 1);
                let patches = tape.slice(x, 0, prefix, n)?;
                let h = tape.layer_norm(patches, blk[0], blk[1], eps)?;
                let v_w = tape.slice(blk[2], 1, 2 * d, 3 * d)?;
                let v_b = tape.slice(blk[3], 0, 2 * d, 3 * d)?;
                let v = tape.linear(h, v_w, v_b)?;
                let mut o = tape.linear(v, blk[4], blk[5])?;
                if self.site_is(ArtifactSite::Residual(depth)) {
                    o = self.apply_artifacts(tape, o, 0, grid)?;
                }
                tape.layer_norm(o, norm_w, norm_b, eps)?
            }
        };
        let features = if self.site_is(ArtifactSite::Output) {
            self.apply_artifacts(tape, out, 0, grid)?
        } else {
            out
        };
        Ok(ForwardTrace {
            features,
            grid,
            final_attention,
        })
    }

    /// Dense features of `image`, excluding class and register tokens.
    pub fn forward_features(&self, image: &Image) -> Result<FeatureGrid<S>> {
        let k = self.config.patch_size;
        if image.height() % k != 0 || image.width() % k != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by patch size {k}",
                image.height(),
                image.width()
            )));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &|_, _| false);
        let trace = self.forward_tape(&mut tape, &b, image)?;
        let grid = FeatureGrid::from_tensor(trace.grid.0, trace.grid.1, tape.value(trace.features))?;
        debug_assert_eq!(grid.len(), (image.height() / k) * (image.width() / k));
        Ok(grid)
    }

    /// Final-block attention rows per head (plain head only).
    pub fn final_attention(&self, image: &Image) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &|_, _| false);
        let trace = self.forward_tape(&mut tape, &b, image)?;
        Ok(trace.final_attention.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Length of the sequence the blocks see for an `h×w` image.
    pub fn sequence_len_for(&self, h: usize, w: usize) -> usize {
        let k = self.config.patch_size;
        self.num_registers() + 1 + (h / k) * (w / k)
    }
}

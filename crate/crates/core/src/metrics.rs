//! Evaluation instruments: cosine percentiles, token-norm statistics, a
//! linear segmentation probe, zero-shot query heatmaps and the Pearson score.
//!
//! Cosine percentiles are reported over the *dissimilarity* order: `p99` is
//! the similarity below which only the worst 1% of patches fall. Patches are
//! pooled over the whole batch and ranks use the nearest-rank rule.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::kernels::{cosine, softmax_row};
use crate::tensor::Scalar;
use crate::vit::FeatureGrid;

/// Denominator guard shared by every cosine in the crate.
pub const COSINE_EPS: f64 = 1e-8;

/// Percentile ranks reported by [`cosine_percentiles`].
pub const PERCENTILES: [u32; 5] = [50, 70, 90, 95, 99];

/// Nearest-rank percentile of `values` in ascending order.
///
/// Rank is `ceil(pct/100 · n)` clamped to `[1, n]`. Panics on an empty slice.
pub fn percentile_nearest_rank(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[nearest_rank(sorted.len(), pct) - 1]
}

fn nearest_rank(n: usize, pct: f64) -> usize {
    ((pct / 100.0 * n as f64).ceil() as usize).clamp(1, n)
}

/// Per-patch cosine between two grids of equal extents, row-major.
pub fn patch_cosines<S: Scalar>(pred: &FeatureGrid<S>, target: &FeatureGrid<S>) -> Result<Vec<f64>> {
    if !pred.same_extents(target) {
        return Err(Error::shape(
            "patch_cosines",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                pred.rows(),
                pred.cols(),
                pred.dim(),
                target.rows(),
                target.cols(),
                target.dim()
            ),
        ));
    }
    Ok(pred
        .tokens()
        .zip(target.tokens())
        .map(|(a, b)| {
            let a: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
            cosine(&a, &b, COSINE_EPS)
        })
        .collect())
}

/// Lower-tail cosine similarities at the dissimilarity percentiles in
/// [`PERCENTILES`], plus the pooled mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CosinePercentiles {
    /// `(rank, similarity)` pairs; rank `r` is the `r`-th percentile of
    /// dissimilarity.
    pub values: Vec<(u32, f64)>,
    pub mean: f64,
    pub count: usize,
}

impl CosinePercentiles {
    pub fn get(&self, rank: u32) -> Option<f64> {
        self.values.iter().find(|(r, _)| *r == rank).map(|(_, v)| *v)
    }

    /// Similarity at the 99th dissimilarity percentile.
    pub fn worst(&self) -> f64 {
        self.get(99).expect("p99 always reported")
    }

    pub fn median(&self) -> f64 {
        self.get(50).expect("p50 always reported")
    }
}

/// Percentile table over pooled patch cosines.
pub fn percentiles_from_cosines(cosines: &[f64]) -> Result<CosinePercentiles> {
    if cosines.is_empty() {
        return Err(Error::invalid("cosine percentiles of an empty batch"));
    }
    // Ascending dissimilarity is descending similarity.
    let mut by_dissim = cosines.to_vec();
    by_dissim.sort_by(|a, b| b.total_cmp(a));
    let values = PERCENTILES
        .iter()
        .map(|&p| (p, by_dissim[nearest_rank(by_dissim.len(), f64::from(p)) - 1]))
        .collect();
    Ok(CosinePercentiles {
        values,
        mean: cosines.iter().sum::<f64>() / cosines.len() as f64,
        count: cosines.len(),
    })
}

pub fn cosine_percentiles<S: Scalar>(pred: &[FeatureGrid<S>], target: &[FeatureGrid<S>]) -> Result<CosinePercentiles> {
    if pred.len() != target.len() {
        return Err(Error::shape("cosine_percentiles", format!("{} vs {} grids", pred.len(), target.len())));
    }
    let mut all = Vec::new();
    for (p, t) in pred.iter().zip(target) {
        all.extend(patch_cosines(p, t)?);
    }
    percentiles_from_cosines(&all)
}

/// Scale used to turn a median absolute deviation into a normal-equivalent
/// standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub median: f64,
    pub mad: f64,
    /// Fraction of tokens whose norm lies outside `median ± 3·MAD_SCALE·mad`.
    pub outlier_fraction: f64,
    pub count: usize,
}

pub fn norm_stats_from(norms: &[f64]) -> NormStats {
    if norms.is_empty() {
        return NormStats { mean: 0.0, variance: 0.0, median: 0.0, mad: 0.0, outlier_fraction: 0.0, count: 0 };
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let variance = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let median = median(norms);
    let deviations: Vec<f64> = norms.iter().map(|x| (x - median).abs()).collect();
    let mad = median_of(deviations);
    let band = 3.0 * MAD_SCALE * mad;
    let outliers = norms.iter().filter(|x| (*x - median).abs() > band).count();
    NormStats {
        mean,
        variance,
        median,
        mad,
        outlier_fraction: outliers as f64 / n,
        count: norms.len(),
    }
}

/// Per-token L2 norm statistics pooled over a batch.
pub fn token_norm_stats<S: Scalar>(batch: &[FeatureGrid<S>]) -> NormStats {
    let norms: Vec<f64> = batch.iter().flat_map(|g| g.norms()).map(|v| v.as_f64()).collect();
    norm_stats_from(&norms)
}

fn median(values: &[f64]) -> f64 {
    median_of(values.to_vec())
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Segmentation scores in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegmentationScores {
    pub miou: f64,
    pub macc: f64,
}

/// mIoU and mAcc from token predictions. Classes absent from both truth and
/// prediction are left out of the IoU mean; classes absent from the truth
/// are left out of the accuracy mean.
pub fn segmentation_scores(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<SegmentationScores> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("segmentation_scores", format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnc = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!("label {} out of range for {num_classes} classes", p.max(t))));
        }
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnc[t] += 1;
        }
    }
    let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..num_classes {
        let union = tp[c] + fp[c] + fnc[c];
        if union > 0 {
            iou_sum += tp[c] as f64 / union as f64;
            iou_n += 1;
        }
        let support = tp[c] + fnc[c];
        if support > 0 {
            acc_sum += tp[c] as f64 / support as f64;
            acc_n += 1;
        }
    }
    Ok(SegmentationScores {
        miou: 100.0 * iou_sum / iou_n.max(1) as f64,
        macc: 100.0 * acc_sum / acc_n.max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    /// Passes over all training tokens.
    pub epochs: usize,
    /// Seeds the per-epoch token order.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-3, epochs: 100, seed: 0 }
    }
}

/// Trained linear decoder `logits = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub dim: usize,
    pub num_classes: usize,
    /// `[dim, classes]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    /// Per-token SGD on softmax cross-entropy from zero weights, visiting
    /// tokens in a seeded shuffled order each epoch.
    pub fn fit<S: Scalar>(grids: &[FeatureGrid<S>], labels: &[Vec<u32>], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (x, y, dim) = flatten(grids, labels, num_classes)?;
        let c = num_classes;
        let mut weight = vec![0.0; dim * c];
        let mut bias = vec![0.0; c];
        let mut logits = vec![0.0; c];
        let mut probs = vec![0.0; c];
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut r = crate::rng::stream(cfg.seed, "probe-order");
        for _ in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
            for &i in &order {
                let row = &x[i * dim..(i + 1) * dim];
                logits_into(row, &weight, &bias, &mut logits);
                softmax_row(&logits, &mut probs);
                probs[y[i] as usize] -= 1.0;
                for (j, xv) in row.iter().enumerate() {
                    for (w, p) in weight[j * c..(j + 1) * c].iter_mut().zip(&probs) {
                        *w -= cfg.learning_rate * xv * p;
                    }
                }
                for (b, p) in bias.iter_mut().zip(&probs) {
                    *b -= cfg.learning_rate * p;
                }
            }
        }
        Ok(Self { dim, num_classes, weight, bias })
    }

    pub fn predict<S: Scalar>(&self, grid: &FeatureGrid<S>) -> Vec<u32> {
        let mut logits = vec![0.0; self.num_classes];
        grid.tokens()
            .map(|t| {
                let row: Vec<f64> = t.iter().map(|v| v.as_f64()).collect();
                logits_into(&row, &self.weight, &self.bias, &mut logits);
                argmax(&logits) as u32
            })
            .collect()
    }
}

fn logits_into(row: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let c = out.len();
    out.copy_from_slice(bias);
    for (j, xv) in row.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(&weight[j * c..(j + 1) * c]) {
            *o += xv * w;
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    // First maximum wins, so ties resolve to the smaller class index.
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn flatten<S: Scalar>(grids: &[FeatureGrid<S>], labels: &[Vec<u32>], num_classes: usize) -> Result<(Vec<f64>, Vec<u32>, usize)> {
    if grids.is_empty() || grids.len() != labels.len() {
        return Err(Error::invalid(format!("{} grids with {} label maps", grids.len(), labels.len())));
    }
    let dim = grids[0].dim();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (g, l) in grids.iter().zip(labels) {
        if g.dim() != dim || g.len() != l.len() {
            return Err(Error::shape("linear_probe", format!("grid of {} tokens, dim {}, with {} labels", g.len(), g.dim(), l.len())));
        }
        if let Some(bad) = l.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        x.extend(g.values().iter().map(|v| v.as_f64()));
        y.extend_from_slice(l);
    }
    Ok((x, y, dim))
}

/// Fit on the training split and score the test split.
pub fn linear_probe<S: Scalar>(
    train: (&[FeatureGrid<S>], &[Vec<u32>]),
    test: (&[FeatureGrid<S>], &[Vec<u32>]),
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<SegmentationScores> {
    let probe = LinearProbe::fit(train.0, train.1, num_classes, cfg)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (g, l) in test.0.iter().zip(test.1) {
        pred.extend(probe.predict(g));
        truth.extend_from_slice(l);
    }
    segmentation_scores(&pred, &truth, num_classes)
}

/// `heatmap[p] = cosine(features[p], query)` in row-major order.
pub fn zero_shot_heatmap<S: Scalar>(features: &FeatureGrid<S>, query: &[f64]) -> Result<Vec<f64>> {
    if query.len() != features.dim() {
        return Err(Error::shape("zero_shot_heatmap", format!("query of length {} for dim {}", query.len(), features.dim())));
    }
    let norm = query.iter().map(|q| q * q).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("query must be unit norm, got {norm}")));
    }
    Ok(features
        .tokens()
        .map(|t| {
            let t: Vec<f64> = t.iter().map(|v| v.as_f64()).collect();
            cosine(&t, query, COSINE_EPS)
        })
        .collect())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Binary maps per class from token labels.
pub fn onehot_maps(labels: &[u32], num_classes: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| labels.iter().map(|&l| if l as usize == c { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Heatmaps and one-hot maps for one image, indexed by class.
#[derive(Clone, Debug)]
pub struct ZeroShotImage {
    pub heatmaps: Vec<Vec<f64>>,
    pub onehot: Vec<Vec<f64>>,
}

/// Per-image mean over classes of Pearson r, then mean over images.
/// Degenerate pairs count as 0.
pub fn pearson_zero_shot(images: &[ZeroShotImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("pearson_zero_shot needs at least one image"));
    }
    let mut total = 0.0;
    for img in images {
        if img.heatmaps.len() != img.onehot.len() || img.heatmaps.is_empty() {
            return Err(Error::shape("pearson_zero_shot", format!("{} heatmaps vs {} label maps", img.heatmaps.len(), img.onehot.len())));
        }
        let mut sum = 0.0;
        for (h, y) in img.heatmaps.iter().zip(&img.onehot) {
            if h.len() != y.len() || h.len() < 2 {
                return Err(Error::shape("pearson_zero_shot", format!("heatmap of {} tokens vs map of {}", h.len(), y.len())));
            }
            sum += pearson(h, y).unwrap_or(0.0);
        }
        total += sum / img.heatmaps.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Everything `eval` reports for one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub cosine: CosinePercentiles,
    pub norms: NormStats,
    pub segmentation: SegmentationScores,
    pub pearson: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    /// CSV header. Cosine columns name the dissimilarity rank explicitly.
    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = PERCENTILES.iter().map(|p| format!("cos_at_dissim_p{p}")).collect();
        h.extend(
            ["cos_mean", "norm_mean", "norm_variance", "norm_outlier_fraction", "miou", "macc", "pearson", "seed", "config_hash"]
                .map(String::from),
        );
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r: Vec<String> = self.cosine.values.iter().map(|(_, v)| v.to_string()).collect();
        r.extend([
            self.cosine.mean.to_string(),
            self.norms.mean.to_string(),
            self.norms.variance.to_string(),
            self.norms.outlier_fraction.to_string(),
            self.segmentation.miou.to_string(),
            self.segmentation.macc.to_string(),
            self.pearson.to_string(),
            self.seed.to_string(),
            self.config_hash.clone(),
        ]);
        r
    }
}

//! Command-line front end.
//!
//! Every subcommand reads an optional run config (TOML), applies flag
//! overrides, and writes outputs that embed the resulting config hash.
//! `PHREG_OUT_DIR` sets the default output directory and `PHREG_THREADS` the
//! number of worker threads for per-image work.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, gen_scene, SceneSpec};
use crate::distill::{evaluation_targets, run_distillation, TargetMode, TrainingLog};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{self, Container, Entry, RunConfig, CONFIG_HASH_KEY};
use crate::metrics::{
    cosine_percentiles, linear_probe, onehot_maps, patch_cosines, pearson_zero_shot, token_norm_stats,
    zero_shot_heatmap, MetricsReport, ProbeConfig, ZeroShotImage, PERCENTILES,
};
use crate::rng;
use crate::tta::{denoise_views, denoise_with_params, sample_aug_params, AugmentationParams, PadMode};
use crate::vit::{FeatureGrid, ViTModel};

pub const OUT_DIR_ENV: &str = "PHREG_OUT_DIR";
pub const THREADS_ENV: &str = "PHREG_THREADS";

/// File name of the bench container inside a bench directory.
pub const BENCH_FILE: &str = "bench.phrg";

/// Register counts swept by `ablate --sweep registers`.
pub const REGISTER_SWEEP: [usize; 6] = [0, 1, 2, 4, 8, 16];
/// Augmentation counts swept by `ablate --sweep augmentations`.
pub const AUGMENTATION_SWEEP: std::ops::RangeInclusive<usize> = 1..=10;

#[derive(Parser, Debug)]
#[command(name = "phreg", version, about = "Test-time denoising and register distillation for ViT features")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic segmentation bench.
    BenchGen(BenchGenArgs),
    /// Denoise teacher features of an image, or of externally computed views.
    Denoise(DenoiseArgs),
    /// Distill a student with registers from the denoised teacher.
    Distill(DistillArgs),
    /// Score a checkpoint on a bench.
    Eval(EvalArgs),
    /// Register-count and augmentation-count sweeps.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to $PHREG_OUT_DIR, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Args, Debug)]
struct BenchGenArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_test: Option<usize>,
    /// Skip writing PNG previews.
    #[arg(long)]
    no_png: bool,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input image (PNG).
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    image: Option<PathBuf>,
    /// Container with `views` `[n, rows, cols, dim]` and `params` `[n, 3]`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Teacher checkpoint; the config's teacher is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    n_augmentations: Option<usize>,
    #[arg(long, value_enum)]
    pad: Option<PadArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PadArg {
    Mean,
    White,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Recompute,
    Cached,
}

/// One optional flag per distillation setting.
#[derive(Args, Debug, Clone, Default)]
struct DistillFlags {
    #[arg(long)]
    n_augmentations: Option<usize>,
    #[arg(long)]
    num_registers: Option<usize>,
    #[arg(long)]
    initial_lr: Option<f64>,
    #[arg(long)]
    final_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fixed step budget; `0` means derive the budget from epochs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    resize_shorter: Option<usize>,
    #[arg(long)]
    square_crop: Option<usize>,
    #[arg(long, value_enum)]
    target_mode: Option<TargetArg>,
    /// Comma-separated parameter groups to train.
    #[arg(long, value_delimiter = ',')]
    unlock: Option<Vec<String>>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_shift_frac: Option<f64>,
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Use the DINOv2 optimisation preset as the base.
    #[arg(long)]
    dinov2: bool,
}

impl DistillFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.distill;
        if self.dinov2 {
            *d = crate::distill::DistillConfig { unlock: d.unlock.clone(), ..crate::distill::DistillConfig::dinov2() };
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { d.$f = v; })* };
        }
        set!(n_augmentations, num_registers, initial_lr, final_lr, weight_decay, adam_eps, batch_size, epochs);
        set!(unlock, eval_every, max_shift_frac, flip_prob);
        if let Some(b) = self.beta1 {
            d.betas.0 = b;
        }
        if let Some(b) = self.beta2 {
            d.betas.1 = b;
        }
        if let Some(s) = self.steps {
            d.steps = (s > 0).then_some(s);
        }
        if let Some(s) = self.resize_shorter {
            d.crop.resize_shorter = Some(s);
        }
        if let Some(s) = self.square_crop {
            d.crop.square = Some(s);
        }
        if let Some(t) = self.target_mode {
            d.target_mode = match t {
                TargetArg::Recompute => TargetMode::Recompute,
                TargetArg::Cached => TargetMode::Cached,
            };
        }
    }
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    flags: DistillFlags,
    /// Bench directory produced by `bench-gen`.
    #[arg(long)]
    bench: PathBuf,
    /// Defaults to `<out>/student.phrg`.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Training log CSV. Defaults to `<out>/train_log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, required_unless_present = "teacher")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    bench: PathBuf,
    /// Evaluate the noisy teacher itself instead of a checkpoint.
    #[arg(long)]
    teacher: bool,
    /// Skip the checkpoint/bench config-hash check.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Registers,
    Augmentations,
    All,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    flags: DistillFlags,
    #[arg(long, value_enum, default_value = "all")]
    sweep: Sweep,
    /// Bench directory; generated in memory from the config when omitted.
    #[arg(long)]
    bench: Option<PathBuf>,
}

/// Parse `argv` (program name first) and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::BenchGen(a) => bench_gen(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

/// Worker count from `PHREG_THREADS`, at least one.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Order-preserving parallel map over contiguous chunks. Results do not
/// depend on the thread count.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One bench split: images and per-patch labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<u32>>,
}

/// The synthetic bench as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Bench {
    pub train: Split,
    pub test: Split,
    /// `[num_classes][prototype_dim]` query prototypes.
    pub prototypes: Vec<Vec<f32>>,
    pub num_classes: usize,
    pub config_hash: String,
}

/// Scene spec for image `index` of `split`: shared palette, per-image layout.
fn scene_spec(cfg: &RunConfig, split: &str, index: usize) -> SceneSpec {
    let base = SceneSpec { seed: rng::derive_seed(cfg.seed, "bench-palette"), ..cfg.scene.clone() };
    SceneSpec {
        palette: bench::palette(&base),
        seed: rng::derive_seed(cfg.seed, &format!("bench-{split}-{index}")),
        ..cfg.scene.clone()
    }
}

pub fn generate_bench(cfg: &RunConfig) -> Result<Bench> {
    cfg.validate()?;
    let split = |name: &str, n: usize| -> Result<Split> {
        let scenes = (0..n).map(|i| gen_scene(&scene_spec(cfg, name, i))).collect::<Result<Vec<_>>>()?;
        Ok(Split {
            images: scenes.iter().map(|s| s.image.clone()).collect(),
            labels: scenes.into_iter().map(|s| s.labels).collect(),
        })
    };
    Ok(Bench {
        train: split("train", cfg.bench.train)?,
        test: split("test", cfg.bench.test)?,
        prototypes: bench::prototypes(
            cfg.scene.num_classes,
            cfg.scene.prototype_dim,
            rng::derive_seed(cfg.seed, "bench-prototypes"),
        )?,
        num_classes: cfg.scene.num_classes,
        config_hash: cfg.hash()?,
    })
}

fn split_entries(c: &mut Container, name: &str, s: &Split, rows: usize, cols: usize) {
    if s.images.is_empty() {
        return;
    }
    let (h, w) = (s.images[0].height(), s.images[0].width());
    c.push(Entry::f32(
        format!("{name}/images"),
        vec![s.images.len(), h, w, 3],
        s.images.iter().flat_map(|i| i.data().iter().copied()).collect(),
    ));
    c.push(Entry::i32(
        format!("{name}/labels"),
        vec![s.labels.len(), rows, cols],
        s.labels.iter().flatten().map(|&l| l as i32).collect(),
    ));
}

pub fn bench_container(b: &Bench, cfg: &RunConfig) -> Result<Container> {
    let (rows, cols) = cfg.vit.grid();
    let mut c = Container::new()
        .with_meta("kind", "bench")
        .with_meta(CONFIG_HASH_KEY, b.config_hash.clone())
        .with_meta("run_config", cfg.to_toml()?)
        .with_meta("num_classes", b.num_classes.to_string());
    split_entries(&mut c, "train", &b.train, rows, cols);
    split_entries(&mut c, "test", &b.test, rows, cols);
    c.push(Entry::f32(
        "prototypes",
        vec![b.prototypes.len(), b.prototypes[0].len()],
        b.prototypes.iter().flatten().copied().collect(),
    ));
    Ok(c)
}

fn read_split(c: &Container, name: &str) -> Result<Split> {
    let Ok(imgs) = c.get(&format!("{name}/images")) else {
        return Ok(Split { images: Vec::new(), labels: Vec::new() });
    };
    let labels = c.get(&format!("{name}/labels"))?;
    let [n, h, w, _] = imgs.shape[..] else {
        return Err(Error::Format(format!("{name}/images must have rank 4")));
    };
    let data = imgs.as_f32()?;
    let images = data.chunks(h * w * 3).map(|d| Image::new(h, w, d.to_vec())).collect::<Result<Vec<_>>>()?;
    let per = labels.shape[1..].iter().product::<usize>();
    if labels.shape[0] != n {
        return Err(Error::Format(format!("{name}: {n} images but {} label maps", labels.shape[0])));
    }
    let labels = labels.as_i32()?.chunks(per).map(|l| l.iter().map(|&v| v as u32).collect()).collect();
    Ok(Split { images, labels })
}

pub fn load_bench(dir: &Path) -> Result<(Bench, Option<RunConfig>)> {
    let path = if dir.is_dir() { dir.join(BENCH_FILE) } else { dir.to_path_buf() };
    let c = io::read_container(&path)?;
    let protos = c.get("prototypes")?;
    let d = protos.shape[1];
    let cfg = c.meta("run_config").map(RunConfig::from_toml).transpose()?;
    let bench = Bench {
        train: read_split(&c, "train")?,
        test: read_split(&c, "test")?,
        prototypes: protos.as_f32()?.chunks(d).map(<[f32]>::to_vec).collect(),
        num_classes: c
            .meta("num_classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("bench lacks num_classes".into()))?,
        config_hash: c.meta(CONFIG_HASH_KEY).unwrap_or_default().to_string(),
    };
    Ok((bench, cfg))
}

fn bench_gen(a: BenchGenArgs) -> Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(n) = a.num_train {
        cfg.bench.train = n;
    }
    if let Some(n) = a.num_test {
        cfg.bench.test = n;
    }
    let out = a.common.out_dir();
    let b = generate_bench(&cfg)?;
    io::write_container(&out.join(BENCH_FILE), &bench_container(&b, &cfg)?)?;
    if !a.no_png {
        for (split, s) in [("train", &b.train), ("test", &b.test)] {
            for (i, img) in s.images.iter().enumerate() {
                img.save_png(&out.join(format!("{split}_{i:04}.png")))?;
            }
        }
    }
    eprintln!("wrote {} train and {} test scenes to {}", b.train.images.len(), b.test.images.len(), out.display());
    Ok(())
}

/// Pack `[n, 3]` records as `(shift_x, shift_y, flip)`.
fn params_entry(params: &[AugmentationParams]) -> Entry {
    let data = params.iter().flat_map(|p| [p.shift_x as i32, p.shift_y as i32, i32::from(p.flip)]).collect();
    Entry::i32("params", vec![params.len(), 3], data)
}

fn params_from_entry(e: &Entry) -> Result<Vec<AugmentationParams>> {
    if e.shape.len() != 2 || e.shape[1] != 3 {
        return Err(Error::Format("params must have shape [n, 3]".into()));
    }
    Ok(e.as_i32()?
        .chunks(3)
        .map(|r| AugmentationParams { shift_x: i64::from(r[0]), shift_y: i64::from(r[1]), flip: r[2] != 0 })
        .collect())
}

fn denoise_cmd(a: DenoiseArgs) -> Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(n) = a.n_augmentations {
        cfg.denoise.n_augmentations = n;
    }
    if let Some(p) = a.pad {
        cfg.denoise.pad = match p {
            PadArg::Mean => PadMode::MeanColor,
            PadArg::White => PadMode::White,
        };
    }
    let k = cfg.vit.patch_size;
    let (grid, params) = if let Some(path) = &a.features {
        let c = io::read_container(path)?;
        let views = c.get("views")?;
        let [n, r, col, d] = views.shape[..] else {
            return Err(Error::Format("views must have shape [n, rows, cols, dim]".into()));
        };
        let grids = views
            .as_f32()?
            .chunks(r * col * d)
            .map(|v| FeatureGrid::new(r, col, d, v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let params = params_from_entry(c.get("params")?)?;
        debug_assert_eq!(grids.len(), n);
        (denoise_views(&grids, &params, k, cfg.denoise.summation)?, params)
    } else {
        let image = Image::load(a.image.as_deref().expect("clap enforces image or features"))?;
        let teacher = match &a.checkpoint {
            Some(p) => io::load_model(p)?.0,
            None => cfg.teacher()?,
        };
        let mut r = rng::stream(cfg.seed, "denoise");
        let d = &cfg.denoise;
        let params =
            sample_aug_params(&mut r, d.n_augmentations, d.max_shift_frac, d.flip_prob, k, (image.height(), image.width()))?;
        (denoise_with_params(&teacher, &image, &params, k, d.pad, d.summation)?, params)
    };
    let coverage = grid.coverage().map(|c| c.iter().map(|&v| v as i32).collect()).unwrap_or_default();
    let mut c = Container::new().with_meta("kind", "denoised").with_meta(CONFIG_HASH_KEY, cfg.hash()?);
    c.push(Entry::from_grid("features", &grid));
    c.push(Entry::i32("coverage", vec![grid.rows(), grid.cols()], coverage));
    c.push(params_entry(&params));
    let out = a.common.out_dir().join("denoised.phrg");
    io::write_container(&out, &c)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Config for a bench-consuming command: explicit config, else the bench's own.
fn config_for_bench(common: &CommonArgs, bench_cfg: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, bench_cfg) {
        (None, Some(c)) => c,
        _ => common.run_config()?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_log(path: &Path, log: &TrainingLog) -> Result<()> {
    let header = ["step", "loss", "lr", "eval_mean", "eval_worst"].map(String::from);
    let rows: Vec<Vec<String>> = log
        .entries
        .iter()
        .map(|e| {
            vec![
                e.step.to_string(),
                e.loss.to_string(),
                e.lr.to_string(),
                e.eval.as_ref().map(|v| v.mean.to_string()).unwrap_or_default(),
                e.eval.as_ref().map(|v| v.worst().to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_csv(path, &header, &rows)
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let (bench, bench_cfg) = load_bench(&a.bench)?;
    let mut cfg = config_for_bench(&a.common, bench_cfg)?;
    a.flags.apply(&mut cfg);
    cfg.validate()?;
    let teacher = cfg.teacher()?;
    let student = cfg.student(cfg.distill.num_registers)?;
    let (student, log) = run_distillation(&teacher, student, &bench.train.images, &cfg.distill_config())?;
    let out = a.common.out_dir();
    let ckpt = a.checkpoint_out.unwrap_or_else(|| out.join("student.phrg"));
    let container = io::model_container(&student, &cfg.hash()?)?
        .with_meta("run_config", cfg.to_toml()?)
        .with_meta("bench_hash", bench.config_hash.clone());
    io::write_container(&ckpt, &container)?;
    write_log(&a.log.unwrap_or_else(|| out.join("train_log.csv")), &log)?;
    let last = log.entries.last().map_or(f64::NAN, |e| e.loss);
    eprintln!(
        "trained {}/{} parameters for {} steps, final loss {last:.6}; wrote {}",
        log.unlocked_params,
        log.total_params,
        log.entries.len(),
        ckpt.display()
    );
    Ok(())
}

/// Scores and per-token dump for one model on a bench.
pub struct Evaluation {
    pub report: MetricsReport,
    pub dump: Container,
}

/// Evaluate `model` on the bench test split against denoised teacher targets.
pub fn evaluate_model(model: &ViTModel<f32>, teacher: &ViTModel<f32>, bench: &Bench, cfg: &RunConfig) -> Result<Evaluation> {
    let threads = thread_count();
    let k = cfg.vit.patch_size;
    let dcfg = cfg.distill_config();
    let test_targets: Vec<FeatureGrid<f32>> = evaluation_targets(teacher, &bench.test.images, k, &dcfg)?;
    let test_feats = par_map(&bench.test.images, threads, |i| model.forward_features(i))?;
    let train_feats = par_map(&bench.train.images, threads, |i| model.forward_features(i))?;
    let cosine = cosine_percentiles(&test_feats, &test_targets)?;
    let norms = token_norm_stats(&test_feats);
    let segmentation = linear_probe(
        (&train_feats, &bench.train.labels),
        (&test_feats, &bench.test.labels),
        bench.num_classes,
        &ProbeConfig::default(),
    )?;
    let queries = class_queries(&train_feats, &bench.train.labels, bench.num_classes);
    let zs: Vec<ZeroShotImage> = test_feats
        .iter()
        .zip(&bench.test.labels)
        .map(|(g, l)| {
            Ok(ZeroShotImage {
                heatmaps: queries.iter().map(|q| zero_shot_heatmap(g, q)).collect::<Result<_>>()?,
                onehot: onehot_maps(l, bench.num_classes),
            })
        })
        .collect::<Result<_>>()?;
    let pearson = pearson_zero_shot(&zs)?;
    let report = MetricsReport { cosine, norms, segmentation, pearson, seed: cfg.seed, config_hash: cfg.hash()? };

    let (n, rows, cols) = (test_feats.len(), cfg.vit.grid().0, cfg.vit.grid().1);
    let mut dump = Container::new().with_meta("kind", "token-dump").with_meta(CONFIG_HASH_KEY, report.config_hash.clone());
    dump.push(Entry::f32("norms", vec![n, rows, cols], test_feats.iter().flat_map(|g| g.norms()).collect()));
    let cos: Vec<f32> = test_feats
        .iter()
        .zip(&test_targets)
        .map(|(p, t)| patch_cosines(p, t))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .map(|v| v as f32)
        .collect();
    dump.push(Entry::f32("cosines", vec![n, rows, cols], cos));
    dump.push(Entry::f32(
        "heatmaps",
        vec![n, bench.num_classes, rows, cols],
        zs.iter().flat_map(|z| z.heatmaps.iter().flatten().map(|&v| v as f32)).collect(),
    ));
    dump.push(Entry::f32(
        "target_norms",
        vec![n, rows, cols],
        test_targets.iter().flat_map(|g| g.norms()).collect(),
    ));
    Ok(Evaluation { report, dump })
}

/// Unit-norm mean feature per class over the training split. Classes with
/// no tokens get the first basis vector so the heatmap stays defined.
fn class_queries(feats: &[FeatureGrid<f32>], labels: &[Vec<u32>], num_classes: usize) -> Vec<Vec<f64>> {
    let d = feats.first().map_or(1, FeatureGrid::dim);
    let mut sums = vec![vec![0.0f64; d]; num_classes];
    for (g, l) in feats.iter().zip(labels) {
        for (t, &c) in g.tokens().zip(l) {
            sums[c as usize].iter_mut().zip(t).for_each(|(s, &v)| *s += f64::from(v));
        }
    }
    sums.into_iter()
        .map(|mut s| {
            let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                s.iter_mut().for_each(|v| *v /= n);
            } else {
                s[0] = 1.0;
            }
            s
        })
        .collect()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (bench, bench_cfg) = load_bench(&a.bench)?;
    let (model, ckpt_cfg, bench_hash) = match &a.checkpoint {
        Some(p) if !a.teacher => {
            let c = io::read_container(p)?;
            let cfg = c.meta("run_config").map(RunConfig::from_toml).transpose()?;
            (Some(io::model_from_container(&c)?), cfg, c.meta("bench_hash").map(str::to_string))
        }
        _ => (None, None, None),
    };
    if !a.force {
        if let Some(h) = &bench_hash {
            if *h != bench.config_hash {
                return Err(Error::Config(format!(
                    "checkpoint was trained on bench {h} but this bench is {}; pass --force to override",
                    bench.config_hash
                )));
            }
        }
    }
    let cfg = config_for_bench(&a.common, ckpt_cfg.or(bench_cfg))?;
    let teacher = cfg.teacher()?;
    let model = model.unwrap_or_else(|| teacher.clone());
    let ev = evaluate_model(&model, &teacher, &bench, &cfg)?;
    let out = a.common.out_dir();
    io::write_csv(&out.join("metrics.csv"), &MetricsReport::csv_header(), &[ev.report.csv_row()])?;
    io::write_container(&out.join("tokens.phrg"), &ev.dump)?;
    eprintln!(
        "mean cosine {:.4}, worst-1% cosine {:.4}, norm variance {:.4}, mIoU {:.2}, pearson {:.4}",
        ev.report.cosine.mean,
        ev.report.cosine.worst(),
        ev.report.norms.variance,
        ev.report.segmentation.miou,
        ev.report.pearson
    );
    Ok(())
}

/// Header of the ablation CSVs.
pub fn ablation_header() -> Vec<String> {
    let mut h = vec!["sweep".to_string(), "value".to_string()];
    h.extend(PERCENTILES.iter().map(|p| format!("cos_at_dissim_p{p}")));
    h.extend(["cos_mean", "final_loss", "seed", "config_hash"].map(String::from));
    h
}

/// Distill once per sweep value and score against fixed test targets.
pub fn run_sweep(cfg: &RunConfig, bench: &Bench, sweep: Sweep) -> Result<Vec<Vec<String>>> {
    let teacher = cfg.teacher()?;
    let k = cfg.vit.patch_size;
    let base = cfg.distill_config();
    let targets = evaluation_targets(&teacher, &bench.test.images, k, &base)?;
    let values: Vec<usize> = match sweep {
        Sweep::Registers => REGISTER_SWEEP.to_vec(),
        Sweep::Augmentations => AUGMENTATION_SWEEP.collect(),
        Sweep::All => unreachable!("split by caller"),
    };
    let label = if sweep == Sweep::Registers { "registers" } else { "augmentations" };
    let hash = cfg.hash()?;
    values
        .into_iter()
        .map(|v| {
            let (m, dcfg) = match sweep {
                Sweep::Registers => (v, base.clone()),
                _ => (base.num_registers, crate::distill::DistillConfig { n_augmentations: v, ..base.clone() }),
            };
            let (student, log) = run_distillation(&teacher, cfg.student(m)?, &bench.train.images, &dcfg)?;
            let preds = par_map(&bench.test.images, thread_count(), |i| student.forward_features(i))?;
            let p = cosine_percentiles(&preds, &targets)?;
            let mut row = vec![label.to_string(), v.to_string()];
            row.extend(p.values.iter().map(|(_, c)| c.to_string()));
            row.extend([
                p.mean.to_string(),
                log.entries.last().map_or(f64::NAN, |e| e.loss).to_string(),
                cfg.seed.to_string(),
                hash.clone(),
            ]);
            eprintln!("{label}={v}: mean cosine {:.4}", p.mean);
            Ok(row)
        })
        .collect()
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let (bench, mut cfg) = match &a.bench {
        Some(dir) => {
            let (b, bc) = load_bench(dir)?;
            (Some(b), config_for_bench(&a.common, bc)?)
        }
        None => (None, a.common.run_config()?),
    };
    a.flags.apply(&mut cfg);
    cfg.validate()?;
    let bench = match bench {
        Some(b) => b,
        None => generate_bench(&cfg)?,
    };
    let out = a.common.out_dir();
    let sweeps = match a.sweep {
        Sweep::All => vec![Sweep::Registers, Sweep::Augmentations],
        s => vec![s],
    };
    for s in sweeps {
        let rows = run_sweep(&cfg, &bench, s)?;
        let name = if s == Sweep::Registers { "ablate_registers.csv" } else { "ablate_augmentations.csv" };
        io::write_csv(&out.join(name), &ablation_header(), &rows)?;
    }
    Ok(())
}

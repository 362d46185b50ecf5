//! Training loops for both stages.
//!
//! Each batch item gets its own tape. Per-item parameter gradients are
//! summed in batch order before the optimizer step, so results do not depend
//! on how many worker threads computed the items.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint, TrainingMeta};
use crate::curve::enhance_iterative_var;
use crate::error::{Error, Result};
use crate::imaging::{list_images, load_image, resize, ImageTensor, ResizeFilter};
use crate::losses::{image_constant, stage1_total, stage2_total, LossWeights, Stage1Breakdown, Stage2Breakdown};
use crate::nets::{DenoisingNet, LuminanceNet, Network, DENOISING_DEPTH, DENOISING_WIDTH, LUMINANCE_DEPTH, LUMINANCE_WIDTH};
use crate::noise::{add_noise, sample_sigma, stream_rng, NoiseConfig};
use crate::tensor::{adam_step, AdamState, Tape, Var};

pub const STAGE1_LOG_HEADER: &str = "epoch,lcol,gcol,lum,smo_a,smo_b,total";
pub const STAGE2_LOG_HEADER: &str = "epoch,ssim,grad_match,grad_mag,total";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Training images are resized to `size x size`.
    pub size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub noise: NoiseConfig,
    pub luminance_depth: usize,
    pub luminance_width: usize,
    pub denoising_depth: usize,
    pub denoising_width: usize,
    /// Worker threads for batch items; `None` uses every core.
    pub threads: Option<usize>,
    pub resize_filter: ResizeFilter,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 200,
            size: 512,
            seed: 0,
            weights: LossWeights::default(),
            noise: NoiseConfig::default(),
            luminance_depth: LUMINANCE_DEPTH,
            luminance_width: LUMINANCE_WIDTH,
            denoising_depth: DENOISING_DEPTH,
            denoising_width: DENOISING_WIDTH,
            threads: None,
            resize_filter: ResizeFilter::Bilinear,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            epochs: 50,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch size", self.batch_size),
            ("size", self.size),
            ("luminance depth", self.luminance_depth),
            ("luminance width", self.luminance_width),
            ("denoising width", self.denoising_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.size < 3 {
            return Err(Error::InvalidArgument(format!("size must be at least 3, got {}", self.size)));
        }
        if self.denoising_depth < 2 {
            return Err(Error::InvalidArgument("denoising depth must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay * self.lr < 1.0) {
            return Err(Error::InvalidArgument(format!("weight decay {} is invalid", self.weight_decay)));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("threads must be positive".into()));
        }
        self.weights.validate()?;
        self.noise.validate()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
    }
}

/// Images loaded for training, in file-name order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor>,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every image in `dir` and resizes it to `size x size`.
pub fn load_dataset(dir: impl AsRef<Path>, size: usize, filter: ResizeFilter) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let mut ds = Dataset {
        names: Vec::new(),
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for path in &files {
        match load_image(path) {
            Ok(img) => {
                ds.images.push(resize(&img, size, size, filter)?);
                ds.names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                ds.skipped.push((path.clone(), e.to_string()));
            }
        }
    }
    if ds.images.is_empty() {
        return Err(Error::NoReadableImages(files.len()));
    }
    Ok(ds)
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const NOISE_TAG: u64 = 0x4e4f_4953;
const INIT_TAG: u64 = 0x494e_4954;

/// Mixes a seed, a purpose tag and an epoch into one stream seed.
fn derive_seed(seed: u64, tag: u64, epoch: u64) -> u64 {
    let mut z = seed ^ tag.rotate_left(32) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed used to initialise a fresh network of the given stage.
pub fn init_seed(seed: u64, stage: u64) -> u64 {
    derive_seed(seed, INIT_TAG, stage)
}

/// Visiting order of `n` items in epoch `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_TAG, epoch));
    order.shuffle(&mut rng);
    order
}

/// Noise generator for image `index` in epoch `epoch`.
pub fn noise_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    stream_rng(derive_seed(seed, NOISE_TAG, epoch), index as u64)
}

fn collect_grads(tape: &mut Tape<f32>, params: &[Var]) -> Vec<Vec<f32>> {
    params
        .iter()
        .map(|&v| tape.take_grad(v).expect("parameter leaves are tracked"))
        .collect()
}

/// Sums per-item gradients in order, averages over the batch and steps.
fn apply_batch(params: Vec<&mut crate::tensor::Parameter>, optim: &mut [AdamState], items: Vec<Vec<Vec<f32>>>) -> Result<()> {
    let scale = 1.0 / items.len() as f32;
    for (k, (p, state)) in params.into_iter().zip(optim.iter_mut()).enumerate() {
        let mut acc = vec![0.0f32; p.numel()];
        for item in &items {
            acc.iter_mut().zip(&item[k]).for_each(|(a, g)| *a += g);
        }
        acc.iter_mut().for_each(|a| *a *= scale);
        p.grad = None;
        p.accumulate_grad(&acc);
        adam_step(p, state)?;
    }
    Ok(())
}

fn fresh_optim<N: Network>(net: &N, cfg: &TrainConfig) -> Vec<AdamState> {
    net.parameters()
        .iter()
        .map(|p| AdamState::new(p.numel(), cfg.lr, cfg.weight_decay))
        .collect()
}

fn check_optim<N: Network>(net: &N, optim: &[AdamState]) -> Result<()> {
    let sizes: Vec<usize> = net.parameters().iter().map(|p| p.numel()).collect();
    let found: Vec<usize> = optim.iter().map(|s| s.m.len()).collect();
    if sizes != found {
        return Err(Error::DescriptorMismatch {
            expected: format!("optimizer state for {}", net.descriptor()),
            found: format!("{} parameter slots", found.len()),
        });
    }
    Ok(())
}

/// Loss, gradients and breakdown of one Stage I item.
pub fn stage1_item(net: &LuminanceNet, img: &ImageTensor, w: &LossWeights) -> Result<(Stage1Breakdown, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let x = image_constant(&mut tape, img)?;
    let fwd = net.forward_tape(&mut tape, x)?;
    let i_e = enhance_iterative_var(&mut tape, x, &fwd.steps)?;
    let vars = stage1_total(&mut tape, x, i_e, &fwd.steps, w)?;
    tape.backward(vars.total)?;
    Ok((vars.read(&tape), collect_grads(&mut tape, &fwd.params)))
}

/// Loss, gradients and breakdown of one Stage II item.
pub fn stage2_item(
    net: &DenoisingNet,
    target: &ImageTensor,
    noisy_enhanced: &ImageTensor,
    w: &LossWeights,
) -> Result<(Stage2Breakdown, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let e = image_constant(&mut tape, target)?;
    let x = image_constant(&mut tape, noisy_enhanced)?;
    let fwd = net.forward_tape(&mut tape, x)?;
    let vars = stage2_total(&mut tape, e, fwd.denoised, w)?;
    tape.backward(vars.total)?;
    Ok((vars.read(&tape), collect_grads(&mut tape, &fwd.params)))
}

fn mean_stage1(rows: &[Stage1Breakdown]) -> Stage1Breakdown {
    let n = rows.len() as f64;
    let mut m = Stage1Breakdown::default();
    for r in rows {
        m.lcol += r.lcol;
        m.gcol += r.gcol;
        m.lum += r.lum;
        m.smo_alpha += r.smo_alpha;
        m.smo_beta += r.smo_beta;
        m.total += r.total;
    }
    Stage1Breakdown {
        lcol: m.lcol / n,
        gcol: m.gcol / n,
        lum: m.lum / n,
        smo_alpha: m.smo_alpha / n,
        smo_beta: m.smo_beta / n,
        total: m.total / n,
    }
}

fn mean_stage2(rows: &[Stage2Breakdown]) -> Stage2Breakdown {
    let n = rows.len() as f64;
    let mut m = Stage2Breakdown::default();
    for r in rows {
        m.ssim += r.ssim;
        m.grad_match += r.grad_match;
        m.grad_mag += r.grad_mag;
        m.total += r.total;
    }
    Stage2Breakdown {
        ssim: m.ssim / n,
        grad_match: m.grad_match / n,
        grad_mag: m.grad_mag / n,
        total: m.total / n,
    }
}

pub fn stage1_log_row(epoch: u64, b: &Stage1Breakdown) -> String {
    format!(
        "{epoch},{},{},{},{},{},{}",
        b.lcol, b.gcol, b.lum, b.smo_alpha, b.smo_beta, b.total
    )
}

pub fn stage2_log_row(epoch: u64, b: &Stage2Breakdown) -> String {
    format!("{epoch},{},{},{},{}", b.ssim, b.grad_match, b.grad_mag, b.total)
}

/// Stage I: trains the Luminance-Net with the self-reference objective.
pub struct Stage1Trainer {
    pub cfg: TrainConfig,
    pub net: LuminanceNet,
    pub optim: Vec<AdamState>,
    /// Completed epochs.
    pub epoch: u64,
    images: Vec<ImageTensor>,
    pool: rayon::ThreadPool,
}

impl Stage1Trainer {
    pub fn new(cfg: TrainConfig, images: Vec<ImageTensor>) -> Result<Self> {
        cfg.validate()?;
        let net = LuminanceNet::new(cfg.luminance_depth, cfg.luminance_width, init_seed(cfg.seed, 1))?;
        let optim = fresh_optim(&net, &cfg);
        Self::resume(cfg, images, net, optim, 0)
    }

    pub fn resume(cfg: TrainConfig, images: Vec<ImageTensor>, net: LuminanceNet, optim: Vec<AdamState>, epoch: u64) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::NoReadableImages(0));
        }
        check_optim(&net, &optim)?;
        let pool = cfg.pool()?;
        Ok(Stage1Trainer {
            cfg,
            net,
            optim,
            epoch,
            images,
            pool,
        })
    }

    /// Runs one epoch and returns the mean per-image loss breakdown.
    pub fn run_epoch(&mut self) -> Result<Stage1Breakdown> {
        let order = epoch_order(self.cfg.seed, self.epoch, self.images.len());
        let mut rows = Vec::with_capacity(order.len());
        for batch in order.chunks(self.cfg.batch_size) {
            let (net, images, w) = (&self.net, &self.images, &self.cfg.weights);
            let results: Vec<_> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| stage1_item(net, &images[i], w))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut grads = Vec::with_capacity(results.len());
            for (b, g) in results {
                rows.push(b);
                grads.push(g);
            }
            apply_batch(self.net.parameters_mut(), &mut self.optim, grads)?;
        }
        self.epoch += 1;
        Ok(mean_stage1(&rows))
    }

    pub fn checkpoint(&self, loss: f64) -> Checkpoint {
        Checkpoint::of(
            &self.net,
            Some(TrainingMeta {
                epoch: self.epoch,
                seed: self.cfg.seed,
                loss,
            }),
        )
    }
}

/// Stage II: trains the Denoising-Net against the enhanced clean images with
/// the Luminance-Net frozen.
pub struct Stage2Trainer {
    pub cfg: TrainConfig,
    pub luminance: LuminanceNet,
    pub net: DenoisingNet,
    pub optim: Vec<AdamState>,
    pub epoch: u64,
    images: Vec<ImageTensor>,
    /// Enhanced clean images (pseudo ground truth).
    targets: Vec<ImageTensor>,
    pool: rayon::ThreadPool,
}

impl Stage2Trainer {
    pub fn new(cfg: TrainConfig, images: Vec<ImageTensor>, luminance: LuminanceNet) -> Result<Self> {
        cfg.validate()?;
        let net = DenoisingNet::new(cfg.denoising_depth, cfg.denoising_width, init_seed(cfg.seed, 2))?;
        let optim = fresh_optim(&net, &cfg);
        Self::resume(cfg, images, luminance, net, optim, 0)
    }

    pub fn resume(
        cfg: TrainConfig,
        images: Vec<ImageTensor>,
        luminance: LuminanceNet,
        net: DenoisingNet,
        optim: Vec<AdamState>,
        epoch: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::NoReadableImages(0));
        }
        check_optim(&net, &optim)?;
        let pool = cfg.pool()?;
        let targets = pool.install(|| images.par_iter().map(|img| luminance.enhance(img)).collect::<Result<Vec<_>>>())?;
        Ok(Stage2Trainer {
            cfg,
            luminance,
            net,
            optim,
            epoch,
            images,
            targets,
            pool,
        })
    }

    /// Enhanced noisy input for image `index` in the current epoch.
    pub fn noisy_input(&self, index: usize) -> Result<ImageTensor> {
        noisy_enhanced(&self.luminance, &self.images[index], &self.cfg.noise, noise_rng(self.cfg.seed, self.epoch, index))
    }

    pub fn run_epoch(&mut self) -> Result<Stage2Breakdown> {
        let order = epoch_order(self.cfg.seed, self.epoch, self.images.len());
        let mut rows = Vec::with_capacity(order.len());
        for batch in order.chunks(self.cfg.batch_size) {
            let this = &*self;
            let results: Vec<_> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let input = this.noisy_input(i)?;
                        stage2_item(&this.net, &this.targets[i], &input, &this.cfg.weights)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut grads = Vec::with_capacity(results.len());
            for (b, g) in results {
                rows.push(b);
                grads.push(g);
            }
            apply_batch(self.net.parameters_mut(), &mut self.optim, grads)?;
        }
        self.epoch += 1;
        Ok(mean_stage2(&rows))
    }

    pub fn checkpoint(&self, loss: f64) -> Checkpoint {
        Checkpoint::of(
            &self.net,
            Some(TrainingMeta {
                epoch: self.epoch,
                seed: self.cfg.seed,
                loss,
            }),
        )
    }
}

/// `enhance(clamp(clean + noise))` with a freshly drawn sigma.
pub fn noisy_enhanced(luminance: &LuminanceNet, clean: &ImageTensor, noise: &NoiseConfig, mut rng: ChaCha8Rng) -> Result<ImageTensor> {
    let sigmas = sample_sigma(noise, &mut rng);
    let noisy = add_noise(clean, sigmas, &mut rng)?;
    luminance.enhance(&noisy)
}

/// Where a training run writes its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub checkpoint: PathBuf,
    /// Per-epoch CSV loss log.
    pub log: PathBuf,
    /// Optimizer state used to resume.
    pub optimizer: PathBuf,
}

impl OutputPaths {
    pub fn for_checkpoint(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        let sibling = |ext: &str| {
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(ext);
            path.with_file_name(name)
        };
        OutputPaths {
            checkpoint: path.to_path_buf(),
            log: sibling(".csv"),
            optimizer: sibling(".adam"),
        }
    }
}

/// Summary of a finished training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub paths: OutputPaths,
    /// Mean total loss of every epoch run, in order.
    pub totals: Vec<f64>,
    pub skipped: Vec<(PathBuf, String)>,
}

struct LogWriter {
    file: fs::File,
    path: PathBuf,
}

impl LogWriter {
    fn open(path: &Path, header: &str, append: bool) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let file = if append && path.exists() {
            fs::OpenOptions::new().append(true).open(path).map_err(io)?
        } else {
            let mut f = fs::File::create(path).map_err(io)?;
            writeln!(f, "{header}").map_err(io)?;
            f
        };
        Ok(LogWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains (or with `resume`, continues) a Luminance-Net on `data_dir` and
/// writes the checkpoint, optimizer state and loss log next to `out`.
pub fn train_stage1(data_dir: impl AsRef<Path>, out: impl AsRef<Path>, cfg: &TrainConfig, resume: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = OutputPaths::for_checkpoint(out);
    let data = load_dataset(data_dir, cfg.size, cfg.resize_filter)?;
    let mut trainer = if resume {
        let (net, meta) = checkpoint::load_luminance(&paths.checkpoint)?;
        let optim = checkpoint::load_optimizer(&paths.optimizer, cfg.lr, cfg.weight_decay)?;
        Stage1Trainer::resume(cfg.clone(), data.images, net, optim, meta.map_or(0, |m| m.epoch))?
    } else {
        Stage1Trainer::new(cfg.clone(), data.images)?
    };
    let mut log = LogWriter::open(&paths.log, STAGE1_LOG_HEADER, resume)?;
    let mut totals = Vec::new();
    while (trainer.epoch as usize) < cfg.epochs {
        let b = trainer.run_epoch()?;
        log::info!("stage1 epoch {}/{} loss {:.6}", trainer.epoch, cfg.epochs, b.total);
        log.row(&stage1_log_row(trainer.epoch, &b))?;
        totals.push(b.total);
    }
    trainer.checkpoint(totals.last().copied().unwrap_or(f64::NAN)).save(&paths.checkpoint)?;
    checkpoint::save_optimizer(&trainer.optim, &paths.optimizer)?;
    Ok(TrainReport {
        paths,
        totals,
        skipped: data.skipped,
    })
}

/// Trains a Denoising-Net behind the frozen Luminance-Net in `stage1_ckpt`.
pub fn train_stage2(
    data_dir: impl AsRef<Path>,
    stage1_ckpt: impl AsRef<Path>,
    out: impl AsRef<Path>,
    cfg: &TrainConfig,
    resume: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = OutputPaths::for_checkpoint(out);
    let (luminance, _) = checkpoint::load_luminance(stage1_ckpt)?;
    let data = load_dataset(data_dir, cfg.size, cfg.resize_filter)?;
    let mut trainer = if resume {
        let (net, meta) = checkpoint::load_denoising(&paths.checkpoint)?;
        let optim = checkpoint::load_optimizer(&paths.optimizer, cfg.lr, cfg.weight_decay)?;
        Stage2Trainer::resume(cfg.clone(), data.images, luminance, net, optim, meta.map_or(0, |m| m.epoch))?
    } else {
        Stage2Trainer::new(cfg.clone(), data.images, luminance)?
    };
    let mut log = LogWriter::open(&paths.log, STAGE2_LOG_HEADER, resume)?;
    let mut totals = Vec::new();
    while (trainer.epoch as usize) < cfg.epochs {
        let b = trainer.run_epoch()?;
        log::info!("stage2 epoch {}/{} loss {:.6}", trainer.epoch, cfg.epochs, b.total);
        log.row(&stage2_log_row(trainer.epoch, &b))?;
        totals.push(b.total);
    }
    trainer.checkpoint(totals.last().copied().unwrap_or(f64::NAN)).save(&paths.checkpoint)?;
    checkpoint::save_optimizer(&trainer.optim, &paths.optimizer)?;
    Ok(TrainReport {
        paths,
        totals,
        skipped: data.skipped,
    })
}

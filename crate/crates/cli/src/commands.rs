use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sdace::checkpoint::{load_denoising, load_luminance};
use sdace::curve::{curve_csv, curve_table};
use sdace::imaging::{list_images, load_image, save_gray, save_image};
use sdace::metrics::evaluate_dirs;
use sdace::nets::{count_complexity, NetDescriptor, NetKind};
use sdace::noise::{add_noise, sample_sigma, stream_rng, NoiseConfig};
use sdace::retinex::decompose;
use sdace::train::{train_stage1, train_stage2, TrainConfig, TrainReport};
use sdace::ImageTensor;

use crate::config::FileConfig;
use crate::{
    AddNoiseArgs, Cli, Command, CurveArgs, DecomposeArgs, EnhanceArgs, EvalArgs, Failure, GradcheckArgs, InspectArgs,
    TrainArgs,
};

/// Reflectance values sit near 1/3, so they are brightened for viewing.
const REFLECTANCE_DISPLAY_GAIN: f32 = 3.0;

type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let threads = cli.threads.map(|n| n as usize);
    if !matches!(cli.command, Command::Train(_)) {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
        }
    }
    match cli.command {
        Command::Train(a) => train(a, threads),
        Command::Enhance(a) => enhance(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::AddNoise(a) => add_noise_cmd(a),
        Command::Curve(a) => curve(a),
        Command::Inspect(a) => inspect(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Layers defaults, then the config file, then flags.
pub fn train_config(a: &TrainArgs, file: &FileConfig, threads: Option<usize>) -> Result<TrainConfig, Failure> {
    let mut cfg = if a.stage == 1 { TrainConfig::stage1() } else { TrainConfig::stage2() };
    macro_rules! layer {
        ($field:ident, $flag:ident) => {
            if let Some(v) = a.$flag.or(file.$flag) {
                cfg.$field = v;
            }
        };
    }
    layer!(epochs, epochs);
    layer!(size, size);
    layer!(seed, seed);
    layer!(batch_size, batch_size);
    layer!(lr, lr);
    layer!(weight_decay, weight_decay);
    layer!(denoising_depth, denoise_depth);
    layer!(denoising_width, denoise_width);
    if let Some(v) = a.sigma_min.or(file.sigma_min) {
        cfg.noise.sigma_min = v;
    }
    if let Some(v) = a.sigma_max.or(file.sigma_max) {
        cfg.noise.sigma_max = v;
    }
    if let Some(f) = a.resize_filter {
        cfg.resize_filter = f;
    } else if let Some(name) = &file.resize_filter {
        cfg.resize_filter = name.parse().map_err(|e: sdace::Error| Failure::Usage(e.to_string()))?;
    }
    cfg.noise.seed = cfg.seed;
    cfg.threads = threads.or(file.threads);
    Ok(cfg)
}

fn train(a: TrainArgs, threads: Option<usize>) -> CmdResult {
    let file = match &a.config {
        Some(p) => FileConfig::load(p).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    let cfg = train_config(&a, &file, threads)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = match a.stage {
        1 => {
            if a.stage1_ckpt.is_some() {
                return Err(Failure::Usage("--stage1-ckpt only applies to --stage 2".into()));
            }
            train_stage1(&a.data, &a.out, &cfg, a.resume)?
        }
        _ => {
            let ckpt = a
                .stage1_ckpt
                .as_ref()
                .ok_or_else(|| Failure::Usage("--stage 2 requires --stage1-ckpt".into()))?;
            train_stage2(&a.data, ckpt, &a.out, &cfg, a.resume)?
        }
    };
    print_report(&report);
    Ok(())
}

fn print_report(r: &TrainReport) {
    for (path, why) in &r.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    println!("checkpoint {}", r.paths.checkpoint.display());
    println!("log {}", r.paths.log.display());
    println!("optimizer {}", r.paths.optimizer.display());
    if let Some(last) = r.totals.last() {
        println!("final loss {last:.6}");
    }
}

/// The image files named by `input`: the file itself, or the images
/// directly inside a directory.
fn inputs(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(Failure::Runtime(format!("no images in {}", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Failure::Runtime(format!("{} does not exist", input.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

/// Runs `f` over every file in parallel and reports the first failure in
/// file order.
fn for_each_file<F>(files: &[PathBuf], f: F) -> CmdResult
where
    F: Fn(usize, &Path) -> sdace::Result<()> + Sync,
{
    let results: Vec<_> = files.par_iter().enumerate().map(|(i, p)| f(i, p)).collect();
    results.into_iter().collect::<sdace::Result<()>>().map_err(Failure::from)
}

fn enhance(a: EnhanceArgs) -> CmdResult {
    let (lum, _) = load_luminance(&a.stage1)?;
    let den = a.stage2.as_ref().map(load_denoising).transpose()?.map(|(n, _)| n);
    let files = inputs(&a.input)?;
    create_dir(&a.out_dir)?;
    for_each_file(&files, |_, path| {
        let img = load_image(path)?;
        let mut out = lum.enhance(&img)?;
        if let Some(den) = &den {
            out = den.denoise(&out)?;
        }
        let dest = a.out_dir.join(format!("{}_enh.png", stem(path)));
        save_image(&out, &dest)?;
        log::info!("{} -> {}", path.display(), dest.display());
        Ok(())
    })
}

fn decompose_cmd(a: DecomposeArgs) -> CmdResult {
    let files = inputs(&a.input)?;
    create_dir(&a.out_dir)?;
    for_each_file(&files, |_, path| {
        let img = load_image(path)?;
        let (refl, illum) = decompose(&img)?;
        let shown: Vec<f32> = refl.data().iter().map(|v| v * REFLECTANCE_DISPLAY_GAIN).collect();
        let shown = ImageTensor::from_clamped(img.height(), img.width(), shown)?;
        let name = stem(path);
        save_image(&shown, a.out_dir.join(format!("{name}_refl.png")))?;
        save_gray(img.height(), img.width(), &illum, a.out_dir.join(format!("{name}_illum.png")))
    })
}

fn add_noise_cmd(a: AddNoiseArgs) -> CmdResult {
    let defaults = NoiseConfig::default();
    let cfg = NoiseConfig {
        sigma_min: a.sigma_min.unwrap_or(defaults.sigma_min),
        sigma_max: a.sigma_max.unwrap_or(defaults.sigma_max),
        seed: a.seed,
        ..defaults
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let files = inputs(&a.input)?;
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
    }
    for_each_file(&files, |i, path| {
        let img = load_image(path)?;
        let mut rng = stream_rng(cfg.seed, i as u64);
        let sigmas = sample_sigma(&cfg, &mut rng);
        let noisy = add_noise(&img, sigmas, &mut rng)?;
        let dir = match &a.out_dir {
            Some(d) => d.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let dest = dir.join(format!("{}_noisy.png", stem(path)));
        save_image(&noisy, &dest)?;
        log::info!(
            "{} sigma r={:.5} g={:.5} b={:.5}",
            dest.display(),
            sigmas[0],
            sigmas[1],
            sigmas[2]
        );
        Ok(())
    })
}

fn curve(a: CurveArgs) -> CmdResult {
    if !(-1.0..=1.0).contains(&a.alpha) {
        return Err(Failure::Usage(format!("--alpha must lie in [-1, 1], got {}", a.alpha)));
    }
    if !(0.5..=1.0).contains(&a.beta) {
        return Err(Failure::Usage(format!("--beta must lie in [0.5, 1], got {}", a.beta)));
    }
    let rows = curve_table(a.alpha, a.beta, a.samples, a.iters).map_err(|e| Failure::Usage(e.to_string()))?;
    print!("{}", curve_csv(&rows));
    Ok(())
}

fn inspect(a: InspectArgs) -> CmdResult {
    let desc = match a.net {
        NetKind::Luminance => NetDescriptor::luminance(),
        NetKind::Denoising => NetDescriptor::denoising(),
    };
    let (h, w) = a.hw;
    println!("{}", count_complexity(&desc, h, w));
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    if a.resize == Some(0) {
        return Err(Failure::Usage("--resize must be positive".into()));
    }
    let report = evaluate_dirs(&a.pred, &a.gt, &a.metrics, a.resize)?;
    for name in &report.unpaired {
        log::warn!("unpaired: {name}");
    }
    let csv = report.to_csv();
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let results = sdace::gradsuite::run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{status} {} {:<24} rel_err={:.3e} tol={:.0e} checked={}",
            r.precision, r.name, r.report.max_rel_error, r.tolerance, r.report.checked
        );
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn args(extra: &[&str]) -> TrainArgs {
        let mut v = vec!["sdace", "train", "--data", "d", "--out", "c.sdace"];
        v.extend_from_slice(extra);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = FileConfig::parse("epochs = 9\nlr = 0.5\nsize = 32").unwrap();
        let cfg = train_config(&args(&["--stage", "1", "--epochs", "2"]), &file, None).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.size, 32);
        assert_eq!(cfg.batch_size, TrainConfig::stage1().batch_size);
    }

    #[test]
    fn stage_picks_default_epochs() {
        let file = FileConfig::default();
        assert_eq!(train_config(&args(&["--stage", "1"]), &file, None).unwrap().epochs, 200);
        assert_eq!(train_config(&args(&["--stage", "2"]), &file, None).unwrap().epochs, 50);
    }

    #[test]
    fn seed_reaches_noise() {
        let cfg = train_config(&args(&["--stage", "2", "--seed", "11", "--sigma-max", "0.02"]), &FileConfig::default(), Some(3))
            .unwrap();
        assert_eq!(cfg.noise.seed, 11);
        assert_eq!(cfg.noise.sigma_max, 0.02);
        assert_eq!(cfg.threads, Some(3));
    }

    #[test]
    fn resize_filter_layers() {
        use sdace::imaging::ResizeFilter;
        let file = FileConfig::parse("resize_filter = \"nearest\"").unwrap();
        assert_eq!(train_config(&args(&["--stage", "1"]), &file, None).unwrap().resize_filter, ResizeFilter::Nearest);
        let flag = args(&["--stage", "1", "--resize-filter", "bilinear"]);
        assert_eq!(train_config(&flag, &file, None).unwrap().resize_filter, ResizeFilter::Bilinear);
        let bad = FileConfig::parse("resize_filter = \"cubic\"").unwrap();
        assert!(matches!(train_config(&args(&["--stage", "1"]), &bad, None), Err(Failure::Usage(_))));
    }

}

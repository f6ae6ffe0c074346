//! The `fkp` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 numeric failure, 4 bad file contents or
//! unwritable output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use fkp_core::degrade::{degrade, DegradationConfig};
use fkp_core::estimate::{estimate_joint, estimate_reference, EstimateError, EstimationConfig, EstimationResult, Mode};
use fkp_core::flow::{self, FlowConfig, FlowModel, TrainConfig};
use fkp_core::kernel::{kernel_side, render_kernel, shift_for_scale, GaussianKernelParams, Kernel};
use fkp_core::metrics::{image_psnr, image_ssim, kernel_psnr, MetricReport};
use fkp_core::rng::stream;
use fkp_core::Image;

use crate::config::{ConfigError, RunConfig};
use crate::formats::{self, FormatError};
use crate::synth;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Format(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Format(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "fkp", version, about = "Flow-based blur kernel prior: train, sample, degrade, estimate, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a flow prior on random anisotropic Gaussian kernels
    Train(TrainArgs),
    /// Draw kernels from a trained prior
    Sample(SampleArgs),
    /// Blur, subsample and optionally add noise to an image
    Degrade(DegradeArgs),
    /// Estimate the blur kernel of LR images through a trained prior
    Estimate(EstimateArgs),
    /// Compare an estimate against ground truth
    Eval(EvalArgs),
    /// Write a synthetic dead-leaves test image
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log (defaults to the model path with a .log extension)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Apply the stride-alignment offset to training kernels (default true)
    #[arg(long)]
    shifted: Option<bool>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Project latents onto the sphere of radius √D (default true)
    #[arg(long)]
    project: Option<bool>,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Radians
    #[arg(long)]
    angle: Option<f64>,
    /// FKPK kernel file, instead of explicit widths
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Noise standard deviation as a fraction of the peak value
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// LR image to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the kernel used (defaults to the output path with .fkpk)
    #[arg(long)]
    kernel_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// One or more LR images (comma-separated or repeated)
    #[arg(long, value_delimiter = ',')]
    lr_image: Vec<String>,
    /// Matching HR images for reference mode
    #[arg(long, value_delimiter = ',')]
    hr_image: Vec<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// reference or joint
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Images estimated concurrently
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    latent_lr: Option<f64>,
    #[arg(long)]
    image_lr: Option<f64>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long)]
    project: Option<bool>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    est_kernel: Option<PathBuf>,
    #[arg(long)]
    gt_kernel: Option<PathBuf>,
    #[arg(long)]
    est_image: Option<PathBuf>,
    #[arg(long)]
    gt_image: Option<PathBuf>,
    /// Scale factor; also the border cropped before image PSNR
    #[arg(long)]
    scale: Option<usize>,
    /// Row label (defaults to the estimated kernel's file stem)
    #[arg(long)]
    id: Option<String>,
    /// CSV report to append to
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| format_err(path, "not UTF-8 text"))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| format_err(path, e))
}

fn base_config(allowed: &'static [&'static str], file: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::new(allowed);
    if let Some(path) = file {
        let text = read_text(path)?;
        cfg.merge_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<FlowModel, CliError> {
    flow::load(&read_bytes(path)?).map_err(|e| format_err(path, e))
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    formats::read_pnm(&read_bytes(path)?).map_err(|e: FormatError| format_err(path, e))
}

fn load_kernel(path: &Path) -> Result<Kernel, CliError> {
    formats::read_kernel(&read_text(path)?).map_err(|e| format_err(path, e))
}

fn image_extension(x: &Image) -> &'static str {
    if x.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

const TRAIN_KEYS: &[&str] = &["scale", "iters", "batch", "lr", "seed", "out", "log", "shifted"];

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut c = base_config(TRAIN_KEYS, &a.config)?;
    c.set_opt("scale", a.scale)?;
    c.set_opt("iters", a.iters)?;
    c.set_opt("batch", a.batch)?;
    c.set_opt("lr", a.lr)?;
    c.set_opt("seed", a.seed)?;
    c.set_opt("out", path_str(&a.out))?;
    c.set_opt("log", path_str(&a.log))?;
    c.set_opt("shifted", a.shifted)?;
    let standard = TrainConfig::standard(0);
    c.default("scale", 2);
    c.default("iters", standard.iterations);
    c.default("batch", standard.batch_size);
    c.default("lr", standard.learning_rate);
    c.default("seed", 0);
    c.default("shifted", true);
    let model_path = PathBuf::from(c.require::<String>("out")?);
    c.default("log", model_path.with_extension("log").display());

    let scale: u32 = c.require("scale")?;
    fkp_core::kernel::check_scale(scale).map_err(|e| usage(e.to_string()))?;
    let seed: u64 = c.require("seed")?;
    let tc = TrainConfig {
        iterations: c.require("iters")?,
        batch_size: c.require("batch")?,
        learning_rate: c.require("lr")?,
        seed,
        shifted: c.require("shifted")?,
        ..standard
    };
    if tc.batch_size < 2 || !(tc.learning_rate > 0.0) {
        return Err(usage("batch must be at least 2 and lr positive"));
    }
    write_bytes(&model_path.with_extension("conf"), c.to_text().as_bytes())?;
    let log_path = PathBuf::from(c.require::<String>("log")?);

    let model = FlowModel::new(&FlowConfig::for_scale(scale, seed)).map_err(|e| usage(e.to_string()))?;
    let mut log = String::new();
    let result = flow::train(model, &tc, &mut |p| {
        if p.log_point {
            log.push_str(&formats::train_log_line(p.iteration, p.nll));
            log.push('\n');
        }
    });
    write_bytes(&log_path, log.as_bytes())?;
    match result {
        Ok(model) => {
            let bytes = flow::save(&model).map_err(|e| CliError::Numeric(e.to_string()))?;
            write_bytes(&model_path, &bytes)?;
            let _ = writeln!(out, "wrote {}", model_path.display());
            Ok(())
        }
        Err(e) => {
            let mut last = *e.last_good.clone();
            last.freeze();
            let checkpoint = model_path.with_extension("checkpoint");
            if let Ok(bytes) = flow::save(&last) {
                write_bytes(&checkpoint, &bytes)?;
            }
            Err(CliError::Numeric(format!("{e}; last good state kept in {}", checkpoint.display())))
        }
    }
}

const SAMPLE_KEYS: &[&str] = &["model", "count", "seed", "outdir", "project"];
const SHEET_ZOOM: usize = 6;
const SHEET_GAP: usize = 2;

/// Kernels side by side, each scaled to its own peak.
fn contact_sheet(kernels: &[Kernel]) -> Image {
    let side = kernels[0].side();
    let cell = side * SHEET_ZOOM;
    let width = kernels.len() * (cell + SHEET_GAP) - SHEET_GAP;
    let mut data = vec![0.0; cell * width];
    for (n, k) in kernels.iter().enumerate() {
        let peak = k.weights().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let left = n * (cell + SHEET_GAP);
        for i in 0..cell {
            for j in 0..cell {
                data[i * width + left + j] = k.get(i / SHEET_ZOOM, j / SHEET_ZOOM) / peak;
            }
        }
    }
    Image::new(cell, width, 1, data).expect("non-empty sheet")
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut c = base_config(SAMPLE_KEYS, &a.config)?;
    c.set_opt("model", path_str(&a.model))?;
    c.set_opt("count", a.count)?;
    c.set_opt("seed", a.seed)?;
    c.set_opt("outdir", path_str(&a.outdir))?;
    c.set_opt("project", a.project)?;
    c.default("count", 7);
    c.default("seed", 0);
    c.default("project", true);
    let outdir = PathBuf::from(c.require::<String>("outdir")?);
    let model = load_model(Path::new(&c.require::<String>("model")?))?;
    let count: usize = c.require("count")?;
    let project: bool = c.require("project")?;
    let mut rng = stream(c.require("seed")?, "sample/latent");
    write_bytes(&outdir.join("sample.conf"), c.to_text().as_bytes())?;

    let mut kernels = Vec::with_capacity(count);
    let mut stats = String::from("id,raw_sum,raw_negative_mass\n");
    for n in 0..count {
        let s = flow::sample(&model, &mut rng, project).map_err(|e| CliError::Numeric(e.to_string()))?;
        let name = format!("kernel_{n:03}.fkpk");
        write_bytes(&outdir.join(&name), formats::write_kernel(&s.kernel).as_bytes())?;
        stats.push_str(&format!("{name},{:?},{:?}\n", s.raw_sum, s.raw_negative_mass));
        kernels.push(s.kernel);
    }
    if !kernels.is_empty() {
        write_bytes(&outdir.join("samples.pgm"), &formats::write_pnm(&contact_sheet(&kernels)))?;
        write_bytes(&outdir.join("samples.csv"), stats.as_bytes())?;
    }
    let _ = writeln!(out, "wrote {count} kernels to {}", outdir.display());
    Ok(())
}

const DEGRADE_KEYS: &[&str] = &[
    "image", "scale", "sigma1", "sigma2", "angle", "kernel", "noise", "seed", "out", "kernel-out",
];

fn cmd_degrade(a: DegradeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut c = base_config(DEGRADE_KEYS, &a.config)?;
    c.set_opt("image", path_str(&a.image))?;
    c.set_opt("scale", a.scale)?;
    c.set_opt("sigma1", a.sigma1)?;
    c.set_opt("sigma2", a.sigma2)?;
    c.set_opt("angle", a.angle)?;
    c.set_opt("kernel", path_str(&a.kernel))?;
    c.set_opt("noise", a.noise)?;
    c.set_opt("seed", a.seed)?;
    c.set_opt("out", path_str(&a.out))?;
    c.set_opt("kernel-out", path_str(&a.kernel_out))?;
    let explicit = ["sigma1", "sigma2", "angle"].iter().any(|k| c.raw(k).is_some());
    let from_file = c.raw("kernel").is_some();
    if explicit == from_file {
        return Err(usage("give exactly one of --sigma1/--sigma2/--angle or --kernel"));
    }
    c.default("scale", 2);
    c.default("noise", 0.0);
    c.default("seed", 0);
    let lr_path = PathBuf::from(c.require::<String>("out")?);
    c.default("kernel-out", lr_path.with_extension("fkpk").display());
    let scale: u32 = c.require("scale")?;
    if scale == 0 {
        return Err(usage("scale must be at least 1"));
    }
    let kernel = if from_file {
        load_kernel(Path::new(&c.require::<String>("kernel")?))?
    } else {
        let sigma1: f64 = c.require("sigma1")?;
        c.default("sigma2", sigma1);
        c.default("angle", 0.0);
        let p = GaussianKernelParams {
            sigma1,
            sigma2: c.require("sigma2")?,
            angle: c.require("angle")?,
            center_offset: shift_for_scale(scale),
        };
        render_kernel(&p, kernel_side(scale)).map_err(|e| usage(e.to_string()))?
    };
    let x = load_image(Path::new(&c.require::<String>("image")?))?;
    let dc = DegradationConfig {
        scale,
        noise_level: c.require("noise")?,
        seed: c.require("seed")?,
    };
    let y = degrade(&x, &kernel, &dc).map_err(|e| usage(e.to_string()))?;
    let kernel_path = PathBuf::from(c.require::<String>("kernel-out")?);
    write_bytes(&lr_path, &formats::write_pnm(&y))?;
    write_bytes(&kernel_path, formats::write_kernel(&kernel).as_bytes())?;
    write_bytes(&lr_path.with_extension("conf"), c.to_text().as_bytes())?;
    let _ = writeln!(out, "wrote {} ({}x{})", lr_path.display(), y.height(), y.width());
    Ok(())
}

const ESTIMATE_KEYS: &[&str] = &[
    "lr-image", "hr-image", "model", "mode", "iters", "seed", "outdir", "jobs", "latent-lr", "image-lr", "tv-weight",
    "project",
];

struct Job {
    name: String,
    y: Image,
    x_ref: Option<Image>,
}

fn write_bundle(dir: &Path, r: &EstimationResult) -> Result<(), CliError> {
    write_bytes(&dir.join("kernel.fkpk"), formats::write_kernel(&r.kernel).as_bytes())?;
    if let Some(z) = &r.latent {
        write_bytes(&dir.join("latent.txt"), formats::write_latent(z.values()).as_bytes())?;
    }
    write_bytes(&dir.join("trace.csv"), formats::write_trace(&r.loss_trace).as_bytes())?;
    if let Some(x) = &r.image {
        write_bytes(&dir.join(format!("image.{}", image_extension(x))), &formats::write_pnm(x))?;
    }
    Ok(())
}

fn cmd_estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut c = base_config(ESTIMATE_KEYS, &a.config)?;
    let join = |v: &[String]| (!v.is_empty()).then(|| v.join(","));
    c.set_opt("lr-image", join(&a.lr_image))?;
    c.set_opt("hr-image", join(&a.hr_image))?;
    c.set_opt("model", path_str(&a.model))?;
    c.set_opt("mode", a.mode)?;
    c.set_opt("iters", a.iters)?;
    c.set_opt("seed", a.seed)?;
    c.set_opt("outdir", path_str(&a.outdir))?;
    c.set_opt("jobs", a.jobs)?;
    c.set_opt("latent-lr", a.latent_lr)?;
    c.set_opt("image-lr", a.image_lr)?;
    c.set_opt("tv-weight", a.tv_weight)?;
    c.set_opt("project", a.project)?;
    let defaults = EstimationConfig::new(Mode::Reference, 0);
    c.default("mode", "reference");
    c.default("iters", defaults.iterations);
    c.default("seed", 0);
    c.default("jobs", 1);
    c.default("latent-lr", defaults.latent_lr);
    c.default("image-lr", defaults.image_lr);
    c.default("tv-weight", defaults.tv_weight);
    c.default("project", defaults.project_every_step);

    let mode = match c.require::<String>("mode")?.as_str() {
        "reference" => Mode::Reference,
        "joint" => Mode::Joint,
        other => return Err(usage(format!("unknown mode {other:?} (reference or joint)"))),
    };
    let lr_list = c.list("lr-image");
    let hr_list = c.list("hr-image");
    if lr_list.is_empty() {
        return Err(usage("missing --lr-image"));
    }
    match mode {
        Mode::Reference if hr_list.len() != lr_list.len() => {
            return Err(usage("reference mode needs one --hr-image per --lr-image"));
        }
        Mode::Joint if !hr_list.is_empty() => return Err(usage("--hr-image is only used in reference mode")),
        _ => {}
    }
    let ec = EstimationConfig {
        mode,
        iterations: c.require("iters")?,
        latent_lr: c.require("latent-lr")?,
        image_lr: c.require("image-lr")?,
        tv_weight: c.require("tv-weight")?,
        seed: c.require("seed")?,
        project_every_step: c.require("project")?,
        ..defaults
    };
    let jobs: usize = c.require::<usize>("jobs")?.max(1);
    let outdir = PathBuf::from(c.require::<String>("outdir")?);
    let model = load_model(Path::new(&c.require::<String>("model")?))?;

    let mut work = Vec::with_capacity(lr_list.len());
    for (n, lr) in lr_list.iter().enumerate() {
        let lr_path = Path::new(lr);
        let stem = lr_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = if work.iter().any(|j: &Job| j.name == stem) { format!("{stem}_{n}") } else { stem };
        work.push(Job {
            name,
            y: load_image(lr_path)?,
            x_ref: hr_list.get(n).map(|p| load_image(Path::new(p))).transpose()?,
        });
    }
    write_bytes(&outdir.join("estimate.conf"), c.to_text().as_bytes())?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EstimationResult, EstimateError>>>> = Mutex::new(vec![None; work.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(work.len()) {
            s.spawn(|| loop {
                let n = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = work.get(n) else { break };
                let r = match &job.x_ref {
                    Some(x) => estimate_reference(&job.y, x, &model, &ec),
                    None => estimate_joint(&job.y, &model, &ec),
                };
                results.lock().expect("no worker panicked")[n] = Some(r);
            });
        }
    });

    let mut first_error = None;
    for (job, r) in work.iter().zip(results.into_inner().expect("no worker panicked")) {
        let dir = outdir.join(&job.name);
        match r.expect("every job ran") {
            Ok(r) => {
                write_bundle(&dir, &r)?;
                let _ = writeln!(out, "{} best_iteration={} fidelity={:e}", job.name, r.best_iteration, r.best_loss());
            }
            Err(EstimateError::Numeric { iteration, detail, trace }) => {
                write_bytes(&dir.join("trace.csv"), formats::write_trace(&trace).as_bytes())?;
                first_error.get_or_insert(CliError::Numeric(format!("{}: iteration {iteration}: {detail}", job.name)));
            }
            Err(e) => {
                first_error.get_or_insert(usage(format!("{}: {e}", job.name)));
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

const EVAL_KEYS: &[&str] = &["est-kernel", "gt-kernel", "est-image", "gt-image", "scale", "id", "report"];

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut c = base_config(EVAL_KEYS, &a.config)?;
    c.set_opt("est-kernel", path_str(&a.est_kernel))?;
    c.set_opt("gt-kernel", path_str(&a.gt_kernel))?;
    c.set_opt("est-image", path_str(&a.est_image))?;
    c.set_opt("gt-image", path_str(&a.gt_image))?;
    c.set_opt("scale", a.scale)?;
    c.set_opt("id", a.id)?;
    c.set_opt("report", path_str(&a.report))?;
    c.default("scale", 2);
    let est_path = PathBuf::from(c.require::<String>("est-kernel")?);
    let stem = est_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    c.default("id", stem);
    let est = load_kernel(&est_path)?;
    let gt = load_kernel(Path::new(&c.require::<String>("gt-kernel")?))?;
    let kpsnr = kernel_psnr(&est, &gt).map_err(|e| usage(e.to_string()))?;
    let (image_psnr_v, ssim_v) = match (c.raw("est-image"), c.raw("gt-image")) {
        (None, None) => (None, None),
        (Some(e), Some(g)) => {
            let (e, g) = (load_image(Path::new(e))?, load_image(Path::new(g))?);
            let border: usize = c.require("scale")?;
            let p = image_psnr(&e, &g, border).map_err(|e| usage(e.to_string()))?;
            let s = image_ssim(&e, &g).map_err(|e| usage(e.to_string()))?;
            (Some(p), Some(s))
        }
        _ => return Err(usage("give both --est-image and --gt-image or neither")),
    };
    let report = MetricReport {
        kernel_psnr: kpsnr,
        image_psnr: image_psnr_v,
        image_ssim: ssim_v,
    };
    let line = formats::report_line(&c.require::<String>("id")?, &report);
    let _ = writeln!(out, "{}\n{line}", formats::REPORT_HEADER);
    if let Some(path) = c.raw("report").map(PathBuf::from) {
        let mut text = fs::read_to_string(&path).unwrap_or_default();
        if text.is_empty() {
            text = format!("{}\n", formats::REPORT_HEADER);
        } else if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&line);
        text.push('\n');
        write_bytes(&path, text.as_bytes())?;
        write_bytes(&path.with_extension("conf"), c.to_text().as_bytes())?;
    }
    Ok(())
}

const SYNTH_KEYS: &[&str] = &["height", "width", "seed", "out"];

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut c = base_config(SYNTH_KEYS, &a.config)?;
    c.set_opt("height", a.height)?;
    c.set_opt("width", a.width)?;
    c.set_opt("seed", a.seed)?;
    c.set_opt("out", path_str(&a.out))?;
    c.default("height", 256);
    c.default("width", 256);
    c.default("seed", 0);
    let path = PathBuf::from(c.require::<String>("out")?);
    let (h, w): (usize, usize) = (c.require("height")?, c.require("width")?);
    if h == 0 || w == 0 {
        return Err(usage("height and width must be positive"));
    }
    let x = synth::dead_leaves(h, w, c.require("seed")?);
    write_bytes(&path, &formats::write_pnm(&x))?;
    write_bytes(&path.with_extension("conf"), c.to_text().as_bytes())?;
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => return Err(usage(e.to_string())),
    };
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Sample(a) => cmd_sample(a, out),
        Command::Degrade(a) => cmd_degrade(a, out),
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    match run(args, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fkp: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code())
        }
    }
}

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use mambacsr::autodiff::{op_suite, OP_TOLERANCE};
use mambacsr::bench::{scan_scaling, LINEAR_RATIO_BAND};
use mambacsr::model::{count_flops, erf_map, probe_report, train_toy};
use mambacsr::pipeline::pnm::read_ppm_file;
use mambacsr::pipeline::{degrade, psnr_y, ssim, write_pgm, write_ppm, DegradeSpec, GrayU8, ImageError};
use mambacsr::rng::named_rng;
use mambacsr::traj::{cross_scale_interleave, Direction, Trajectory};
use mambacsr::{MambaCsr, ModelConfig, ModelError, ScanMode, Tensor};
use rand::Rng;

const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mambacsr", version, about = "Scan trajectories, selective scans and compressed-image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajMode {
    Hseq,
    Vseq,
    Hwin,
    Vwin,
    Cross,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Scan,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dis,
    #[value(name = "4dir")]
    FourDir,
}

impl From<Mode> for ScanMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dis => ScanMode::Dis,
            Mode::FourDir => ScanMode::FourDir,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dump a scan trajectory as CSV, optionally with a step heatmap.
    Traj {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, value_enum)]
        mode: TrajMode,
        #[arg(long)]
        out: PathBuf,
        /// PGM where brightness grows with visiting step.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "ops")]
        scope: Scope,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Bicubic downscale followed by block-DCT compression.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 10)]
        qf: u32,
    },
    /// Super-resolve a PPM with a trained checkpoint.
    Restore {
        #[arg(long)]
        model: PathBuf,
        /// key=value model configuration; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit one degraded crop and save the checkpoint.
    TrainToy {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        qf: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Luma PSNR and SSIM between two PPM files.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Multiply-accumulate counts per category.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dis")]
        mode: Mode,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Write the report as category,macs CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Effective receptive field heatmap. Without --config, compares the
    /// sequential, window and hierarchical scan probes side by side.
    Erf {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the selective scan at L and 2L.
    BenchScan {
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        dinner: usize,
        #[arg(long, default_value_t = 8)]
        dstate: usize,
        #[arg(long, default_value_t = 15)]
        iters: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Failure with its exit code: 1 for validation or tolerance, 2 for I/O or parsing.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

fn invalid(e: impl Display) -> Failure {
    Failure { code: 1, msg: e.to_string() }
}

fn io(e: impl Display) -> Failure {
    Failure { code: 2, msg: e.to_string() }
}

fn image_failure(e: ImageError) -> Failure {
    match e {
        ImageError::Io(_) | ImageError::Parse { .. } => io(e),
        _ => invalid(e),
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::Image(e) => image_failure(e),
        ModelError::Checkpoint(_) => io(e),
        _ => invalid(e),
    }
}

type Res<T = ()> = Result<T, Failure>;

fn with_path<T, E: Display>(path: &Path, r: Result<T, E>, kind: fn(String) -> Failure) -> Res<T> {
    r.map_err(|e| kind(format!("{}: {e}", path.display())))
}

/// Writes through a sibling temp file so a failed run leaves nothing behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Res {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = with_path(path, tempfile::NamedTempFile::new_in(dir), io)?;
    with_path(path, tmp.write_all(bytes), io)?;
    with_path(path, tmp.persist(path).map_err(|e| e.error), io)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Res<ModelConfig> {
    let Some(p) = path else {
        return Ok(ModelConfig::default());
    };
    let text = with_path(p, std::fs::read_to_string(p), io)?;
    with_path(p, ModelConfig::parse(&text), io)
}

fn read_ppm(path: &Path) -> Res<mambacsr::pipeline::ImageU8> {
    read_ppm_file(path).map_err(|e| {
        let f = image_failure(e);
        Failure {
            msg: format!("{}: {}", path.display(), f.msg),
            ..f
        }
    })
}

fn traj(height: usize, width: usize, window: usize, mode: TrajMode, out: &Path, pgm: Option<&Path>) -> Res {
    if height == 0 || width == 0 {
        return Err(invalid("height and width must be positive"));
    }
    let (csv, map) = match mode {
        TrajMode::Cross => {
            let lay = cross_scale_interleave(height, width).map_err(invalid)?;
            (lay.to_csv(), lay.step_map())
        }
        _ => {
            let t = match mode {
                TrajMode::Hseq => Trajectory::raster(height, width, Direction::Horizontal),
                TrajMode::Vseq => Trajectory::raster(height, width, Direction::Vertical),
                TrajMode::Hwin => Trajectory::window_raster(height, width, window, Direction::Horizontal).map_err(invalid)?,
                _ => Trajectory::window_raster(height, width, window, Direction::Vertical).map_err(invalid)?,
            };
            (t.to_csv(), t.step_map())
        }
    };
    let heat = GrayU8::from_heatmap(height, width, &map).map_err(invalid)?;
    write_atomic(out, csv.as_bytes())?;
    if let Some(p) = pgm {
        write_atomic(p, &write_pgm(&heat))?;
    }
    Ok(())
}

fn gradcheck(scope: Scope, eps: f64, seed: u64) -> Res {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    let (rows, tol): (Vec<(String, f64)>, f64) = match scope {
        Scope::Ops | Scope::Scan => {
            let checks = op_suite(seed, eps).map_err(invalid)?;
            let rows = checks
                .into_iter()
                .filter(|c| matches!(scope, Scope::Ops) || c.name.starts_with("scan"))
                .map(|c| (c.name.to_string(), c.report.max_rel_err))
                .collect();
            (rows, OP_TOLERANCE)
        }
        Scope::Model => {
            let m = MambaCsr::<f64>::new(ModelConfig::tiny(), seed).map_err(model_failure)?;
            let mut rng = named_rng(seed, "gradcheck.input");
            let data = (0..3 * 8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
            let x = Tensor::new(vec![1, 3, 8, 8], data).map_err(invalid)?;
            let reports = m.grad_check(&x, eps).map_err(model_failure)?;
            (reports.into_iter().map(|(n, r)| (n, r.max_rel_err)).collect(), MODEL_TOLERANCE)
        }
    };
    let mut bad = 0;
    for (name, err) in &rows {
        let ok = *err <= tol;
        bad += usize::from(!ok);
        println!("{name} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    println!("{} targets, {bad} over tolerance {tol:e}", rows.len());
    if bad > 0 {
        return Err(invalid(format!("{bad} gradient checks exceed {tol:e}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(hr: &Path, config: Option<&Path>, steps: usize, lr: f64, qf: u32, seed: u64, out: &Path, log: Option<&Path>) -> Res {
    let cfg = load_config(config)?;
    let img = read_ppm(hr)?;
    let spec = DegradeSpec::new(cfg.scale, qf).map_err(invalid)?;
    let mut m = MambaCsr::<f32>::new(cfg, seed).map_err(model_failure)?;
    let rep = train_toy(&mut m, &img, &spec, steps, lr).map_err(model_failure)?;
    let ratio = rep.best() / rep.initial();
    println!(
        "initial {:.5} final {:.5} best {:.5} ({:.1}% of initial); 10% reached at {}",
        rep.initial(),
        rep.losses.last().copied().unwrap_or(f64::NAN),
        rep.best(),
        100.0 * ratio,
        rep.reached(0.1).map_or("never".into(), |s| format!("step {s}"))
    );
    if let Some(p) = log {
        let mut csv = String::from("step,l1\n");
        for (i, l) in rep.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        write_atomic(p, csv.as_bytes())?;
    }
    write_atomic(out, &m.save().map_err(model_failure)?)
}

fn flops(config: Option<&Path>, mode: Mode, height: usize, width: usize, csv: Option<&Path>) -> Res {
    let cfg = ModelConfig {
        scan_mode: mode.into(),
        ..load_config(config)?
    };
    cfg.validate().map_err(invalid)?;
    let rep = count_flops(&cfg, height, width);
    let other = |m: ScanMode| {
        count_flops(
            &ModelConfig {
                scan_mode: m,
                ..cfg.clone()
            },
            height,
            width,
        )
    };
    let (dis, four) = (other(ScanMode::Dis), other(ScanMode::FourDir));
    println!("{rep}");
    println!("scan ratio dis/4dir {:.3}", dis.scan as f64 / four.scan.max(1) as f64);
    if let Some(p) = csv {
        write_atomic(p, rep.to_csv().as_bytes())?;
    }
    Ok(())
}

fn erf(config: Option<&Path>, seed: u64, size: usize, window: usize, out: &Path) -> Res {
    if size < 2 {
        return Err(invalid("size must be at least 2"));
    }
    let img = match config {
        Some(_) => {
            let m = MambaCsr::<f64>::new(load_config(config)?, seed).map_err(model_failure)?;
            let map = erf_map(&m, size, seed).map_err(model_failure)?;
            GrayU8::from_heatmap(size, size, &map).map_err(invalid)?
        }
        None => {
            let (maps, panel) = probe_report(size, window, seed).map_err(model_failure)?;
            for (kind, m) in &maps {
                let peak = m.iter().copied().fold(0.0, f64::max);
                println!("{kind}: peak mass {peak:.4}");
            }
            panel
        }
    };
    write_atomic(out, &write_pgm(&img))
}

fn bench(len: usize, dinner: usize, dstate: usize, iters: usize, seed: u64) -> Res {
    if len == 0 || dinner == 0 || dstate == 0 {
        return Err(invalid("len, dinner and dstate must be positive"));
    }
    let r = scan_scaling(len, dinner, dstate, iters, seed).map_err(invalid)?;
    let (lo, hi) = LINEAR_RATIO_BAND;
    println!("L={len} median {:.3?} ({:.0} tokens/s)", r.median, r.tokens_per_sec());
    println!("L={} median {:.3?}", 2 * len, r.median_double);
    println!("ratio {:.3} (band {lo}..{hi})", r.ratio());
    if !r.is_linear(lo, hi) {
        return Err(invalid(format!("time ratio {:.3} outside {lo}..{hi}", r.ratio())));
    }
    Ok(())
}

fn run(cli: Cli) -> Res {
    match cli.command {
        Command::Traj {
            height,
            width,
            window,
            mode,
            out,
            pgm,
        } => traj(height, width, window, mode, &out, pgm.as_deref()),
        Command::Gradcheck { scope, eps, seed } => gradcheck(scope, eps, seed),
        Command::Degrade { input, out, scale, qf } => {
            let spec = DegradeSpec::new(scale, qf).map_err(invalid)?;
            let lr = degrade(&read_ppm(&input)?, &spec).map_err(image_failure)?;
            write_atomic(&out, &write_ppm(&lr))
        }
        Command::Restore {
            model,
            config,
            input,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let bytes = with_path(&model, std::fs::read(&model), io)?;
            let m = with_path(&model, MambaCsr::<f32>::load(cfg, &bytes), io)?;
            let sr = m.restore_image(&read_ppm(&input)?).map_err(model_failure)?;
            write_atomic(&out, &write_ppm(&sr))
        }
        Command::TrainToy {
            hr,
            config,
            steps,
            lr,
            qf,
            seed,
            out,
            log,
        } => train(&hr, config.as_deref(), steps, lr, qf, seed, &out, log.as_deref()),
        Command::Metrics { reference, test } => {
            let (a, b) = (read_ppm(&reference)?, read_ppm(&test)?);
            println!("psnr {:.2}", psnr_y(&a, &b).map_err(image_failure)?);
            println!("ssim {:.4}", ssim(&a, &b).map_err(image_failure)?);
            Ok(())
        }
        Command::Flops {
            config,
            mode,
            height,
            width,
            csv,
        } => flops(config.as_deref(), mode, height, width, csv.as_deref()),
        Command::Erf {
            config,
            seed,
            size,
            window,
            out,
        } => erf(config.as_deref(), seed, size, window, &out),
        Command::BenchScan {
            len,
            dinner,
            dstate,
            iters,
            seed,
        } => bench(len, dinner, dstate, iters, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            let mut cmd = Cli::command();
            cmd.build();
            let sub = std::env::args().nth(1).unwrap_or_default();
            let usage = match cmd.find_subcommand_mut(&sub) {
                Some(c) => c.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("{usage}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

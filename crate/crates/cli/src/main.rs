//! `prtg`: generate oracle datasets, train transfer fields, render OLAT and
//! envmap relighting, and evaluate held-out views.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use prtg_core::camera::Camera;
use prtg_core::checkpoint::load_field;
use prtg_core::dataset::{Manifest, OlatDataset};
use prtg_core::eval::{evaluate, render_image, render_relit_image, EvalConfig};
use prtg_core::image::{read_pfm, write_pfm};
use prtg_core::lighting::{lights_to_json, median_cut, Envmap};
use prtg_core::oracle::{generate_dataset, OracleScene, RigSpec};
use prtg_core::render::RenderConfig;
use prtg_core::train::{train, TrainConfig, TrainState, FIELD_FILE};
use prtg_core::{FieldParams, Vec3};

#[derive(Parser, Debug)]
#[command(name = "prtg", version, about = "Relightable volumetric transfer fields")]
struct Cli {
    /// Seed overriding the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (PRTG_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// -v for progress, -vv for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an oracle scene into an OLAT dataset.
    GenerateData {
        scene: PathBuf,
        rig: PathBuf,
        out: PathBuf,
    },
    /// Train a field on a dataset; checkpoints go to `out`.
    Train {
        dataset: PathBuf,
        config: PathBuf,
        out: PathBuf,
        /// Continue from the checkpoint already in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Render one view under one OLAT light.
    RenderOlat {
        checkpoint: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        /// Light direction `x,y,z`, or a light id of `--dataset`.
        #[arg(long)]
        light: String,
        #[arg(long, default_value = "render.pfm")]
        out: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Relight a view under an equirectangular environment map.
    RelightEnvmap {
        checkpoint: PathBuf,
        envmap: PathBuf,
        /// Median-cut lights (a power of two).
        #[arg(long, default_value_t = 64)]
        lights: usize,
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long, default_value = "relit.pfm")]
        out: PathBuf,
        /// Also write the extracted lights as JSON.
        #[arg(long)]
        lights_json: Option<PathBuf>,
        #[command(flatten)]
        render: RenderArgs,
    },
    /// Score held-out (view, light) pairs.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        /// Held-out views to evaluate (all when omitted).
        #[arg(long)]
        views: Option<usize>,
        /// Held-out lights to evaluate (all when omitted).
        #[arg(long)]
        eval_lights: Option<usize>,
        #[command(flatten)]
        render: RenderArgs,
    },
}

#[derive(Args, Debug)]
struct ViewArgs {
    /// Camera JSON file (`width`, `height`, `K`, `R`, `t`), or a camera id
    /// of `--dataset`.
    #[arg(long)]
    view: String,
    /// Dataset supplying camera/light ids and ray bounds.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Near bound when no dataset is given.
    #[arg(long)]
    near: Option<f64>,
    /// Far bound when no dataset is given.
    #[arg(long)]
    far: Option<f64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Render config file (`key = value`).
    #[arg(long)]
    render_config: Option<PathBuf>,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
}

impl RenderArgs {
    fn config(&self, seed: Option<u64>) -> anyhow::Result<RenderConfig> {
        let mut cfg = match &self.render_config {
            Some(p) => RenderConfig::load(p)?,
            None => RenderConfig::default(),
        };
        if let Some(n) = self.n_coarse {
            cfg.n_coarse = n;
        }
        if let Some(n) = self.n_fine {
            cfg.n_fine = n;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Accepts a checkpoint file or a training output directory.
fn load_checkpoint(path: &Path) -> anyhow::Result<FieldParams<f32>> {
    let file = if path.is_dir() { path.join(FIELD_FILE) } else { path.to_path_buf() };
    Ok(load_field(&file)?)
}

fn load_manifest(dataset: &Option<PathBuf>) -> anyhow::Result<Option<Manifest>> {
    dataset.as_deref().map(Manifest::load).transpose().map_err(Into::into)
}

/// Camera and `(near, far)` for a view argument.
fn resolve_view(v: &ViewArgs, manifest: Option<&Manifest>) -> anyhow::Result<(Camera, (f64, f64))> {
    let camera = if let Ok(id) = v.view.parse::<usize>() {
        let m = manifest.ok_or_else(|| anyhow!("--view {id} needs --dataset"))?;
        m.camera(0, id)?.camera
    } else {
        let text = fs::read_to_string(&v.view).with_context(|| format!("reading camera {}", v.view))?;
        let cam: Camera = serde_json::from_str(&text).with_context(|| format!("parsing camera {}", v.view))?;
        cam.validate()?;
        cam
    };
    let bounds = match (v.near, v.far, manifest) {
        (Some(n), Some(f), _) => (n, f),
        (_, _, Some(m)) => m.ray_bounds(&camera),
        _ => bail!("ray bounds need --dataset or both --near and --far"),
    };
    if !(bounds.0 >= 0.0 && bounds.1 > bounds.0) {
        bail!("invalid ray bounds {bounds:?}");
    }
    Ok((camera, bounds))
}

fn resolve_light(arg: &str, manifest: Option<&Manifest>) -> anyhow::Result<Vec3> {
    if let Ok(id) = arg.parse::<usize>() {
        let m = manifest.ok_or_else(|| anyhow!("--light {id} needs --dataset"))?;
        return Ok(m.light(0, id)?.direction);
    }
    let parts: Vec<f64> = arg
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("--light expects `x,y,z` or a light id, got {arg:?}"))?;
    if parts.len() != 3 {
        bail!("--light expects three components, got {}", parts.len());
    }
    let d = Vec3::new(parts[0], parts[1], parts[2]);
    if !(d.is_finite() && d.norm() > 0.0) {
        bail!("--light must be a finite non-zero vector");
    }
    Ok(d.normalized())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { scene, rig, out } => {
            let scene = OracleScene::load(&scene)?;
            let rig = RigSpec::load(&rig)?;
            let m = generate_dataset(&scene, &rig, &out)?;
            println!("wrote {} images and {} masks to {}", m.images.len(), m.masks.len(), out.display());
        }
        Command::Train {
            dataset,
            config,
            out,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let data = OlatDataset::load(&dataset)?;
            let state = if resume { Some(TrainState::load(&out)?) } else { None };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("train.cfg"), cfg.to_key_values())?;
            let state = train(&data, &cfg, state, Some(&out), |_| {})?;
            let last = state.history.last();
            println!(
                "trained {} steps; final loss {}; checkpoint in {}",
                state.step(),
                last.map_or("n/a".into(), |r| format!("{:.6}", r.total)),
                out.display()
            );
        }
        Command::RenderOlat {
            checkpoint,
            view,
            light,
            out,
            render,
        } => {
            let field = load_checkpoint(&checkpoint)?;
            let manifest = load_manifest(&view.dataset)?;
            let (camera, bounds) = resolve_view(&view, manifest.as_ref())?;
            let light = resolve_light(&light, manifest.as_ref())?;
            let img = render_image(&field, &camera, bounds, light, &render.config(cli.seed)?)?;
            write_pfm(&out, &img)?;
            println!("wrote {}", out.display());
        }
        Command::RelightEnvmap {
            checkpoint,
            envmap,
            lights,
            view,
            out,
            lights_json,
            render,
        } => {
            let field = load_checkpoint(&checkpoint)?;
            let env = Envmap::new(read_pfm(&envmap)?)?;
            let extracted = median_cut(&env, lights)?;
            if let Some(p) = lights_json {
                fs::write(&p, lights_to_json(&extracted)?).with_context(|| format!("writing {}", p.display()))?;
            }
            let manifest = load_manifest(&view.dataset)?;
            let (camera, bounds) = resolve_view(&view, manifest.as_ref())?;
            let img = render_relit_image(&field, &camera, bounds, &extracted, &render.config(cli.seed)?)?;
            write_pfm(&out, &img)?;
            println!("wrote {} ({} lights)", out.display(), extracted.len());
        }
        Command::Eval {
            checkpoint,
            dataset,
            report,
            views,
            eval_lights,
            render,
        } => {
            let field = load_checkpoint(&checkpoint)?;
            let data = OlatDataset::load(&dataset)?;
            let cfg = EvalConfig {
                render: render.config(cli.seed)?,
                max_views: views,
                max_lights: eval_lights,
            };
            let r = evaluate(&field, &data, &cfg)?;
            fs::write(&report, r.to_json()?).with_context(|| format!("writing {}", report.display()))?;
            println!(
                "{} cases: PSNR {:.2} dB, SSIM {:.4}; report {}",
                r.cases.len(),
                r.mean_psnr,
                r.mean_ssim,
                report.display()
            );
        }
    }
    Ok(())
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var("PRTG_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| anyhow!("PRTG_THREADS must be a positive integer, got {v:?}"))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<prtg_core::Error>())
        .any(|e| e.is_numerical());
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let setup = thread_count(cli.threads).and_then(|n| match n {
        Some(0) => bail!("thread count must be positive"),
        Some(n) => {
            log::info!("using {n} worker threads");
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| anyhow!("thread pool: {e}"))
        }
        None => Ok(()),
    });
    match setup.and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

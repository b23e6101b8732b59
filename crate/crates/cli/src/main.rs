use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use patchdiff::data_io::{
    load_checkpoint, load_image_dir, png_bytes_to_image, save_grid_png, save_png, synth_shapes, Dataset, RunConfig,
};
use patchdiff::diffusion::{train, TrainState};
use patchdiff::eval::{bench_throughput, mmd_distance, score_coherence_batch, BenchConfig, FeatureEmbedder};
use patchdiff::netgraph::init_params;
use patchdiff::oracle::run_suite;
use patchdiff::sampler::{outpaint, sample, OutpaintMode};
use patchdiff::{Purpose, RngKey, Tensor};
use serde_json::json;

const RUN_ROOT_ENV: &str = "PATCHDIFF_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "patchdiff",
    version,
    about = "Patch-wise diffusion training, sampling and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML config with [data], [net], [train] and [sampler] tables
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for training and sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Share of full-size patches
    #[arg(long)]
    p: Option<f64>,
    /// Patch-size schedule
    #[arg(long, value_parser = ["stochastic", "progressive"])]
    schedule: Option<String>,
    /// Sampler steps
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance strength
    #[arg(long = "cfg")]
    guidance: Option<f64>,
    /// Run directory (default: $PATCHDIFF_RUN_ROOT/<command>-<config digest>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image resolution
    #[arg(long)]
    resolution: Option<usize>,
    /// PNG directory or `synth`
    #[arg(long)]
    data: Option<String>,
    /// Extra `section.key=value` overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images from a checkpoint
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Class label for every image (conditional models)
        #[arg(long)]
        class: Option<usize>,
    },
    /// Extend a reference image onto a larger canvas
    Outpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference PNG at the trained resolution
        #[arg(long)]
        reference: PathBuf,
        /// Side of the output canvas
        #[arg(long)]
        extended: usize,
        #[arg(long, value_enum, default_value_t = Mode::Clean)]
        mode: Mode,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Run the closed-form score-matching checks
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Compare a checkpoint's samples with a reference dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generated and reference images used for MMD
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Noise level for the coherence measurement
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// Patch size for the coherence measurement (default: half the resolution)
        #[arg(long)]
        patch: Option<usize>,
        /// Images used for the coherence measurement
        #[arg(long, default_value_t = 32)]
        coherence_images: usize,
    },
    /// Time training steps over a grid of p values
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated p values
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
        ps: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        batches: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Clean,
    Noised,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(s) = self.seed {
            push("train.seed", s.to_string());
            push("sampler.seed", s.to_string());
        }
        if let Some(p) = self.p {
            push("train.p", format!("{p:?}"));
        }
        if let Some(s) = &self.schedule {
            push("train.schedule", s.clone());
        }
        if let Some(n) = self.steps {
            push("sampler.steps", n.to_string());
        }
        if let Some(w) = self.guidance {
            push("sampler.guidance", format!("{w:?}"));
        }
        if let Some(r) = self.resolution {
            push("data.resolution", r.to_string());
        }
        if let Some(d) = &self.data {
            push("data.source", format!("{d:?}"));
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .with_context(|| format!("`--set {item}` is not of the form section.key=value"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        Ok(RunConfig::from_file(self.config.as_deref(), &self.overrides()?)?)
    }
}

/// A run directory plus the list of files written into it.
struct Run {
    dir: PathBuf,
    command: &'static str,
    artifacts: Vec<String>,
}

impl Run {
    fn open(command: &'static str, common: &Common, cfg: &RunConfig) -> Result<Self> {
        let dir = match &common.out {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(format!("{command}-{}", cfg.digest()))
            }
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        cfg.echo(&dir.join("config.toml"))?;
        log::info!("run directory {}", dir.display());
        Ok(Run {
            dir,
            command,
            artifacts: vec!["config.toml".into()],
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(mut self, extra: serde_json::Value) -> Result<()> {
        self.artifacts.push("manifest.json".into());
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "argv": std::env::args().collect::<Vec<_>>(),
            "artifacts": self.artifacts,
            "summary": extra,
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let ds = if d.source == "synth" {
        synth_shapes(d.count, d.resolution, d.num_classes, cfg.train.seed)?
    } else {
        load_image_dir(Path::new(&d.source), d.resolution, d.channels)?
    };
    if ds.num_classes != cfg.net.num_classes {
        bail!(
            "dataset has {:?} classes but the network expects {:?}; set data.num_classes",
            ds.num_classes,
            cfg.net.num_classes
        );
    }
    Ok(ds)
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<bool> {
    let cfg = common.resolve()?;
    let mut run = Run::open("train", common, &cfg)?;
    let data = load_data(&cfg)?;
    let state = match resume {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.net() != &cfg.net {
                bail!("checkpoint network does not match the configured [net] section");
            }
            ck.into_state()
        }
        None => {
            let mut rng = RngKey::new(cfg.train.seed).stream(Purpose::Init, 0, 0);
            TrainState::new(init_params::<f32, _>(&cfg.net, &mut rng)?, cfg.train.seed)
        }
    };
    run.path("metrics.jsonl");
    run.path("checkpoint.bin");
    let outcome = train(&cfg.train, &data, state, Some(&run.dir))?;
    let last = outcome.metrics.last();
    println!(
        "trained {} steps ({} images), final loss {:.5}",
        outcome.state.step,
        outcome.state.images_seen,
        last.map_or(f64::NAN, |m| m.loss)
    );
    run.finish(json!({
        "steps": outcome.state.step,
        "images_seen": outcome.state.images_seen,
        "final_loss": last.map(|m| m.loss),
        "dataset": data.provenance,
    }))?;
    Ok(true)
}

fn load_params(path: &Path, cfg: &RunConfig) -> Result<patchdiff::Params32> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.net().image_channels() != cfg.data.channels {
        bail!(
            "checkpoint has {} image channels, config has {}",
            ck.net().image_channels(),
            cfg.data.channels
        );
    }
    Ok(ck.params)
}

fn class_labels(params: &patchdiff::Params32, class: Option<usize>, count: usize) -> Result<Option<Vec<usize>>> {
    match (params.config().num_classes, class) {
        (None, None) => Ok(None),
        (None, Some(_)) => bail!("--class given for an unconditional checkpoint"),
        (Some(k), Some(c)) if c >= k => bail!("class {c} out of range for {k} classes"),
        (Some(_), Some(c)) => Ok(Some(vec![c; count])),
        (Some(k), None) => Ok(Some((0..count).map(|i| i % k).collect())),
    }
}

fn cmd_sample(common: &Common, checkpoint: &Path, count: usize, class: Option<usize>) -> Result<bool> {
    let cfg = common.resolve()?;
    let params = load_params(checkpoint, &cfg)?;
    let mut run = Run::open("sample", common, &cfg)?;
    let labels = class_labels(&params, class, count)?;
    let out = sample(&params, &cfg.sampler, cfg.data.resolution, count, labels.as_deref())?;
    save_grid_png(&out.images, &run.path("samples.png"))?;
    let (_, c, r, _) = out.images.dims4()?;
    for i in 0..count {
        let img = out.images.slice_outer(i, i + 1)?.reshape(&[c, r, r])?;
        save_png(&img, &run.path(&format!("sample_{i:04}.png")))?;
    }
    println!(
        "{} samples, {} steps, {} denoiser evaluations per sample",
        count, out.steps, out.evals
    );
    run.finish(json!({
        "checkpoint": checkpoint,
        "count": count,
        "steps": out.steps,
        "denoiser_evaluations": out.evals,
    }))?;
    Ok(true)
}

fn cmd_outpaint(
    common: &Common,
    checkpoint: &Path,
    reference: &Path,
    extended: usize,
    mode: Mode,
    class: Option<usize>,
) -> Result<bool> {
    let cfg = common.resolve()?;
    let params = load_params(checkpoint, &cfg)?;
    let mut run = Run::open("outpaint", common, &cfg)?;
    let bytes = std::fs::read(reference).with_context(|| format!("reading {}", reference.display()))?;
    let image: Tensor<f32> = png_bytes_to_image(&bytes, cfg.data.channels)?;
    let label = class_labels(&params, class, 1)?.map(|l| l[0]);
    let mode = match mode {
        Mode::Clean => OutpaintMode::Clean,
        Mode::Noised => OutpaintMode::Noised,
    };
    let out = outpaint(&params, &cfg.sampler, &image, extended, label, mode)?;
    let (_, c, e, _) = out.images.dims4()?;
    save_png(&out.images.reshape(&[c, e, e])?, &run.path("outpaint.png"))?;
    println!("out-painted {}x{} canvas ({} denoiser evaluations)", e, e, out.evals);
    run.finish(json!({
        "checkpoint": checkpoint,
        "reference": reference,
        "extended": extended,
        "mode": format!("{mode:?}").to_lowercase(),
        "denoiser_evaluations": out.evals,
    }))?;
    Ok(true)
}

fn cmd_oracle(common: &Common) -> Result<bool> {
    let cfg = common.resolve()?;
    let mut run = Run::open("oracle", common, &cfg)?;
    let report = run_suite(cfg.train.seed)?;
    let text = report.to_text();
    print!("{text}");
    run.write("oracle.txt", &text)?;
    run.write("oracle.json", serde_json::to_string_pretty(&report)?)?;
    let passed = report.all_passed();
    run.finish(json!({ "all_passed": passed }))?;
    Ok(passed)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    count: usize,
    sigma: f64,
    patch: Option<usize>,
    coherence_images: usize,
) -> Result<bool> {
    let cfg = common.resolve()?;
    let params = load_params(checkpoint, &cfg)?;
    let mut run = Run::open("eval", common, &cfg)?;
    let data = load_data(&cfg)?;
    let n = count.min(data.len());
    let reference = data.images.slice_outer(data.len() - n, data.len())?;
    let ref_labels = data.labels.as_ref().map(|l| l[data.len() - n..].to_vec());
    let gen_labels = class_labels(&params, None, n)?;
    let generated = sample(&params, &cfg.sampler, cfg.data.resolution, n, gen_labels.as_deref())?;
    let embedder = FeatureEmbedder::new(cfg.data.channels, 0);
    let mmd = mmd_distance(&generated.images, &reference, &embedder)?;
    let s = patch.unwrap_or(cfg.data.resolution / 2);
    let m = coherence_images.min(n);
    let coherence = score_coherence_batch(
        &params,
        &reference.slice_outer(0, m)?,
        sigma,
        s,
        ref_labels.as_ref().map(|l| &l[..m]),
        RngKey::new(cfg.sampler.seed),
    )?;
    let summary = json!({
        "checkpoint": checkpoint,
        "images": n,
        "mmd2": mmd.mmd2,
        "mmd2_std_error": mmd.std_error,
        "coherence": coherence,
        "coherence_sigma": sigma,
        "coherence_patch": s,
    });
    println!(
        "random-feature MMD^2 {:.6} (se {:.6}); score coherence {:.6} at sigma {} patch {}",
        mmd.mmd2, mmd.std_error, coherence, sigma, s
    );
    run.write("eval.json", serde_json::to_string_pretty(&summary)?)?;
    run.finish(summary)?;
    Ok(true)
}

fn cmd_bench(common: &Common, ps: &[f64], batches: usize, warmup: usize, batch_size: usize) -> Result<bool> {
    let cfg = common.resolve()?;
    let mut run = Run::open("bench", common, &cfg)?;
    let bench = BenchConfig {
        net: cfg.net.clone(),
        resolution: cfg.data.resolution,
        batch_size,
        ps: ps.to_vec(),
        warmup,
        batches,
        seed: cfg.train.seed,
    };
    let report = bench_throughput(&bench)?;
    let text = report.to_text();
    print!("{text}");
    run.write("bench.txt", &text)?;
    run.write("bench.json", serde_json::to_string_pretty(&report)?)?;
    run.finish(json!({ "rows": report.rows.len() }))?;
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { common, resume } => cmd_train(common, resume.as_deref()),
        Command::Sample {
            common,
            checkpoint,
            count,
            class,
        } => cmd_sample(common, checkpoint, *count, *class),
        Command::Outpaint {
            common,
            checkpoint,
            reference,
            extended,
            mode,
            class,
        } => cmd_outpaint(common, checkpoint, reference, *extended, *mode, *class),
        Command::Oracle { common } => cmd_oracle(common),
        Command::Eval {
            common,
            checkpoint,
            count,
            sigma,
            patch,
            coherence_images,
        } => cmd_eval(common, checkpoint, *count, *sigma, *patch, *coherence_images),
        Command::Bench {
            common,
            ps,
            batches,
            warmup,
            batch_size,
        } => cmd_bench(common, ps, *batches, *warmup, *batch_size),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

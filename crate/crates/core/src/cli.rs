//! Command-line front end: `train`, `eval`, `gradcheck`, `visualize`, `bench`
//! and `inspect`.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data or format, 4
//! numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Ablation, ModelConfig, Settings};
use crate::error::{Error, Result};
use crate::gfc::GfcBlock;
use crate::gradcheck::model_suite;
use crate::interpret::{self, OverlaySpec, RgbImage};
use crate::layers::trunc_normal;
use crate::net::Model;
use crate::ops::flops;
use crate::tensor::{FeatureMap, Tensor};
use crate::train::data::{self, Dataset};
use crate::train::run::{self, load_splits, model_for, train_loop, Trainer};
use crate::train::Normalizer;

pub const THREADS_ENV: &str = "CLUENET_THREADS";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "cluenet", version, about = "Clustering-attention vision backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named model preset, applied before the file and overrides.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for every artifact, listed in its manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Top-1 and top-3 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `val` or `train`.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finite-difference check of every block in double precision.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates checked per parameter.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Cluster receptive-field overlays for validation images.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Trained weights; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stage, from 1.
        #[arg(long, default_value_t = 1)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Block within the stage when assignments are not shared.
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Merge clusters into this many groups; 0 keeps them all.
        #[arg(long = "merge-k", default_value_t = 0)]
        merge_k: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        outline: bool,
        /// Number of validation images to render.
        #[arg(long, default_value_t = 1)]
        images: usize,
    },
    /// Multiply-adds and wall time of one block as the pixel count doubles.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long = "dim-prime", default_value_t = 32)]
        dim_prime: usize,
        /// Map height; widths double from it.
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        sizes: usize,
    },
    /// Configuration, parameter count and per-stage shapes.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => 1,
        Error::Config { .. } => 2,
        Error::Format(_) | Error::Io { .. } | Error::Dimension(_) => 3,
        Error::Numerical(_) | Error::Training(_) | Error::Internal(_) => 4,
    }
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let mut stdout = std::io::stdout();
    match dispatch(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::config(THREADS_ENV, format!("expected a count, got `{v}`")))?;
    // Fails only if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    Ok(())
}

fn settings(c: &Common, default_preset: &str) -> Result<Settings> {
    let mut s = Settings::from_preset(c.preset.as_deref().unwrap_or(default_preset))?;
    if let Some(path) = &c.config {
        s.apply_file(path)?;
    }
    for o in &c.set {
        s.apply_override(o)?;
    }
    s.validate()?;
    Ok(s)
}

/// Collects written paths and writes the manifest.
struct Outputs {
    dir: Option<PathBuf>,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Outputs {
            dir: dir.map(Path::to_path_buf),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn add(&mut self, p: PathBuf) {
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        if let Some(p) = self.path(name) {
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            self.add(p);
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(MANIFEST_FILE);
        let text: String = self.files.iter().map(|f| format!("{}\n", f.display())).collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train { common, resume } => cmd_train(&common, resume, out),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => cmd_eval(&common, &checkpoint, &split, out),
        Command::Gradcheck { common, coords, tol } => cmd_gradcheck(&common, coords, tol, out),
        Command::Visualize {
            common,
            checkpoint,
            stage,
            head,
            block,
            merge_k,
            alpha,
            outline,
            images,
        } => cmd_visualize(
            &common,
            &VisualizeArgs {
                checkpoint,
                stage,
                head,
                block,
                merge_k,
                alpha,
                outline,
                images,
            },
            out,
        ),
        Command::Bench {
            common,
            dim,
            dim_prime,
            height,
            sizes,
        } => cmd_bench(&common, dim, dim_prime, height, sizes, out),
        Command::Inspect { common } => cmd_inspect(&common, out),
    }
}

fn cmd_train(c: &Common, resume: bool, out: &mut dyn Write) -> Result<i32> {
    let s = settings(c, "micro-cifar")?;
    let mut outputs = Outputs::new(c.out.as_deref())?;
    let (train, val) = load_splits(&s, c.seed)?;
    let cfg = model_for(&s, train.classes);
    let ck = outputs.path(run::CHECKPOINT_FILE);
    let mut trainer = match &ck {
        Some(p) if resume && p.exists() => {
            let t = Trainer::load(p, &s.train, Some(&cfg))?;
            let _ = writeln!(out, "resuming after epoch {}", t.epoch);
            t
        }
        _ => {
            if resume {
                return Err(Error::Argument("--resume needs --out with an existing checkpoint".into()));
            }
            Trainer::new(Model::build(&cfg, c.seed)?, &s.train, Normalizer::fit(&train), c.seed)?
        }
    };
    outputs.write_text("settings.txt", &format!("{}\n{}", cfg.to_text(), train_text(&s)))?;
    let _ = writeln!(
        out,
        "training {} parameters on {} images ({} classes)",
        trainer.model.count_params(),
        train.len(),
        train.classes
    );
    let result = train_loop(&mut trainer, &train, Some(&val), c.out.as_deref(), out);
    if let Some(p) = ck.filter(|p| p.exists()) {
        outputs.add(p);
        outputs.add(outputs.path(run::METRICS_FILE).expect("out set"));
    }
    outputs.finish()?;
    let history = result?;
    if let Some(v) = history.last().and_then(|r| r.val) {
        let _ = writeln!(out, "final top1={:.4} top3={:.4}", v.top1, v.top3);
    }
    Ok(0)
}

fn train_text(s: &Settings) -> String {
    let t = &s.train;
    format!(
        "epochs = {}\nbatch_size = {}\nbase_lr = {}\nmin_lr = {}\nwarmup_epochs = {}\nweight_decay = {}\n",
        t.epochs, t.batch_size, t.base_lr, t.min_lr, t.warmup_epochs, t.weight_decay
    )
}

fn cmd_eval(c: &Common, ck: &Path, split: &str, out: &mut dyn Write) -> Result<i32> {
    let entries = checkpoint::read(ck)?;
    let model = Model::<f32>::from_entries(&entries)?;
    let norm = run::norm_of(&entries)?;
    let mut s = settings(c, "micro-cifar")?;
    s.model.input_size = model.config.input_size;
    let (train, val) = load_splits(&s, c.seed)?;
    let data = match split {
        "val" => val,
        "train" => train,
        other => return Err(Error::Argument(format!("unknown split `{other}`"))),
    };
    if data.classes > model.config.num_classes {
        return Err(Error::config("num_classes", "checkpoint head is smaller than the dataset"));
    }
    let r = run::evaluate(&model, &data, &norm, s.train.batch_size)?;
    let line = format!("split={split} samples={} loss={:.5} top1={:.4} top3={:.4}", r.samples, r.loss, r.top1, r.top3);
    let _ = writeln!(out, "{line}");
    let mut outputs = Outputs::new(c.out.as_deref())?;
    outputs.write_text("eval.txt", &format!("{line}\n"))?;
    outputs.finish()?;
    Ok(0)
}

fn cmd_gradcheck(c: &Common, coords: usize, tol: f64, out: &mut dyn Write) -> Result<i32> {
    let s = settings(c, "micro-toy")?;
    let start = Instant::now();
    let reports = model_suite(&s.model, c.seed, 2, coords, tol)?;
    let mut text = String::from("block,max_rel_err,checked,pass\n");
    let mut ok = true;
    for (block, r) in &reports {
        let _ = writeln!(out, "{block:<16} max_rel_err={:.3e} checked={} {}", r.max_rel_err, r.checked, if r.pass { "ok" } else { "FAIL" });
        text.push_str(&format!("{block},{:e},{},{}\n", r.max_rel_err, r.checked, r.pass));
        ok &= r.pass;
    }
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let _ = writeln!(out, "max rel err {worst:.3e} (tol {tol:e}) in {:.1}s", start.elapsed().as_secs_f64());
    let mut outputs = Outputs::new(c.out.as_deref())?;
    outputs.write_text("gradcheck.csv", &text)?;
    outputs.finish()?;
    Ok(if ok { 0 } else { 4 })
}

struct VisualizeArgs {
    checkpoint: Option<PathBuf>,
    stage: usize,
    head: usize,
    block: usize,
    merge_k: usize,
    alpha: f64,
    outline: bool,
    images: usize,
}

fn cmd_visualize(c: &Common, a: &VisualizeArgs, out: &mut dyn Write) -> Result<i32> {
    let Some(dir) = c.out.as_deref() else {
        return Err(Error::Argument("visualize needs --out".into()));
    };
    let mut s = settings(c, "micro-cifar")?;
    let (model, norm) = match &a.checkpoint {
        Some(p) => {
            let entries = checkpoint::read(p)?;
            (Model::<f32>::from_entries(&entries)?, Some(run::norm_of(&entries)?))
        }
        None => {
            s.model.num_classes = s.model.num_classes.max(s.train.synth_classes);
            (Model::<f32>::build(&s.model, c.seed)?, None)
        }
    };
    s.model.input_size = model.config.input_size;
    s.train.synth_val = s.train.synth_val.max(a.images);
    let (train, val) = load_splits(&s, c.seed)?;
    let norm = norm.unwrap_or_else(|| Normalizer::fit(&train));
    let count = a.images.min(val.len());
    let idx: Vec<usize> = (0..count).collect();
    let (x, _) = data::make_batch(&val, &idx, &norm, None)?;
    let (_, trace) = model.forward(&x, true)?;
    let trace = trace.expect("trace requested");
    let mut outputs = Outputs::new(Some(dir))?;
    for (i, t) in trace.iter().enumerate() {
        let rendered = render_one(&val, i, t, a, dir, &mut outputs)?;
        let _ = writeln!(out, "image {i}: {} clusters, pixel hash {:016x}", rendered.0, rendered.1);
    }
    outputs.finish()?;
    Ok(0)
}

fn render_one(
    val: &Dataset,
    i: usize,
    t: &interpret::TraceBundle<f32>,
    a: &VisualizeArgs,
    dir: &Path,
    outputs: &mut Outputs,
) -> Result<(usize, u64)> {
    let mut fields = interpret::cluster_fields(t, a.stage, a.block, a.head)?;
    if a.merge_k > 0 {
        let st = &t.stages[a.stage - 1].blocks[a.block];
        let k = a.merge_k.min(fields.len());
        let labels = interpret::kmeans_merge(&st.centers_v, k, interpret::KMEANS_MAX_ITERS, 0)?;
        fields = interpret::merge_fields(&fields, &labels);
    }
    let image = RgbImage::from_unit(val.height, val.width, val.image(i))?;
    let spec = OverlaySpec::new(fields.len(), a.alpha, a.outline)?;
    let stem = dir.join(format!("image{i}_stage{}_head{}", a.stage, a.head));
    let (img, paths) = interpret::render_overlay(&image, &fields, &spec, &stem)?;
    let dump = dir.join(format!("image{i}_trace.clue"));
    interpret::save_trace(&dump, t)?;
    for p in paths.into_iter().chain([dump]) {
        outputs.add(p);
    }
    Ok((fields.len(), img.pixel_hash()))
}

/// One row of the scaling benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub pixels: usize,
    pub madds: u64,
    pub seconds: f64,
}

/// Forward multiply-adds of one GFC block (all flags on) at a fixed grid as
/// the map width doubles from `height`.
pub fn bench_block(dim: usize, dim_prime: usize, height: usize, sizes: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = GfcBlock::<f32>::new("bench", dim, dim_prime, 2, (7, 7), Ablation::default(), true, &mut rng)?;
    (0..sizes)
        .map(|k| {
            let width = height << k;
            let v: Tensor<f32> = trunc_normal(&mut rng, &[1, height, width, dim], 1.0);
            let x = FeatureMap::new(1, height, width, dim, 1, v.into_vec());
            let start = Instant::now();
            let (r, madds) = flops::measure(|| block.forward(&x, None));
            r?;
            Ok(BenchRow {
                pixels: height * width,
                madds,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

fn cmd_bench(c: &Common, dim: usize, dim_prime: usize, height: usize, sizes: usize, out: &mut dyn Write) -> Result<i32> {
    if sizes < 2 {
        return Err(Error::Argument("--sizes needs at least 2".into()));
    }
    let rows = bench_block(dim, dim_prime, height, sizes, c.seed)?;
    let mut csv = String::from("pixels,madds,ratio,seconds\n");
    for (k, r) in rows.iter().enumerate() {
        let ratio = if k == 0 { f64::NAN } else { r.madds as f64 / rows[k - 1].madds as f64 };
        csv.push_str(&format!("{},{},{:.4},{:.6}\n", r.pixels, r.madds, ratio, r.seconds));
    }
    let _ = write!(out, "{csv}");
    let mut outputs = Outputs::new(c.out.as_deref())?;
    outputs.write_text("bench.csv", &csv)?;
    outputs.finish()?;
    Ok(0)
}

/// Human-readable summary of a configuration.
pub fn describe(cfg: &ModelConfig) -> Result<String> {
    let model = Model::<f32>::build(cfg, 0)?;
    let mut s = format!("{}parameters = {}\n", cfg.to_text(), model.count_params());
    let grids = cfg.effective_grids();
    for (k, ((h, w), st)) in cfg.stage_sizes().into_iter().zip(&cfg.stages).enumerate() {
        s.push_str(&format!(
            "stage{}: {:?} map {h}x{w}x{} depth {} heads {} grid {}x{} shared {}\n",
            k + 1,
            st.transition,
            st.dim,
            st.depth,
            st.heads,
            grids[k].0,
            grids[k].1,
            cfg.stage_shares(k)
        ));
    }
    Ok(s)
}

fn cmd_inspect(c: &Common, out: &mut dyn Write) -> Result<i32> {
    let s = settings(c, "micro")?;
    let text = describe(&s.model)?;
    let _ = write!(out, "{text}");
    let mut outputs = Outputs::new(c.out.as_deref())?;
    outputs.write_text("inspect.txt", &text)?;
    outputs.finish()?;
    Ok(0)
}

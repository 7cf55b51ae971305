//! `graphode`: generate data, train, evaluate and plot latent graph ODEs.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use graphode::encoder::Variant;
use graphode::eval::{evaluate, evaluate_baseline, Baseline, EvalSpec};
use graphode::experiment::{run_experiment_matrix, write_cell_plots, MatrixSpec, MATRIX_CSV};
use graphode::model::Model;
use graphode::scalar::Scalar;
use graphode::sim::{generate_bundle, DatasetBundle, SystemKind};
use graphode::task::Task;
use graphode::train::{train, TrainFiles, TrainStatus};

use config::{output_path, Config, Precision, OUTPUT_ROOT_ENV};

/// `println!` that returns write errors instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        writeln!(std::io::stdout(), $($arg)*)?
    }};
}

#[derive(Parser, Debug)]
#[command(name = "graphode", version, about = "Latent graph ODEs for irregularly-sampled multi-agent trajectories")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    /// Scalar type for the model.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a system and write train/val/test dataset files.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metric log.
    Train(TrainArgs),
    /// Score a checkpoint (and optionally the baselines) on the test split.
    Eval(EvalArgs),
    /// Run the task × ratio × variant matrix and write a CSV and figures.
    Matrix(MatrixArgs),
    /// Draw observed and predicted paths for test samples.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    system: Option<SystemKind>,
    /// Training samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Observed ratios; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    ratio: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also score the constant-zero and carried-forward baselines.
    #[arg(long)]
    baselines: bool,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[arg(long)]
    data: PathBuf,
    /// Holds `<task>-<variant>/best.ckpt`.
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train missing checkpoints with the configured training settings.
    #[arg(long)]
    train: bool,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<Task>,
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.4)]
    ratio: f64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

struct Ctx {
    cfg: Config,
    root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        output_path(p, self.root.as_deref())
    }

    fn apply_model(&mut self, m: &ModelArgs) {
        if let Some(t) = m.task {
            self.cfg.train.task = t;
        }
        if let Some(v) = m.variant {
            self.cfg.model.encoder.variant = v;
        }
    }
}

fn load_data(dir: &Path) -> anyhow::Result<DatasetBundle> {
    DatasetBundle::read_dir(dir).with_context(|| format!("reading dataset from {}", dir.display()))
}

fn gen_data(ctx: &Ctx, a: &GenDataArgs) -> anyhow::Result<()> {
    let mut g = ctx.cfg.data.clone();
    if let Some(s) = a.system {
        g.sim.kind = s;
    }
    if let Some(n) = a.samples {
        g.train_samples = n;
    }
    if let Some(n) = a.val_samples {
        g.val_samples = n;
    }
    if let Some(n) = a.test_samples {
        g.test_samples = n;
    }
    if let Some(n) = a.objects {
        g.sim.n_objects = n;
    }
    if let Some(s) = a.seed {
        g.seed = s;
    }
    let out = ctx.out(&a.out);
    let bundle = generate_bundle(&g)?;
    bundle.write_dir(&out)?;
    say!("wrote {} train / {} val / {} test samples to {}", g.train_samples, g.val_samples, g.test_samples, out.display());
    Ok(())
}

fn run_train<T: Scalar>(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let data = load_data(&a.data)?;
    let out = ctx.out(&a.out);
    let mut model = Model::<T>::new(ctx.cfg.model.clone(), ctx.cfg.train.seed)?;
    let outcome = train(&mut model, &data.train, &data.val, &ctx.cfg.train, Some(&out))?;
    std::fs::write(out.join("config.toml"), toml::to_string(&ctx.cfg)?)?;
    match outcome.status {
        TrainStatus::Completed => say!("trained {} epochs; best epoch {:?} (val mse {:?})", ctx.cfg.train.epochs, outcome.best_epoch, outcome.best_val_mse),
        TrainStatus::Diverged { epoch } => bail!("training diverged in epoch {epoch}; last good parameters saved to {}", out.join(TrainFiles::LAST).display()),
    }
    Ok(())
}

fn run_eval<T: Scalar>(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<()> {
    let data = load_data(&a.data)?;
    let model = Model::<T>::load(ctx.cfg.model.clone(), &a.checkpoint)?;
    let ratios = if a.ratio.is_empty() { ctx.cfg.eval.ratios.clone() } else { a.ratio.clone() };
    let seed = a.seed.unwrap_or(ctx.cfg.eval.seed);
    for ratio in ratios {
        let spec = EvalSpec { chunk: ctx.cfg.eval.chunk, denormalize: ctx.cfg.eval.denormalize, ..EvalSpec::new(ctx.cfg.train.task, ratio, seed) };
        let r = evaluate(&model, &data.test, &spec)?;
        say!("{}", serde_json::json!({ "predictor": "model", "report": r }));
        if a.baselines {
            for b in Baseline::ALL {
                let r = evaluate_baseline(&data.test, &spec, b)?;
                say!("{}", serde_json::json!({ "predictor": b.name(), "report": r }));
            }
        }
    }
    Ok(())
}

fn pick<V: Clone>(flag: &[V], cfg: &[V]) -> Vec<V> {
    if flag.is_empty() { cfg } else { flag }.to_vec()
}

fn run_matrix<T: Scalar>(ctx: &Ctx, a: &MatrixArgs) -> anyhow::Result<()> {
    let data = load_data(&a.data)?;
    let e = &ctx.cfg.eval;
    let spec = MatrixSpec {
        tasks: pick(&a.tasks, &e.tasks),
        ratios: pick(&a.ratios, &e.ratios),
        variants: pick(&a.variants, &e.variants),
        seed: a.seed.unwrap_or(e.seed),
        model: ctx.cfg.model.clone(),
        train: a.train.then(|| ctx.cfg.train.clone()),
        checkpoint_dir: ctx.out(&a.checkpoints),
        plot_samples: e.plot_samples,
        chunk: e.chunk,
        denormalize: e.denormalize,
    };
    let out = ctx.out(&a.out);
    let report = run_experiment_matrix::<T>(&spec, &data, Some(&out))?;
    for r in &report.rows {
        say!("{:<13} {:.1} {:<8} mse {:.6} ± {:.6}", r.task.name(), r.ratio, r.variant.name(), r.mse, r.ci);
    }
    for f in &report.failures {
        eprintln!("failed: {} {} {:?}: {}", f.task, f.variant, f.ratio, f.error);
    }
    say!("wrote {}", out.join(MATRIX_CSV).display());
    if !report.failures.is_empty() {
        bail!("{} cell(s) failed", report.failures.len());
    }
    Ok(())
}

fn run_plot<T: Scalar>(ctx: &Ctx, a: &PlotArgs) -> anyhow::Result<()> {
    let data = load_data(&a.data)?;
    let model = Model::<T>::load(ctx.cfg.model.clone(), &a.checkpoint)?;
    let spec = EvalSpec::new(ctx.cfg.train.task, a.ratio, a.seed.unwrap_or(ctx.cfg.eval.seed));
    let samples = a.samples.unwrap_or(ctx.cfg.eval.plot_samples);
    let written = write_cell_plots(&model, &data, &spec, ctx.cfg.model.encoder.variant, samples, &ctx.out(&a.out))?;
    for p in written {
        say!("{}", p.display());
    }
    Ok(())
}

fn dispatch<T: Scalar>(ctx: &Ctx, cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(ctx, a),
        Command::Train(a) => run_train::<T>(ctx, a),
        Command::Eval(a) => run_eval::<T>(ctx, a),
        Command::Matrix(a) => run_matrix::<T>(ctx, a),
        Command::Plot(a) => run_plot::<T>(ctx, a),
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut ctx = Ctx { cfg: Config::load(cli.config.as_deref())?, root: cli.output_root.clone() };
    if let Some(p) = cli.precision {
        ctx.cfg.precision = p;
    }
    match &cli.command {
        Command::Train(a) => {
            ctx.apply_model(&a.model);
            let t = &mut ctx.cfg.train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.learning_rate = a.lr.unwrap_or(t.learning_rate);
            t.kl_weight = a.kl_weight.unwrap_or(t.kl_weight);
            t.seed = a.seed.unwrap_or(t.seed);
        }
        Command::Eval(a) => ctx.apply_model(&a.model),
        Command::Plot(a) => ctx.apply_model(&a.model),
        _ => {}
    }
    ctx.cfg.model.validate()?;
    let result = match ctx.cfg.precision {
        Precision::F32 => dispatch::<f32>(&ctx, &cli.command),
        Precision::F64 => dispatch::<f64>(&ctx, &cli.command),
    };
    // a reader that closes stdout early is not an error
    match result {
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => Ok(()),
        r => r,
    }
}

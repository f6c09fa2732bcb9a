use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gode::checkpoint;
use gode::config::{DatasetKind, Precision, RunConfig};
use gode::data::Split;
use gode::error::GodeError;
use gode::gradcheck::{gradcheck_model, tiny_spec};
use gode::model::{count_params, count_params_by_stage, Family, Model};
use gode::odeint::Method;
use gode::scalar::Scalar;
use gode::train::{evaluate, train_with_progress, EpochRow};

#[derive(Parser)]
#[command(
    name = "gode",
    about = "Train and probe ODE-core image classifiers (resnet, node, gode)",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes report.csv, timings.csv, model.ckpt, config.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// One training run per value along a hyperparameter axis (gode only).
    Grid(GridArgs),
    /// Verify model gradients against 64-bit central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print exact trainable-parameter counts for a model configuration.
    Params(ParamsArgs),
    /// Export materialized kernel values of one core layer across time.
    Trajectory(TrajectoryArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Resnet,
    Node,
    Gode,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Resnet => Family::Resnet,
            FamilyArg::Node => Family::Node,
            FamilyArg::Gode => Family::Gode,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Cifar10,
    Synthetic,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> DatasetKind {
        match d {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
            DatasetArg::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Euler,
    Dopri5,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

/// Flags override config-file values, which override built-in defaults.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<FamilyArg>,
    #[arg(long)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// B-spline control points n (gode).
    #[arg(long)]
    n: Option<usize>,
    /// B-spline degree k (gode).
    #[arg(long)]
    k: Option<usize>,
    /// Integration interval endpoint T.
    #[arg(long = "T")]
    t_end: Option<f64>,
    /// Convolution stages per residual block / ODE dynamics.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    solver: Option<SolverArg>,
    /// Euler step size.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    /// Residual blocks (resnet).
    #[arg(long)]
    blocks: Option<usize>,
    /// Residual update scale (resnet).
    #[arg(long)]
    h_scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train-split subset size.
    #[arg(long)]
    subset: Option<usize>,
    /// Test-split subset size.
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    eval_batch: Option<usize>,
    /// Crop padding for train batches (0 disables).
    #[arg(long)]
    augment_pad: Option<usize>,
    #[arg(long)]
    precision: Option<PrecisionArg>,
    /// Output directory root.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.family {
            cfg.model.family = v.into();
        }
        if let Some(v) = self.dataset {
            cfg.dataset = v.into();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
        if let Some(v) = self.n {
            cfg.model.control_points = v;
        }
        if let Some(v) = self.k {
            cfg.model.basis_degree = v;
        }
        if let Some(v) = self.t_end {
            cfg.model.solver.t1 = v;
        }
        if let Some(v) = self.layers {
            cfg.model.dynamics_layers = v;
        }
        if let Some(v) = self.solver {
            cfg.model.solver.method = match v {
                SolverArg::Euler => Method::Euler,
                SolverArg::Dopri5 => Method::Dopri5,
            };
        }
        if let Some(v) = self.step {
            cfg.model.solver.step = v;
        }
        if let Some(v) = self.rtol {
            cfg.model.solver.rtol = v;
        }
        if let Some(v) = self.atol {
            cfg.model.solver.atol = v;
        }
        if let Some(v) = self.width {
            cfg.model.width = v;
        }
        if let Some(v) = self.blocks {
            cfg.model.num_blocks = v;
        }
        if let Some(v) = self.h_scale {
            cfg.model.h_scale = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr0 = v;
        }
        if let Some(v) = self.momentum {
            cfg.train.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.train.weight_decay = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.subset {
            cfg.subset = Some(v);
        }
        if let Some(v) = self.test_subset {
            cfg.test_subset = Some(v);
        }
        if let Some(v) = self.eval_batch {
            cfg.train.eval_batch_size = v;
        }
        if let Some(v) = self.augment_pad {
            cfg.train.augment_pad = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = match v {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        // input channels follow the dataset
        cfg.model.in_channels = match cfg.dataset {
            DatasetKind::Cifar10 => 3,
            _ => 1,
        };
        // a shortened run keeps only the schedule drops it reaches
        let epochs = cfg.train.epochs;
        cfg.train.lr_drop_epochs.retain(|&e| e < epochs);
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    ov: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    ov: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    N,
    K,
    T,
    Layers,
}

#[derive(Args)]
struct GridArgs {
    /// Hyperparameter to sweep.
    #[arg(long)]
    axis: AxisArg,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    ov: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    ov: Overrides,
    /// Flip one analytic gradient entry first (negative control).
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    ov: Overrides,
}

#[derive(Args)]
struct TrajectoryArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Core layer index.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Number of uniformly spaced evaluation times on [0, T].
    #[arg(long, default_value_t = 50)]
    t_count: usize,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<GodeError>()
                .map(|e| e.exit_code())
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Params(args) => cmd_params(args),
        Command::Trajectory(args) => cmd_trajectory(args),
    }
}

fn print_epoch(row: &EpochRow) {
    println!(
        "epoch {:>3}  lr {:<8}  loss {:.4}  train acc {:.4}  test err {:.2}%  {:.3}s/iter",
        row.epoch, row.lr, row.train_loss, row.train_acc, row.test_error_pct, row.sec_per_iter
    );
}

/// Train under the resolved config; returns (best test error %, median s/iter).
fn run_training<S: Scalar>(cfg: &RunConfig) -> anyhow::Result<(f64, f64)> {
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.json"), cfg.to_json())?;
    let train_ds = cfg.load_split::<S>(Split::Train)?;
    let test_ds = cfg.load_split::<S>(Split::Test)?;
    let mut model = Model::<S>::build(&cfg.model, cfg.train.seed)?;
    let ckpt = run_dir.join("model.ckpt");
    let report = train_with_progress(
        &mut model,
        &train_ds,
        &test_ds,
        &cfg.train,
        Some(&ckpt),
        print_epoch,
    )?;
    std::fs::write(run_dir.join("report.csv"), report.to_csv())?;
    std::fs::write(run_dir.join("timings.csv"), report.timing_csv())?;
    let best = report.best_test_error().unwrap_or(100.0);
    let med_iter = {
        let mut t: Vec<f64> = report.rows.iter().map(|r| r.sec_per_iter).collect();
        t.sort_by(f64::total_cmp);
        t.get(t.len() / 2).copied().unwrap_or(0.0)
    };
    println!("run dir: {}", run_dir.display());
    println!("best test error: {best:.2}%");
    Ok((best, med_iter))
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = args.ov.resolve()?;
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_training::<f32>(&cfg)?,
        Precision::F64 => run_training::<f64>(&cfg)?,
    };
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = args.ov.resolve()?;
    let err = match cfg.precision {
        Precision::F32 => {
            let model = checkpoint::load::<f32>(&args.ckpt)?;
            cfg.model = model.spec.clone();
            let ds = cfg.load_split::<f32>(Split::Test)?;
            evaluate(&model, &ds, cfg.train.eval_batch_size)?
        }
        Precision::F64 => {
            let model = checkpoint::load::<f64>(&args.ckpt)?;
            cfg.model = model.spec.clone();
            let ds = cfg.load_split::<f64>(Split::Test)?;
            evaluate(&model, &ds, cfg.train.eval_batch_size)?
        }
    };
    println!("test error: {err}%");
    Ok(())
}

fn cmd_grid(args: GridArgs) -> anyhow::Result<()> {
    let base = args.ov.resolve()?;
    if base.model.family != Family::Gode {
        bail!(GodeError::Config(
            "grid sweeps apply to the gode family".into()
        ));
    }
    let mut results = Vec::new();
    for raw in &args.values {
        let mut cfg = base.clone();
        match args.axis {
            AxisArg::N => cfg.model.control_points = raw.parse().context("--values entry")?,
            AxisArg::K => cfg.model.basis_degree = raw.parse().context("--values entry")?,
            AxisArg::T => cfg.model.solver.t1 = raw.parse().context("--values entry")?,
            AxisArg::Layers => cfg.model.dynamics_layers = raw.parse().context("--values entry")?,
        }
        cfg.validate()?;
        println!(
            "== run: n={} k={} T={} layers={}",
            cfg.model.control_points,
            cfg.model.basis_degree,
            cfg.model.solver.t1,
            cfg.model.dynamics_layers
        );
        let params = count_params(&cfg.model)?;
        let (best, med_iter) = match cfg.precision {
            Precision::F32 => run_training::<f32>(&cfg)?,
            Precision::F64 => run_training::<f64>(&cfg)?,
        };
        results.push((cfg.model.clone(), params, best, med_iter));
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let stem = format!("grid-{}-s{}", base.hash(), base.train.seed);
    let mut csv = String::from("n,k,T,layers,params,test_error_pct\n");
    let mut timing = String::from("n,k,T,layers,sec_per_iter\n");
    for (spec, params, best, med) in &results {
        let key = format!(
            "{},{},{},{}",
            spec.control_points, spec.basis_degree, spec.solver.t1, spec.dynamics_layers
        );
        csv.push_str(&format!("{key},{params},{best}\n"));
        timing.push_str(&format!("{key},{med}\n"));
    }
    let csv_path = base.out_dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv)?;
    std::fs::write(base.out_dir.join(format!("{stem}-timings.csv")), timing)?;
    println!("grid summary: {}", csv_path.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = args.ov.resolve()?;
    let mut spec = tiny_spec(cfg.model.family);
    if let Some(n) = args.ov.n {
        spec.control_points = n;
    }
    if let Some(k) = args.ov.k {
        spec.basis_degree = k;
    }
    if let Some(l) = args.ov.layers {
        spec.dynamics_layers = l;
    }
    spec.validate()?;
    let total = count_params(&spec)?;
    println!(
        "gradcheck: family={} params={total} eps=1e-4 (f64)",
        spec.family
    );
    let report = gradcheck_model(&spec, cfg.train.seed, 1e-4, args.corrupt_backward)?;
    let worst = report.worst();
    println!(
        "checked {} scalars ({} nondifferentiable inside the probe band, skipped); max relative error {:.3e} ({})",
        report.params_checked,
        report.skipped_coords(),
        worst.max_rel_err,
        worst.name
    );
    if worst.max_rel_err > 1e-4 {
        bail!(
            "gradient check FAILED: {} has relative error {:.3e} > 1e-4",
            worst.name,
            worst.max_rel_err
        );
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> anyhow::Result<()> {
    let cfg = args.ov.resolve()?;
    cfg.model.validate()?;
    let total = count_params(&cfg.model)?;
    println!("family: {}", cfg.model.family);
    println!("total trainable parameters: {total}");
    for (stage, count) in count_params_by_stage(&cfg.model)? {
        println!("  {stage}: {count}");
    }
    Ok(())
}

fn cmd_trajectory(args: TrajectoryArgs) -> anyhow::Result<()> {
    if args.t_count == 0 {
        bail!(GodeError::Config("t_count must be at least 1".into()));
    }
    let model = checkpoint::load::<f64>(&args.ckpt)?;
    let t1 = model.spec.solver.t1;
    let grid: Vec<f64> = if args.t_count == 1 {
        vec![0.0]
    } else {
        (0..args.t_count)
            .map(|i| t1 * i as f64 / (args.t_count - 1) as f64)
            .collect()
    };
    let rows = model.weight_trajectory(args.layer, &grid)?;
    let mut csv = String::from("t,entry,value\n");
    for (t, entry, value) in rows {
        csv.push_str(&format!("{t},{entry},{value}\n"));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("trajectory written: {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

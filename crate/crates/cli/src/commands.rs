use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctpp::encoder::{Batch, Horizon};
use ctpp::events::{interval_stats, load_jsonl, write_jsonl, write_jsonl_to, EventSequence, Split, DEFAULT_MAX_LEN};
use ctpp::model::{Decoder, HorizonUnit, Mode, Model, ModelConfig};
use ctpp::nn::{analytic_gradients, compare_gradients, numeric_gradients, ParamGroup};
use ctpp::synth::{
    rng_for, sample_hawkes, sample_lognormal_renewal, sample_poisson, sequence_seed, Extent, HawkesSpec, PoissonSpec,
    RenewalSpec,
};
use ctpp::train::{evaluate_as, evaluate, history_csv, objective, train_model};
use ctpp::Error;
use rand::Rng;
use serde::Serialize;

use crate::config::{GradCheckConfig, RunConfig, TimeScale, OUTPUT_ENV};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "ctpp", version, about = "Convolutional temporal point process toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic dataset as JSON Lines.
    Synth {
        #[command(subcommand)]
        process: Process,
    },
    /// Interval statistics of a JSON Lines file.
    Stats(StatsArgs),
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Predict the event following each sequence.
    Predict(PredictArgs),
    /// Compare reverse-mode gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Sample every learned kernel on a grid and write CSV.
    DumpKernel(DumpKernelArgs),
    /// Print the default configuration.
    PrintConfig(PrintConfigArgs),
}

#[derive(Args, Debug)]
struct SynthCommon {
    /// Number of sequences.
    #[arg(long, default_value_t = 100)]
    n_seqs: usize,
    /// Comma-separated mark probabilities.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    marks: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Process {
    /// Homogeneous Poisson process.
    Poisson {
        #[arg(long)]
        rate: f64,
        /// Events per sequence.
        #[arg(long, conflicts_with = "horizon", required_unless_present = "horizon")]
        len: Option<usize>,
        /// Observation window length.
        #[arg(long)]
        horizon: Option<f64>,
        #[command(flatten)]
        common: SynthCommon,
    },
    /// Hawkes process with an exponential excitation kernel.
    Hawkes {
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        decay: f64,
        #[arg(long)]
        horizon: f64,
        #[command(flatten)]
        common: SynthCommon,
    },
    /// Renewal process with log-normal intervals.
    Renewal {
        #[arg(long, allow_negative_numbers = true)]
        log_mean: f64,
        #[arg(long)]
        log_std: f64,
        #[arg(long)]
        len: usize,
        #[command(flatten)]
        common: SynthCommon,
    },
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Mark count to validate against; unchecked when omitted.
    #[arg(long)]
    num_marks: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Probabilistic,
    Prediction,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Probabilistic => Mode::Probabilistic,
            ModeArg::Prediction => Mode::Prediction,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    beta: Option<f64>,
    /// Drop the local encoder (N = 0).
    #[arg(long)]
    ablate_local: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long, env = OUTPUT_ENV)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON Lines file in raw time units.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    data: Option<PathBuf>,
    /// Run config whose split files are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Fail unless the checkpoint was trained in this mode.
    #[arg(long, value_enum)]
    expect: Option<ModeArg>,
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    /// Where to write the JSON report; next to the checkpoint by default.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Seed for sampling from probabilistic checkpoints.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// TOML file with gradcheck settings; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args, Debug)]
struct DumpKernelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of τ values per channel.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// Upper end of the grid; required for infinite horizons.
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrintConfigArgs {
    /// Print the gradcheck settings instead of the run config.
    #[arg(long)]
    gradcheck: bool,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { process } => synth(process),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpKernel(a) => dump_kernel(a),
        Command::PrintConfig(a) => {
            if a.gradcheck {
                print!("{}", toml::to_string(&GradCheckConfig::default()).expect("config serializes"));
            } else {
                print!("{}", RunConfig::default().to_toml());
            }
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

type Sampler = Box<dyn Fn(u64) -> ctpp::Result<EventSequence>>;

fn synth(process: Process) -> Result<(), CliError> {
    let (common, sample): (&SynthCommon, Sampler) = match &process {
        Process::Poisson {
            rate,
            len,
            horizon,
            common,
        } => {
            let extent = match (len, horizon) {
                (Some(n), _) => Extent::Count(*n),
                (None, Some(t)) => Extent::Horizon(*t),
                (None, None) => return Err(CliError::Usage("poisson needs --len or --horizon".into())),
            };
            let spec = PoissonSpec {
                rate: *rate,
                mark_probs: common.marks.clone(),
                extent,
            };
            (common, Box::new(move |s| sample_poisson(&spec, s)))
        }
        Process::Hawkes {
            mu,
            alpha,
            decay,
            horizon,
            common,
        } => {
            let spec = HawkesSpec {
                mu: *mu,
                alpha: *alpha,
                decay: *decay,
                horizon: *horizon,
                mark_probs: common.marks.clone(),
            };
            (common, Box::new(move |s| sample_hawkes(&spec, s)))
        }
        Process::Renewal {
            log_mean,
            log_std,
            len,
            common,
        } => {
            let spec = RenewalSpec {
                log_mean: *log_mean,
                log_std: *log_std,
                count: *len,
                mark_probs: common.marks.clone(),
            };
            (common, Box::new(move |s| sample_lognormal_renewal(&spec, s)))
        }
    };
    if common.n_seqs == 0 {
        return Err(CliError::Usage("--n-seqs must be at least 1".into()));
    }
    let seqs = (0..common.n_seqs)
        .map(|i| sample(sequence_seed(common.seed, i)))
        .collect::<ctpp::Result<Vec<_>>>()?;
    match &common.out {
        Some(p) => write_jsonl(p, &seqs)?,
        None => write_jsonl_to(std::io::stdout().lock(), &seqs)?,
    }
    let events: usize = seqs.iter().map(EventSequence::len).sum();
    let delta = interval_stats(&seqs).map(|s| s.delta).unwrap_or(f64::NAN);
    eprintln!("sequences {} events {events} delta {delta}", seqs.len());
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    sequences: usize,
    events: usize,
    #[serde(flatten)]
    intervals: ctpp::events::DatasetStats,
}

fn stats(a: StatsArgs) -> Result<(), CliError> {
    let seqs = load_jsonl(&a.data, a.num_marks.unwrap_or(usize::MAX), a.max_len)?;
    let report = StatsReport {
        sequences: seqs.len(),
        events: seqs.iter().map(EventSequence::len).sum(),
        intervals: interval_stats(&seqs)?,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("stats serialize"));
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(m) = a.mode {
        cfg.model.mode = m.into();
    }
    if let Some(b) = a.beta {
        cfg.train.beta = b;
    }
    if a.ablate_local {
        cfg.model.layers = 0;
    }
    if let Some(t) = a.threads {
        cfg.train.threads = t;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(d) = a.out_dir {
        cfg.output.dir = Some(d);
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let data = cfg.load_dataset()?;

    let ckpt_path = dir.join("checkpoint.json");
    let outcome = match train_model(&data, &cfg.model, &cfg.train) {
        Ok(o) => o,
        Err(Error::Diverged {
            epoch,
            message,
            last_good,
        }) => {
            last_good.save(&ckpt_path)?;
            return Err(CliError::Diverged(format!(
                "training diverged in epoch {epoch} ({message}); last good checkpoint written to {}",
                ckpt_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.model.save(&ckpt_path)?;
    let hist = dir.join("history.csv");
    fs::write(&hist, history_csv(&outcome.history)).map_err(|e| io_err(&hist, e))?;

    let mut resolved = cfg.clone();
    resolved.model = outcome.model.config.clone();
    resolved.data.time_scale = TimeScale::Factor(data.time_scale);
    resolved.output.dir = None;
    for p in [&mut resolved.data.train, &mut resolved.data.valid, &mut resolved.data.test] {
        if let Ok(abs) = std::path::absolute(&*p) {
            *p = abs;
        }
    }
    let snap = dir.join("config.toml");
    fs::write(&snap, resolved.to_toml()).map_err(|e| io_err(&snap, e))?;

    println!(
        "best epoch {} of {} validation loss {} checkpoint {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val,
        ckpt_path.display()
    );
    Ok(())
}

fn load_scaled(path: &Path, model: &Model, max_len: usize) -> Result<Vec<EventSequence>, CliError> {
    let seqs = load_jsonl(path, model.config.num_marks, max_len)?;
    Ok(seqs.iter().map(|s| s.scaled(model.time_scale)).collect())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let model = Model::load(&a.checkpoint)?;
    let split: Split = a.split.into();
    let (seqs, label) = match (&a.data, &a.config) {
        (Some(p), _) => (load_scaled(p, &model, DEFAULT_MAX_LEN)?, "data".to_string()),
        (None, Some(c)) => {
            let cfg = RunConfig::load(c)?;
            let path = match split {
                Split::Train => &cfg.data.train,
                Split::Valid => &cfg.data.valid,
                Split::Test => &cfg.data.test,
            };
            let name = serde_json::to_value(split).expect("split serializes");
            (load_scaled(path, &model, cfg.data.max_len)?, name.as_str().unwrap_or("split").to_string())
        }
        (None, None) => return Err(CliError::Usage("eval needs --data or --config".into())),
    };
    let metrics = match a.expect {
        Some(m) => evaluate_as(&model, &seqs, m.into(), a.beta, 64),
        None => evaluate(&model, &seqs, a.beta, 64),
    }?;
    print!("{}", metrics.report());
    let json = a.json.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("metrics-{label}.json"))
    });
    fs::write(&json, metrics.to_json()).map_err(|e| io_err(&json, e))
}

#[derive(Serialize)]
struct Prediction {
    sequence: usize,
    mark: usize,
    time: f64,
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let model = Model::load(&a.checkpoint)?;
    let seqs = load_scaled(&a.data, &model, DEFAULT_MAX_LEN)?;
    let mut out = String::new();
    for (i, seq) in seqs.iter().enumerate() {
        let h = model.hidden_states(seq)?;
        let h_last = h.row(seq.len());
        let t_last = seq.events()[seq.len() - 1].time;
        let (mark, time) = match &model.decoder {
            Decoder::Dist(d) => d.sample_next(&model.store, h_last, t_last, sequence_seed(a.seed, i))?,
            Decoder::Pred(d) => d.predict_next(&model.store, h_last, t_last)?,
        };
        let p = Prediction {
            sequence: i,
            mark,
            time: time / model.time_scale,
        };
        out.push_str(&serde_json::to_string(&p).expect("prediction serializes"));
        out.push('\n');
    }
    write_output(a.out.as_deref(), &out)
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut gc = match &a.config {
        Some(p) => GradCheckConfig::load(p)?,
        None => GradCheckConfig::default(),
    };
    if let Some(s) = a.seeds {
        gc.seeds = s;
    }
    gc.validate()?;
    let mut failing: Vec<String> = Vec::new();
    for mode in [Mode::Probabilistic, Mode::Prediction] {
        let mut worst: std::collections::BTreeMap<ParamGroup, f64> = Default::default();
        for seed in 0..gc.seeds {
            let (model, seq) = gradcheck_instance(&gc, mode, seed)?;
            let batch = Batch::single(&seq);
            let loss = |g: &ctpp::nn::Graph, s: &ctpp::nn::ParamStore| objective(g, &model, s, &batch, gc.beta);
            let mut store = model.store.clone();
            let mut analytic = analytic_gradients(&store, loss)?;
            if gc.corrupt_gradient {
                if let Some(p) = store.iter().position(|p| p.group == ParamGroup::Kernel) {
                    analytic[p].data_mut()[0] += 1.0;
                }
            }
            let numeric = numeric_gradients(&mut store, gc.step, loss)?;
            let report = compare_gradients(&store, &analytic, &numeric)?;
            for (g, e) in report.by_group {
                let w = worst.entry(g).or_insert(0.0);
                *w = w.max(e);
            }
        }
        for (g, e) in &worst {
            let ok = *e < gc.tolerance;
            println!("{mode} {g} max_rel_error {e:.3e} {}", if ok { "ok" } else { "FAIL" });
            if !ok {
                failing.push(format!("{mode}/{g}"));
            }
        }
    }
    if failing.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failing.join(", "))))
    }
}

fn gradcheck_instance(gc: &GradCheckConfig, mode: Mode, seed: u64) -> Result<(Model, EventSequence), CliError> {
    let horizons = (0..gc.channels)
        .map(|c| if c % 2 == 1 { Horizon::Infinite } else { Horizon::Finite(1.0 + c as f64) })
        .collect();
    let cfg = ModelConfig {
        num_marks: gc.num_marks,
        dim: gc.dim,
        hidden: gc.hidden,
        layers: gc.layers,
        horizons,
        horizon_unit: HorizonUnit::Absolute,
        omega0: gc.omega0,
        kernel_hidden: gc.kernel_hidden.clone(),
        components: gc.components,
        mode,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, seed)?;
    let mut rng = rng_for(seed.wrapping_add(1000));
    let mut t = 0.0;
    let mut marks = Vec::with_capacity(gc.len);
    let mut times = Vec::with_capacity(gc.len);
    for _ in 0..gc.len {
        t += rng.random_range(0.1..1.0);
        marks.push(rng.random_range(0..gc.num_marks));
        times.push(t);
    }
    Ok((model, EventSequence::from_parts(&marks, &times)?))
}

fn dump_kernel(a: DumpKernelArgs) -> Result<(), CliError> {
    let model = Model::load(&a.checkpoint)?;
    if !model.has_kernels() {
        return Err(CliError::Usage("checkpoint has no convolution kernels".into()));
    }
    if a.grid == 0 {
        return Err(CliError::Usage("--grid must be at least 1".into()));
    }
    let mut out = String::from("layer,channel,tau,row,col,value\n");
    for (l, layer) in model.local.iter().enumerate() {
        for (c, ch) in layer.channels.iter().enumerate() {
            let eta = match (a.tau_max, ch.horizon) {
                (Some(t), _) => t,
                (None, Horizon::Finite(eta)) => eta,
                (None, Horizon::Infinite) => {
                    return Err(CliError::Usage(format!(
                        "layer {l} channel {c} has an infinite horizon; pass --tau-max"
                    )))
                }
            };
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(CliError::Usage(format!("invalid --tau-max {eta}")));
            }
            for k in 0..a.grid {
                let tau = if a.grid == 1 { 0.0 } else { eta * k as f64 / (a.grid - 1) as f64 };
                let psi = ch.kernel.eval_at(&model.store, tau)?;
                for r in 0..ch.kernel.dim {
                    match ch.kernel.mode {
                        ctpp::kernel::KernelMode::Full => {
                            for col in 0..ch.kernel.dim {
                                out.push_str(&format!("{l},{c},{tau},{r},{col},{}\n", psi.get(r, col)));
                            }
                        }
                        ctpp::kernel::KernelMode::Depthwise => {
                            out.push_str(&format!("{l},{c},{tau},{r},{r},{}\n", psi.get(0, r)));
                        }
                    }
                }
            }
        }
    }
    write_output(a.out.as_deref(), &out)
}

//! Command line front end. [`run`] parses arguments, prints the resolved
//! configuration, does the work and maps failures to exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks::full_report;
use crate::datagen::{generate_world, select_traversals, write_world, WorldConfig};
use crate::diffcore::{Precision, Real};
use crate::error::{Category, Error, Result};
use crate::io::io_context;
use crate::experiment::{run_experiment, ExperimentConfig};
use crate::geometry::{load_cloud, load_submaps, Submap};
use crate::losses::{LossConfig, LossKind};
use crate::model::{ModelConfig, ModelParams, SoeNet};
use crate::retrieval::{
    build_index, curve_csv, embed_queries, one_percent_n, query_topk, recall_at_n, recall_curve, DescriptorDB,
};
use crate::training::{metrics_csv, train, MiningRule, TrainConfig};

/// Exit code of check modes whose threshold was not met.
pub const EXIT_THRESHOLD: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "soenet", version, about = "Point cloud place recognition: data, training, indexing and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: one SPC1 file per scan plus catalog.csv.
    Datagen(DatagenArgs),
    /// Train a model on a catalog; writes model.sck, metrics.csv and model.cfg.
    Train(TrainArgs),
    /// Embed the submaps of a catalog into an SDB1 descriptor index.
    Index(IndexArgs),
    /// Rank index entries against one SPC1 cloud.
    Query(QueryArgs),
    /// Recall@N and Recall@1% of a query catalog against an index.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and of model+loss compositions.
    Gradcheck(GradcheckArgs),
    /// Run generate/train/evaluate once per value of one axis.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct WorldArgs {
    #[arg(long, default_value_t = 64)]
    places: usize,
    #[arg(long, default_value_t = 4)]
    traversals: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Map side length in meters.
    #[arg(long, default_value_t = 2000.0)]
    extent: f64,
    /// Per-point noise in meters.
    #[arg(long, default_value_t = 0.3)]
    jitter: f64,
    /// Fraction of points resampled per scan.
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
}

impl WorldArgs {
    fn config(&self) -> WorldConfig {
        WorldConfig {
            n_places: self.places,
            traversals: self.traversals,
            points: self.points,
            seed: self.seed,
            extent: self.extent,
            jitter_sigma: self.jitter,
            dropout_rate: self.dropout,
            ..WorldConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// key=value model config file; missing keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size configuration instead of the desk one.
    #[arg(long, conflicts_with = "config")]
    full_size: bool,
    /// Remove the orientation-encoding units.
    #[arg(long)]
    no_oe: bool,
    /// Bypass the self-attention unit.
    #[arg(long)]
    no_attention: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, self.full_size) {
            (Some(path), _) => ModelConfig::parse(&fs::read_to_string(path).map_err(|e| io_context(e, path))?)?,
            (None, true) => ModelConfig::full_size(),
            (None, false) => ModelConfig::desk(),
        };
        cfg.use_oe = !self.no_oe;
        cfg.use_attention = !self.no_attention;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct LossArgs {
    #[arg(long, value_enum, default_value_t = LossArg::Hphn)]
    loss: LossArg,
    #[arg(long, default_value_t = 0.5)]
    margin_alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    margin_beta: f64,
    #[arg(long, default_value_t = 0.5)]
    margin_gamma: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LossArg {
    Quadruplet,
    Lazy,
    Hphn,
}

impl LossArgs {
    fn config(&self) -> LossConfig {
        LossConfig {
            kind: match self.loss {
                LossArg::Quadruplet => LossKind::Quadruplet,
                LossArg::Lazy => LossKind::Lazy,
                LossArg::Hphn => LossKind::Hphn,
            },
            alpha: self.margin_alpha,
            beta: self.margin_beta,
            gamma: self.margin_gamma,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = 2)]
    n_positives: usize,
    /// Negatives per tuple, including the extra negative.
    #[arg(long, default_value_t = 9)]
    n_negatives: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr0: f64,
    #[arg(long, default_value_t = 0.7)]
    decay_factor: f64,
    #[arg(long, default_value_t = 2000)]
    decay_steps: u64,
    #[arg(long, default_value_t = crate::training::DESK_EPOCHS)]
    epochs: usize,
    #[arg(long = "train-seed", default_value_t = 0)]
    train_seed: u64,
}

impl TrainingArgs {
    fn config(&self, checkpoint_every: u64) -> TrainConfig {
        TrainConfig {
            n_positives: self.n_positives,
            n_negatives: self.n_negatives,
            lr0: self.lr0,
            decay_factor: self.decay_factor,
            decay_steps: self.decay_steps,
            epochs: self.epochs,
            seed: self.train_seed,
            checkpoint_every,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Traversals used for training, or `all`.
    #[arg(long, default_value = "0,1,2")]
    traversals: String,
    /// Extra checkpoint every this many steps (0: final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Traversals to index, or `all`.
    #[arg(long, default_value = "all")]
    traversals: String,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    /// Catalog of query submaps.
    #[arg(long)]
    queries: PathBuf,
    /// Query traversals, or `all`.
    #[arg(long, default_value = "all")]
    traversals: String,
    /// Comma-separated N values.
    #[arg(long, default_value = "1,5,10")]
    top_n: String,
    /// Write the recall curve (n,recall) to this CSV.
    #[arg(long)]
    emit_curve: Option<PathBuf>,
    #[arg(long, default_value_t = 25.0)]
    radius: f64,
    /// Exit with code 4 if Recall@1 falls below this.
    #[arg(long)]
    min_recall: Option<f64>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Report path.
    #[arg(long, default_value = "gradcheck.csv")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Axis {
    Loss,
    OutDim,
    Margin,
    Ablation,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated settings: loss names, output sizes, margins, or
    /// ablations among full, no-oe, no-attention, none.
    #[arg(long)]
    values: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    world: WorldArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    }
    fs::write(path, text).map_err(|e| io_context(e, path))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    let items: std::result::Result<Vec<T>, _> = text.split(',').map(|v| v.trim().parse()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Invalid(format!("bad {what} list `{text}`"))),
    }
}

fn traversal_filter(submaps: Vec<Submap>, spec: &str) -> Result<Vec<Submap>> {
    if spec == "all" {
        return Ok(submaps);
    }
    select_traversals(&submaps, &parse_list(spec, "traversal")?)
}

fn model_lines(m: &ModelConfig) -> String {
    format!("{}use_oe={}\nuse_attention={}\n", m.to_text(), m.use_oe, m.use_attention)
}

fn loss_lines(l: &LossConfig) -> String {
    format!("loss={}\nmargin_alpha={}\nmargin_beta={}\nmargin_gamma={}\n", l.kind, l.alpha, l.beta, l.gamma)
}

fn train_lines(t: &TrainConfig) -> String {
    format!(
        "n_positives={}\nn_negatives={}\nlr0={}\ndecay_factor={}\ndecay_steps={}\nepochs={}\ntrain_seed={}\ncheckpoint_every={}\n",
        t.n_positives, t.n_negatives, t.lr0, t.decay_factor, t.decay_steps, t.epochs, t.seed, t.checkpoint_every
    )
}

fn world_lines(w: &WorldConfig) -> String {
    format!(
        "places={}\ntraversals={}\npoints={}\nseed={}\nextent={}\njitter={}\ndropout={}\n",
        w.n_places, w.traversals, w.points, w.seed, w.extent, w.jitter_sigma, w.dropout_rate
    )
}

fn print_config(out: &mut dyn Write, command: &str, body: &str) -> Result<()> {
    writeln!(out, "# {command}: resolved configuration")?;
    for line in body.lines() {
        writeln!(out, "  {line}")?;
    }
    Ok(())
}

fn load_net<T: Real>(checkpoint: &Path, config: ModelConfig) -> Result<SoeNet<T>> {
    let params = ModelParams::<T>::load(checkpoint, &config)?;
    SoeNet::new(config, params)
}

fn datagen(args: &DatagenArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = args.world.config();
    print_config(out, "datagen", &format!("{}out_dir={}\n", world_lines(&cfg), args.out_dir.display()))?;
    let world = generate_world(&cfg)?;
    let catalog = write_world(&world.submaps, &args.out_dir)?;
    writeln!(out, "wrote {} scans and {}", world.submaps.len(), catalog.display())?;
    Ok(())
}

fn train_cmd<T: Real>(args: &TrainArgs, model: ModelConfig, out: &mut dyn Write) -> Result<()> {
    let loss = args.loss.config();
    let tc = args.training.config(args.checkpoint_every);
    let rule = MiningRule::default();
    print_config(
        out,
        "train",
        &format!(
            "catalog={}\nout_dir={}\ntraversals={}\n{}{}{}",
            args.catalog.display(),
            args.out_dir.display(),
            args.traversals,
            model_lines(&model),
            loss_lines(&loss),
            train_lines(&tc)
        ),
    )?;
    let submaps = traversal_filter(load_submaps(&args.catalog)?, &args.traversals)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| io_context(e, &args.out_dir))?;
    let mut last = None;
    let outcome = train::<T>(&submaps, &model, &tc, &loss, &rule, Some(&args.out_dir), |r| last = Some(*r))?;
    outcome.params.save(&args.out_dir.join("model.sck"))?;
    write_file(&args.out_dir.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    write_file(&args.out_dir.join("model.cfg"), &model.to_text())?;
    if let Some(r) = last {
        writeln!(out, "trained {} steps, last loss {:.6}", r.step + 1, r.loss)?;
    }
    writeln!(out, "wrote {}", args.out_dir.join("model.sck").display())?;
    Ok(())
}

fn index_cmd<T: Real>(args: &IndexArgs, model: ModelConfig, out: &mut dyn Write) -> Result<()> {
    print_config(
        out,
        "index",
        &format!(
            "catalog={}\ncheckpoint={}\nout={}\ntraversals={}\n{}",
            args.catalog.display(),
            args.checkpoint.display(),
            args.out.display(),
            args.traversals,
            model_lines(&model)
        ),
    )?;
    let net = load_net::<T>(&args.checkpoint, model)?;
    let submaps = traversal_filter(load_submaps(&args.catalog)?, &args.traversals)?;
    let db = build_index(&submaps, &net)?;
    db.save(&args.out)?;
    writeln!(out, "indexed {} submaps ({}-d) into {}", db.len(), db.dim(), args.out.display())?;
    Ok(())
}

fn query_cmd<T: Real>(args: &QueryArgs, model: ModelConfig, out: &mut dyn Write) -> Result<()> {
    print_config(
        out,
        "query",
        &format!(
            "index={}\ncloud={}\nk={}\ncheckpoint={}\n{}",
            args.index.display(),
            args.cloud.display(),
            args.k,
            args.checkpoint.display(),
            model_lines(&model)
        ),
    )?;
    let db = DescriptorDB::load(&args.index, Some(model.out_dim))?;
    let net = load_net::<T>(&args.checkpoint, model)?;
    let cloud = load_cloud(&args.cloud)?;
    writeln!(out, "rank,id,distance")?;
    for (i, hit) in query_topk(&db, &cloud, &net, args.k)?.iter().enumerate() {
        writeln!(out, "{},{},{:.6}", i + 1, hit.id, hit.distance)?;
    }
    Ok(())
}

/// Returns whether the optional recall threshold was met.
fn eval_cmd<T: Real>(args: &EvalArgs, model: ModelConfig, out: &mut dyn Write) -> Result<bool> {
    let top_n: Vec<usize> = parse_list(&args.top_n, "top-n")?;
    print_config(
        out,
        "eval",
        &format!(
            "index={}\nqueries={}\ntraversals={}\ntop_n={}\nradius={}\ncheckpoint={}\n{}",
            args.index.display(),
            args.queries.display(),
            args.traversals,
            args.top_n,
            args.radius,
            args.checkpoint.display(),
            model_lines(&model)
        ),
    )?;
    let db = DescriptorDB::load(&args.index, Some(model.out_dim))?;
    let net = load_net::<T>(&args.checkpoint, model)?;
    let submaps = traversal_filter(load_submaps(&args.queries)?, &args.traversals)?;
    let queries = embed_queries(&submaps, &net)?;
    writeln!(out, "metric,value")?;
    let mut r1 = None;
    for &n in &top_n {
        let r = recall_at_n(&db, &queries, n, args.radius)?;
        if n == 1 {
            r1 = Some(r);
        }
        writeln!(out, "recall@{n},{r:.6}")?;
    }
    let pct_n = one_percent_n(db.len());
    let r_pct = recall_at_n(&db, &queries, pct_n, args.radius)?;
    writeln!(out, "recall@1%(n={pct_n}),{r_pct:.6}")?;
    if let Some(path) = &args.emit_curve {
        let max_n = top_n.iter().copied().max().unwrap_or(1).max(pct_n).max(25);
        write_file(path, &curve_csv(&recall_curve(&db, &queries, max_n, args.radius)?))?;
    }
    Ok(match args.min_recall {
        Some(min) => r1.map_or(recall_at_n(&db, &queries, 1, args.radius)?, |r| r) >= min,
        None => true,
    })
}

fn gradcheck_cmd(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    print_config(
        out,
        "gradcheck",
        &format!("trials={}\nseed={}\ntol={}\nout={}\n", args.trials, args.seed, args.tol, args.out.display()),
    )?;
    let report = full_report(args.trials, args.seed)?;
    let text = report.to_text(args.tol);
    write_file(&args.out, &text)?;
    out.write_all(text.as_bytes())?;
    Ok(report.passes(args.tol))
}

fn sweep_settings(axis: Axis, values: &str, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let names: Vec<String> = parse_list(values, "sweep value")?;
    names
        .into_iter()
        .map(|v| {
            let mut cfg = base.clone();
            match axis {
                Axis::Loss => cfg.loss.kind = v.parse()?,
                Axis::OutDim => {
                    cfg.model.out_dim = v.parse().map_err(|_| Error::Invalid(format!("bad out_dim `{v}`")))?;
                    cfg.model.validate()?;
                }
                Axis::Margin => {
                    cfg.loss.gamma = v.parse().map_err(|_| Error::Invalid(format!("bad margin `{v}`")))?;
                    cfg.loss.validate()?;
                }
                Axis::Ablation => {
                    let (oe, att) = match v.as_str() {
                        "full" => (true, true),
                        "no-oe" => (false, true),
                        "no-attention" => (true, false),
                        "none" => (false, false),
                        other => return Err(Error::Invalid(format!("unknown ablation `{other}`"))),
                    };
                    cfg.model.use_oe = oe;
                    cfg.model.use_attention = att;
                }
            }
            Ok((v, cfg))
        })
        .collect()
}

fn sweep_cmd<T: Real>(args: &SweepArgs, model: ModelConfig, out: &mut dyn Write) -> Result<()> {
    let base = ExperimentConfig {
        world: args.world.config(),
        model,
        train: args.training.config(0),
        loss: args.loss.config(),
        ..ExperimentConfig::default()
    };
    let axis = args.axis.to_possible_value().expect("no skipped variants").get_name().to_string();
    print_config(
        out,
        "sweep",
        &format!(
            "axis={axis}\nvalues={}\nout_dir={}\n{}{}{}{}",
            args.values,
            args.out_dir.display(),
            world_lines(&base.world),
            model_lines(&base.model),
            loss_lines(&base.loss),
            train_lines(&base.train)
        ),
    )?;
    let settings = sweep_settings(args.axis, &args.values, &base)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| io_context(e, &args.out_dir))?;
    let mut table = String::from("axis,value,recall_at_1,recall_at_1pct,final_loss,train_seconds\n");
    for (value, cfg) in &settings {
        let r = run_experiment::<T>(cfg)?;
        let final_loss = r.metrics.last().map_or(f64::NAN, |m| m.loss);
        let row = format!(
            "{axis},{value},{:.6},{:.6},{:.6},{:.1}",
            r.recall_at_1, r.recall_at_1pct, final_loss, r.train_seconds
        );
        writeln!(out, "{row}")?;
        let _ = writeln!(table, "{row}");
        write_file(&args.out_dir.join(format!("curve_{axis}_{value}.csv")), &curve_csv(&r.curve))?;
    }
    write_file(&args.out_dir.join("sweep.csv"), &table)?;
    Ok(())
}

macro_rules! by_precision {
    ($model:expr, $f:ident($($arg:expr),*)) => {
        match $model.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Ok(true) on success, Ok(false) when a check threshold was missed.
fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Datagen(a) => datagen(&a, out).map(|_| true),
        Command::Train(a) => {
            let m = a.model.config()?;
            by_precision!(m, train_cmd(&a, m.clone(), out)).map(|_| true)
        }
        Command::Index(a) => {
            let m = a.model.config()?;
            by_precision!(m, index_cmd(&a, m.clone(), out)).map(|_| true)
        }
        Command::Query(a) => {
            let m = a.model.config()?;
            by_precision!(m, query_cmd(&a, m.clone(), out)).map(|_| true)
        }
        Command::Eval(a) => {
            let m = a.model.config()?;
            by_precision!(m, eval_cmd(&a, m.clone(), out))
        }
        Command::Gradcheck(a) => gradcheck_cmd(&a, out),
        Command::Sweep(a) => {
            let m = a.model.config()?;
            by_precision!(m, sweep_cmd(&a, m.clone(), out)).map(|_| true)
        }
    }
}

/// Runs one command line. Errors are reported on `err` as a single
/// `error[<category>]: <message>` line.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error[{}]: {first}", Category::Usage);
            return Category::Usage.exit_code();
        }
    };
    match dispatch(cli, out) {
        Ok(true) => 0,
        Ok(false) => {
            let _ = writeln!(err, "error[threshold]: check failed");
            EXIT_THRESHOLD
        }
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{cat}]: {msg}");
            cat.exit_code()
        }
    }
}

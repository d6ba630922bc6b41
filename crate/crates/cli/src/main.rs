//! `r2t`: scene generation, training, evaluation, sweeps and reports.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use r2t_core::config::RunConfig;
use r2t_core::dataset::{generate_split, load_split, write_split, SPLITS};
use r2t_core::eval::{
    evaluate_cell, read_records, records_to_csv, render_tables, scenes_at_level, summarize, summary_to_csv, sweep_seed,
    Axis, Cell, EvalRecord, SummaryRow, AXIS_BUDGET, DROP_POLICIES, SWEEP_BUDGETS,
};
use r2t_core::io::{load_checkpoint_into, read_file, save_checkpoint, write_atomic};
use r2t_core::model::Network;
use r2t_core::policy::PolicyKind;
use r2t_core::scene::OcclusionLevel;
use r2t_core::train::{log_to_csv, train_one_seed, TrainError};

const THREADS_ENV: &str = "R2T_THREADS";

#[derive(Parser)]
#[command(name = "r2t", version, about = "Bandwidth-constrained cooperative perception testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene splits with a content-hash manifest.
    GenScenes(GenScenesArgs),
    /// Train one seed and write its best and final checkpoints.
    Train(TrainArgs),
    /// Evaluate one checkpoint on one cell of the experiment grid.
    Eval(EvalArgs),
    /// Run sweep axes for every seed's checkpoint.
    Sweep(SweepArgs),
    /// Summarize result CSVs into mean/std tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// One of train, val, test; all three when omitted.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Overwrite non-empty split directories.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding train/ and val/.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Best-validation checkpoint; the final one goes to `<out>.final`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root (test/ is used) or a split directory.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 0.5)]
    budget: f64,
    /// Regenerate the scenes at this occlusion level.
    #[arg(long)]
    occlusion: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    drop: f64,
    /// Seed recorded with the result and used for random-policy and drop draws.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with `seed_<N>.r2tc` checkpoints.
    #[arg(long)]
    ckpt_dir: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Comma-separated subset of bandwidth, occlusion, drop.
    #[arg(long, value_delimiter = ',', default_value = "bandwidth,occlusion,drop")]
    axes: Vec<String>,
    /// Seeds to evaluate; defaults to the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl From<r2t_core::Error> for Failure {
    fn from(e: r2t_core::Error) -> Self {
        match e {
            r2t_core::Error::NonFinite(_) => Failure::Numerical(e.into()),
            e => Failure::Input(e.into()),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    eprintln!("# effective config\n{}", cfg.to_json());
    Ok(cfg)
}

fn parse_policy(s: &str) -> anyhow::Result<PolicyKind> {
    s.parse::<PolicyKind>()
        .map_err(|_| anyhow!("invalid policy {s:?}; valid policies: {}", PolicyKind::valid_names()))
}

fn gen_scenes(a: GenScenesArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let splits: Vec<&str> = match &a.split {
        Some(s) if SPLITS.contains(&s.as_str()) => vec![s.as_str()],
        Some(s) => return Err(anyhow!("invalid split {s:?}; expected train, val or test").into()),
        None => SPLITS.to_vec(),
    };
    eprintln!("# gen-scenes out={} seed={} splits={splits:?}", a.out.display(), a.seed);
    for split in splits {
        let scenes = generate_split(&cfg.scene, &cfg.train.splits, split, a.seed)?;
        let manifest = write_split(&a.out.join(split), split, a.seed, &scenes, a.force)?;
        print!("{}", manifest.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    eprintln!("# train scenes={} seed={} out={}", a.scenes.display(), a.seed, a.out.display());
    let train_scenes = load_split(&a.scenes, "train")?;
    let val_scenes = load_split(&a.scenes, "val")?;
    let (net, store) = Network::init::<f32>(a.seed)?;
    let outcome = train_one_seed(&net, store, &train_scenes, &val_scenes, &cfg.train, a.seed, |row| {
        eprintln!("epoch {:>3} step {:>6} val_ap {:.4}", row.epoch, row.step, row.val_ap);
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::NonFinite(dump)) => {
            let path = sibling(&a.out, ".nan.json");
            let json = serde_json::to_vec_pretty(&*dump).map_err(anyhow::Error::from)?;
            write_atomic(&path, &json)?;
            return Err(Failure::Numerical(anyhow!(
                "non-finite loss at step {}; state dumped to {}",
                dump.step,
                path.display()
            )));
        }
        Err(TrainError::Other(e)) => return Err(e.into()),
    };
    save_checkpoint(&a.out, &outcome.best)?;
    save_checkpoint(&sibling(&a.out, ".final"), &outcome.last)?;
    write_atomic(&sibling(&a.out, ".log.csv"), &log_to_csv(&outcome.log)?)?;
    let mut val = String::from("epoch,step,val_ap\n");
    for e in &outcome.epochs {
        val.push_str(&format!("{},{},{}\n", e.epoch, e.step, e.val_ap));
    }
    write_atomic(&sibling(&a.out, ".val.csv"), val.as_bytes())?;
    println!("best val AP {:.4}; checkpoint {}", outcome.best_val_ap, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> anyhow::Result<(Network, r2t_core::autograd::ParamStore<f32>)> {
    let (net, mut store) = Network::skeleton::<f32>()?;
    let bytes = read_file(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    load_checkpoint_into(&mut store, &bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((net, store))
}

fn eval(a: EvalArgs) -> CmdResult {
    let policy = parse_policy(&a.policy)?;
    if !(0.0..=1.0).contains(&a.budget) || !(0.0..=1.0).contains(&a.drop) {
        return Err(anyhow!("--budget and --drop must lie in [0, 1]").into());
    }
    eprintln!(
        "# eval ckpt={} scenes={} policy={policy} budget={} occlusion={:?} drop={} seed={}",
        a.ckpt.display(),
        a.scenes.display(),
        a.budget,
        a.occlusion,
        a.drop,
        a.seed
    );
    let (net, store) = load_model(&a.ckpt)?;
    let mut scenes = load_split(&a.scenes, "test")?;
    let level = match &a.occlusion {
        Some(o) => o.parse::<OcclusionLevel>()?,
        None => scenes[0].config.occlusion_level,
    };
    scenes = scenes_at_level(&scenes, level)?;
    let cell = Cell {
        policy,
        budget: a.budget,
        occlusion: level,
        drop_rate: a.drop,
    };
    let rec = evaluate_cell(&net, &store, &scenes, cell, a.seed)?;
    let csv = records_to_csv(std::slice::from_ref(&rec))?;
    match &a.out {
        Some(p) => write_atomic(p, &csv)?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    eprintln!("ap {:.6}", rec.ap);
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let axes = a
        .axes
        .iter()
        .map(|s| s.parse::<Axis>())
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = if a.seeds.is_empty() { cfg.train.seeds.clone() } else { a.seeds.clone() };
    eprintln!("# sweep ckpt_dir={} axes={axes:?} seeds={seeds:?}", a.ckpt_dir.display());
    let scenes = load_split(&a.scenes, "test")?;
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for &seed in &seeds {
        let path = a.ckpt_dir.join(format!("seed_{seed}.r2tc"));
        if !path.exists() {
            eprintln!("warning: missing checkpoint {}; skipping seed {seed}", path.display());
            missing.push(path);
            continue;
        }
        let (net, store) = load_model(&path)?;
        let recs = sweep_seed(&net, &store, &scenes, &axes, seed)?;
        eprintln!("seed {seed}: {} cells", recs.len());
        records.extend(recs);
    }
    fs::create_dir_all(&a.out).map_err(anyhow::Error::from)?;
    write_atomic(&a.out.join("results.csv"), &records_to_csv(&records)?)?;
    let rows = summarize(&records);
    write_atomic(&a.out.join("summary.csv"), &summary_to_csv(&rows)?)?;
    print!("{}", render_tables(&rows));
    if !missing.is_empty() {
        eprintln!("{} checkpoint(s) missing:", missing.len());
        for m in &missing {
            eprintln!("  {}", m.display());
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(a: ReportArgs) -> CmdResult {
    let mut records: Vec<EvalRecord> = Vec::new();
    for p in &a.inputs {
        records.extend(read_records(p)?);
    }
    if records.is_empty() {
        return Err(anyhow!("no records in the given CSV files").into());
    }
    let rows = summarize(&records);
    let base = records[0].occlusion;
    let bandwidth: Vec<SummaryRow> = rows
        .iter()
        .filter(|r| {
            r.occlusion == base
                && r.drop_rate == 0.0
                && if r.policy == PolicyKind::NoComm {
                    r.budget == 0.0
                } else {
                    SWEEP_BUDGETS.contains(&r.budget)
                }
        })
        .cloned()
        .collect();
    let occlusion: Vec<SummaryRow> = rows
        .iter()
        .filter(|r| r.budget == AXIS_BUDGET && r.drop_rate == 0.0)
        .cloned()
        .collect();
    let drop: Vec<SummaryRow> = rows
        .iter()
        .filter(|r| r.budget == AXIS_BUDGET && r.occlusion == base && DROP_POLICIES.contains(&r.policy))
        .cloned()
        .collect();
    fs::create_dir_all(&a.out).map_err(anyhow::Error::from)?;
    write_atomic(&a.out.join("summary.csv"), &summary_to_csv(&rows)?)?;
    for (name, part) in [("bandwidth", &bandwidth), ("occlusion", &occlusion), ("drop", &drop)] {
        if !part.is_empty() {
            write_atomic(&a.out.join(format!("{name}_summary.csv")), &summary_to_csv(part)?)?;
        }
    }
    let tables = render_tables(&rows);
    write_atomic(&a.out.join("tables.txt"), tables.as_bytes())?;
    print!("{tables}");
    Ok(ExitCode::SUCCESS)
}

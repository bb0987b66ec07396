use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pam_core::ablations::{consolidate, report_csv, report_markdown, write_run_dir, ExperimentName, ExperimentSpec, Lab};
use pam_core::assoc_graph::build_graph;
use pam_core::baselines::bilinear_train;
use pam_core::eval::{evaluate, EvalConfig, Method, Retriever};
use pam_core::io::{
    ensure_writable, load_bilinear, load_predictor, load_toml, load_toml_section, load_world, save_bilinear,
    save_predictor, save_world, sidecar_path, world_hash, write_bytes, write_json, write_metrics, RunManifest,
    WORLD_HASH_FILE,
};
use pam_core::predictor::{train, TrainConfig};
use pam_core::worldgen::{gen_world, WorldConfig};
use pam_core::{PamError, Result};

#[derive(Parser)]
#[command(name = "pam", version, about = "Predictive associative memory benchmark")]
struct Cli {
    /// Worker threads for kernels and per-query metrics. Results do not
    /// depend on it.
    #[arg(long, global = true, env = "PAM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config. Experiment files work everywhere; each command reads its
    /// own table.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Predictor,
    Bilinear,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Predictor,
    Cosine,
    Bilinear,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world file and its JSON sidecar.
    GenWorld {
        #[command(flatten)]
        common: Common,
        /// Overrides the world seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a predictor or bilinear checkpoint on a world.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, value_enum, default_value = "predictor")]
        model: ModelArg,
        /// Sets both the initialisation and pair-sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Temporal window; read from the config's `tau` when omitted.
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Evaluate methods and write metrics.json, metrics.csv and table.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        bilinear: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "predictor,cosine,bilinear")]
        methods: Vec<MethodArg>,
        /// Overrides the query seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Run a named experiment into a run directory.
    Ablate {
        name: String,
        #[command(flatten)]
        common: Common,
        /// Runs a single training seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Consolidate run directories into mean ± SD tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PamError::config("threads", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PamError::config("threads", e.to_string()))?;
    }
    match cli.command {
        Command::GenWorld { common, seed } => gen_world_cmd(&common, seed),
        Command::Train { common, world, model, seed, tau } => train_cmd(&common, &world, model, seed, tau),
        Command::Eval { common, world, predictor, bilinear, methods, seed, tau } => {
            eval_cmd(&common, &world, predictor.as_deref(), bilinear.as_deref(), &methods, seed, tau)
        }
        Command::Ablate { name, common, seed } => ablate_cmd(&name, &common, seed),
        Command::Report { runs, out, force } => report_cmd(&runs, &out, force),
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// `tau` from the flag, else the config's top level, else 5.
fn resolve_tau(config: &Path, flag: Option<usize>) -> Result<usize> {
    if let Some(t) = flag {
        return Ok(t);
    }
    let table: toml::Table = load_toml(config)?;
    match table.get("tau") {
        None => Ok(5),
        Some(v) => v
            .as_integer()
            .filter(|&t| t > 0)
            .map(|t| t as usize)
            .ok_or_else(|| PamError::config("tau", "must be a positive integer")),
    }
}

fn gen_world_cmd(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut config: WorldConfig = load_toml_section(&common.config, "world")?;
    if let Some(s) = seed {
        config.seed = s;
    }
    ensure_writable(&sidecar_path(&common.out), common.force)?;
    let world = gen_world(&config)?;
    let hash = save_world(&world, &common.out, common.force)?;
    println!("{} states, sha256 {hash}", world.n_states());
    Ok(())
}

fn train_cmd(common: &Common, world_path: &Path, model: ModelArg, seed: Option<u64>, tau: Option<usize>) -> Result<()> {
    let report_path = report_path(&common.out);
    ensure_writable(&common.out, common.force)?;
    ensure_writable(&report_path, common.force)?;
    let mut config: TrainConfig = load_toml_section(&common.config, "train")?;
    if let Some(s) = seed {
        config = config.with_seed(s);
    }
    config.validate()?;
    let world = load_world(world_path)?;
    let graph = build_graph(&world, resolve_tau(&common.config, tau)?)?;
    let report = match model {
        ModelArg::Predictor => {
            let (p, r) = train(&world, &graph, &config)?;
            save_predictor(&p, Some(&config), &common.out, common.force)?;
            r
        }
        ModelArg::Bilinear => {
            let (p, r) = bilinear_train(&world, &graph, &config)?;
            save_bilinear(&p, Some(&config), &common.out, common.force)?;
            r
        }
    };
    write_json(&report_path, &report)?;
    println!(
        "{} epochs, {} pairs/epoch, final loss {:.4}, {:.1}s",
        report.epoch_losses.len(),
        report.pairs_per_epoch,
        report.final_loss,
        report.wall_clock_seconds
    );
    Ok(())
}

/// Training report written next to a checkpoint.
fn report_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn eval_cmd(
    common: &Common,
    world_path: &Path,
    predictor: Option<&Path>,
    bilinear: Option<&Path>,
    methods: &[MethodArg],
    seed: Option<u64>,
    tau: Option<usize>,
) -> Result<()> {
    ensure_writable(&common.out.join("metrics.json"), common.force)?;
    let mut config: EvalConfig = load_toml_section(&common.config, "eval")?;
    if let Some(s) = seed {
        config.query_seed = s;
    }
    config.validate()?;
    let world = load_world(world_path)?;
    let graph = build_graph(&world, resolve_tau(&common.config, tau)?)?;
    let mut manifest = RunManifest::new(&command_line());
    manifest.add_config("eval", &config)?;
    manifest.add_input(world_path)?;
    manifest.add_seed("query", config.query_seed);

    let need = |m: MethodArg, path: Option<&Path>, flag: &str| -> Result<Option<PathBuf>> {
        match (methods.contains(&m), path) {
            (false, _) => Ok(None),
            (true, Some(p)) => Ok(Some(p.to_path_buf())),
            (true, None) => Err(PamError::config(flag, "checkpoint required for the requested method")),
        }
    };
    let pred = need(MethodArg::Predictor, predictor, "predictor")?
        .map(|p| {
            manifest.add_input(&p)?;
            load_predictor(&p).map(|(m, _)| m)
        })
        .transpose()?;
    let bil = need(MethodArg::Bilinear, bilinear, "bilinear")?
        .map(|p| {
            manifest.add_input(&p)?;
            load_bilinear(&p).map(|(m, _)| m)
        })
        .transpose()?;

    let mut retrievers = Vec::new();
    for m in methods {
        let method = match m {
            MethodArg::Predictor => Method::Predictor(pred.as_ref().expect("loaded above")),
            MethodArg::Cosine => Method::Cosine,
            MethodArg::Bilinear => Method::Bilinear(bil.as_ref().expect("loaded above")),
        };
        retrievers.push(Retriever::new(method, &world.embeddings)?);
    }
    let report = evaluate(&retrievers, &graph, &config)?;
    let mut outputs = write_metrics(&report, &common.out)?;
    let hash_path = common.out.join(WORLD_HASH_FILE);
    write_bytes(&hash_path, format!("{}\n", world_hash(&world)?).as_bytes())?;
    outputs.push(hash_path);
    for p in &outputs {
        manifest.add_output(&common.out, p)?;
    }
    manifest.finish(&common.out.join("manifest.json"))?;
    for m in &report.methods {
        println!(
            "{:<10} AP@1 {:.3}  CBR@20 {:.3}  AUC {:.3}",
            m.method,
            m.ap_at_k.get(&1).copied().unwrap_or(f64::NAN),
            m.cbr_at_k.get(&20).copied().unwrap_or(f64::NAN),
            m.auc_overall
        );
    }
    Ok(())
}

fn ablate_cmd(name: &str, common: &Common, seed: Option<u64>) -> Result<()> {
    let name: ExperimentName = name.parse()?;
    let mut spec: ExperimentSpec = load_toml(&common.config)?;
    spec.name = name;
    if let Some(s) = seed {
        spec.train_seeds = vec![s];
        spec.control_seeds = None;
    }
    let occupied = common.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !common.force {
        return Err(PamError::Exists(common.out.clone()));
    }
    let lab = Lab::new(spec)?;
    let result = lab.run()?;
    let files = write_run_dir(&lab, &result, &common.out, common.force, &command_line())?;
    println!("{name} written to {}", files.dir.display());
    Ok(())
}

fn report_cmd(runs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    let md = out.join("report.md");
    let csv = out.join("report.csv");
    ensure_writable(&md, force)?;
    ensure_writable(&csv, force)?;
    let rows = consolidate(runs)?;
    write_bytes(&md, report_markdown(&rows).as_bytes())?;
    write_bytes(&csv, &report_csv(&rows)?)?;
    println!("{} rows from {} run(s)", rows.len(), runs.len());
    Ok(())
}

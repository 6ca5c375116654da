//! Command-line front end. Every subcommand reads a [`RunConfig`] (file
//! plus flag overrides) and writes the resolved config next to its outputs.

use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::RunConfig;
use crate::controllers::{imitate, write_trace, Demonstration, NearestNeighborIndex};
use crate::dataset::{collect_active, collect_random, read_records, write_records, CollectionPolicy, Dataset, GoalBuffer};
use crate::error::Error;
use crate::harness::{export_report, make_demo, run_experiment, write_svg, Method, Resources, ShapeName, ShapeTarget};
use crate::model::{train, InverseDynamics, InverseModel, TrainHyper, TrainOutputs};
use crate::service::{serve, ServiceState, DEFAULT_BIND};
use crate::sim::World;

#[derive(Debug, Parser)]
#[command(name = "ropeweaver", version, about = "Rope manipulation: collect, train, imitate, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for experiment cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Model checkpoint to read (or, for `train`, to write).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CollectMode {
    /// Random actions only.
    Random,
    /// Model-driven actions toward a goal buffer, appended to an existing dataset.
    Active,
    /// Random, a bootstrap model, then active.
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect transitions into a record file.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Transitions to collect (per policy for `full`).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "random")]
        mode: CollectMode,
    },
    /// Train an inverse model on a record file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Record file (defaults to the configured dataset path).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the model over one demonstration and write its trace.
    Imitate {
        #[command(flatten)]
        common: Common,
        /// Demonstration JSON file. Without it a scripted shape is used.
        #[arg(long)]
        demo: Option<PathBuf>,
        #[arg(long, default_value = "L")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        variant: usize,
    },
    /// Compare methods over scripted shapes; writes CSV, markdown, JSON and SVG.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: imitate, nn, noimit, hand, oracle.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated: L, S, W, knot.
        #[arg(long)]
        shapes: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Record file for the nearest-neighbour baseline.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Serve sessions over HTTP and WebSocket.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Summarize a record file, checkpoint, demonstration or trace.
    Inspect {
        #[command(flatten)]
        common: Common,
        path: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Collect { common, .. }
            | Command::Train { common, .. }
            | Command::Imitate { common, .. }
            | Command::Eval { common, .. }
            | Command::Serve { common, .. }
            | Command::Inspect { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> crate::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.experiment.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.experiment.jobs = j;
    }
    if let Some(c) = &common.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> crate::Result<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn write_config(cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, cfg.to_json()).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model(cfg: &RunConfig) -> crate::Result<InverseModel> {
    let p = cfg.checkpoint_path();
    if !p.exists() {
        return Err(Error::MissingInput(p));
    }
    InverseModel::load(&p)
}

fn say(line: impl AsRef<str>) {
    eprintln!("{}", line.as_ref());
}

fn train_logged(data: &Dataset, cfg: &RunConfig, hyper: &TrainHyper, out: &TrainOutputs) -> crate::Result<InverseModel> {
    let (model, _) = train(data, &cfg.model, hyper, out, |r| {
        say(format!(
            "epoch {} step {} loss {:.4} val {:.4} pick {:.3} theta {:.3} len {:.3}",
            r.epoch, r.step, r.loss, r.val_loss, r.val_pick_acc, r.val_theta_acc, r.val_len_acc
        ))
    })?;
    Ok(model)
}

fn collect(cfg: &mut RunConfig, n: Option<usize>, mode: CollectMode, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(n) = n {
        match mode {
            CollectMode::Random => cfg.collection.random = n,
            CollectMode::Active => cfg.collection.active = n,
            CollectMode::Full => {
                cfg.collection.random = n;
                cfg.collection.active = n;
            }
        }
    }
    if let Some(o) = out {
        cfg.paths.dataset = Some(o.to_path_buf());
    }
    let path = cfg.dataset_path();
    let (sim, disc, rec) = (&cfg.sim, &cfg.discretization, &cfg.collection.records);
    let goals = || GoalBuffer::generate(sim, cfg.collection.goals, cfg.collection.goal_actions, cfg.seed ^ 0x60a1);
    let data = match mode {
        CollectMode::Random => collect_random(sim, disc, rec, cfg.collection.random, cfg.seed)?,
        CollectMode::Active => {
            let mut base = read_records(&path)?;
            let model = load_model(cfg)?;
            let seed = cfg.seed ^ (base.len() as u64).rotate_left(17);
            base.extend(collect_active(sim, disc, rec, Some(&model), &goals()?, cfg.collection.active, seed)?)?;
            base
        }
        CollectMode::Full => {
            let mut data = collect_random(sim, disc, rec, cfg.collection.random, cfg.seed)?;
            say(format!("random: {} transitions", data.len()));
            let hyper = TrainHyper { epochs: cfg.collection.bootstrap_epochs, ..cfg.train.clone() };
            let boot = train_logged(&data, cfg, &hyper, &TrainOutputs::default())?;
            let active = collect_active(sim, disc, rec, Some(&boot), &goals()?, cfg.collection.active, cfg.seed ^ 0xac71)?;
            data.extend(active)?;
            data
        }
    };
    ensure_parent(&path)?;
    write_records(&data, &path)?;
    write_config(cfg, &sidecar(&path, ".config.json"))?;
    println!("{}", json!({ "dataset": path, "transitions": data.len() }));
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig, dataset: Option<PathBuf>, epochs: Option<usize>, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(d) = dataset {
        cfg.paths.dataset = Some(d);
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = out {
        cfg.paths.checkpoint = Some(o.to_path_buf());
    }
    let data = read_records(&cfg.dataset_path())?;
    let ckpt = cfg.checkpoint_path();
    ensure_parent(&ckpt)?;
    let outputs = TrainOutputs { checkpoint: Some(ckpt.clone()), log_csv: Some(cfg.train_log_path()) };
    ensure_parent(&cfg.train_log_path())?;
    train_logged(&data, cfg, &cfg.train.clone(), &outputs)?;
    write_config(cfg, &sidecar(&ckpt, ".config.json"))?;
    println!("{}", json!({ "checkpoint": ckpt, "log": cfg.train_log_path() }));
    Ok(())
}

fn imitate_cmd(cfg: &mut RunConfig, demo: Option<PathBuf>, shape: &str, variant: usize, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(o) = out {
        cfg.paths.trace_dir = Some(o.to_path_buf());
    }
    let model = load_model(cfg)?;
    let (demo, name) = match demo {
        Some(p) => (Demonstration::load(&p)?, p.file_stem().map_or("demo".into(), |s| s.to_string_lossy().into_owned())),
        None => {
            let shape: ShapeName = shape.parse()?;
            let target = ShapeTarget::builtin(shape, variant, cfg.experiment.stride)?;
            (make_demo(&target, &cfg.sim, &cfg.experiment.jitter, cfg.seed)?, format!("{shape}{variant}"))
        }
    };
    let mut world = match demo.states.as_ref() {
        Some(s) => World::with_state(cfg.sim.clone(), s[0].clone())?,
        None => World::new(cfg.sim.clone())?,
    };
    let trace = imitate(&model, &mut world, &demo, &cfg.experiment.registration)?;
    let dir = cfg.trace_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.jsonl"));
    write_trace(&trace, &path)?;
    write_config(cfg, &dir.join(format!("{name}.config.json")))?;
    println!(
        "{}",
        json!({ "trace": path, "distances": trace.steps.iter().map(|s| s.distance).collect::<Vec<_>>() })
    );
    Ok(())
}

fn eval_cmd(
    cfg: &mut RunConfig,
    methods: Option<&str>,
    shapes: Option<&str>,
    repeats: Option<usize>,
    dataset: Option<PathBuf>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if let Some(m) = methods {
        cfg.experiment.methods = parse_list::<Method>(m)?;
    }
    if let Some(s) = shapes {
        cfg.experiment.shapes = parse_list::<ShapeName>(s)?;
    }
    if let Some(r) = repeats {
        cfg.experiment.repeats = r;
    }
    if let Some(d) = dataset {
        cfg.paths.dataset = Some(d);
    }
    if let Some(o) = out {
        cfg.paths.report_dir = Some(o.to_path_buf());
    }
    cfg.validate()?;
    let plan = &cfg.experiment;
    let needs_model = plan.methods.iter().any(|m| matches!(m, Method::Imitate | Method::NoImitation));
    let model = if needs_model { Some(load_model(cfg)?) } else { None };
    let index = if plan.methods.contains(&Method::NearestNeighbor) {
        Some(NearestNeighborIndex::build(&read_records(&cfg.dataset_path())?)?)
    } else {
        None
    };
    let res = Resources { model: model.as_ref().map(|m| m as &dyn InverseDynamics), nn_index: index.as_ref() };
    let report = run_experiment(plan, &cfg.sim, &cfg.discretization, &res)?;
    let dir = cfg.report_dir();
    export_report(&report, &dir)?;
    for &s in &plan.shapes {
        write_svg(&report, s, &dir.join(format!("{s}.svg")))?;
    }
    write_config(cfg, &dir.join("config.json"))?;
    println!("{}", report.summary_markdown());
    Ok(())
}

fn serve_cmd(cfg: &RunConfig, port: Option<u16>) -> anyhow::Result<()> {
    let model: Option<Arc<dyn InverseDynamics>> = match load_model(cfg) {
        Ok(m) => Some(Arc::new(m)),
        Err(Error::MissingInput(p)) => {
            say(format!("no checkpoint at {}; imitation runs will be refused", p.display()));
            None
        }
        Err(e) => return Err(e.into()),
    };
    let mut addr: SocketAddr = DEFAULT_BIND.parse().expect("valid default bind");
    if let Some(p) = port {
        addr.set_port(p);
    }
    let state = Arc::new(ServiceState::new(cfg.sim.clone(), cfg.experiment.registration.clone(), model)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state, addr, |a| say(format!("listening on http://{a}"))))?;
    Ok(())
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()).into());
    }
    let mut head = [0u8; 8];
    let n = std::fs::File::open(path)?.read(&mut head)?;
    let head = &head[..n];
    let summary = if head.starts_with(b"RWDS") {
        let d = read_records(path)?;
        let count = |p: CollectionPolicy| d.manifest.ranges.iter().filter(|r| r.policy == p).map(|r| r.end - r.start).sum::<u64>();
        json!({
            "kind": "dataset",
            "transitions": d.len(),
            "random": count(CollectionPolicy::Random),
            "active": count(CollectionPolicy::Active),
            "train": d.train_indices().len(),
            "val": d.val_indices().len(),
            "manifest": d.manifest,
        })
    } else if path.extension().is_some_and(|e| e == "jsonl") {
        let t = crate::controllers::read_trace(path)?;
        json!({
            "kind": "trace",
            "policy": t.policy,
            "steps": t.steps.len(),
            "distances": t.steps.iter().map(|s| s.distance).collect::<Vec<_>>(),
        })
    } else if head.first() == Some(&b'{') {
        let d = Demonstration::load(path)?;
        json!({ "kind": "demonstration", "keyframes": d.len(), "provenance": d.provenance, "has_states": d.states.is_some() })
    } else {
        let meta = InverseModel::checkpoint_meta(path).context("not a dataset, trace, demonstration or checkpoint")?;
        let m = InverseModel::load(path)?;
        json!({ "kind": "checkpoint", "parameters": m.param_count(), "meta": meta })
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common().clone();
    let mut cfg = load_config(&common)?;
    let out = common.out.as_deref();
    match cli.command {
        Command::Collect { n, mode, .. } => collect(&mut cfg, n, mode, out),
        Command::Train { dataset, epochs, .. } => train_cmd(&mut cfg, dataset, epochs, out),
        Command::Imitate { demo, shape, variant, .. } => imitate_cmd(&mut cfg, demo, &shape, variant, out),
        Command::Eval { methods, shapes, repeats, dataset, .. } => {
            eval_cmd(&mut cfg, methods.as_deref(), shapes.as_deref(), repeats, dataset, out)
        }
        Command::Serve { port, .. } => {
            if out.is_some() {
                bail!("serve takes no --out");
            }
            serve_cmd(&cfg, port)
        }
        Command::Inspect { path, .. } => inspect(&path),
    }
}

/// Exit code and JSON body for a failed command.
pub fn error_report(err: &anyhow::Error) -> (i32, serde_json::Value) {
    let (code, kind) = match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => (2, "invalid_config"),
        Some(Error::MissingInput(_)) => (3, "missing_input"),
        Some(_) => (1, "runtime"),
        None => (1, "runtime"),
    };
    let path = match err.downcast_ref::<Error>() {
        Some(Error::MissingInput(p)) => Some(p.display().to_string()),
        _ => None,
    };
    (code, json!({ "error": { "kind": kind, "message": format!("{err:#}"), "path": path } }))
}

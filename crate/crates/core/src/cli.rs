//! Command-line entry point: inspect networks, solve assignment instances,
//! generate datasets, train/evaluate the surrogate model, run ablations,
//! and gradient-check the autodiff stack. Every run writes a `run.json`
//! provenance record into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{read_dataset, write_dataset, DatasetManifest};
use crate::model::{
    load_checkpoint, save_checkpoint, Baseline, FeatureNorm, ModelConfig, ModelParams, Variant,
};
use crate::net::{OdMatrix, RoadNetwork, VehicleClass};
use crate::scenario::{generate_dataset, train_test_split, ScenarioConfig};
use crate::solver::{solve, Objective, SolveConfig};
use crate::tntp;
use crate::train::{
    evaluate, history_csv, prepare_samples, residue_csv, scatter_csv, train, LossWeights,
    TrainConfig, TrainSample,
};

/// Exit codes: 0 success, 2 usage error (from clap), 3 data error,
/// 4 non-convergence.
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NONCONVERGED: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Data(String),
    NonConverged(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(m) => write!(f, "{m}"),
            CliError::NonConverged(m) => write!(f, "{m}"),
        }
    }
}

macro_rules! data_err_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}
data_err_from!(
    std::io::Error,
    crate::tntp::TntpError,
    crate::net::NetError,
    crate::dataset::DatasetError,
    crate::model::ModelError,
    crate::scenario::ScenarioError,
    crate::train::TrainError,
    crate::solver::SolveError,
    serde_json::Error
);

#[derive(Parser, Debug)]
#[command(name = "tapnet", version, about = "Multi-class traffic assignment toolkit")]
pub struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (env TAPNET_OUT overrides).
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker thread bound for batch work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// TNTP network file.
    #[arg(long)]
    pub net: PathBuf,
    /// TNTP node-coordinate file.
    #[arg(long)]
    pub nodes: Option<PathBuf>,
    /// TNTP trips file.
    #[arg(long)]
    pub trips: Option<PathBuf>,
    /// Vehicle classes as name:pce:share (share of base demand).
    #[arg(long, default_value = "car:1.0:0.8,truck:1.9:0.2")]
    pub classes: String,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Print a summary of the network and demand files.
    Inspect {
        #[command(flatten)]
        net: NetArgs,
    },
    /// Solve one assignment instance and write flow/convergence reports.
    Solve {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value = "ue")]
        objective: String,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 50_000)]
        max_iter: usize,
    },
    /// Sample, solve, and write a scenario dataset (.jsonl + manifest).
    Generate {
        #[command(flatten)]
        net: NetArgs,
        /// base | indist | ood-train | ood-test
        #[arg(long, default_value = "base")]
        preset: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 50_000)]
        max_iter: usize,
        /// ue | so labels.
        #[arg(long, default_value = "ue")]
        objective: String,
        /// Output dataset stem (writes <name>.jsonl, <name>.manifest.json,
        /// <name>.split.json).
        #[arg(long, default_value = "dataset")]
        name: String,
        /// Train fraction used for the normalization stats and split file.
        #[arg(long, default_value_t = 0.8)]
        train_share: f64,
        /// Override the preset's demand factor range, as lo:hi.
        #[arg(long)]
        demand_scale: Option<String>,
        /// Override the preset's capacity factor range, as lo:hi.
        #[arg(long)]
        capacity_scale: Option<String>,
    },
    /// Train the surrogate model on a generated dataset.
    Train {
        #[command(flatten)]
        net: NetArgs,
        /// Dataset stem as written by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value = "none")]
        baseline: String,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        #[arg(long, default_value_t = 64)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        stop_at_l_alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
        /// Loss weights; defaults follow the training recipe.
        #[arg(long, default_value_t = 1.0)]
        w_alpha: f64,
        #[arg(long, default_value_t = 0.005)]
        w_f: f64,
        #[arg(long, default_value_t = 0.05)]
        w_c: f64,
        /// Checkpoint file name inside the output directory.
        #[arg(long, default_value = "checkpoint.json")]
        checkpoint: String,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | test | all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train each variant over several seeds and emit a ratio-MAE table.
    Ablate {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated variant names; `full` is always included.
        #[arg(long, default_value = "full,no_link_feat,no_od_link,no_intra_view,single_head,no_conservation")]
        variants: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
    },
    /// Finite-difference check of the full model loss on a toy instance.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Serialize)]
struct RunRecord {
    command: Vec<String>,
    seed: u64,
    version: &'static str,
    input_hashes: Vec<(String, String)>,
}

fn file_hash(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    Some(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_run_record(out_dir: &Path, seed: u64, inputs: &[&Path]) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    let record = RunRecord {
        command: std::env::args().collect(),
        seed,
        version: env!("CARGO_PKG_VERSION"),
        input_hashes: inputs
            .iter()
            .filter_map(|p| file_hash(p).map(|h| (p.display().to_string(), h)))
            .collect(),
    };
    fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

pub fn parse_classes(spec: &str) -> Result<(Vec<VehicleClass>, Vec<f64>), CliError> {
    let mut classes = Vec::new();
    let mut shares = Vec::new();
    for part in spec.split(',') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() != 3 {
            return Err(CliError::Data(format!(
                "class spec '{part}' is not name:pce:share"
            )));
        }
        let pce: f64 = fields[1]
            .parse()
            .map_err(|_| CliError::Data(format!("bad pce in '{part}'")))?;
        let share: f64 = fields[2]
            .parse()
            .map_err(|_| CliError::Data(format!("bad share in '{part}'")))?;
        if pce <= 0.0 || share < 0.0 {
            return Err(CliError::Data(format!("non-positive pce or negative share in '{part}'")));
        }
        classes.push(VehicleClass::new(fields[0], pce));
        shares.push(share);
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CliError::Data(format!("class shares sum to {total}, expected 1")));
    }
    Ok((classes, shares))
}

fn parse_objective(s: &str) -> Result<Objective, CliError> {
    match s {
        "ue" => Ok(Objective::Ue),
        "so" => Ok(Objective::So),
        other => Err(CliError::Data(format!("unknown objective '{other}' (expected ue|so)"))),
    }
}

struct LoadedNetwork {
    net: RoadNetwork,
    classes: Vec<VehicleClass>,
    od: OdMatrix,
    base_demand: f64,
}

fn load_network(args: &NetArgs) -> Result<LoadedNetwork, CliError> {
    let net_text = fs::read_to_string(&args.net)?;
    let coord_text = match &args.nodes {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let net = tntp::parse_network(&net_text, &coord_text)?;
    let (classes, shares) = parse_classes(&args.classes)?;
    let (od, base_demand) = match &args.trips {
        Some(p) => {
            let trips_text = fs::read_to_string(p)?;
            let trips = tntp::parse_trips(&trips_text)?;
            let single = tntp::remap_trips(&net, &trips)?;
            let total = single.total();
            (tntp::split_od_by_share(&single, &shares), total)
        }
        None => (OdMatrix::new(classes.len()), 0.0),
    };
    Ok(LoadedNetwork { net, classes, od, base_demand })
}

pub fn out_dir(cli: &Cli) -> PathBuf {
    match std::env::var_os("TAPNET_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cli.out_dir.clone(),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let out = out_dir(cli);
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global().ok();
    match &cli.cmd {
        Cmd::Inspect { net } => {
            write_run_record(&out, cli.seed, &input_paths(net, &[]))?;
            let loaded = load_network(net)?;
            let n = loaded.net.num_nodes() as f64;
            let e = loaded.net.num_links() as f64;
            println!("nodes: {}", loaded.net.num_nodes());
            println!("links: {}", loaded.net.num_links());
            println!("average degree: {:.2}", e / n);
            println!("aggregate demand: {:.4}", loaded.base_demand);
            Ok(())
        }
        Cmd::Solve { net, objective, tol, max_iter } => {
            write_run_record(&out, cli.seed, &input_paths(net, &[]))?;
            let loaded = load_network(net)?;
            let cfg = SolveConfig {
                objective: parse_objective(objective)?,
                threshold: *tol,
                max_iterations: *max_iter,
                ..SolveConfig::default()
            };
            let report = solve(&loaded.net, &loaded.classes, &loaded.od, &cfg)?;

            let mut flows = String::from("link,tail,head");
            for c in &loaded.classes {
                flows.push_str(&format!(",flow_{}", c.name));
            }
            flows.push('\n');
            for (e, l) in loaded.net.links.iter().enumerate() {
                flows.push_str(&format!("{e},{},{}", l.tail + 1, l.head + 1));
                for cf in &report.flows.flows {
                    flows.push_str(&format!(",{}", cf[e]));
                }
                flows.push('\n');
            }
            fs::write(out.join("flows.csv"), flows)?;

            let mut conv = String::from("iteration,convergence,relative_gap,objective\n");
            for i in 0..report.objective_trace.len() {
                let m = report.convergence_trace.get(i).map(|v| v.to_string()).unwrap_or_default();
                let g = report.gap_trace.get(i).map(|v| v.to_string()).unwrap_or_default();
                conv.push_str(&format!("{},{},{},{}\n", i + 1, m, g, report.objective_trace[i]));
            }
            fs::write(out.join("convergence.csv"), conv)?;

            let summary = serde_json::json!({
                "objective": objective,
                "iterations": report.iterations,
                "converged": report.converged,
                "final_objective": report.objective_trace.last(),
            });
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!(
                "{} iterations, converged: {}",
                report.iterations, report.converged
            );
            if !report.converged {
                return Err(CliError::NonConverged(format!(
                    "did not reach threshold {tol} within {max_iter} iterations"
                )));
            }
            Ok(())
        }
        Cmd::Generate {
            net,
            preset,
            count,
            tol,
            max_iter,
            objective,
            name,
            train_share,
            demand_scale,
            capacity_scale,
        } => {
            write_run_record(&out, cli.seed, &input_paths(net, &[]))?;
            let loaded = load_network(net)?;
            let mut cfg = preset_config(preset, cli.seed)?;
            cfg.threshold = *tol;
            cfg.max_iterations = *max_iter;
            cfg.objective = parse_objective(objective)?;
            if let Some(s) = demand_scale {
                cfg.demand_scale = parse_range(s)?;
            }
            if let Some(s) = capacity_scale {
                cfg.capacity_scale = parse_range(s)?;
            }
            cfg.validate()?;
            let records = generate_dataset(&loaded.net, &loaded.od, &loaded.classes, &cfg, *count)?;
            let (train_idx, test_idx) = train_test_split(records.len(), *train_share, cli.seed);
            let class_names: Vec<String> = loaded.classes.iter().map(|c| c.name.clone()).collect();
            let class_pces: Vec<f64> = loaded.classes.iter().map(|c| c.pce).collect();
            let manifest = DatasetManifest::compute(
                &loaded.net,
                &class_names,
                &class_pces,
                cfg.objective,
                &records,
                &train_idx,
            );
            fs::create_dir_all(&out)?;
            fs::write(out.join(format!("{name}.jsonl")), write_dataset(&records))?;
            fs::write(out.join(format!("{name}.manifest.json")), manifest.to_json())?;
            let split = serde_json::json!({ "train": train_idx, "test": test_idx });
            fs::write(out.join(format!("{name}.split.json")), serde_json::to_string(&split)?)?;
            println!("wrote {} records ({} train / {} test)", records.len(), split["train"].as_array().unwrap().len(), split["test"].as_array().unwrap().len());
            Ok(())
        }
        Cmd::Train {
            net,
            dataset,
            variant,
            baseline,
            embed_dim,
            hidden_dim,
            layers,
            heads,
            steps,
            batch_size,
            lr,
            stop_at_l_alpha,
            eval_every,
            w_alpha,
            w_f,
            w_c,
            checkpoint,
        } => {
            write_run_record(&out, cli.seed, &input_paths(net, &[dataset]))?;
            let loaded = load_network(net)?;
            let bundle = load_dataset_bundle(dataset, &loaded.net)?;
            let mut mcfg = ModelConfig::new(loaded.net.num_nodes(), loaded.classes.len());
            mcfg.embed_dim = *embed_dim;
            mcfg.hidden_dim = *hidden_dim;
            mcfg.layers = *layers;
            mcfg.heads = *heads;
            mcfg.variant = variant.parse::<Variant>().map_err(CliError::Data)?;
            mcfg.baseline = baseline.parse::<Baseline>().map_err(CliError::Data)?;
            mcfg.validate()?;

            let mut params = ModelParams::init(&mcfg, &loaded.net, &loaded.od, cli.seed)?;
            let norm = FeatureNorm::from(&bundle.manifest);
            let all =
                prepare_samples(&loaded.net, &loaded.classes, &bundle.records, &params, &norm)?;
            let (train_samples, test_samples) = split_samples(&all, &bundle);
            let mut weights = LossWeights { w_alpha: *w_alpha, w_f: *w_f, w_c: *w_c };
            if mcfg.variant == Variant::NoConservation {
                weights.w_c = 0.0;
            }
            let tcfg = TrainConfig {
                lr: *lr,
                batch_size: *batch_size,
                steps: *steps,
                seed: cli.seed,
                weights,
                eval_every: *eval_every,
                stop_at_l_alpha: *stop_at_l_alpha,
                squared_alpha: false,
            };
            let result = train(&mut params, &train_samples, &test_samples, &tcfg)?;
            fs::write(out.join(checkpoint), save_checkpoint(&result.best_params, &norm))?;
            fs::write(out.join("history.csv"), history_csv(&result.history))?;
            let last = result.history.steps.last().unwrap();
            println!(
                "trained {} steps, final loss {:.6}, L_alpha {:.6}",
                last.step, last.loss, last.l_alpha
            );
            Ok(())
        }
        Cmd::Eval { net, dataset, checkpoint, split } => {
            write_run_record(&out, cli.seed, &input_paths(net, &[dataset, checkpoint]))?;
            let loaded = load_network(net)?;
            let bundle = load_dataset_bundle(dataset, &loaded.net)?;
            let (params, norm) = load_checkpoint(&fs::read_to_string(checkpoint)?)?;
            let all =
                prepare_samples(&loaded.net, &loaded.classes, &bundle.records, &params, &norm)?;
            let (train_samples, test_samples) = split_samples(&all, &bundle);
            let chosen: Vec<TrainSample> = match split.as_str() {
                "train" => train_samples,
                "test" => test_samples,
                "all" => all,
                other => return Err(CliError::Data(format!("unknown split '{other}'"))),
            };
            let dump = evaluate(&params, &chosen, &loaded.classes);
            fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&dump.report)?)?;
            for (c, class) in loaded.classes.iter().enumerate() {
                fs::write(out.join(format!("scatter_{}.csv", class.name)), scatter_csv(&dump, c))?;
            }
            fs::write(out.join("residue_nodes.csv"), residue_csv(&dump))?;
            for m in &dump.report.per_class {
                println!(
                    "{}: flow MAE {:.4}, RMSE {:.4}, ratio MAE {:.6}, pearson {:.4}",
                    m.class, m.flow_mae, m.flow_rmse, m.ratio_mae, m.flow_pearson
                );
            }
            println!("normalized residue: {:.6}", dump.report.residue);
            Ok(())
        }
        Cmd::Ablate {
            net,
            dataset,
            variants,
            seeds,
            steps,
            batch_size,
            lr,
            embed_dim,
            hidden_dim,
            layers,
            heads,
        } => {
            write_run_record(&out, cli.seed, &input_paths(net, &[dataset]))?;
            let loaded = load_network(net)?;
            let bundle = load_dataset_bundle(dataset, &loaded.net)?;
            let mut names: Vec<String> =
                variants.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if !names.iter().any(|n| n == "full") {
                names.insert(0, "full".to_string());
            }
            let parsed: Result<Vec<Variant>, _> = names.iter().map(|n| n.parse::<Variant>()).collect();
            let parsed = parsed.map_err(|e| {
                CliError::Data(format!(
                    "{e}; valid variants: full, no_link_feat, no_od_link, no_intra_view, single_head, no_conservation"
                ))
            })?;

            let mut csv = String::from("variant,seed,ratio_mae,residue\n");
            let mut table = Vec::new();
            for (name, variant) in names.iter().zip(&parsed) {
                let mut maes = Vec::new();
                for k in 0..*seeds {
                    let seed = cli.seed.wrapping_add(k as u64);
                    let mut mcfg = ModelConfig::new(loaded.net.num_nodes(), loaded.classes.len());
                    mcfg.embed_dim = *embed_dim;
                    mcfg.hidden_dim = *hidden_dim;
                    mcfg.layers = *layers;
                    mcfg.heads = *heads;
                    mcfg.variant = *variant;
                    mcfg.validate()?;
                    let mut params = ModelParams::init(&mcfg, &loaded.net, &loaded.od, seed)?;
                    let norm = FeatureNorm::from(&bundle.manifest);
                    let all = prepare_samples(
                        &loaded.net,
                        &loaded.classes,
                        &bundle.records,
                        &params,
                        &norm,
                    )?;
                    let (train_samples, test_samples) = split_samples(&all, &bundle);
                    let weights = if *variant == Variant::NoConservation {
                        LossWeights::no_conservation()
                    } else {
                        LossWeights::default()
                    };
                    let tcfg = TrainConfig {
                        lr: *lr,
                        batch_size: *batch_size,
                        steps: *steps,
                        seed,
                        weights,
                        ..TrainConfig::default()
                    };
                    train(&mut params, &train_samples, &test_samples, &tcfg)?;
                    let dump = evaluate(&params, &test_samples, &loaded.classes);
                    let mae: f64 = dump.report.per_class.iter().map(|m| m.ratio_mae).sum::<f64>()
                        / dump.report.per_class.len() as f64;
                    csv.push_str(&format!("{name},{seed},{mae},{}\n", dump.report.residue));
                    maes.push(mae);
                }
                let mean = maes.iter().sum::<f64>() / maes.len() as f64;
                let sd = (maes.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
                    / maes.len() as f64)
                    .sqrt();
                table.push((name.clone(), mean, sd));
            }
            fs::write(out.join("ablation.csv"), csv)?;
            println!("variant,ratio_mae_mean,ratio_mae_sd");
            for (name, mean, sd) in &table {
                println!("{name},{mean:.6},{sd:.6}");
            }
            Ok(())
        }
        Cmd::Gradcheck { eps, tolerance } => {
            write_run_record(&out, cli.seed, &[])?;
            let err = toy_gradcheck(cli.seed, *eps)?;
            println!("max relative gradient error: {err:.3e} (tolerance {tolerance:.1e})");
            if err > *tolerance {
                return Err(CliError::Data(format!(
                    "gradient check failed: {err:.3e} > {tolerance:.1e}"
                )));
            }
            Ok(())
        }
    }
}

fn input_paths<'a>(net: &'a NetArgs, extra: &[&'a PathBuf]) -> Vec<&'a Path> {
    let mut v: Vec<&Path> = vec![net.net.as_path()];
    if let Some(p) = &net.nodes {
        v.push(p.as_path());
    }
    if let Some(p) = &net.trips {
        v.push(p.as_path());
    }
    v.extend(extra.iter().map(|p| p.as_path()));
    v
}

fn parse_range(s: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let parse = |x: &str| x.parse::<f64>().map_err(|_| CliError::Data(format!("bad range '{s}', expected lo:hi")));
    match parts.as_slice() {
        [lo, hi] => Ok((parse(lo)?, parse(hi)?)),
        _ => Err(CliError::Data(format!("bad range '{s}', expected lo:hi"))),
    }
}

fn preset_config(preset: &str, seed: u64) -> Result<ScenarioConfig, CliError> {
    match preset {
        "base" => Ok(ScenarioConfig::base(seed)),
        "indist" => Ok(ScenarioConfig::indist(seed)),
        "ood-train" => Ok(ScenarioConfig::ood_train(seed)),
        "ood-test" => Ok(ScenarioConfig::ood_test(seed)),
        other => Err(CliError::Data(format!(
            "unknown preset '{other}' (expected base|indist|ood-train|ood-test)"
        ))),
    }
}

struct DatasetBundle {
    records: Vec<crate::dataset::DatasetRecord>,
    manifest: DatasetManifest,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

/// `stem` may be the `.jsonl` path or the bare stem written by `generate`.
fn load_dataset_bundle(stem: &Path, base: &RoadNetwork) -> Result<DatasetBundle, CliError> {
    let stem_str = stem.display().to_string();
    let base_path = stem_str.strip_suffix(".jsonl").unwrap_or(&stem_str).to_string();
    let records = read_dataset(&fs::read_to_string(format!("{base_path}.jsonl"))?)?;
    let manifest = DatasetManifest::from_json(&fs::read_to_string(format!(
        "{base_path}.manifest.json"
    ))?)?;
    manifest.check_network(base)?;
    let split_path = format!("{base_path}.split.json");
    let (train_idx, test_idx) = if Path::new(&split_path).exists() {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(split_path)?)?;
        let grab = |k: &str| -> Vec<usize> {
            v[k].as_array()
                .map(|a| a.iter().filter_map(|x| x.as_u64().map(|u| u as usize)).collect())
                .unwrap_or_default()
        };
        (grab("train"), grab("test"))
    } else {
        train_test_split(records.len(), 0.8, 0)
    };
    Ok(DatasetBundle { records, manifest, train_idx, test_idx })
}

fn split_samples(all: &[TrainSample], bundle: &DatasetBundle) -> (Vec<TrainSample>, Vec<TrainSample>) {
    let take = |idx: &[usize]| -> Vec<TrainSample> {
        idx.iter().filter_map(|&i| all.get(i).cloned()).collect()
    };
    (take(&bundle.train_idx), take(&bundle.test_idx))
}

/// The 4-node toy gradient check used by the `gradcheck` subcommand.
pub fn toy_gradcheck(seed: u64, eps: f64) -> Result<f64, CliError> {
    use crate::autodiff::{grad_check, Matrix};
    use crate::model::{bind_existing, forward, prepare_input};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let (net, classes, od) = toy_instance();
    let mut mcfg = ModelConfig::new(net.num_nodes(), classes.len());
    mcfg.embed_dim = 8;
    mcfg.hidden_dim = 8;
    mcfg.layers = 2;
    mcfg.heads = 2;
    let mut params = ModelParams::init(&mcfg, &net, &od, seed)?;
    params.jitter(0.05, seed.wrapping_add(55));
    let kept: Vec<usize> = (0..net.num_links()).collect();
    let input = prepare_input(&net, &od, &classes, &kept, &params, &FeatureNorm::identity())?;
    let flat = params.flatten();
    let template = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let err = grad_check(
        move |tape, ids| {
            let mut p = template.clone();
            let mats: Vec<Matrix> = ids.iter().map(|&id| tape.value_matrix(id)).collect();
            p.assign(&mats);
            let bound = bind_existing(&p, ids);
            let out = forward(tape, &p, &bound, &input);
            let mut acc = tape.sum_all(out.ratios[0]);
            for &r in &out.ratios[1..] {
                let s = tape.sum_all(r);
                acc = tape.add(acc, s);
            }
            acc
        },
        &flat,
        eps,
        3,
        &mut rng,
    );
    Ok(err)
}

fn toy_instance() -> (RoadNetwork, Vec<VehicleClass>, OdMatrix) {
    use crate::net::{Link, Node};
    let nodes = (0..4).map(|i| Node { id: i + 1, x: (i % 2) as f64, y: (i / 2) as f64 }).collect();
    let mk = |tail, head| Link {
        tail,
        head,
        free_flow_time: 2.0,
        capacity: 100.0,
        bpr_alpha: 0.15,
        bpr_beta: 4.0,
    };
    let net = RoadNetwork::new(
        nodes,
        vec![mk(0, 1), mk(1, 2), mk(2, 3), mk(3, 0), mk(0, 2), mk(1, 3)],
    )
    .unwrap();
    let classes = vec![VehicleClass::new("car", 1.0), VehicleClass::new("truck", 1.9)];
    let mut od = OdMatrix::new(2);
    od.set(0, 0, 2, 30.0);
    od.set(0, 1, 3, 20.0);
    od.set(1, 0, 3, 10.0);
    (net, classes, od)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_spec_parsing() {
        let (classes, shares) = parse_classes("car:1.0:0.8,truck:1.9:0.2").unwrap();
        assert_eq!(classes.len(), 2);
        assert_eq!(classes[1].pce, 1.9);
        assert_eq!(shares, vec![0.8, 0.2]);
        assert!(parse_classes("car:1.0:0.5").is_err()); // shares must sum to 1
        assert!(parse_classes("car:1.0").is_err());
        assert!(parse_classes("car:zero:1.0").is_err());
    }

    #[test]
    fn preset_names() {
        assert!(preset_config("base", 0).is_ok());
        assert!(preset_config("indist", 0).is_ok());
        assert!(preset_config("ood-train", 0).is_ok());
        assert!(preset_config("ood-test", 0).is_ok());
        assert!(preset_config("bogus", 0).is_err());
    }

    #[test]
    fn toy_gradcheck_passes() {
        let err = toy_gradcheck(1, 1e-4).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

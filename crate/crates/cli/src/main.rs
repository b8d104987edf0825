use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddnet_core::bench::{
    generate_microgrid, run_campaign, simulate_closed_loop, Algorithm, CampaignConfig, Microgrid, NoiseMode,
};
use ddnet_core::datagen::{algorithm_data_bounds, NodeDataset};
use ddnet_core::dissip::{check_dissipativity, verify_trajectory_dissipation};
use ddnet_core::network::{assemble_closed_loop, is_stable};
use ddnet_core::synth::{algorithm1_node, algorithm2_node, SynthesisResult};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "ddnet", version, about = "Data-driven decentralized controller synthesis for networked systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON input: a node dataset (synth), a campaign config (campaign) or a
    /// trial artifact (simulate, verify).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat override, `key=value`; dotted keys reach nested fields.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use the Euler-consistent A22 entry in the unit model.
    #[arg(long)]
    euler_a22: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one node's synthesis on a serialized dataset.
    Synth(Common),
    /// Run a randomized feasibility campaign.
    Campaign(Common),
    /// Simulate the closed loop of a saved trial.
    Simulate(Common),
    /// Replay the model-based oracles on a saved trial.
    Verify(Common),
}

/// Gains and certificates of one feasible trial, enough to rebuild the
/// network from its config.
#[derive(Serialize, Deserialize)]
struct TrialArtifact {
    config: CampaignConfig,
    trial: usize,
    alg: Algorithm,
    rho: Option<f64>,
    node_results: Vec<SynthesisResult>,
}

enum Outcome {
    Ok,
    Negative,
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CliResult = Result<Outcome, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(c) => synth(&c),
        Command::Campaign(c) => campaign(&c),
        Command::Simulate(c) => simulate(&c),
        Command::Verify(c) => verify(&c),
    };
    match res {
        Ok(Outcome::Ok) => ExitCode::from(0),
        Ok(Outcome::Negative) => ExitCode::from(1),
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_json(c: &Common, required: bool) -> Result<Value, Failure> {
    match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
        }
        None if required => Err(Failure("--config is required".into())),
        None => Ok(Value::Object(Map::new())),
    }
}

fn apply_overrides(mut v: Value, overrides: &[String]) -> Result<Value, Failure> {
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| Failure(format!("override `{item}` is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let (path, last) = match key.rsplit_once('.') {
            Some((p, l)) => (p.split('.').collect(), l),
            None => (Vec::new(), key),
        };
        let mut node = &mut v;
        for part in path {
            let obj = node.as_object_mut().ok_or_else(|| Failure(format!("override `{key}`: not an object path")))?;
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
        let obj = node.as_object_mut().ok_or_else(|| Failure(format!("override `{key}`: not an object path")))?;
        obj.insert(last.to_string(), parsed);
    }
    Ok(v)
}

/// Removes a CLI-only key from the override list.
fn take_override(overrides: &mut Vec<String>, key: &str) -> Option<String> {
    let idx = overrides.iter().position(|o| o.split_once('=').map(|(k, _)| k) == Some(key))?;
    Some(overrides.remove(idx).split_once('=').unwrap().1.to_string())
}

fn write_out(dir: &Option<PathBuf>, name: &str, text: &str) -> Result<(), Failure> {
    match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join(name), text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn synth(c: &Common) -> CliResult {
    let mut overrides = c.overrides.clone();
    let alg = match take_override(&mut overrides, "alg").as_deref() {
        None | Some("alg2") => Algorithm::Alg2,
        Some("alg1") => Algorithm::Alg1,
        Some(other) => return Err(Failure(format!("unknown algorithm `{other}`"))),
    };
    let alpha: f64 = match take_override(&mut overrides, "alpha") {
        Some(a) => a.parse().map_err(|_| Failure(format!("alpha `{a}` is not a number")))?,
        None => 1.0,
    };
    let v = apply_overrides(read_json(c, true)?, &overrides)?;
    let data = NodeDataset::from_json(&v.to_string())?;
    let (phi, psi) = algorithm_data_bounds(&data.local, &data.interconnection, data.eps_l, data.eps_g)?;
    let res = match alg {
        Algorithm::Alg1 => algorithm1_node(&data.local, &data.interconnection, &phi, &psi)?,
        Algorithm::Alg2 => algorithm2_node(&data.local, &data.interconnection, &phi, &psi, alpha)?,
    };
    write_out(&c.out, "synth.json", &serde_json::to_string_pretty(&res)?)?;
    if res.accepted() {
        Ok(Outcome::Ok)
    } else {
        eprintln!("node {}: {:?} ({})", data.node, res.status, res.engine_status);
        Ok(Outcome::Negative)
    }
}

fn campaign_config(c: &Common) -> Result<CampaignConfig, Failure> {
    let mut v = apply_overrides(read_json(c, false)?, &c.overrides)?;
    let obj = v.as_object_mut().ok_or_else(|| Failure("campaign config must be a JSON object".into()))?;
    if let Some(seed) = c.seed {
        obj.insert("master_seed".into(), seed.into());
    }
    if c.euler_a22 {
        obj.insert("euler_a22".into(), true.into());
    }
    Ok(CampaignConfig::from_json(&v.to_string())?)
}

fn campaign(c: &Common) -> CliResult {
    let cfg = campaign_config(c)?;
    let report = run_campaign(&cfg, c.out.as_deref())?;
    for s in &report.summaries {
        eprintln!(
            "{}: {}/{} feasible ({:.1}%), {:.2} ms per node",
            s.alg, s.feasible, s.trials, s.feasible_pct, s.mean_node_ms
        );
    }
    if let Some(dir) = &c.out {
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summaries)?)?;
        if cfg.keep_node_results {
            for rec in report.records.iter().filter(|r| r.feasible) {
                let art = TrialArtifact {
                    config: cfg.clone(),
                    trial: rec.trial,
                    alg: rec.alg,
                    rho: rec.rho,
                    node_results: rec.node_results.clone(),
                };
                let name = format!("trial_{}_{}.json", rec.trial, rec.alg);
                fs::write(dir.join(name), serde_json::to_string(&art)?)?;
            }
        }
    }
    Ok(Outcome::Ok)
}

fn load_artifact(c: &Common) -> Result<(TrialArtifact, Microgrid, Vec<DMatrix<f64>>), Failure> {
    let art: TrialArtifact = serde_json::from_value(read_json(c, true)?)?;
    let grid = generate_microgrid(&art.config, art.trial)?;
    if art.node_results.len() != grid.models.len() {
        return Err(Failure(format!(
            "artifact has {} node results for {} units",
            art.node_results.len(),
            grid.models.len()
        )));
    }
    let gains = art
        .node_results
        .iter()
        .enumerate()
        .map(|(i, r)| r.k.clone().ok_or_else(|| Failure(format!("node {i} has no gain"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((art, grid, gains))
}

fn simulate(c: &Common) -> CliResult {
    let mut overrides = c.overrides.clone();
    let steps: usize = match take_override(&mut overrides, "steps") {
        Some(s) => s.parse().map_err(|_| Failure(format!("steps `{s}` is not an integer")))?,
        None => 500,
    };
    let noisy = match take_override(&mut overrides, "noise").as_deref() {
        None | Some("false") | Some("off") => false,
        Some("true") | Some("on") => true,
        Some(other) => return Err(Failure(format!("noise must be on/off, got `{other}`"))),
    };
    if let Some(o) = overrides.first() {
        return Err(Failure(format!("unknown simulate override `{o}`")));
    }
    let (art, grid, gains) = load_artifact(c)?;
    let seed = c.seed.unwrap_or(art.config.master_seed);
    let m = grid.interconnection()?;
    let n: usize = grid.models.iter().map(|md| md.n()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng)).normalize();
    let noise = if noisy {
        NoiseMode::On { eps_l: art.config.eps_l, eps_g: art.config.eps_g, seed }
    } else {
        NoiseMode::Off
    };
    let traj = simulate_closed_loop(&grid.models, &gains, &m, &x0, steps, noise)?;
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("trajectory_{}.csv", art.trial));
    traj.write_csv(&path)?;
    eprintln!("wrote {}; ||x(T)|| = {:.3e}", path.display(), traj.final_norm());
    Ok(if traj.diverged { Outcome::Negative } else { Outcome::Ok })
}

#[derive(Serialize)]
struct NodeCheck {
    node: usize,
    dissipative: bool,
    trajectory: bool,
    degree_bound: Option<bool>,
}

#[derive(Serialize)]
struct VerifyReport {
    trial: usize,
    alg: Algorithm,
    rho: f64,
    stable: bool,
    nodes: Vec<NodeCheck>,
    passed: bool,
}

fn verify(c: &Common) -> CliResult {
    let (art, grid, gains) = load_artifact(c)?;
    let m = grid.interconnection()?;
    let (_, rho) = assemble_closed_loop(&grid.models, &gains, &m)?;
    let mut nodes = Vec::with_capacity(gains.len());
    for (i, res) in art.node_results.iter().enumerate() {
        let (supply, storage) = match (&res.supply, &res.storage) {
            (Some(s), Some(p)) => (s, p),
            _ => return Err(Failure(format!("node {i} has no supply or storage"))),
        };
        let sys = grid.models[i].closed_loop(&gains[i])?;
        nodes.push(NodeCheck {
            node: i,
            dissipative: check_dissipativity(&sys, supply)?.is_some(),
            trajectory: verify_trajectory_dissipation(&sys, supply, storage, 10_000, art.config.trial_seed(art.trial) ^ i as u64)?,
            degree_bound: res.d_max.map(|d| d >= grid.weights.degree(i)),
        });
    }
    let passed = is_stable(rho) && nodes.iter().all(|n| n.dissipative && n.trajectory && n.degree_bound.unwrap_or(true));
    let report = VerifyReport { trial: art.trial, alg: art.alg, rho, stable: is_stable(rho), nodes, passed };
    write_out(&c.out, "verify.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(if passed { Outcome::Ok } else { Outcome::Negative })
}

//! DC microgrid benchmark: DGU models, random networks, Monte-Carlo
//! feasibility campaigns and closed-loop simulation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    algorithm_data_bounds, node_rng, simulate_network, Excitation, ExperimentSpec, NetworkExperiment, NoiseBound,
    SubsystemModel,
};
use crate::error::{Error, Result};
use crate::network::{assemble_closed_loop, diffusive_interconnection, is_stable, DiffusiveWeights, InterconnectionMatrix, Topology};
use crate::synth::{algorithm1_node, algorithm2_node, SynthesisResult};

/// Electrical parameters of one distributed generation unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DguParams {
    pub r: f64,
    pub l: f64,
    pub c: f64,
    pub y: f64,
    pub ts: f64,
}

impl DguParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("R", self.r), ("L", self.l), ("C", self.c), ("Y", self.y), ("Ts", self.ts)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("DGU parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sampled DGU with state `[V, I]`, control input and the coupling current
/// as interconnection input. `euler_a22` uses `1 - Ts R / L` for `A(2,2)`
/// instead of `-Ts R / L`.
pub fn dgu_model(p: &DguParams, euler_a22: bool) -> Result<SubsystemModel> {
    p.validate()?;
    let a22 = if euler_a22 { 1.0 - p.ts * p.r / p.l } else { -p.ts * p.r / p.l };
    SubsystemModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0 - p.ts * p.y / p.c, p.ts / p.c, -p.ts / p.l, a22]),
        DMatrix::from_row_slice(2, 1, &[0.0, p.ts / p.l]),
        DMatrix::from_row_slice(2, 1, &[p.ts / p.c, 0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
    )
}

/// `center ± spread`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub center: f64,
    pub spread: f64,
}

impl Interval {
    pub const fn new(center: f64, spread: f64) -> Self {
        Interval { center, spread }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.spread == 0.0 {
            self.center
        } else {
            rng.gen_range((self.center - self.spread)..=(self.center + self.spread))
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.spread >= 0.0) || !(self.center - self.spread > 0.0) {
            return Err(Error::invalid(format!("{name} range must stay positive")));
        }
        Ok(())
    }
}

/// Parameter ranges of the generated units and lines (SI units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DguRanges {
    pub r: Interval,
    pub l: Interval,
    pub c: Interval,
    pub y: Interval,
    pub line_r: Interval,
}

impl Default for DguRanges {
    fn default() -> Self {
        DguRanges {
            r: Interval::new(0.2, 0.1),
            l: Interval::new(5e-4, 5e-5),
            c: Interval::new(1e-2, 1e-3),
            y: Interval::new(0.2, 0.02),
            line_r: Interval::new(4.0, 0.4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmChoice {
    Alg1,
    Alg2,
    Both,
}

impl AlgorithmChoice {
    fn list(self) -> Vec<Algorithm> {
        match self {
            AlgorithmChoice::Alg1 => vec![Algorithm::Alg1],
            AlgorithmChoice::Alg2 => vec![Algorithm::Alg2],
            AlgorithmChoice::Both => vec![Algorithm::Alg1, Algorithm::Alg2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Alg1,
    Alg2,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg2 => "alg2",
        })
    }
}

/// Campaign settings; mirrors the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub k: usize,
    pub extra_edges: usize,
    #[serde(rename = "N")]
    pub n_samples: usize,
    #[serde(rename = "N_tilde")]
    pub n_tilde: usize,
    pub eps_l: f64,
    pub eps_g: f64,
    pub alpha_param: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub algorithm: AlgorithmChoice,
    pub ts: f64,
    pub euler_a22: bool,
    pub ranges: DguRanges,
    pub excitation: Excitation,
    /// Stop synthesizing a trial's nodes after the first rejection.
    pub early_stop: bool,
    /// Keep every per-node result in the report (needed for post-checks).
    pub keep_node_results: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            k: 50,
            extra_edges: 20,
            n_samples: 50,
            n_tilde: 50,
            eps_l: 0.001,
            eps_g: 0.001,
            alpha_param: 1.0,
            trials: 100,
            master_seed: 0,
            algorithm: AlgorithmChoice::Both,
            ts: 2.4e-3,
            euler_a22: false,
            ranges: DguRanges::default(),
            excitation: Excitation::default(),
            early_stop: true,
            keep_node_results: false,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::invalid("a ring needs k >= 3"));
        }
        if self.trials == 0 || self.n_samples == 0 || self.n_tilde == 0 {
            return Err(Error::invalid("trials and data lengths must be positive"));
        }
        let max_extra = self.k * (self.k - 3) / 2;
        if self.extra_edges > max_extra {
            return Err(Error::invalid(format!(
                "{} extra edges requested, at most {max_extra} fit beside a ring of {}",
                self.extra_edges, self.k
            )));
        }
        for (name, v) in [("eps_l", self.eps_l), ("eps_g", self.eps_g)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if !(self.ts > 0.0) || !self.alpha_param.is_finite() {
            return Err(Error::invalid("Ts must be positive and alpha finite"));
        }
        self.ranges.r.validate("R")?;
        self.ranges.l.validate("L")?;
        self.ranges.c.validate("C")?;
        self.ranges.y.validate("Y")?;
        self.ranges.line_r.validate("line R")?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of one trial, derived from the master seed.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        splitmix64(self.master_seed ^ splitmix64(trial as u64 + 1))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One random microgrid instance.
#[derive(Clone, Debug)]
pub struct Microgrid {
    pub params: Vec<DguParams>,
    pub models: Vec<SubsystemModel>,
    pub weights: DiffusiveWeights,
    pub topology: Topology,
}

impl Microgrid {
    pub fn interconnection(&self) -> Result<InterconnectionMatrix> {
        diffusive_interconnection(&self.weights, &self.topology)
    }
}

/// Ring plus `extra_edges` distinct random chords, unit and line parameters
/// uniform over their ranges. Deterministic in `(master_seed, trial)`.
pub fn generate_microgrid(cfg: &CampaignConfig, trial: usize) -> Result<Microgrid> {
    cfg.validate()?;
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trial_seed(trial));
    let params: Vec<DguParams> = (0..k)
        .map(|_| DguParams {
            r: cfg.ranges.r.sample(&mut rng),
            l: cfg.ranges.l.sample(&mut rng),
            c: cfg.ranges.c.sample(&mut rng),
            y: cfg.ranges.y.sample(&mut rng),
            ts: cfg.ts,
        })
        .collect();
    let models = params.iter().map(|p| dgu_model(p, cfg.euler_a22)).collect::<Result<Vec<_>>>()?;

    let ring: Vec<(usize, usize)> = (0..k).map(|i| ordered(i, (i + 1) % k)).collect();
    let candidates: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .filter(|e| !ring.contains(e))
        .collect();
    let mut edges = ring;
    for idx in sample_indices(&mut rng, candidates.len(), cfg.extra_edges) {
        edges.push(candidates[idx]);
    }
    edges.sort_unstable();
    let topology = Topology::from_edges(k, &edges)?;
    let mut w = DMatrix::zeros(k, k);
    for (i, j) in edges {
        let a = 1.0 / cfg.ranges.line_r.sample(&mut rng);
        w[(i, j)] = a;
        w[(j, i)] = a;
    }
    Ok(Microgrid { params, models, weights: DiffusiveWeights::new(w)?, topology })
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Per-trial, per-algorithm outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub alg: Algorithm,
    pub feasible: bool,
    /// Spectral radius of the true closed loop, for feasible instances.
    pub rho: Option<f64>,
    pub mean_node_ms: f64,
    pub nodes_run: usize,
    pub first_failure: Option<String>,
    #[serde(skip)]
    pub node_results: Vec<SynthesisResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub alg: Algorithm,
    pub trials: usize,
    pub feasible: usize,
    pub feasible_pct: f64,
    pub mean_node_ms: f64,
    /// Feasible instances whose closed loop is not certified stable.
    pub unstable_feasible: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<AlgorithmSummary>,
    pub csv_path: Option<PathBuf>,
}

impl CampaignReport {
    pub fn summary(&self, alg: Algorithm) -> Option<&AlgorithmSummary> {
        self.summaries.iter().find(|s| s.alg == alg)
    }

    pub fn feasible_pct(&self, alg: Algorithm) -> Option<f64> {
        self.summary(alg).map(|s| s.feasible_pct)
    }
}

#[derive(Serialize)]
struct CsvRow {
    trial: usize,
    seed: u64,
    alg: String,
    feasible: bool,
    rho: Option<f64>,
    mean_node_ms: f64,
}

/// Runs one algorithm on every node of an experiment.
pub fn synthesize_network(
    alg: Algorithm,
    experiment: &NetworkExperiment,
    cfg: &CampaignConfig,
) -> Result<(Vec<SynthesisResult>, bool, Option<String>)> {
    let mut results = Vec::with_capacity(experiment.local.len());
    let mut all_ok = true;
    let mut failure = None;
    for (i, (local, inter)) in experiment.local.iter().zip(&experiment.interconnection).enumerate() {
        let (phi, psi) = algorithm_data_bounds(local, inter, cfg.eps_l, cfg.eps_g)?;
        let res = match alg {
            Algorithm::Alg1 => algorithm1_node(local, inter, &phi, &psi),
            Algorithm::Alg2 => algorithm2_node(local, inter, &phi, &psi, cfg.alpha_param),
        };
        let res = res.unwrap_or_else(|e| SynthesisResult::from_error(&e));
        if !res.accepted() {
            all_ok = false;
            if failure.is_none() {
                let why = res.message.clone().unwrap_or_else(|| {
                    if res.status == crate::synth::SynthStatus::Feasible {
                        "inertia condition violated".to_string()
                    } else {
                        format!("{:?} ({})", res.status, res.engine_status)
                    }
                });
                failure = Some(format!("node {i}: {why}"));
            }
        }
        results.push(res);
        if !all_ok && cfg.early_stop {
            break;
        }
    }
    Ok((results, all_ok, failure))
}

fn run_trial(cfg: &CampaignConfig, trial: usize) -> Result<Vec<TrialRecord>> {
    let grid = generate_microgrid(cfg, trial)?;
    let m = grid.interconnection()?;
    let spec = ExperimentSpec {
        samples: cfg.n_samples,
        samples_tilde: cfg.n_tilde,
        eps_l: cfg.eps_l,
        eps_g: cfg.eps_g,
        excitation: cfg.excitation,
        master_seed: cfg.trial_seed(trial),
    };
    let experiment = simulate_network(&grid.models, &m, &spec)?;
    let mut out = Vec::new();
    for alg in cfg.algorithm.list() {
        let start = Instant::now();
        let (results, feasible, failure) = synthesize_network(alg, &experiment, cfg)?;
        let elapsed = start.elapsed().as_secs_f64();
        let nodes_run = results.len();
        let rho = if feasible {
            let gains: Vec<DMatrix<f64>> = results.iter().map(|r| r.k.clone().expect("feasible node has a gain")).collect();
            Some(assemble_closed_loop(&grid.models, &gains, &m)?.1)
        } else {
            None
        };
        out.push(TrialRecord {
            trial,
            seed: cfg.trial_seed(trial),
            alg,
            feasible,
            rho,
            mean_node_ms: 1e3 * elapsed / nodes_run.max(1) as f64,
            nodes_run,
            first_failure: failure,
            node_results: if cfg.keep_node_results { results } else { Vec::new() },
        });
    }
    Ok(out)
}

/// Runs every trial (in parallel), aggregates, and writes `campaign.csv`
/// under `out_dir` when given.
pub fn run_campaign(cfg: &CampaignConfig, out_dir: Option<&Path>) -> Result<CampaignReport> {
    cfg.validate()?;
    let per_trial: Vec<Result<Vec<TrialRecord>>> = (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect();
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    let summaries = cfg
        .algorithm
        .list()
        .into_iter()
        .map(|alg| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.alg == alg).collect();
            let feasible = rows.iter().filter(|r| r.feasible).count();
            let nodes: usize = rows.iter().map(|r| r.nodes_run).sum();
            let ms: f64 = rows.iter().map(|r| r.mean_node_ms * r.nodes_run as f64).sum();
            AlgorithmSummary {
                alg,
                trials: rows.len(),
                feasible,
                feasible_pct: 100.0 * feasible as f64 / rows.len().max(1) as f64,
                mean_node_ms: ms / nodes.max(1) as f64,
                unstable_feasible: rows.iter().filter(|r| r.feasible && !r.rho.map_or(false, is_stable)).count(),
            }
        })
        .collect();

    let csv_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("campaign.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for r in &records {
                w.serialize(CsvRow {
                    trial: r.trial,
                    seed: r.seed,
                    alg: r.alg.to_string(),
                    feasible: r.feasible,
                    rho: r.rho,
                    mean_node_ms: r.mean_node_ms,
                })?;
            }
            w.flush()?;
            Some(path)
        }
        None => None,
    };
    Ok(CampaignReport { config: cfg.clone(), records, summaries, csv_path })
}

/// Process and coupling noise used by [`simulate_closed_loop`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum NoiseMode {
    Off,
    On { eps_l: f64, eps_g: f64, seed: u64 },
}

/// Stacked state trajectory, one column per time step (`T + 1` columns).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub state_dims: Vec<usize>,
    /// Set if the state norm exceeded `1e6`; the run stops there.
    pub diverged: bool,
}

impl Trajectory {
    pub fn norm_at(&self, t: usize) -> f64 {
        self.states.column(t).norm()
    }

    pub fn final_norm(&self) -> f64 {
        self.norm_at(self.states.ncols() - 1)
    }

    /// Writes `t,node,V,I` rows (first two states of every node).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "node", "V", "I"])?;
        for t in 0..self.states.ncols() {
            let mut off = 0;
            for (i, &n) in self.state_dims.iter().enumerate() {
                let v = self.states[(off, t)];
                let c = if n > 1 { self.states[(off + 1, t)] } else { f64::NAN };
                w.write_record([t.to_string(), i.to_string(), v.to_string(), c.to_string()])?;
                off += n;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Iterates the interconnected network under `u_i = K_i x_i` for `steps`
/// steps from the stacked initial state `x0`.
pub fn simulate_closed_loop(
    models: &[SubsystemModel],
    gains: &[DMatrix<f64>],
    m: &InterconnectionMatrix,
    x0: &DVector<f64>,
    steps: usize,
    noise: NoiseMode,
) -> Result<Trajectory> {
    let (acl, _) = assemble_closed_loop(models, gains, m)?;
    let state_dims: Vec<usize> = models.iter().map(|md| md.n()).collect();
    let n_total: usize = state_dims.iter().sum();
    if x0.len() != n_total {
        return Err(Error::invalid(format!("initial state has {} entries, expected {n_total}", x0.len())));
    }
    let mut states = DMatrix::zeros(n_total, steps + 1);
    states.set_column(0, x0);
    let mut x = x0.clone();
    let mut diverged = false;
    let noisy = match noise {
        NoiseMode::Off => None,
        NoiseMode::On { eps_l, eps_g, seed } => Some((eps_l, eps_g, seed)),
    };
    let mut rngs: Vec<(ChaCha8Rng, ChaCha8Rng)> = match noisy {
        Some((_, _, seed)) => (0..models.len()).map(|i| (node_rng(seed, i, 11), node_rng(seed, i, 12))).collect(),
        None => Vec::new(),
    };
    let offsets = m.topology().offsets();
    for t in 0..steps {
        x = match noisy {
            None => &acl * &x,
            Some((eps_l, eps_g, _)) => {
                let mut y = DVector::zeros(offsets[models.len()]);
                let mut w1s = Vec::with_capacity(models.len());
                let mut off = 0;
                for (i, md) in models.iter().enumerate() {
                    let (n, p) = (md.n(), md.p());
                    let wl = NoiseBound::per_sample_ball(n + p, 1, eps_l)?;
                    let w = crate::datagen::sample_with_rng(&wl, &mut rngs[i].0)?;
                    let xi = x.rows(off, n);
                    let yi = &md.c * xi + &md.d1 * (&gains[i] * xi) + w.view((n, 0), (p, 1));
                    y.rows_mut(offsets[i], p).copy_from(&yi);
                    w1s.push(w.view((0, 0), (n, 1)).into_owned());
                    off += n;
                }
                let mut v = m.matrix() * &y;
                for (i, md) in models.iter().enumerate() {
                    let wg = NoiseBound::per_sample_ball(md.p(), 1, eps_g)?;
                    let xi = crate::datagen::sample_with_rng(&wg, &mut rngs[i].1)?;
                    let mut vi = v.rows_mut(offsets[i], md.p());
                    vi += xi.column(0);
                }
                let mut next = DVector::zeros(n_total);
                let mut off = 0;
                for (i, md) in models.iter().enumerate() {
                    let n = md.n();
                    let xi = x.rows(off, n);
                    let vi = v.rows(offsets[i], md.p());
                    let xn = (&md.a + &md.b1 * &gains[i]) * xi + &md.b2 * vi + &w1s[i];
                    next.rows_mut(off, n).copy_from(&xn);
                    off += n;
                }
                next
            }
        };
        states.set_column(t + 1, &x);
        if !(x.norm() <= 1e6) {
            diverged = true;
            states = states.columns(0, t + 2).into_owned();
            break;
        }
    }
    Ok(Trajectory { states, state_dims, diverged })
}

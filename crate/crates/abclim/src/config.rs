//! Experiment configuration: schema-validated JSON in, `results.csv` plus
//! `meta.json` out. Unknown keys are rejected, stochastic engines demand an
//! explicit seed, and identical configs produce byte-identical outputs.
//! `meta.json` embeds the fully resolved config, so re-ingesting it
//! reproduces the run.

use crate::abc::{AbcParam, NamedParam};
use crate::experiments::{self, ToyDepth};
use crate::kernelgd;
use crate::linlim::{self, LinHyper, LinearModel};
use crate::mlp::{Activation, FiniteMlp, Loss, Probes, ScalarRoutine, TrainRoutine};
use crate::particle::{self, Depth2Mode};
use crate::tasks;
use crate::util::Mat;
use crate::wick::{self, WickCaps};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

/// Parametrization selector: a named column or explicit exponents, with an
/// optional learning-rate exponent override.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_depth")]
    pub l: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abc: Option<AbcParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<String>,
}

fn default_depth() -> usize {
    2
}

impl ParamSpec {
    pub fn named(name: &str, l: usize) -> Self {
        ParamSpec { name: Some(name.to_string()), l, abc: None, c: None }
    }

    pub fn resolve(&self) -> Result<AbcParam> {
        let mut p = match (&self.abc, &self.name) {
            (Some(p), _) => p.clone(),
            (None, Some(name)) => AbcParam::named(NamedParam::from_str(name)?, self.l)?,
            (None, None) => {
                return Err(Error::Config("param needs either `name` or `abc`".into()))
            }
        };
        if let Some(c) = &self.c {
            p = p.with_c(crate::abc::rat_from_str(c)?);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSel {
    One,
    TwoDecoupled,
    Two,
}

impl DepthSel {
    fn toy(self) -> ToyDepth {
        match self {
            DepthSel::One => ToyDepth::One,
            DepthSel::TwoDecoupled => ToyDepth::TwoDecoupled,
            DepthSel::Two => ToyDepth::TwoCoupled,
        }
    }
}

/// Scalar training data: fresh random signs per step, or an explicit list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSpec {
    Signs { steps: usize },
    Pairs(Vec<(f64, f64)>),
}

impl DataSpec {
    fn resolve(&self, seed: u64) -> Vec<(f64, f64)> {
        match self {
            DataSpec::Signs { steps } => experiments::random_sign_data(seed, *steps),
            DataSpec::Pairs(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ClassifyConfig {
    pub param: ParamSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainFiniteConfig {
    pub seed: Option<u64>,
    pub param: ParamSpec,
    pub n: usize,
    pub phi: Activation,
    pub eta: f64,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    pub steps: usize,
    pub data: DataSpec,
    #[serde(default)]
    pub probes: Vec<f64>,
    #[serde(default)]
    pub decoupled_backprop: bool,
    #[serde(default)]
    pub coordinate_sizes: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

fn default_loss() -> Loss {
    Loss::Mse
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LimitLinearConfig {
    pub d: usize,
    pub d_out: usize,
    pub eta: f64,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    pub steps: usize,
    pub data: Vec<(Vec<f64>, Vec<f64>)>,
    pub probes: Vec<Vec<f64>>,
    /// sigma_u, sigma_v, alpha, clip, decay for the coefficient pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<(f64, f64, f64, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LimitParticleConfig {
    pub seed: Option<u64>,
    pub depth: DepthSel,
    pub phi: Activation,
    pub eta: f64,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    pub steps: usize,
    pub data: DataSpec,
    #[serde(default)]
    pub probes: Vec<f64>,
    #[serde(default = "default_particles")]
    pub m: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_particles() -> usize {
    1 << 20
}

fn default_blocks() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LimitExactConfig {
    pub seed: Option<u64>,
    pub depth: DepthSel,
    pub phi: Activation,
    pub eta: f64,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    pub steps: usize,
    pub data: DataSpec,
    #[serde(default)]
    pub probes: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct KernelGdConfig {
    pub param: ParamSpec,
    pub phi: Activation,
    pub inputs: Vec<Vec<f64>>,
    /// (input index, target) per step.
    pub pairs: Vec<(usize, f64)>,
    pub eta: f64,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    pub steps: usize,
    #[serde(default)]
    pub f0: Vec<f64>,
    #[serde(default = "default_nodes")]
    pub quad_nodes: usize,
}

fn default_nodes() -> usize {
    kernelgd::DEFAULT_QUAD_NODES
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompareConfig {
    pub seed: Option<u64>,
    pub phi: Activation,
    pub depth: DepthSel,
    pub widths: Vec<usize>,
    pub steps: usize,
    pub eta: f64,
    #[serde(default = "default_compare_seeds")]
    pub seeds: u64,
    #[serde(default = "default_particles")]
    pub m: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_compare_seeds() -> u64 {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MamlModelSel {
    Finite { n: usize },
    Coeff,
    KernelLinear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct MamlConfigFile {
    pub seed: Option<u64>,
    pub model: MamlModelSel,
    pub d: usize,
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub eps: f64,
    pub eta: f64,
    #[serde(default = "default_task_batch")]
    pub task_batch: usize,
    #[serde(default = "default_clip")]
    pub clip_g: f64,
    #[serde(default = "default_adapt_steps")]
    pub adapt_steps: usize,
    #[serde(default = "default_sigma_u")]
    pub sigma_u: f64,
    #[serde(default = "default_sigma_v")]
    pub sigma_v: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_noise() -> f64 {
    0.3
}
fn default_task_batch() -> usize {
    32
}
fn default_clip() -> f64 {
    0.5
}
fn default_adapt_steps() -> usize {
    1
}
fn default_sigma_u() -> f64 {
    1.0
}
fn default_sigma_v() -> f64 {
    0.25
}
fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSpec {
    Planted { families: usize, roles: usize, sentences: usize, sentence_len: usize, quads: usize },
    File { path: String, min_freq: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct W2vConfigFile {
    pub seed: Option<u64>,
    /// None runs the coefficient-space limit; Some(n) a finite width-n table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub corpus: CorpusSpec,
    pub steps: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_w2v_eta")]
    pub eta: f64,
    #[serde(default = "default_w2v_gamma")]
    pub gamma: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Optional analogy file: four whitespace-separated tokens per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analogies: Option<String>,
    /// Restrict the analogy argmax to these vocabulary indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<usize>>,
}

fn default_window() -> usize {
    4
}
fn default_w2v_eta() -> f64 {
    0.05
}
fn default_w2v_gamma() -> f64 {
    0.001
}
fn default_eval_every() -> usize {
    5000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TransferConfig {
    pub seed: Option<u64>,
    pub param: ParamSpec,
    pub phi: Activation,
    pub widths: Vec<usize>,
    pub t_pre: usize,
    pub t_fine: usize,
    pub eta: f64,
    pub d: usize,
    #[serde(default = "default_transfer_seeds")]
    pub seeds: u64,
    /// Allow feature-learning parametrizations (control runs).
    #[serde(default)]
    pub allow_feature_learning: bool,
}

fn default_transfer_seeds() -> u64 {
    5
}

/// One experiment, tagged by command.
#[derive(Debug, Clone)]
pub enum ExperimentConfig {
    Classify(ClassifyConfig),
    TrainFinite(TrainFiniteConfig),
    LimitLinear(LimitLinearConfig),
    LimitParticle(LimitParticleConfig),
    LimitExact(LimitExactConfig),
    KernelGd(KernelGdConfig),
    Compare(CompareConfig),
    Maml(MamlConfigFile),
    W2v(W2vConfigFile),
    Transfer(TransferConfig),
}

impl ExperimentConfig {
    pub fn command(&self) -> &'static str {
        match self {
            ExperimentConfig::Classify(_) => "classify",
            ExperimentConfig::TrainFinite(_) => "train-finite",
            ExperimentConfig::LimitLinear(_) => "limit-linear",
            ExperimentConfig::LimitParticle(_) => "limit-particle",
            ExperimentConfig::LimitExact(_) => "limit-exact",
            ExperimentConfig::KernelGd(_) => "kernel-gd",
            ExperimentConfig::Compare(_) => "compare",
            ExperimentConfig::Maml(_) => "maml",
            ExperimentConfig::W2v(_) => "w2v",
            ExperimentConfig::Transfer(_) => "transfer",
        }
    }

    fn body(&self) -> serde_json::Value {
        match self {
            ExperimentConfig::Classify(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::TrainFinite(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::LimitLinear(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::LimitParticle(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::LimitExact(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::KernelGd(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::Compare(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::Maml(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::W2v(c) => serde_json::to_value(c).unwrap(),
            ExperimentConfig::Transfer(c) => serde_json::to_value(c).unwrap(),
        }
    }

    /// Seed requirement: every stochastic engine must be seeded explicitly.
    fn required_seed(&self) -> Result<Option<u64>> {
        let need = |seed: &Option<u64>, what: &str| -> Result<Option<u64>> {
            match seed {
                Some(s) => Ok(Some(*s)),
                None => Err(Error::Config(format!(
                    "`seed` is required for the stochastic `{what}` command"
                ))),
            }
        };
        match self {
            ExperimentConfig::Classify(_) | ExperimentConfig::LimitLinear(_) => Ok(None),
            ExperimentConfig::TrainFinite(c) => need(&c.seed, "train-finite"),
            ExperimentConfig::LimitParticle(c) => need(&c.seed, "limit-particle"),
            ExperimentConfig::LimitExact(c) => Ok(c.seed),
            ExperimentConfig::KernelGd(_) => Ok(None),
            ExperimentConfig::Compare(c) => need(&c.seed, "compare"),
            ExperimentConfig::Maml(c) => need(&c.seed, "maml"),
            ExperimentConfig::W2v(c) => need(&c.seed, "w2v"),
            ExperimentConfig::Transfer(c) => need(&c.seed, "transfer"),
        }
    }
}

/// Parse a config JSON value: either `{"command": ..., ...fields}` or a
/// `meta.json` wrapper `{"version": ..., "command": ..., "config": {...}}`.
pub fn parse_config(value: serde_json::Value) -> Result<ExperimentConfig> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    let (command, body) = if let Some(inner) = obj.get("config") {
        let cmd = obj
            .get("command")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("meta wrapper needs `command`".into()))?;
        (cmd.to_string(), inner.clone())
    } else {
        let cmd = obj
            .get("command")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("config needs a `command` field".into()))?
            .to_string();
        let mut body = obj.clone();
        body.remove("command");
        (cmd, serde_json::Value::Object(body))
    };
    let cfg = match command.as_str() {
        "classify" => ExperimentConfig::Classify(from_value(body)?),
        "train-finite" => ExperimentConfig::TrainFinite(from_value(body)?),
        "limit-linear" => ExperimentConfig::LimitLinear(from_value(body)?),
        "limit-particle" => ExperimentConfig::LimitParticle(from_value(body)?),
        "limit-exact" => ExperimentConfig::LimitExact(from_value(body)?),
        "kernel-gd" => ExperimentConfig::KernelGd(from_value(body)?),
        "compare" => ExperimentConfig::Compare(from_value(body)?),
        "maml" => ExperimentConfig::Maml(from_value(body)?),
        "w2v" => ExperimentConfig::W2v(from_value(body)?),
        "transfer" => ExperimentConfig::Transfer(from_value(body)?),
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    Ok(cfg)
}

fn from_value<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Run results: the artifact files as strings, ready to be written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results_csv: String,
    pub meta_json: String,
    pub summary: String,
    /// Additional named artifacts (e.g. kernel tables).
    pub extra_files: Vec<(String, String)>,
}

/// Execute a config and write `results.csv`, `meta.json`, and any extra
/// artifacts under `out_dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let out = run(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.csv"), &out.results_csv)?;
    std::fs::write(out_dir.join("meta.json"), &out.meta_json)?;
    for (name, body) in &out.extra_files {
        std::fs::write(out_dir.join(name), body)?;
    }
    Ok(out)
}

/// Execute a config.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.required_seed()?;
    let mut extra_files = Vec::new();
    let results_csv = match cfg {
        ExperimentConfig::Classify(c) => run_classify(c)?,
        ExperimentConfig::TrainFinite(c) => run_train_finite(c)?,
        ExperimentConfig::LimitLinear(c) => run_limit_linear(c)?,
        ExperimentConfig::LimitParticle(c) => run_limit_particle(c)?,
        ExperimentConfig::LimitExact(c) => run_limit_exact(c)?,
        ExperimentConfig::KernelGd(c) => run_kernel_gd(c, &mut extra_files)?,
        ExperimentConfig::Compare(c) => run_compare(c)?,
        ExperimentConfig::Maml(c) => run_maml(c)?,
        ExperimentConfig::W2v(c) => run_w2v(c)?,
        ExperimentConfig::Transfer(c) => run_transfer(c)?,
    };
    if results_csv.lines().count() <= 1 {
        return Err(Error::Config("run produced no results".into()));
    }
    let meta = serde_json::json!({
        "command": cfg.command(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.body(),
    });
    let summary = format!(
        "{}: {} result rows",
        cfg.command(),
        results_csv.lines().count().saturating_sub(1)
    );
    Ok(RunOutput {
        results_csv,
        meta_json: serde_json::to_string_pretty(&meta).unwrap(),
        summary,
        extra_files,
    })
}

/// Pretty-printed JSON with the crate's stable field order.
pub fn emit_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn run_classify(c: &ClassifyConfig) -> Result<String> {
    let p = c.param.resolve()?;
    let cls = p.classify();
    let mut csv = String::from(
        "r,regime,init_stable,stable,nontrivial,nngp_limit,last_layer_updated_maximally,last_layer_initialized_maximally,min_stable_c,r_per_layer,note\n",
    );
    let min_c = p
        .min_stable_c()
        .map(crate::abc::rat_to_string)
        .unwrap_or_else(|| "none".into());
    csv.push_str(&format!(
        "{},{:?},{},{},{},{},{},{},{},{},\"{}\"\n",
        crate::abc::rat_to_string(cls.r),
        cls.regime,
        cls.init_stable,
        cls.stable,
        cls.nontrivial,
        cls.nngp_limit,
        cls.last_layer_updated_maximally,
        cls.last_layer_initialized_maximally,
        min_c,
        cls.r_per_layer
            .iter()
            .map(|v| crate::abc::rat_to_string(*v))
            .collect::<Vec<_>>()
            .join(";"),
        crate::abc::CLASSIFICATION_NOTE,
    ));
    Ok(csv)
}

fn scalar_routine(eta: f64, loss: Loss, data: &DataSpec, seed: u64) -> ScalarRoutine {
    ScalarRoutine::new(eta, data.resolve(seed), loss)
}

fn run_train_finite(c: &TrainFiniteConfig) -> Result<String> {
    let seed = c.seed.unwrap();
    let param = c.param.resolve()?;
    let routine = scalar_routine(c.eta, c.loss, &c.data, seed);
    let mut net = FiniteMlp::init(&param, c.n, 1, 1, c.phi, seed)?;
    if c.decoupled_backprop {
        net.enable_decoupled_backprop(seed ^ 0x5eed);
    }
    let tr = TrainRoutine::new(
        c.eta,
        routine.data.iter().map(|(x, y)| (vec![*x], vec![*y])).collect(),
        c.loss,
    );
    let probes = Probes {
        inputs: c.probes.iter().map(|p| vec![*p]).collect(),
        feature_kernel_pairs: Vec::new(),
        coordinate_sizes: c.coordinate_sizes,
    };
    let traj = net.train(&tr, c.steps, &probes)?;
    if let Some(path) = &c.checkpoint {
        let mut buf = Vec::new();
        net.save_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
    }
    Ok(traj.to_csv())
}

fn run_limit_linear(c: &LimitLinearConfig) -> Result<String> {
    let hyper = match c.hyper {
        Some((su, sv, alpha, clip, decay)) => LinHyper {
            sigma_u: su,
            sigma_v: sv,
            alpha,
            eta: c.eta,
            clip_g: clip,
            decay_gamma: decay,
        },
        None => LinHyper::plain(c.eta),
    };
    let mut net = linlim::init_coeff(c.d, c.d_out, hyper)?;
    let probe_mat = Mat::from_rows(&c.probes);
    let mut csv = String::from("t");
    for p in 0..c.probes.len() {
        for o in 0..c.d_out {
            csv.push_str(&format!(",f_probe{p}_{o}"));
        }
    }
    csv.push('\n');
    for t in 0..=c.steps {
        let f = net.forward_batch(&probe_mat)?;
        let mut row = format!("{t}");
        for p in 0..c.probes.len() {
            for o in 0..c.d_out {
                row.push_str(&format!(",{}", f.at(p, o)));
            }
        }
        csv.push_str(&row);
        csv.push('\n');
        if t < c.steps {
            let (xi, y) = &c.data[t % c.data.len()];
            net.sgd_step(
                &Mat::from_rows(&[xi.clone()]),
                &Mat::from_rows(&[y.clone()]),
                c.loss,
            )?;
        }
    }
    Ok(csv)
}

fn particle_csv(traj: &particle::ParticleTrajectory, probes: &[f64]) -> String {
    let mut csv = String::from("t,loss,f_train,f_stderr,chi");
    for (i, _) in probes.iter().enumerate() {
        csv.push_str(&format!(",f_probe{i},f_probe{i}_stderr"));
    }
    csv.push('\n');
    for t in 0..traj.f_train.len() {
        let chi = if t < traj.chi.len() { format!("{}", traj.chi[t]) } else { String::new() };
        let mut row = format!(
            "{t},{},{},{},{chi}",
            traj.loss[t], traj.f_train[t], traj.f_stderr[t]
        );
        for i in 0..probes.len() {
            row.push_str(&format!(",{},{}", traj.probe_logits[t][i], traj.probe_stderr[t][i]));
        }
        csv.push_str(&row);
        csv.push('\n');
    }
    csv
}

fn run_limit_particle(c: &LimitParticleConfig) -> Result<String> {
    let seed = c.seed.unwrap();
    let routine = scalar_routine(c.eta, c.loss, &c.data, seed);
    let t_records = c.steps + 1;
    let traj = match c.depth {
        DepthSel::One => run_blocked_shallow(c, seed, &routine, t_records)?,
        DepthSel::TwoDecoupled => particle::run_depth2_blocked(
            c.m,
            c.blocks,
            seed,
            Depth2Mode::Decoupled,
            c.phi,
            &routine,
            t_records,
            &c.probes,
        )?,
        DepthSel::Two => particle::run_depth2_blocked(
            c.m,
            c.blocks,
            seed,
            Depth2Mode::Coupled,
            c.phi,
            &routine,
            t_records,
            &c.probes,
        )?,
    };
    Ok(particle_csv(&traj, &c.probes))
}

fn run_blocked_shallow(
    c: &LimitParticleConfig,
    seed: u64,
    routine: &ScalarRoutine,
    t_records: usize,
) -> Result<particle::ParticleTrajectory> {
    particle::run_shallow_blocked(c.m, c.blocks, seed, c.phi, routine, t_records, &c.probes)
}

fn run_limit_exact(c: &LimitExactConfig) -> Result<String> {
    let seed = c.seed.unwrap_or(0);
    let routine = scalar_routine(c.eta, c.loss, &c.data, seed);
    let caps = WickCaps::default();
    let traj = wick::exact_run(
        c.depth.toy().exact(),
        c.phi,
        &routine,
        c.steps + 1,
        &c.probes,
        &caps,
    )?;
    let mut csv = String::from("t,loss,f_train");
    for (i, _) in c.probes.iter().enumerate() {
        csv.push_str(&format!(",f_probe{i}"));
    }
    csv.push('\n');
    for t in 0..traj.f_train.len() {
        let mut row = format!("{t},{},{}", traj.loss[t], traj.f_train[t]);
        for i in 0..c.probes.len() {
            row.push_str(&format!(",{}", traj.probe_logits[t][i]));
        }
        csv.push_str(&row);
        csv.push('\n');
    }
    Ok(csv)
}

fn run_kernel_gd(c: &KernelGdConfig, extra: &mut Vec<(String, String)>) -> Result<String> {
    let param = c.param.resolve()?;
    let table = kernelgd::limit_kernel(&param, c.phi, &c.inputs, c.quad_nodes)?;
    extra.push(("kernel.csv".into(), table.to_csv()));
    extra.push(("kernel.json".into(), emit_json(&table)?));
    let f0 = if c.f0.is_empty() { vec![0.0; c.inputs.len()] } else { c.f0.clone() };
    let traj = kernelgd::kgd_run(&table, &c.pairs, c.eta, c.loss, c.steps, &f0)?;
    let mut csv = String::from("t");
    for i in 0..c.inputs.len() {
        csv.push_str(&format!(",f_{i}"));
    }
    csv.push('\n');
    for (t, row) in traj.iter().enumerate() {
        let mut line = format!("{t}");
        for v in row {
            line.push_str(&format!(",{v}"));
        }
        csv.push_str(&line);
        csv.push('\n');
    }
    Ok(csv)
}

fn run_compare(c: &CompareConfig) -> Result<String> {
    let seed = c.seed.unwrap();
    let routine = ScalarRoutine::new(
        c.eta,
        experiments::random_sign_data(seed, c.steps.max(1)),
        Loss::Mse,
    );
    let result = experiments::toy_compare(
        c.depth.toy(),
        c.phi,
        &routine,
        c.steps,
        &c.widths,
        c.seeds,
        c.m,
        c.blocks,
    )?;
    let mut csv = String::from("width,mean_abs_loss_gap,particle_vs_exact_worst_sigma\n");
    for (n, gap) in result.widths.iter().zip(result.gaps.iter()) {
        csv.push_str(&format!("{n},{gap},{}\n", result.worst_sigma));
    }
    Ok(csv)
}

fn run_maml(c: &MamlConfigFile) -> Result<String> {
    let seed = c.seed.unwrap();
    let spec = tasks::FewShotSpec {
        d: c.d,
        n_way: c.n_way,
        k_shot: c.k_shot,
        test_per_class: 1,
        noise: c.noise,
    };
    let train = tasks::gen_fewshot(seed, &spec, c.train_tasks)?;
    let test = tasks::gen_fewshot(seed ^ 0x7e57, &spec, c.test_tasks)?;
    let cfg = tasks::MamlConfig {
        eps: c.eps,
        eta: c.eta,
        task_batch: c.task_batch,
        clip_g: c.clip_g,
        adapt_steps: c.adapt_steps,
    };
    let hyper = LinHyper {
        sigma_u: c.sigma_u,
        sigma_v: c.sigma_v,
        alpha: c.alpha,
        eta: c.eta,
        clip_g: c.clip_g,
        decay_gamma: 0.0,
    };
    let (label, acc) = match &c.model {
        MamlModelSel::Finite { n } => {
            let mut model = linlim::LinearNet::init(*n, c.d, c.n_way, hyper, seed)?;
            tasks::maml_train(&mut model, &train, &cfg)?;
            (format!("finite_{n}"), tasks::maml_meta_test(&model, &test, c.eps)?)
        }
        MamlModelSel::Coeff => {
            let mut model = linlim::init_coeff(c.d, c.n_way, hyper)?;
            tasks::maml_train(&mut model, &train, &cfg)?;
            ("coeff".to_string(), tasks::maml_meta_test(&model, &test, c.eps)?)
        }
        MamlModelSel::KernelLinear => {
            let mut model = tasks::KernelModelQ::new(
                |a: &[f64], b: &[f64]| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum(),
                c.n_way,
            );
            tasks::maml_kernel_train(&mut model, &train, &cfg)?;
            ("kernel-linear".to_string(), tasks::maml_kernel_meta_test(&mut model, &test, c.eps)?)
        }
    };
    Ok(format!("model,meta_test_accuracy\n{label},{acc}\n"))
}

fn run_w2v(c: &W2vConfigFile) -> Result<String> {
    let seed = c.seed.unwrap();
    let w2v_cfg = tasks::W2VConfig {
        window: c.window,
        eta: c.eta,
        gamma: c.gamma,
        ..Default::default()
    };
    let (corpus, quads) = match &c.corpus {
        CorpusSpec::Planted { families, roles, sentences, sentence_len, quads } => {
            let planted = tasks::gen_planted_corpus(
                seed,
                *families,
                *roles,
                *sentences,
                *sentence_len,
                *quads,
            );
            (planted.corpus, planted.quads)
        }
        CorpusSpec::File { path, min_freq } => {
            let (corpus, words) = tasks::load_corpus(Path::new(path), *min_freq)?;
            let quads = match &c.analogies {
                None => Vec::new(),
                Some(file) => load_analogies(Path::new(file), &words)?,
            };
            (corpus, quads)
        }
    };
    let mut state = match c.width {
        None => tasks::W2VState::init_coeff(corpus.vocab, w2v_cfg),
        Some(n) => tasks::W2VState::init_finite(corpus.vocab, n, w2v_cfg, seed),
    };
    let mut csv = String::from("steps,analogy_accuracy\n");
    let mut done = 0usize;
    csv.push_str(&format!(
        "0,{}\n",
        tasks::analogy_eval_with_candidates(&state, &quads, c.candidates.as_deref())
    ));
    while done < c.steps {
        let chunk = c.eval_every.min(c.steps - done);
        tasks::w2v_train(&mut state, &corpus, chunk, seed ^ 0x777)?;
        done += chunk;
        csv.push_str(&format!(
            "{done},{}\n",
            tasks::analogy_eval_with_candidates(&state, &quads, c.candidates.as_deref())
        ));
    }
    Ok(csv)
}

fn load_analogies(path: &Path, words: &[String]) -> Result<Vec<[usize; 4]>> {
    let text = std::fs::read_to_string(path)?;
    let index: std::collections::HashMap<&str, usize> =
        words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let mut out = Vec::new();
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            continue;
        }
        if let (Some(a), Some(b), Some(c), Some(d)) = (
            index.get(toks[0]),
            index.get(toks[1]),
            index.get(toks[2]),
            index.get(toks[3]),
        ) {
            out.push([*a, *b, *c, *d]);
        }
    }
    Ok(out)
}

fn run_transfer(c: &TransferConfig) -> Result<String> {
    let seed = c.seed.unwrap();
    let param = c.param.resolve()?;
    let mut rng = crate::util::rng_stream(seed, &[0x7a]);
    use rand::Rng;
    let mk_routine = |rng: &mut rand_chacha::ChaCha8Rng| {
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..8)
            .map(|_| {
                (
                    (0..c.d).map(|_| rng.gen_range(-1.0..1.0f64)).collect(),
                    vec![rng.gen_range(-1.0..1.0f64)],
                )
            })
            .collect();
        TrainRoutine::new(c.eta, data, Loss::Mse)
    };
    let routine_a = mk_routine(&mut rng);
    let routine_b = mk_routine(&mut rng);
    let probes: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..c.d).map(|_| rng.gen_range(-1.0..1.0f64)).collect())
        .collect();
    let spec = tasks::TransferSpec {
        act: c.phi,
        d: c.d,
        t_pre: c.t_pre,
        t_fine: c.t_fine,
        routine_a,
        routine_b,
        probes,
        seeds: c.seeds,
    };
    let gaps = if c.allow_feature_learning {
        tasks::transfer::transfer_gaps_unchecked(&param, &c.widths, &spec)?
    } else {
        tasks::transfer_triviality(&param, &c.widths, &spec)?
    };
    let mut csv = String::from("width,mean_max_gap\n");
    for (n, g) in gaps {
        csv.push_str(&format!("{n},{g}\n"));
    }
    Ok(csv)
}

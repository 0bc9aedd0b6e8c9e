//! Command-line entry point: classification and training-dynamics
//! experiments with CSV/JSON artifacts. Every subcommand accepts
//! `--config FILE` (a config or a previously emitted `meta.json`) in place
//! of inline flags; results land in `--out DIR` as `results.csv` plus
//! `meta.json`. `ABCLIM_THREADS` caps the worker pool.

use abclim::config::{
    parse_config, run_to_dir, ClassifyConfig, CompareConfig, DataSpec, DepthSel, ExperimentConfig,
    KernelGdConfig, LimitExactConfig, LimitLinearConfig, LimitParticleConfig, MamlConfigFile,
    MamlModelSel, ParamSpec, TrainFiniteConfig, TransferConfig, W2vConfigFile,
};
use abclim::mlp::{Activation, Loss};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "abclim",
    about = "abc-parametrization classification and infinite-width SGD dynamics",
    version
)]
struct Cli {
    /// Output directory for results.csv and meta.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON config file (may be a previously written meta.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
struct ParamArgs {
    /// Named parametrization: SP, NTP, MFP, or MUP.
    #[arg(long, default_value = "mup")]
    param: String,
    /// Hidden-layer count L.
    #[arg(long, default_value_t = 2)]
    l: usize,
    /// Learning-rate exponent override, as a rational like "1" or "-1/2".
    #[arg(long)]
    c: Option<String>,
}

impl ParamArgs {
    fn spec(&self) -> ParamSpec {
        let mut s = ParamSpec::named(&self.param, self.l);
        s.c = self.c.clone();
        s
    }
}

fn parse_phi(s: &str) -> Result<Activation, String> {
    match s.to_ascii_lowercase().as_str() {
        "identity" | "linear" => Ok(Activation::Identity),
        "quadratic" => Ok(Activation::Quadratic),
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "gelu" => Ok(Activation::Gelu { sigma: abclim::mlp::DEFAULT_GELU_SIGMA }),
        other => Err(format!("unknown activation `{other}`")),
    }
}

fn parse_depth(s: &str) -> Result<DepthSel, String> {
    match s {
        "1" | "one" => Ok(DepthSel::One),
        "2dec" | "two-decoupled" => Ok(DepthSel::TwoDecoupled),
        "2" | "two" => Ok(DepthSel::Two),
        other => Err(format!("unknown depth `{other}` (use 1, 2dec, or 2)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Classify an abc-parametrization (r, stability, regime).
    Classify {
        #[command(flatten)]
        param: ParamArgs,
    },
    /// Train a finite-width net on scalar sign data and record a trajectory.
    TrainFinite {
        #[command(flatten)]
        param: ParamArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value = "tanh", value_parser = parse_phi)]
        phi: Activation,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Probe inputs (repeatable).
        #[arg(long)]
        probe: Vec<f64>,
        #[arg(long)]
        decoupled_backprop: bool,
        #[arg(long)]
        coordinate_sizes: bool,
        /// Write a binary checkpoint of the final network.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Exact infinite-width shallow linear trajectory (coefficient space).
    LimitLinear {
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        d_out: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Monte-Carlo particle limit (depth 1, 2 decoupled, or 2).
    LimitParticle {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "1", value_parser = parse_depth)]
        depth: DepthSel,
        #[arg(long, default_value = "identity", value_parser = parse_phi)]
        phi: Activation,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 1 << 20)]
        m: usize,
        #[arg(long, default_value_t = 32)]
        blocks: usize,
        #[arg(long)]
        probe: Vec<f64>,
    },
    /// Exact polynomial-activation limit (short horizons).
    LimitExact {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "1", value_parser = parse_depth)]
        depth: DepthSel,
        #[arg(long, default_value = "identity", value_parser = parse_phi)]
        phi: Activation,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long)]
        probe: Vec<f64>,
    },
    /// Kernel gradient descent under the parametrization's limit kernel.
    KernelGd {
        #[command(flatten)]
        param: ParamArgs,
        #[arg(long, default_value = "tanh", value_parser = parse_phi)]
        phi: Activation,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Finite-vs-limit loss-gap sweep over widths (the toy verification).
    Compare {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "quadratic", value_parser = parse_phi)]
        phi: Activation,
        #[arg(long, default_value = "2", value_parser = parse_depth)]
        depth: DepthSel,
        /// Comma-separated width list.
        #[arg(long, default_value = "256,1024,4096", value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1 << 20)]
        m: usize,
    },
    /// First-order MAML on synthetic few-shot tasks.
    Maml {
        #[arg(long)]
        seed: Option<u64>,
        /// Model: "finite", "coeff", or "kernel-linear".
        #[arg(long, default_value = "coeff")]
        model: String,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        n_way: usize,
        #[arg(long, default_value_t = 1)]
        k_shot: usize,
        #[arg(long, default_value_t = 400)]
        train_tasks: usize,
        #[arg(long, default_value_t = 200)]
        test_tasks: usize,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// CBOW Word2Vec on a planted or file corpus, with analogy accuracy.
    W2v {
        #[arg(long)]
        seed: Option<u64>,
        /// Finite embedding width; omit for the coefficient-space limit.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 10)]
        families: usize,
        #[arg(long, default_value_t = 4)]
        roles: usize,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Whitespace-tokenized corpus file (overrides the planted corpus).
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long, default_value_t = 5)]
        min_freq: usize,
        /// Analogy file: four whitespace-separated tokens per line.
        #[arg(long)]
        analogies: Option<String>,
    },
    /// Transfer-triviality width sweep for a kernel-regime parametrization.
    Transfer {
        #[command(flatten)]
        param: ParamArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "tanh", value_parser = parse_phi)]
        phi: Activation,
        #[arg(long, default_value = "256,512,1024,2048,4096", value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        t_pre: usize,
        #[arg(long, default_value_t = 10)]
        t_fine: usize,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        allow_feature_learning: bool,
    },
}

fn build_config(cmd: Command) -> ExperimentConfig {
    match cmd {
        Command::Classify { param } => {
            ExperimentConfig::Classify(ClassifyConfig { param: param.spec() })
        }
        Command::TrainFinite {
            param,
            seed,
            n,
            phi,
            eta,
            steps,
            probe,
            decoupled_backprop,
            coordinate_sizes,
            checkpoint,
        } => ExperimentConfig::TrainFinite(TrainFiniteConfig {
            seed,
            param: param.spec(),
            n,
            phi,
            eta,
            loss: Loss::Mse,
            steps,
            data: DataSpec::Signs { steps },
            probes: probe,
            decoupled_backprop,
            coordinate_sizes,
            checkpoint,
        }),
        Command::LimitLinear { d, d_out, eta, steps } => {
            let data = vec![(vec![1.0; d], {
                let mut y = vec![0.0; d_out];
                y[0] = 1.0;
                y
            })];
            let mut probes: Vec<Vec<f64>> = Vec::new();
            for i in 0..d {
                let mut p = vec![0.0; d];
                p[i] = 1.0;
                probes.push(p);
            }
            ExperimentConfig::LimitLinear(LimitLinearConfig {
                d,
                d_out,
                eta,
                loss: Loss::Mse,
                steps,
                data,
                probes,
                hyper: None,
            })
        }
        Command::LimitParticle { seed, depth, phi, eta, steps, m, blocks, probe } => {
            ExperimentConfig::LimitParticle(LimitParticleConfig {
                seed,
                depth,
                phi,
                eta,
                loss: Loss::Mse,
                steps,
                data: DataSpec::Signs { steps: steps.max(1) },
                probes: probe,
                m,
                blocks,
            })
        }
        Command::LimitExact { seed, depth, phi, eta, steps, probe } => {
            ExperimentConfig::LimitExact(LimitExactConfig {
                seed,
                depth,
                phi,
                eta,
                loss: Loss::Mse,
                steps,
                data: DataSpec::Signs { steps: steps.max(1) },
                probes: probe,
            })
        }
        Command::KernelGd { param, phi, eta, steps } => {
            ExperimentConfig::KernelGd(KernelGdConfig {
                param: param.spec(),
                phi,
                inputs: vec![vec![1.0], vec![-0.6], vec![0.3]],
                pairs: vec![(0, 1.0), (1, -0.5)],
                eta,
                loss: Loss::Mse,
                steps,
                f0: Vec::new(),
                quad_nodes: abclim::kernelgd::DEFAULT_QUAD_NODES,
            })
        }
        Command::Compare { seed, phi, depth, widths, steps, eta, seeds, m } => {
            ExperimentConfig::Compare(CompareConfig {
                seed,
                phi,
                depth,
                widths,
                steps,
                eta,
                seeds,
                m,
                blocks: 32,
            })
        }
        Command::Maml {
            seed,
            model,
            n,
            d,
            n_way,
            k_shot,
            train_tasks,
            test_tasks,
            eps,
            eta,
        } => {
            let model = match model.as_str() {
                "coeff" => MamlModelSel::Coeff,
                "kernel-linear" => MamlModelSel::KernelLinear,
                _ => MamlModelSel::Finite { n },
            };
            ExperimentConfig::Maml(MamlConfigFile {
                seed,
                model,
                d,
                n_way,
                k_shot,
                noise: 0.3,
                train_tasks,
                test_tasks,
                eps,
                eta,
                task_batch: 32,
                clip_g: 0.5,
                adapt_steps: 1,
                sigma_u: 1.0,
                sigma_v: 0.25,
                alpha: 1.0,
            })
        }
        Command::W2v {
            seed,
            width,
            families,
            roles,
            steps,
            eta,
            gamma,
            corpus,
            min_freq,
            analogies,
        } => {
            let corpus = match corpus {
                Some(path) => abclim::config::CorpusSpec::File { path, min_freq },
                None => abclim::config::CorpusSpec::Planted {
                    families,
                    roles,
                    sentences: 3000,
                    sentence_len: 12,
                    quads: 300,
                },
            };
            ExperimentConfig::W2v(W2vConfigFile {
                seed,
                width,
                corpus,
                steps,
                window: 4,
                eta,
                gamma,
                eval_every: 5000,
                analogies,
                candidates: None,
            })
        }
        Command::Transfer {
            param,
            seed,
            phi,
            widths,
            t_pre,
            t_fine,
            eta,
            d,
            seeds,
            allow_feature_learning,
        } => ExperimentConfig::Transfer(TransferConfig {
            seed,
            param: param.spec(),
            phi,
            widths,
            t_pre,
            t_fine,
            eta,
            d,
            seeds,
            allow_feature_learning,
        }),
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ABCLIM_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
    let cli = Cli::parse();
    let cfg = match (&cli.config, cli.command) {
        (Some(path), _) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", path.display());
                    return ExitCode::FAILURE;
                }
            };
            let value: serde_json::Value = match serde_json::from_str(&text) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {} is not valid JSON: {e}", path.display());
                    return ExitCode::FAILURE;
                }
            };
            match parse_config(value) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: invalid config: {e}");
                    return ExitCode::FAILURE;
                }
            }
        }
        (None, Some(cmd)) => build_config(cmd),
        (None, None) => {
            eprintln!("error: provide a subcommand or --config FILE (see --help)");
            return ExitCode::FAILURE;
        }
    };
    match run_to_dir(&cfg, &cli.out) {
        Ok(out) => {
            println!("{}", out.summary);
            println!("wrote {}", cli.out.join("results.csv").display());
            println!("wrote {}", cli.out.join("meta.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

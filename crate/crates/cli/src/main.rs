use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use pfstab::config::{preset, PipelineConfig, BENCHMARKS};
use pfstab::pipeline::{
    self, convergence_spec, initial_states, load_bank, load_bundle_config, load_dictionary, load_generated,
    load_policy, simulate, write_rollouts, Bundle, Controller, RolloutRecord, OUTPUT_ROOT_ENV,
};
use pfstab::{exit_code, Error, Result};

/// Learn Perron-Frobenius operators from data and synthesize stabilizing
/// feedback through an occupation-measure linear program.
///
/// Settings come from a TOML (or JSON) config; command-line flags override
/// the matching config fields. Bundles are written to `--out`, else to
/// `$PFSTAB_OUTPUT_ROOT/<name>`, else to `./runs/<name>`.
#[derive(Parser, Debug)]
#[command(name = "pfstab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample trajectory data for every control value.
    Generate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Build the dictionary and fit one operator per control value.
    Fit { bundle: PathBuf },
    /// Solve the stabilization LP and extract the feedback policy.
    Synthesize { bundle: PathBuf },
    /// Roll the system forward open- and closed-loop.
    Simulate {
        bundle: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        n_random: Option<usize>,
        /// Extra initial state, comma separated (repeatable).
        #[arg(long = "x0", value_delimiter = ';')]
        x0: Vec<String>,
    },
    /// Recheck the operators, the LP balance and the Lyapunov certificate.
    Verify { bundle: PathBuf },
    /// Run a built-in benchmark end to end.
    Reproduce {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(BENCHMARKS))]
        name: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Print the preset config as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run every stage from a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// NSDMD iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    traj_len: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.data.seed = s;
        }
        if let Some(g) = self.gamma {
            cfg.stabilization.gamma = g;
        }
        if let Some(m) = self.max_iter {
            cfg.nsdmd.max_iter = m;
        }
        if let Some(n) = self.n_traj {
            cfg.data.n_traj = n;
        }
        if let Some(l) = self.traj_len {
            cfg.data.traj_len = l;
        }
        cfg.validate()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let bundle = Bundle::for_config(&cfg);
            pipeline::write_config(&cfg, &bundle)?;
            let data = pipeline::stage_generate(&cfg, &bundle)?;
            let pairs: usize = data.datasets.iter().map(|d| d.count()).sum();
            println!("{} datasets, {pairs} pairs -> {}", data.datasets.len(), bundle.dir.display());
            Ok(())
        }
        Command::Fit { bundle } => {
            let bundle = Bundle::new(bundle);
            let cfg = load_bundle_config(&bundle)?;
            let data = load_generated(&cfg, &bundle)?;
            let (dict, lam) = pipeline::stage_dictionary(&cfg, &bundle, &data)?;
            let (_, metas) = pipeline::stage_fit(&cfg, &bundle, &dict, &lam, &data)?;
            for m in &metas {
                println!(
                    "action {:>3}  residual {:.6e}  edmd {:.6e}  projection {:.3e}",
                    m.action_index, m.residual, m.edmd_residual, m.projection_deviation
                );
            }
            Ok(())
        }
        Command::Synthesize { bundle } => {
            let bundle = Bundle::new(bundle);
            let cfg = load_bundle_config(&bundle)?;
            let dict = load_dictionary(&bundle)?;
            let bank = load_bank(&cfg, &bundle)?;
            let syn = pipeline::stage_synthesize(&cfg, &bundle, &dict, &bank)?;
            println!(
                "gamma {}  objective {:.9e}  attractor {:?}  flagged {}",
                syn.record.gamma,
                syn.record.objective,
                syn.record.attractor_indices,
                syn.record.flagged.len()
            );
            Ok(())
        }
        Command::Simulate {
            bundle,
            horizon,
            n_random,
            x0,
        } => {
            let bundle = Bundle::new(bundle);
            let mut cfg = load_bundle_config(&bundle)?;
            if let Some(h) = horizon {
                cfg.simulation.horizon = h;
            }
            if let Some(n) = n_random {
                cfg.simulation.n_random = n;
            }
            for s in x0 {
                let v = s
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(format!("bad --x0 `{s}`: {e}")))?;
                cfg.simulation.initial_states.push(v);
            }
            cfg.validate()?;
            let dict = load_dictionary(&bundle)?;
            let policy = load_policy(&bundle)?;
            let x0 = initial_states(&cfg);
            let conv = convergence_spec(&cfg);
            let open = simulate(&cfg.system, None, &x0, cfg.simulation.horizon, &conv)?;
            let controller = Controller {
                policy: &policy,
                dict: &dict,
            };
            let closed = simulate(&cfg.system, Some(&controller), &x0, cfg.simulation.horizon, &conv)?;
            write_rollouts(&cfg, &bundle, &open)?;
            write_rollouts(&cfg, &bundle, &closed)?;
            print_rollouts("open loop", &open);
            print_rollouts("closed loop", &closed);
            Ok(())
        }
        Command::Verify { bundle } => {
            let report = pipeline::verify(&Bundle::new(bundle))?;
            let c = &report.certificate;
            println!("gamma                {}", c.gamma);
            println!("spectral radius      {:.9e}", c.spectral_radius);
            println!("upper bound          {:.9e}", c.spectral_upper_bound);
            println!("balance residual     {:.3e}", report.balance_residual);
            if let Some(m) = c.min_mu {
                println!("min mu_bar           {m:.3e}");
            }
            println!("operators pass       {}", report.operators_pass);
            println!("certificate pass     {}", c.pass);
            if report.pass() {
                Ok(())
            } else {
                Err(Error::Verification(format!(
                    "certificate rejected: rho(gamma P_cl) = {:.9e}",
                    c.spectral_radius
                )))
            }
        }
        Command::Reproduce {
            name,
            overrides,
            print_config,
        } => {
            let mut cfg = preset(&name)?;
            overrides.apply(&mut cfg)?;
            if print_config {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            run(&cfg)
        }
        Command::Run { config, overrides } => run(&load(&config, &overrides)?),
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cfg: &PipelineConfig) -> Result<()> {
    if std::env::var_os(OUTPUT_ROOT_ENV).is_none() && cfg.output_dir.is_none() {
        info!("{OUTPUT_ROOT_ENV} not set; writing under ./runs");
    }
    let out = pipeline::run_pipeline(cfg)?;
    let c = &out.report.certificate;
    println!("bundle               {}", out.bundle.dir.display());
    println!("gamma                {}", out.synthesis.record.gamma);
    println!("spectral radius      {:.9e}", c.spectral_radius);
    println!("certificate pass     {}", c.pass);
    print_rollouts("open loop", &out.open_loop);
    print_rollouts("closed loop", &out.closed_loop);
    if out.report.pass() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "certificate rejected: rho(gamma P_cl) = {:.9e}",
            c.spectral_radius
        )))
    }
}

fn print_rollouts(label: &str, recs: &[RolloutRecord]) {
    let conv = recs.iter().filter(|r| r.converged).count();
    let div = recs.iter().filter(|r| r.diverged).count();
    println!("{label:<20} {conv}/{} converged, {div} diverged", recs.len());
}

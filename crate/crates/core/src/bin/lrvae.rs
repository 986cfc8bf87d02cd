use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use lrvae::cli::{self, LaplaceCheckRow, ProbeOutcome, RunConfig};
use lrvae::metrics::MetricsReport;
use lrvae::Result;

const COMMANDS: &[(&str, &str)] = &[
    ("train", "train a model and write per-epoch metrics plus checkpoints"),
    ("eval", "AU, KL and MI of a checkpoint on the evaluation split"),
    ("probe", "bi-Lipschitz probe and collapse profile of a checkpoint"),
    ("noise-recon", "decode noised latent means into a PGM grid with diversity scores"),
    ("gen-synthetic", "write a synthetic dataset as CSV"),
    ("laplace-check", "exact vs Laplace posterior KL and lower bounds on linear decoders"),
];

fn command() -> Command {
    let mut cmd = Command::new("lrvae")
        .about("latent-reconstruction VAE workbench")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .help("key=value config file; flags override it"),
        );
        for &key in RunConfig::KEYS {
            sub = sub.arg(Arg::new(key).long(key).value_name("VALUE"));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for &key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = config(m)?;
    match name {
        "train" => {
            let out = cli::cmd_train(&cfg)?;
            if let Some(last) = out.history.last() {
                println!("{}", lrvae::cli::EpochRecord::CSV_HEADER);
                println!("{}", last.csv_row());
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        "eval" => {
            let report = cli::cmd_eval(&cfg)?;
            println!("{}", MetricsReport::CSV_HEADER);
            println!("{}", report.csv_row());
        }
        "probe" => {
            let out = cli::cmd_probe(&cfg)?;
            println!("{}", ProbeOutcome::SUMMARY_HEADER);
            println!("{}", out.summary);
        }
        "noise-recon" => {
            let recon = cli::cmd_noise_recon(&cfg)?;
            println!("stddev,mean_diversity");
            for (s, d) in recon.stddevs.iter().zip(&recon.mean_diversity) {
                println!("{s},{d}");
            }
        }
        "gen-synthetic" => {
            let ds = cli::cmd_gen_synthetic(&cfg)?;
            println!("wrote {} rows of dimension {} to {}", ds.len(), ds.dim(), cfg.out_dir.join("synthetic.csv").display());
        }
        "laplace-check" => {
            println!("{}", LaplaceCheckRow::CSV_HEADER);
            for row in cli::cmd_laplace_check(&cfg)? {
                println!("{}", row.csv_row());
            }
        }
        other => unreachable!("clap rejects unknown subcommand {other}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // bad flags are configuration errors
            let _ = e.print();
            return ExitCode::from(lrvae::Error::Config(String::new()).exit_code() as u8);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrvae {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Benchmark CLI for the P_N radiative-transfer solvers.
//!
//! Thread count follows RAYON_NUM_THREADS. Exit code is nonzero with a
//! diagnostic on any solver error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pn_rte::bench::{
    audit_csv, convergence_csv, convergence_study, efficiency_csv, efficiency_report,
    run_benchmark,
};
use pn_rte::config::{ProblemConfig, ProblemId};
use pn_rte::fourier::build_map_with_step;

#[derive(Parser)]
#[command(
    name = "pnrte",
    about = "Asymptotic-preserving IMEX P_N solvers for linear and gray radiative transfer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    ImexIm,
    ImexEx,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark configuration and write snapshot/audit CSV files
    Run {
        /// JSON configuration file (see configs/) or a builtin problem name
        config: String,
        /// output directory for CSV files
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Mesh-refinement study against a same-scheme fine reference
    Converge {
        config: String,
        /// comma-separated mesh sizes, e.g. 32,64,128,256
        #[arg(long, value_delimiter = ',')]
        meshes: Vec<usize>,
        /// reference mesh (divisible by each study mesh)
        #[arg(long, default_value_t = 1024)]
        r#ref: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Von Neumann stability map over (eta, chi)
    StabilityMap {
        #[arg(long, default_value_t = 7)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        eps: f64,
        /// grid step in eta and chi (paper resolution: 0.02)
        #[arg(long, default_value_t = 0.02)]
        step: f64,
        #[arg(long, default_value = "stability_map.csv")]
        out: PathBuf,
    },
    /// Time-step and step-count comparison between this scheme's rule and
    /// the explicit-limit rival rule
    Efficiency {
        config: String,
        #[arg(long, value_delimiter = ',')]
        meshes: Vec<usize>,
        #[arg(long, value_enum, default_value_t = RuleArg::Both)]
        rule: RuleArg,
        /// actually march the runs and record wall time
        #[arg(long)]
        measure: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default JSON configuration of a builtin problem
    Defaults {
        problem: String,
    },
}

fn parse_problem(name: &str) -> Option<ProblemId> {
    Some(match name {
        "ap_test" => ProblemId::ApTest,
        "plane_source" => ProblemId::PlaneSource,
        "marshak_2a" => ProblemId::Marshak2a,
        "marshak_2b" => ProblemId::Marshak2b,
        "line_source" => ProblemId::LineSource,
        "lattice" => ProblemId::Lattice,
        "riemann_2d" => ProblemId::Riemann2d,
        "riemann_1d" => ProblemId::Riemann1d,
        "custom" => ProblemId::Custom,
        _ => return None,
    })
}

fn load_config(arg: &str) -> Result<ProblemConfig, String> {
    if let Some(id) = parse_problem(arg) {
        return Ok(ProblemConfig::defaults(id));
    }
    let path = Path::new(arg);
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {arg}: {e}"))?;
    ProblemConfig::from_json(&text).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let output = run_benchmark(&cfg).map_err(|e| e.to_string())?;
            fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let stem = format!("{:?}", cfg.problem).to_lowercase();
            for snap in &output.snapshots {
                let path = out.join(format!("{stem}_t{:.6}.csv", snap.time));
                fs::write(&path, &snap.csv).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            let audit_path = out.join(format!("{stem}_audit.csv"));
            fs::write(&audit_path, audit_csv(&output.audit)).map_err(|e| e.to_string())?;
            println!("wrote {}", audit_path.display());
            println!(
                "dt = {:.6e}, steps = {}, wall = {:.3} s, picard_max = {}, negative-energy cells = {}",
                output.dt,
                output.total_steps,
                output.wall_seconds,
                output.picard_iters_max,
                output.negative_energy_cells
            );
            Ok(())
        }
        Command::Converge {
            config,
            meshes,
            r#ref,
            out,
        } => {
            let cfg = load_config(&config)?;
            if meshes.is_empty() {
                return Err("--meshes must name at least one mesh".into());
            }
            let rows = convergence_study(&cfg, &meshes, r#ref).map_err(|e| e.to_string())?;
            let csv = convergence_csv(&rows);
            match out {
                Some(p) => {
                    fs::write(&p, &csv).map_err(|e| e.to_string())?;
                    println!("wrote {}", p.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::StabilityMap { m, eps, step, out } => {
            let map = build_map_with_step(eps, m, step).map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            map.write_csv(&mut buf).map_err(|e| e.to_string())?;
            fs::write(&out, &buf).map_err(|e| e.to_string())?;
            let stable = map.stable.iter().filter(|s| **s).count();
            println!(
                "wrote {} ({} points, {} stable)",
                out.display(),
                map.stable.len(),
                stable
            );
            Ok(())
        }
        Command::Efficiency {
            config,
            meshes,
            rule,
            measure,
            out,
        } => {
            let cfg = load_config(&config)?;
            if meshes.is_empty() {
                return Err("--meshes must name at least one mesh".into());
            }
            let mut rows = efficiency_report(&cfg, &meshes, measure).map_err(|e| e.to_string())?;
            match rule {
                RuleArg::Both => {}
                RuleArg::ImexIm => rows.retain(|r| r.rule == pn_rte::bench::RivalRule::ImexIm),
                RuleArg::ImexEx => rows.retain(|r| r.rule == pn_rte::bench::RivalRule::ImexEx),
            }
            let csv = efficiency_csv(&rows);
            match out {
                Some(p) => {
                    fs::write(&p, &csv).map_err(|e| e.to_string())?;
                    println!("wrote {}", p.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Defaults { problem } => {
            let id = parse_problem(&problem)
                .ok_or_else(|| format!("unknown problem '{problem}'"))?;
            println!("{}", ProblemConfig::defaults(id).to_json());
            Ok(())
        }
    }
}

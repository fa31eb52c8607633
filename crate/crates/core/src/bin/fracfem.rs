use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fracfem::cli_io::{load_config, mesh_only, run};
use fracfem::{Error, Result};

#[derive(Parser)]
#[command(name = "fracfem", version, about = "Flow and transport in fractured porous media")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve flow, post-process fluxes and run transport when configured.
    Run { config: PathBuf },
    /// Build the mesh only and write mesh.vtk.
    Mesh { config: PathBuf },
    /// Solve flow and report the flux through one interface.
    Flux {
        config: PathBuf,
        #[arg(long)]
        interface: String,
    },
    /// Parse and validate a configuration without solving.
    Validate { config: PathBuf },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FRACFEM_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("FRACFEM_THREADS must be a positive integer (got '{v}')")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let st = run(&cfg, None)?;
            for f in &st.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Mesh { config } => {
            let cfg = load_config(&config)?;
            let st = mesh_only(&cfg)?;
            println!("cells {} nodes {} hanging {}", st.mesh.num_cells(), st.mesh.num_nodes(), st.mesh.num_hanging());
            for f in &st.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Flux { config, interface } => {
            let cfg = load_config(&config)?;
            let st = run(&cfg, Some(&interface))?;
            for r in &st.fluxes {
                println!("{} {} Q={:.16e} balance_residual={:.3e}", r.id, r.side.name(), r.total, r.balance_residual);
            }
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!("ok {}", cfg.hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

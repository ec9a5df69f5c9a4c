use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mcf_cli::schema::parse_coefficients;
use mcf_cli::{run, CliError, Command, Flags};

#[derive(Parser)]
#[command(name = "mcf", version, about = "Homology index of isolated invariant sets via Morse-Smale-Witten complexes")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Seed for the Lyapunov perturbation; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "default")]
    tol_profile: Profile,
    /// Coefficient ring, Z or Z2; overrides the file.
    #[arg(long, global = true)]
    coeff: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit the JSON report instead of a text summary.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true, hide = true)]
    debug_drop_counts: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Strict,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify boundary faces and check isolation.
    Block { file: PathBuf },
    /// Check strict decrease of the Lyapunov function off the invariant set.
    Lyapunov { file: PathBuf },
    /// Compute the homology index and compare with H(B, B-).
    Hi { file: PathBuf },
    /// Morse decomposition relations and the connection matrix.
    Relations { file: PathBuf },
    /// Continuation invariance along the parameter.
    Continue { file: PathBuf },
    /// Relative homology of the block modulo its exit set.
    Cubical { file: PathBuf },
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("mcf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}


fn execute(args: Args) -> Result<i32, CliError> {
    let (cmd, path) = match args.command {
        Cmd::Block { file } => (Command::Block, file),
        Cmd::Lyapunov { file } => (Command::Lyapunov, file),
        Cmd::Hi { file } => (Command::Hi, file),
        Cmd::Relations { file } => (Command::Relations, file),
        Cmd::Continue { file } => (Command::Continue, file),
        Cmd::Cubical { file } => (Command::Cubical, file),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let flags = Flags {
        seed: args.seed,
        strict: matches!(args.tol_profile, Profile::Strict),
        coefficients: args.coeff.as_deref().map(parse_coefficients).transpose()?,
        drop_counts: args.debug_drop_counts,
    };
    let report = run(cmd, &text, &flags)?;
    let rendered = if args.json || args.out.is_some() {
        report.to_json()
    } else {
        report.to_text()
    };
    match &args.out {
        Some(p) => std::fs::write(p, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(report.exit_code())
}

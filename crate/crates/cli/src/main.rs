use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use udsaudit_core::access::parse_permissions;
use udsaudit_core::pipeline::{run_pipeline, Options};
use udsaudit_core::report::{emit_report, Format};

#[derive(Parser)]
#[command(
    name = "udsaudit",
    version,
    about = "Find Unix domain sockets an untrusted app can reach in an extracted Android image"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze an image directory holding manifest.tsv, policy and init files
    Analyze {
        image_dir: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: OutFormat,
        /// Reject policy syntax errors instead of skipping the statement
        #[arg(long)]
        strict: bool,
        /// Permissions the app may hold, comma separated
        #[arg(
            long,
            value_name = "P1,P2",
            default_value = "INTERNET,BLUETOOTH,BLUETOOTH_ADMIN,MANAGE_EXTERNAL_STORAGE"
        )]
        perm_set: String,
        /// Dataflow hops for the writable-object query
        #[arg(long, default_value_t = 1)]
        hops: u32,
        /// Worker threads for binary analysis (0 = all cores)
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// File listing bind-like API symbols, one per line
        #[arg(long, value_name = "FILE")]
        bind_api_list: Option<PathBuf>,
        /// Deterministic output: no timing data
        #[arg(long)]
        canonical: bool,
    },
}

fn run(cli: Cli) -> Result<u8> {
    let Command::Analyze { image_dir, format, strict, perm_set, hops, jobs, bind_api_list, canonical } = cli.command;
    let grants = parse_permissions(&perm_set)?;
    let mut opts = Options { strict, grants, hops, jobs, canonical, ..Options::default() };
    if let Some(p) = bind_api_list {
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        opts.bind_apis = udsaudit_core::BindApiConfig::from_text(&text);
    }
    let outcome = run_pipeline(&image_dir, &opts).with_context(|| format!("analyzing {}", image_dir.display()))?;
    let format = match format {
        OutFormat::Json => Format::Json,
        OutFormat::Table => Format::Table,
    };
    print!("{}", emit_report(&outcome.report, format));
    Ok(outcome.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

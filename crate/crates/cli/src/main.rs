mod args;
mod commands;
mod error;
mod manifest;
mod table;

use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use serde_json::json;

use args::Cli;
use error::CliError;

const THREADS_ENV: &str = "ONCOCLIP_THREADS";

/// `--long` flags of the subcommand named in `argv`, or the global ones.
fn valid_flags(argv: &[String]) -> Vec<String> {
    let root = Cli::command();
    let sub = argv.iter().skip(1).find_map(|a| root.find_subcommand(a));
    let cmd = sub.unwrap_or(&root);
    let mut flags: Vec<String> = cmd.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
    flags.extend(["--help".to_string()]);
    if sub.is_none() {
        flags.extend(root.get_subcommands().map(|s| s.get_name().to_string()));
    }
    flags
}

fn emit(value: &serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer_pretty(&mut out, value);
    let _ = out.write_all(b"\n");
}

fn fail(err: &CliError) -> ExitCode {
    emit(&json!({ "error": { "kind": err.kind(), "message": err.to_string() } }));
    eprintln!("error: {err}");
    ExitCode::from(if matches!(err, CliError::Usage(_)) { 2 } else { 1 })
}

fn threads(flag: usize) -> Result<usize, CliError> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => flag,
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be >= 1".into()));
    }
    Ok(n)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { ExitCode::from(2) } else { ExitCode::SUCCESS };
                }
                ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => {
                    let _ = e.print();
                    eprintln!("valid flags: {}", valid_flags(&argv).join(" "));
                    2
                }
                _ => {
                    let _ = e.print();
                    2
                }
            };
            emit(&json!({ "error": { "kind": "usage", "message": e.to_string().lines().next().unwrap_or("usage error").trim_start_matches("error: ") } }));
            return ExitCode::from(code);
        }
    };
    let n = match threads(cli.threads) {
        Ok(n) => n,
        Err(e) => return fail(&e),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        return fail(&CliError::data(format!("thread pool: {e}")));
    }
    match commands::run(&cli.command) {
        Ok(out) => {
            emit(&json!({ "command": cli.command.name(), "result": out.result, "manifest": out.manifest }));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

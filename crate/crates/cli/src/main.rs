mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::{merge_config, RunConfig};
use error::CliError;

fn run() -> Result<(), CliError> {
    let (argv, config_file, entries) = merge_config(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let rc = RunConfig::new(&cli, config_file, entries);
    match &cli.command {
        Command::Generate(a) => commands::generate(a, &rc),
        Command::Featurize(a) => commands::featurize(a, &rc),
        Command::Teacher(a) => commands::teacher(a, &rc),
        Command::Train(a) => commands::train_cmd(a, &rc),
        Command::Search(a) => commands::search(a, &rc),
        Command::Eval(a) => commands::eval(a, &rc),
        Command::Attention(a) => commands::attention(a, &rc),
        Command::Bench(a) => commands::bench(a, &rc),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

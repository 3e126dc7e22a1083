//! `extract-edit` command line: corpus generation, training, inference and
//! evaluation. Exit status is 0 on success, 2 when training paused at
//! `--stop-after`, and 1 on any error.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Outcome;

fn main() -> ExitCode {
    let (argv, overrides) = args::split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(argv);
    let root = &cli.root;
    let result = match &cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(root, a, &overrides),
        Command::Train(a) => commands::train(root, a, &overrides),
        Command::Translate(a) => commands::translate(a, &overrides),
        Command::Extract(a) => commands::extract(a, &overrides),
        Command::Evaluate(a) => commands::evaluate(root, a, &overrides),
        Command::SweepK(a) => commands::sweep(root, a, &overrides),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Paused) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

mod args;
mod plot;
mod report;
mod run;
mod serve;
mod sweep;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;

use args::{expand_dotted_flags, Cli, Command};
use coalfake::pipeline::PipelineError;

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { common, resume } => {
            let config = common.config()?;
            run::run(&config, &common.out_dir(&config), resume)
        }
        Command::Sweep { common, grid, jobs } => {
            let config = common.config()?;
            sweep::sweep(&config, &grid, jobs, &common.out_dir(&config))
        }
        Command::EvalLlm { common } => {
            let config = common.config()?;
            run::eval_llm(&config, &common.out_dir(&config))
        }
        Command::Serve { common } => {
            let config = common.config()?;
            serve::serve(&config, &common.out_dir(&config))
        }
        Command::Report { inputs, out } => report::report(&inputs, &out),
    }
}

/// Missing inputs exit with 2, like usage errors; everything else with 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    let missing = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<PipelineError>(), Some(PipelineError::MissingFile(_))));
    if missing {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(expand_dotted_flags(std::env::args()));
    tracing_subscriber::fmt()
        .with_max_level(cli.log)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

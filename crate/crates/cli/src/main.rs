use std::process::ExitCode;

use clap::Parser;
use harforge::{run, Args, Outcome};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(outcomes) => {
            for (stage, outcome) in outcomes {
                let status = match outcome {
                    Outcome::Ran => "ok",
                    Outcome::UpToDate => "up to date",
                };
                println!("{}: {status}", stage.as_str());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("harforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

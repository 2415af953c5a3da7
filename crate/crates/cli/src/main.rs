mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use taskmod::Error;

use args::{Cli, Command};
use commands::Failure;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_AMBIGUOUS: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::Divergence { .. } | Error::Degenerate(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("TASKMOD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TASKMOD_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::AnalyzeSensitivity(a) => commands::analyze_sensitivity(a),
        Command::AnalyzeRank(a) => commands::analyze_rank(a),
        Command::Eval(a) => commands::eval(a),
        Command::Restore(a) => commands::restore(a),
        Command::Route(a) => commands::route(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Ambiguous(scores)) => {
            let scores: serde_json::Map<_, _> = scores.into_iter().map(|(t, s)| (t.to_string(), s.into())).collect();
            println!(
                "{}",
                serde_json::json!({"task": null, "ambiguous": true, "scores": scores})
            );
            eprintln!("error: instruction is ambiguous; pass --task explicitly");
            ExitCode::from(EXIT_AMBIGUOUS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_map_to_3() {
        assert_eq!(
            exit_code(&Error::Divergence {
                step: 1,
                detail: "nan".into()
            }),
            EXIT_NUMERICAL
        );
        assert_eq!(exit_code(&Error::Degenerate("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Input("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Compatibility("x".into())), EXIT_USAGE);
    }
}

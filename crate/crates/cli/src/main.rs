//! `adaptive-attn` command-line entry point.

mod args;
mod run;

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

static STOP: AtomicBool = AtomicBool::new(false);

#[cfg(unix)]
extern "C" fn on_interrupt(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

/// First Ctrl-C asks training to stop after the current batch and write a
/// final checkpoint.
fn install_interrupt_handler() {
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGINT, on_interrupt as *const () as libc::sighandler_t);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => {
            install_interrupt_handler();
            run::cmd_train(a, &STOP)
        }
        Command::Eval(a) => run::cmd_eval(a),
        Command::Analyze(a) => run::cmd_analyze(a),
        Command::Spans(a) => run::cmd_spans(a),
        Command::Gradcheck(a) => run::cmd_gradcheck(a),
        Command::ExportPlots(a) => run::cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

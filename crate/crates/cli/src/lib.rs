//! The `aura` command line: argument grammar, input forms, rendering and
//! dispatch onto the engine.

pub mod args;
pub mod commands;
pub mod filetest;
pub mod input;
pub mod output;

use std::io::Write;

use clap::Parser;
use serde_json::json;

use aura_core::AuraError;

pub use args::Cli;
pub use commands::Env;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Exit code for an engine error.
pub fn exit_code(e: &AuraError) -> i32 {
    if e.is_user_error() {
        EXIT_USER
    } else {
        EXIT_INTERNAL
    }
}

/// Parses `argv`, runs the command and writes the result. Returns the exit
/// code.
pub fn run<I, S>(argv: I, env: &mut Env, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let informational = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let text = e.render().to_string();
            if informational {
                let _ = stdout.write_all(text.as_bytes());
                return EXIT_OK;
            }
            let _ = stderr.write_all(text.as_bytes());
            return EXIT_USER;
        }
    };
    let g = &cli.global;
    let result = commands::execute(&cli.resource, g, env).and_then(|out| {
        let text = commands::render(&out, g.format)?;
        match (&g.out, g.format) {
            (Some(path), fmt) => {
                let file_text = match fmt {
                    args::Format::Csv => text.clone(),
                    _ => output::json(&out.doc),
                };
                std::fs::write(path, &file_text)
                    .map_err(|e| AuraError::InvalidInput(format!("cannot write {}: {e}", path.display())))?;
                let note = json!({ "out": path.display().to_string(), "bytes": file_text.len() });
                Ok(match fmt {
                    args::Format::Table => text,
                    _ => output::json(&note),
                })
            }
            (None, _) => Ok(text),
        }
    });
    match result {
        Ok(text) => {
            let _ = stdout.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            tracing::debug!(error = ?e, "command failed");
            if g.format == args::Format::Table {
                let _ = writeln!(stderr, "error: {e}");
            } else {
                let doc = json!({ "error": { "code": e.code(), "message": e.to_string(), "details": e.details() } });
                let _ = stdout.write_all(output::json(&doc).as_bytes());
            }
            exit_code(&e)
        }
    }
}

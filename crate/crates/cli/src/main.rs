use std::io::{self, BufRead, IsTerminal, Read, Write};

use aura_cli::{run, Env, EXIT_USER};
use aura_core::home::Home;
use aura_core::AuraError;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let verbose = argv.iter().any(|a| a == "--verbose");
    let filter = if verbose { "debug" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("AURA_LOG").unwrap_or_else(|_| filter.into()),
        )
        .with_writer(io::stderr)
        .init();

    let home = match Home::from_env() {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(EXIT_USER);
        }
    };
    let interactive = io::stdin().is_terminal();
    let mut env = Env::new(home);
    env.stdin = Box::new(|| {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(AuraError::Io)?;
        Ok(s)
    });
    if interactive {
        env.prompt = Some(Box::new(|question: &str| {
            eprint!("{question}? [y/N] ");
            let _ = io::stderr().flush();
            let mut line = String::new();
            io::stdin().lock().read_line(&mut line).is_ok() && matches!(line.trim(), "y" | "Y" | "yes")
        }));
    }
    if let Ok(op) = std::env::var("AURA_OPERATOR") {
        env.operator = op;
    }
    env.token = std::env::var("AURA_TOKEN").ok();

    let code = run(argv, &mut env, &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}

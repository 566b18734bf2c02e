mod cli;
mod commands;
mod config;
mod error;
mod manifest;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use cli::{Cli, Command};
use error::{CliError, CliResult};
use manifest::{output_digests, sha256_file, RunManifest};

const THREADS_VAR: &str = "MMEVIT_THREADS";

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::invalid(format!("{THREADS_VAR}={v:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::invalid(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

/// `Ok(None)` when clap printed help or the version.
fn parse(args: &[String]) -> CliResult<Option<Cli>> {
    match Cli::try_parse_from(std::iter::once("rehab-har".to_string()).chain(args.iter().cloned())) {
        Ok(c) => Ok(Some(c)),
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            Ok(None)
        }
        Err(e) => Err(CliError::Usage(e.render().to_string())),
    }
}

fn ensure_empty(out: &Path) -> CliResult<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
        if entries.next().is_some() {
            return Err(CliError::invalid(format!(
                "output directory {} is not empty",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

/// Runs one command and writes its manifest.
fn execute(cmd: &Command, resolved: &[String]) -> CliResult<()> {
    let Some(out) = commands::out_dir(cmd) else {
        if let Command::Describe(a) = cmd {
            commands::describe(a, None)?;
        }
        return Ok(());
    };
    ensure_empty(out)?;
    let start = Instant::now();
    let outcome = commands::run(cmd, out)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let mut args = resolved.to_vec();
    config::take_flag(&mut args, "out");
    let m = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cmd.name().to_string(),
        args,
        cwd: std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?,
        config: outcome.config,
        seed: outcome.seed,
        inputs: outcome.inputs.0,
        outputs: output_digests(out)?,
        wall_seconds,
        timings: outcome.timings,
    };
    m.write(out)
}

fn replay(a: &cli::ReplayArgs) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    let out = config::absolute(&a.out)?;
    std::env::set_current_dir(&m.cwd).map_err(|e| CliError::io(&m.cwd, e))?;
    for (path, digest) in &m.inputs {
        if sha256_file(Path::new(path))? != *digest {
            return Err(CliError::invalid(format!("input {path} changed since the recorded run")));
        }
    }
    let mut args = m.args.clone();
    args.push("--out".into());
    args.push(out.display().to_string());
    let Some(cli) = parse(&args)? else {
        return Err(CliError::invalid("manifest arguments do not name a command"));
    };
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::invalid("replay cannot be nested"));
    }
    execute(&cli.command, &args)?;
    let got = output_digests(&out)?;
    let mut differ: Vec<&str> = Vec::new();
    for k in m.outputs.keys().chain(got.keys()) {
        if m.outputs.get(k) != got.get(k) && !differ.contains(&k.as_str()) {
            differ.push(k);
        }
    }
    println!(
        "{}",
        serde_json::json!({
            "replayed": m.subcommand,
            "outputs": got.len(),
            "identical": differ.is_empty(),
            "differing": differ,
        })
    );
    if differ.is_empty() {
        Ok(())
    } else {
        Err(CliError::invalid(format!(
            "{} of the outputs differ from {}: {}",
            differ.len(),
            a.manifest.display(),
            differ.join(", ")
        )))
    }
}

fn run(argv: Vec<String>) -> CliResult<()> {
    let resolved = config::resolve(&argv)?;
    let Some(cli) = parse(&resolved)? else {
        return Ok(());
    };
    init_threads()?;
    match &cli.command {
        Command::Replay(a) => replay(a),
        cmd => execute(cmd, &resolved),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::Usage(text) = &e {
                eprint!("{text}");
            }
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end: configuration, orchestration commands, the
//! probing harness, and all file outputs.
//!
//! ```text
//! molex <pretrain|finetune|eval|certify|probe|heatmap|timing>
//!       [--config PATH] [--json] [--set section.key=value ...]
//!       [--seed N] [--out DIR] [command-specific args]
//! ```
//!
//! Exit codes: 0 success; 1 I/O failure; 2 bad configuration or input;
//! 3 numeric/training failure; 4 unsupported model (e.g. certification of
//! nonlinear blocks). The environment variable `MOLEX_THREADS` caps
//! parallelism: 0 or 1 runs everything sequentially (the determinism
//! reference mode), 2 or more lets the two layer experts of a mixed step
//! run on separate threads.

pub mod commands;
pub mod config;
pub mod heatmap;
pub mod probe;

use std::path::PathBuf;

use molex_core::error::{Error, Result};

use commands::CommandCtx;
use config::RunConfig;

pub const USAGE: &str = "\
usage: molex <command> [options]

commands:
  pretrain   train the base model on the synthetic base task and freeze it
  finetune   fine-tune adapters (+ gate) over a seed sweep; writes metrics JSON
  eval       evaluate a checkpoint: clean/noisy accuracy, selection telemetry
  certify    robustness certificates for a linear stack (generated, --stack
             FILE, or --ckpt DIR); optional --x \"v1,v2,...\" and --y N
  probe      train per-layer property classifiers on frozen features
  heatmap    normalize a selection CSV and render it as text (positional path)
  timing     per-sample inference timing: baseline vs mixed (sequential and
             parallel), plus parameter accounting

options:
  --config PATH   configuration file (INI sections; see keys below)
  --json          treat --config as JSON ({\"section\": {\"key\": value}})
  --set S.K=V     override one key (repeatable)
  --seed N        base seed (sweeps use N, N+1, ...)
  --out DIR       output directory (default out)
  --help          this text

environment:
  MOLEX_THREADS   0/1 = sequential reference mode (default), >=2 enables
                  paired-expert threading
";

pub struct Cli {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub json: bool,
    pub sets: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub extras: Vec<String>,
    pub help: bool,
}

pub fn parse_args(args: &[String]) -> Result<Cli> {
    let mut cli = Cli {
        command: String::new(),
        config_path: None,
        json: false,
        sets: Vec::new(),
        seed: None,
        out: PathBuf::from("out"),
        extras: Vec::new(),
        help: false,
    };
    let mut it = args.iter().peekable();
    fn need_value(
        it: &mut std::iter::Peekable<std::slice::Iter<String>>,
        flag: &str,
    ) -> Result<String> {
        it.next()
            .cloned()
            .ok_or_else(|| Error::Config(format!("{flag} requires a value")))
    }
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => cli.config_path = Some(PathBuf::from(need_value(&mut it, "--config")?)),
            "--json" => cli.json = true,
            "--set" => {
                let spec = need_value(&mut it, "--set")?;
                let (path, value) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set needs key=value, got {spec:?}")))?;
                cli.sets.push((path.to_string(), value.to_string()));
            }
            "--seed" => {
                let v = need_value(&mut it, "--seed")?;
                cli.seed =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --seed {v:?}")))?);
            }
            "--out" => cli.out = PathBuf::from(need_value(&mut it, "--out")?),
            "--help" | "-h" => cli.help = true,
            other => {
                if cli.command.is_empty() && !other.starts_with('-') {
                    cli.command = other.to_string();
                } else {
                    cli.extras.push(other.to_string());
                    // keep flag values attached to their flags
                    if other.starts_with("--") {
                        if let Some(v) = it.peek() {
                            if !v.starts_with("--") {
                                cli.extras.push(it.next().unwrap().clone());
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cli)
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config_path {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if cli.json {
                RunConfig::parse_json(&text)?
            } else {
                RunConfig::parse_ini(&text)?
            }
        }
    };
    cfg.apply_sets(&cli.sets)?;
    Ok(cfg)
}

fn threads_from_env() -> usize {
    std::env::var("MOLEX_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Protocol(_) => 2,
        Error::Numeric(_)
        | Error::Training { .. }
        | Error::Shape { .. }
        | Error::InvalidRow { .. } => 3,
        Error::Unsupported(_) => 4,
        Error::Io(_) => 1,
    }
}

pub fn run(args: &[String]) -> i32 {
    let cli = match parse_args(args) {
        Ok(cli) => cli,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if cli.help || cli.command.is_empty() {
        print!("{USAGE}");
        println!("\n{}", config::help_text());
        return if cli.help { 0 } else { 2 };
    }
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    // command-specific argument surface; anything else is a usage error
    let allowed_flags: &[&str] = match cli.command.as_str() {
        "certify" => &["--stack", "--ckpt", "--x", "--y"],
        _ => &[],
    };
    let positionals_allowed = cli.command == "heatmap";
    {
        let mut i = 0;
        while i < cli.extras.len() {
            let a = &cli.extras[i];
            if a.starts_with("--") {
                if !allowed_flags.contains(&a.as_str()) {
                    eprintln!("error: unknown option {a:?} for command {}", cli.command);
                    return 2;
                }
                i += 2; // skip the flag's value
            } else {
                if !positionals_allowed {
                    eprintln!("error: unexpected argument {a:?} for command {}", cli.command);
                    return 2;
                }
                i += 1;
            }
        }
    }
    let ctx = CommandCtx {
        cfg,
        seed: cli.seed,
        out: cli.out,
        extras: cli.extras,
        threads: threads_from_env(),
    };
    let result = match cli.command.as_str() {
        "pretrain" => commands::cmd_pretrain(&ctx),
        "finetune" => commands::cmd_finetune(&ctx),
        "eval" => commands::cmd_eval(&ctx),
        "certify" => commands::cmd_certify(&ctx),
        "probe" => commands::cmd_probe(&ctx),
        "heatmap" => commands::cmd_heatmap(&ctx),
        "timing" => commands::cmd_timing(&ctx),
        other => {
            eprintln!("error: unknown command {other:?}\n");
            eprint!("{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

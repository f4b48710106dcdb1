//! editlab command line: train toy denoisers, run edits and sweeps, and
//! emit the disentanglement reports.
//!
//! Exit codes: 0 success, 2 semantic edit failure, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use config::RunConfig;

const USAGE: &str = "\
usage: editlab <command> [flags]

commands:
  train   train a denoiser variant and write its checkpoint
  edit    run one edit; writes edited.ppm and trace.json
  sweep   edit over a degree ladder; writes a tiled sweep.ppm
  sde     semantic-disentanglement metric (plus control on oracle)
  probe   attention-map probing of a trained model
  bench   editing benchmark over generated records
  props   concentration grid and direction orthogonality

flags:
  --config <file>       layered under the defaults
  --seed <u64>          --backend {oracle,joint,cross}
  --alpha <f64>         --lambda <f64>
  --iters <usize>       --forward-frac <f64 in [0,1]>
  --cfg <f64>           --steps <usize>
  --out <dir>           --checkpoint <base path>
";

fn parse_args(args: &[String]) -> Result<(String, RunConfig), String> {
    if args.is_empty() {
        return Err("missing command".into());
    }
    let command = args[0].clone();
    let mut cfg = RunConfig::default();
    // First pass: locate --config so flags can override it.
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--config" {
            let path = args.get(i + 1).ok_or("--config needs a path")?;
            cfg.apply_file(&PathBuf::from(path)).map_err(|e| e.to_string())?;
        }
        i += if args[i].starts_with("--") { 2 } else { 1 };
    }
    // Second pass: flag overrides.
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        if !flag.starts_with("--") {
            return Err(format!("unexpected argument {flag}"));
        }
        let value = args.get(i + 1).ok_or_else(|| format!("{flag} needs a value"))?;
        match flag.as_str() {
            "--config" => {}
            "--seed" => cfg.seed = value.parse().map_err(|_| format!("bad --seed {value}"))?,
            "--backend" => cfg.backend = value.clone(),
            "--alpha" => cfg.alpha = value.parse().map_err(|_| format!("bad --alpha {value}"))?,
            "--lambda" => cfg.lambda = value.parse().map_err(|_| format!("bad --lambda {value}"))?,
            "--iters" => cfg.iters = value.parse().map_err(|_| format!("bad --iters {value}"))?,
            "--forward-frac" => {
                cfg.forward_frac =
                    value.parse().map_err(|_| format!("bad --forward-frac {value}"))?
            }
            "--cfg" => cfg.cfg_scale = value.parse().map_err(|_| format!("bad --cfg {value}"))?,
            "--steps" => cfg.steps = value.parse().map_err(|_| format!("bad --steps {value}"))?,
            "--out" => cfg.out = PathBuf::from(value),
            "--checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
            other => return Err(format!("unknown flag {other}")),
        }
        i += 2;
    }
    Ok((command, cfg))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (command, cfg) = match parse_args(&args) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match command.as_str() {
        "train" => commands::cmd_train(&cfg),
        "edit" => commands::cmd_edit(&cfg),
        "sweep" => commands::cmd_sweep(&cfg),
        "sde" => commands::cmd_sde(&cfg),
        "probe" => commands::cmd_probe(&cfg),
        "bench" => commands::cmd_bench(&cfg),
        "props" => commands::cmd_props(&cfg),
        other => {
            eprintln!("error: unknown command {other}\n\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

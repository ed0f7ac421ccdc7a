//! File-based command-line surface: train small networks on synthetic
//! tasks, apply group transforms to saved weights, compute representation
//! metrics on feature files, run stitching grids, and reproduce the named
//! desk-scale experiments. Every command is a pure function of its flags,
//! config file, and seed; re-runs reproduce outputs byte for byte, with
//! wall-clock time confined to the manifest.

mod commands;
mod experiments;

use commands::{cmd_metric, cmd_stitch, cmd_train, cmd_transform};
use experiments::cmd_experiment;

pub use experiments::{
    run_min_stitch_cell, run_residual_failure, run_rotation_penalty, MinStitchCell,
    MinStitchConfig, ResidualFailureConfig, ResidualTrial, RotationPenaltyConfig,
    RotationPenaltySummary,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exit code classification: 0 success, 2 usage/config, 3 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonConvergence { .. }
        | Error::Singular { .. }
        | Error::IllConditioned { .. }
        | Error::NonFinite(_)
        | Error::Diverged { .. }
        | Error::Degenerate(_)
        | Error::Overflow(_) => 3,
        _ => 2,
    }
}

pub const TOOL_NAME: &str = "itw";

pub fn version_string() -> String {
    format!(
        "{TOOL_NAME} {} (weights format {}, features {})",
        env!("CARGO_PKG_VERSION"),
        crate::network::WEIGHT_FORMAT_VERSION,
        std::str::from_utf8(crate::metrics::FEATURE_MAGIC).expect("ascii magic"),
    )
}

/// Environment variable naming the default root for relative output paths.
pub const OUT_ROOT_ENV: &str = "ITW_OUT_ROOT";

pub(crate) fn resolve_out(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p,
    }
}

/// Parsed flags: `--key value` pairs after the subcommand, plus bare
/// `--switch` booleans.
#[derive(Debug, Default)]
pub(crate) struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

const BARE_SWITCHES: &[&str] = &["force", "help"];

impl Flags {
    pub(crate) fn parse(args: &[String]) -> Result<Flags> {
        let mut flags = Flags::default();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(Error::InvalidSpec(format!("unexpected argument '{arg}'")));
            };
            if BARE_SWITCHES.contains(&name) {
                flags.switches.push(name.to_string());
                i += 1;
                continue;
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::InvalidSpec(format!("flag --{name} needs a value")))?;
            flags.values.insert(name.to_string(), value.clone());
            i += 2;
        }
        Ok(flags)
    }

    pub(crate) fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    pub(crate) fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("missing required flag --{name}")))
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    pub(crate) fn parse_num<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T> {
        match self.get(name) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| Error::InvalidSpec(format!("flag --{name}: cannot parse '{raw}'"))),
        }
    }

    pub(crate) fn seed(&self) -> Result<u64> {
        self.require("seed")?
            .parse::<u64>()
            .map_err(|_| Error::InvalidSpec("--seed must be a non-negative integer".into()))
    }
}

/// Written once into every output directory; enough to re-run the command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn write_manifest(
    dir: &Path,
    command: &str,
    config_repr: &str,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    started: std::time::Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: format!("{:016x}", fnv1a64(config_repr.as_bytes())),
        seeds,
        artifacts,
        tool_version: version_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Top-level dispatch, given argv without the program name. Writes
/// human-readable progress to stdout.
pub fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        println!("{}", usage());
        return Ok(());
    };
    let rest = &args[1..];
    match command.as_str() {
        "--version" | "version" => {
            println!("{}", version_string());
            Ok(())
        }
        "--help" | "help" => {
            println!("{}", usage());
            Ok(())
        }
        "train" => cmd_train(&Flags::parse(rest)?, &join_args(args)),
        "transform" => cmd_transform(&Flags::parse(rest)?, &join_args(args)),
        "metric" => cmd_metric(&Flags::parse(rest)?, &join_args(args)),
        "stitch" => cmd_stitch(&Flags::parse(rest)?, &join_args(args)),
        "experiment" => cmd_experiment(&Flags::parse(rest)?, &join_args(args)),
        other => Err(Error::InvalidSpec(format!(
            "unknown command '{other}'; try --help"
        ))),
    }
}

fn join_args(args: &[String]) -> String {
    format!("{TOOL_NAME} {}", args.join(" "))
}

fn usage() -> String {
    [
        &format!("{}", version_string()),
        "",
        "commands:",
        "  train       --spec FILE --data KIND --out DIR --seed N [--epochs N --batch N --lr X",
        "              --drops N --optimizer adam|sgd --momentum X --n N --val-frac X]",
        "  transform   --weights FILE --assignment FILE|random --seed N --out FILE [--force]",
        "              [--samples N]",
        "  metric      --x FEAT --y FEAT --metric grelu-procrustes|orth-procrustes|grelu-cka|linear-cka",
        "              [--csv FILE]",
        "  stitch      --f W1 --g W2 --layer L[,L...] --variant V[,V...] --data KIND --seed N",
        "              --out DIR [--epochs N --lr X --alpha X --sinkhorn-iters N --head-start N",
        "              --rank N --n N]",
        "  experiment  --name min-stitch|rotation-penalty|residual-failure|metric-grid",
        "              --config FILE --out DIR",
        "",
        "data kinds: blobs | rings | teacher",
        &format!("relative --out paths resolve under ${OUT_ROOT_ENV} when it is set"),
    ]
    .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_pairs_and_switches() {
        let args: Vec<String> = ["--seed", "7", "--force", "--out", "dir"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let flags = Flags::parse(&args).unwrap();
        assert_eq!(flags.seed().unwrap(), 7);
        assert!(flags.has("force"));
        assert_eq!(flags.require("out").unwrap(), "dir");
        assert!(flags.require("missing").is_err());
    }

    #[test]
    fn malformed_flags_are_usage_errors() {
        let args: Vec<String> = ["positional"].iter().map(|s| s.to_string()).collect();
        let err = Flags::parse(&args).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn exit_codes_split_usage_from_numerical() {
        assert_eq!(exit_code(&Error::InvalidSpec("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Format {
                path: "p".into(),
                detail: "d".into()
            }),
            2
        );
        assert_eq!(
            exit_code(&Error::Diverged {
                epoch: 1,
                detail: "d".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::Singular { pivot: 0.0, step: 0 }), 3);
    }

    #[test]
    fn unknown_command_is_usage_error() {
        let args = vec!["frobnicate".to_string()];
        let err = run(&args).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }
}

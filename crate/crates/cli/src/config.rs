//! Folds a `--config` file into the argument list. Resolution order is
//! built-in defaults, then the file, then flags given on the command line.

use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory};
use rehab_core::models::parse_kv;

use crate::cli::Cli;
use crate::error::{CliError, CliResult};

/// Removes `--name VALUE` or `--name=VALUE` from `args` and returns the value.
pub fn take_flag(args: &mut Vec<String>, name: &str) -> Option<String> {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    let i = args.iter().position(|a| *a == long || a.starts_with(&eq))?;
    let a = args.remove(i);
    if let Some(v) = a.strip_prefix(&eq) {
        return Some(v.to_string());
    }
    (i < args.len()).then(|| args.remove(i))
}

fn has_flag(args: &[String], long: &str) -> bool {
    let eq = format!("--{long}=");
    args.iter().any(|a| a.strip_prefix("--") == Some(long) || a.starts_with(&eq))
}

fn set_keys(args: &[String]) -> Vec<String> {
    let mut keys = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let v = if a == "--set" {
            it.next().cloned()
        } else {
            a.strip_prefix("--set=").map(str::to_string)
        };
        if let Some(v) = v {
            keys.push(v.split('=').next().unwrap_or("").trim().to_string());
        }
    }
    keys
}

/// Returns `args` (program name excluded) with the values of the config file
/// appended for every flag the command line does not already set.
pub fn resolve(args: &[String]) -> CliResult<Vec<String>> {
    let mut args = args.to_vec();
    let Some(path) = take_flag(&mut args, "config") else {
        return Ok(args);
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let kv = parse_kv(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let Some(sub_name) = args.first().filter(|a| !a.starts_with('-')).cloned() else {
        return Ok(args);
    };
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(&sub_name) else {
        return Ok(args);
    };
    let accepts_set = sub.get_arguments().any(|a| a.get_long() == Some("set"));
    let given_sets = set_keys(&args);
    let mut extra = Vec::new();
    for (key, value) in kv {
        let flag = key.replace('_', "-");
        if let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(flag.as_str())) {
            if flag == "config" || flag == "out" {
                return Err(CliError::invalid(format!("{}: {key} cannot be set from a config file", path.display())));
            }
            if has_flag(&args, &flag) {
                continue;
            }
            match arg.get_action() {
                ArgAction::SetTrue => {
                    let on: bool = value
                        .parse()
                        .map_err(|_| CliError::invalid(format!("{}: {key} must be true or false", path.display())))?;
                    if on {
                        extra.push(format!("--{flag}"));
                    }
                }
                ArgAction::Append => {
                    for v in value.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                        extra.push(format!("--{flag}"));
                        extra.push(v.to_string());
                    }
                }
                _ => {
                    extra.push(format!("--{flag}"));
                    extra.push(value);
                }
            }
        } else if accepts_set {
            if !given_sets.contains(&key) {
                extra.push("--set".into());
                extra.push(format!("{key}={value}"));
            }
        } else {
            return Err(CliError::invalid(format!(
                "{}: {key} is not an option of {sub_name}",
                path.display()
            )));
        }
    }
    args.extend(extra);
    Ok(args)
}

/// Absolute form of `p` so a replay can run from anywhere.
pub fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::io(p, e))
}

//! `key=value` config files merged into argv; explicit flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value", i + 1);
        };
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k.is_empty() || k == "config" {
            bail!("line {}: invalid key '{k}'", i + 1);
        }
        out.push((k, v.trim().to_owned()));
    }
    Ok(out)
}

fn flag_given(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_eq = format!("{flag}=");
    args.iter().any(|a| {
        a.to_str()
            .is_some_and(|a| a == flag || a.starts_with(&with_eq))
    })
}

/// Value of `--config` in `args`, if any.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(p.into());
        }
    }
    None
}

/// Appends `--key value` for every config entry not already on the command
/// line.
pub fn merge(mut args: Vec<OsString>, entries: &[(String, String)]) -> Vec<OsString> {
    let given: Vec<bool> = entries.iter().map(|(k, _)| flag_given(&args, k)).collect();
    for ((k, v), given) in entries.iter().zip(given) {
        if !given {
            args.push(format!("--{k}").into());
            args.push(v.into());
        }
    }
    args
}

pub fn load_and_merge(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_config(&text).with_context(|| format!("config {}", path.display()))?;
    Ok(merge(args, &entries))
}

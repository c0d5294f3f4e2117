//! Plain `key = value` files: run configs given with `--config`, and the
//! `run.cfg` written next to every checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{line}`", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    parse(&text).with_context(|| format!("{}", path.display()))
}

pub fn render(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

const SUBCOMMANDS: [&str; 7] = ["train", "eval", "infer", "bound", "probe", "equiv", "generate"];

/// Splices the entries of any `--config FILE` into `args` right after the
/// subcommand name, so flags given on the command line still win.
/// `true`/`false` values become bare switches or are dropped.
pub fn expand_args(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut files = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            files.push(it.next().context("--config needs a file")?);
        } else if let Some(f) = a.strip_prefix("--config=") {
            files.push(f.to_string());
        } else {
            rest.push(a);
        }
    }
    if files.is_empty() {
        return Ok(rest);
    }
    let Some(pos) = rest.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        bail!("--config needs a subcommand");
    };
    let mut injected = Vec::new();
    for f in &files {
        for (k, v) in load(Path::new(f))? {
            match v.as_str() {
                "true" => injected.push(format!("--{k}")),
                "false" => {}
                _ => {
                    injected.push(format!("--{k}"));
                    injected.push(v);
                }
            }
        }
    }
    rest.splice(pos + 1..pos + 1, injected);
    Ok(rest)
}

//! `--config` files and the run record echoed into every output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::args::{Cli, COMMANDS};
use crate::error::CliError;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1))
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Usage(format!("{}:{}: invalid key {key:?}", path.display(), n + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts config entries as flags right after the subcommand, so that
/// flags given on the command line, which come later, win.
pub fn merge_config(argv: Vec<OsString>) -> Result<(Vec<OsString>, Option<PathBuf>, BTreeMap<String, String>), CliError> {
    let Some(path) = config_path(&argv) else {
        return Ok((argv, None, BTreeMap::new()));
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse_config(&text, &path)?;
    let Some(at) = argv.iter().position(|a| COMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok((argv, Some(path), entries));
    };
    let mut injected = Vec::new();
    for (k, v) in &entries {
        match v.as_str() {
            "true" => injected.push(OsString::from(format!("--{k}"))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{k}")));
                injected.push(OsString::from(v));
            }
        }
    }
    let mut merged = argv[..=at].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[at + 1..]);
    Ok((merged, Some(path), entries))
}

/// Provenance record written into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub flags: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub config_entries: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn new(cli: &Cli, config_file: Option<PathBuf>, config_entries: BTreeMap<String, String>) -> Self {
        let flags = serde_json::to_value(&cli.command)
            .ok()
            .and_then(|v| v.as_object().and_then(|o| o.values().next().cloned()))
            .unwrap_or(serde_json::Value::Null);
        Self {
            tool: "qbestd",
            version: env!("CARGO_PKG_VERSION"),
            command: cli.command.name(),
            flags,
            config_file,
            config_entries,
            threads: cli.threads,
        }
    }

    pub fn value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// One-line `# run_config: {...}` header for CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!("# run_config: {}\n", self.value())
    }
}

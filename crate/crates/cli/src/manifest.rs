//! Run manifests: enough of an invocation to repeat it from the file alone.

use std::fmt::Write as _;
use std::path::Path;

use umloc::textfmt;
use umloc::{Error, Result};

pub const MANIFEST_MAGIC: &str = "UMAN1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const COMMANDS: [&str; 5] = ["simulate", "train", "eval", "robustness", "plot"];

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Flag name (without dashes) and value, sorted by name.
    pub args: Vec<(String, String)>,
    /// Resolved training configuration as `key=value` pairs, for `train`.
    pub config: Vec<(String, String)>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_control() || c == '=') || s.trim() != s {
        return Err(Error::Config(format!(
            "{what} '{s}' cannot be stored in a manifest"
        )));
    }
    Ok(())
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            args: Vec::new(),
            config: Vec::new(),
        }
    }

    pub fn arg(mut self, name: &str, value: impl ToString) -> Self {
        self.args.push((name.into(), value.to_string()));
        self.args.sort();
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.args
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, name: &str, value: impl ToString) {
        match self.args.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = value.to_string(),
            None => {
                self.args.push((name.into(), value.to_string()));
                self.args.sort();
            }
        }
    }

    /// Stores a config document (`key=value` lines) inline.
    pub fn with_config(mut self, text: &str) -> Result<Self> {
        let kv = textfmt::parse_kv_document(text, None)?;
        self.config = kv
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(self)
    }

    pub fn config_text(&self) -> Option<String> {
        if self.config.is_empty() {
            return None;
        }
        Some(
            self.config
                .iter()
                .map(|(k, v)| format!("{k}={v}\n"))
                .collect(),
        )
    }

    pub fn to_text(&self) -> Result<String> {
        for (k, v) in self.args.iter().chain(&self.config) {
            check_token("key", k)?;
            if v.chars().any(|c| c.is_control()) || v.trim() != v {
                return Err(Error::Config(format!(
                    "value '{v}' cannot be stored in a manifest"
                )));
            }
        }
        let mut s = format!(
            "{MANIFEST_MAGIC}\ncommand={}\nversion={}\nseed={}\n",
            self.command, self.version, self.seed
        );
        for (k, v) in &self.args {
            let _ = writeln!(s, "arg.{k}={v}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = textfmt::parse_kv_document(text, Some(MANIFEST_MAGIC))?;
        let command: String = kv.require("command")?;
        if !COMMANDS.contains(&command.as_str()) {
            return Err(Error::Config(format!("unknown command '{command}'")));
        }
        let mut m = Manifest {
            command,
            version: kv.require("version")?,
            seed: kv.require("seed")?,
            args: Vec::new(),
            config: Vec::new(),
        };
        for (k, v) in kv.iter() {
            if let Some(name) = k.strip_prefix("arg.") {
                check_token("flag", name)?;
                if name == "seed" {
                    return Err(Error::Config("seed belongs in the seed key".into()));
                }
                m.args.push((name.into(), v.into()));
            } else if let Some(name) = k.strip_prefix("config.") {
                check_token("config key", name)?;
                m.config.push((name.into(), v.into()));
            } else if !matches!(k, "command" | "version" | "seed") {
                return Err(Error::Config(format!("unknown manifest key '{k}'")));
            }
        }
        Ok(m)
    }

    /// The command line that reproduces this run.
    pub fn to_argv(&self) -> Vec<String> {
        let mut argv = vec![
            "umloc".to_string(),
            self.command.clone(),
            "--seed".into(),
            self.seed.to_string(),
        ];
        for (k, v) in &self.args {
            argv.push(format!("--{k}"));
            argv.push(v.clone());
        }
        argv
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        textfmt::write_string(path, &self.to_text()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Manifest::parse(&textfmt::read_to_string(path)?)
    }
}

//! JSON experiment configs: loading, dotted `key=value` overrides, and the
//! failure type shared by every command.

use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};

/// A command failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad config file, override or value (exit 2).
    Config(String),
    /// Numerical breakdown inside a computation (exit 3).
    Numerical(String),
    /// A checkpoint, mask, reference or parts file is absent (exit 4).
    Missing(String),
    /// Anything else, e.g. an unwritable output directory (exit 1).
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Missing(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Missing(m) => write!(f, "missing artifact: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<combostoc::Error> for Failure {
    fn from(e: combostoc::Error) -> Self {
        use combostoc::Error as E;
        if e.is_numerical() {
            return Failure::Numerical(e.to_string());
        }
        match e {
            E::Io(io) => Failure::Other(io.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn load(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Failure::Config(format!("{}: top level must be an object", path.display())));
    }
    Ok(value)
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, else as
/// a string.
pub fn parse_override(arg: &str) -> CliResult<(Vec<String>, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{arg}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(Failure::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

/// Sets `root[path...] = value`, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> CliResult<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(Failure::Config(format!(
                    "cannot set `{}`: `{}` is not an object",
                    path.join("."),
                    path[..i].join(".")
                )));
            }
        }
        let obj = node.as_object_mut().expect("object");
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parses `NXxNY`.
pub fn parse_grid(s: &str) -> CliResult<[usize; 2]> {
    let bad = || Failure::Config(format!("--grid expects NXxNY, got `{s}`"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
}

//! Flat `key = value` run configuration.
//!
//! Values resolve in order: schema default, config file, command-line
//! flag. Unknown keys are errors. Arrays are comma-separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowattack::{Error, Result};

/// One recognized key. An empty default marks the key as required unless
/// `optional` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub optional: bool,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        optional: false,
    }
}

pub const fn optional(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: "",
        help,
        optional: true,
    }
}

impl Key {
    pub fn required(&self) -> bool {
        self.default.is_empty() && !self.optional
    }

    /// Command-line spelling, e.g. `--max-queries`.
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    command: &'static str,
    schema: &'static [Key],
    values: BTreeMap<&'static str, String>,
}

fn lookup(schema: &'static [Key], name: &str) -> Option<&'static Key> {
    schema.iter().find(|k| k.name == name)
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", no + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Layers the config file (if any) and flag overrides over the defaults.
    pub fn resolve(
        command: &'static str,
        schema: &'static [Key],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> =
            schema.iter().map(|k| (k.name, k.default.to_string())).collect();
        let mut set = |pairs: &[(String, String)], origin: &str| -> Result<()> {
            for (k, v) in pairs {
                let spec = lookup(schema, k).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown key {k:?} in {origin} for `{command}` (recognized: {})",
                        schema.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
                    ))
                })?;
                values.insert(spec.name, v.clone());
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            set(&parse_config_text(&text)?, &path.display().to_string())?;
        }
        set(overrides, "command-line flags")?;
        for k in schema {
            if k.required() && values[k.name].is_empty() {
                return Err(Error::Config(format!(
                    "`{command}` needs --{} (or `{}` in the config file)",
                    k.flag(),
                    k.name
                )));
            }
        }
        Ok(Self {
            command,
            schema,
            values,
        })
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("key {name:?} is not in the `{}` schema", self.command))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|e| Error::Config(format!("key {name} = {raw:?}: {e}")))
    }

    /// Parses a value whose own parser reports config errors.
    pub fn choice<T: FromStr<Err = Error>>(&self, name: &str) -> Result<T> {
        self.raw(name).parse().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("key {name}: {msg}")),
            other => other,
        })
    }

    /// Floats also accept a `a/b` fraction such as `8/255`.
    pub fn f64(&self, name: &str) -> Result<f64> {
        parse_f64(self.raw(name)).map_err(|e| Error::Config(format!("key {name}: {e}")))
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        self.get(name)
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.get(name)
    }

    pub fn string(&self, name: &str) -> String {
        self.raw(name).to_string()
    }

    /// `None` for an empty optional path.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let raw = self.raw(name);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn required_path(&self, name: &str) -> Result<PathBuf> {
        self.path(name)
            .ok_or_else(|| Error::Config(format!("key {name} must name a file or directory")))
    }

    fn items(&self, name: &str) -> Vec<&str> {
        self.raw(name)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn f64_list(&self, name: &str) -> Result<Vec<f64>> {
        self.items(name)
            .into_iter()
            .map(|s| parse_f64(s).map_err(|e| Error::Config(format!("key {name}: {e}"))))
            .collect()
    }

    pub fn usize_list(&self, name: &str) -> Result<Vec<usize>> {
        self.items(name)
            .into_iter()
            .map(|s| s.parse().map_err(|e| Error::Config(format!("key {name}: {s:?}: {e}"))))
            .collect()
    }

    pub fn path_list(&self, name: &str) -> Vec<PathBuf> {
        self.items(name).into_iter().map(PathBuf::from).collect()
    }

    /// Re-loadable text form in schema order.
    pub fn to_text(&self) -> String {
        let mut s = format!("# flowattack {}\n", self.command);
        for k in self.schema {
            let _ = writeln!(s, "{} = {}", k.name, self.values[k.name]);
        }
        s
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            a / b
        }
        None => s.parse().map_err(|e| format!("{s:?}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not a finite number"))
    }
}

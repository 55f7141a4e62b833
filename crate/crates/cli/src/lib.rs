//! Command-line pipeline: generate data, train a flow and a classifier,
//! run attacks, fit detectors and evaluate.
//!
//! Every command writes into a fresh output directory, including the fully
//! resolved `config.txt`, and is byte-reproducible for a fixed config.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use flowattack::{Error, Result};

use config::{Key, RunConfig};

/// Exit status for usage, config and contract errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for unreadable or malformed input files.
pub const EXIT_FORMAT: u8 = 3;
/// Exit status for numeric failures.
pub const EXIT_NUMERIC: u8 = 4;

pub struct Options {
    pub out: PathBuf,
    pub jobs: usize,
}

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
    /// Whether the command accepts `--jobs`.
    pub parallel: bool,
    pub run: fn(&RunConfig, &Options) -> Result<()>,
}

pub const COMMANDS: &[CommandSpec] = &[
    commands::data::SPEC,
    commands::train::FLOW_SPEC,
    commands::train::CLASSIFIER_SPEC,
    commands::attack::SPEC,
    commands::analyze::DETECT_SPEC,
    commands::analyze::EVALUATE_SPEC,
];

fn subcommand(spec: &CommandSpec) -> Command {
    let mut cmd = Command::new(spec.name)
        .about(spec.about)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("Flat `key = value` file; flags below override it"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .required(true)
                .help("Fresh output directory (created; must be empty if it exists)"),
        );
    if spec.parallel {
        cmd = cmd.arg(
            Arg::new("jobs")
                .long("jobs")
                .value_name("N")
                .default_value("1")
                .value_parser(clap::value_parser!(usize))
                .help("Worker threads; results do not depend on N"),
        );
    }
    for k in spec.keys {
        let help = if k.required() {
            format!("{} (required)", k.help)
        } else if k.default.is_empty() {
            format!("{} (optional)", k.help)
        } else {
            format!("{} [default: {}]", k.help, k.default)
        };
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.flag())
                .value_name("VALUE")
                .action(ArgAction::Set)
                .overrides_with(k.name)
                .help(help),
        );
    }
    cmd
}

/// The full argument parser.
pub fn cli() -> Command {
    Command::new("flowattack")
        .about("Flow-based black-box adversarial attacks on desk-scale models")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(COMMANDS.iter().map(subcommand))
}

fn options(spec: &CommandSpec, m: &ArgMatches) -> Result<(RunConfig, Options)> {
    let overrides: Vec<(String, String)> = spec
        .keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let cfg = RunConfig::resolve(spec.name, spec.keys, file.as_deref(), &overrides)?;
    let jobs = if spec.parallel {
        *m.get_one::<usize>("jobs").expect("jobs has a default")
    } else {
        1
    };
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let out = PathBuf::from(m.get_one::<String>("out").expect("out is required"));
    Ok((cfg, Options { out, jobs }))
}

/// Creates `dir`, refusing a non-empty existing directory.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() || std::fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} already exists and is not empty",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Runs one parsed invocation.
pub fn dispatch(matches: &ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let spec = COMMANDS
        .iter()
        .find(|c| c.name == name)
        .expect("parser only accepts known subcommands");
    let (cfg, opts) = options(spec, sub)?;
    fresh_dir(&opts.out)?;
    std::fs::write(opts.out.join("config.txt"), cfg.to_text())?;
    (spec.run)(&cfg, &opts)
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => EXIT_USAGE,
        Error::Format { .. } | Error::Io(_) => EXIT_FORMAT,
        Error::Numeric(_) | Error::Domain(_) | Error::Singular { .. } | Error::Budget { .. } => EXIT_NUMERIC,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Format {
                offset: 3,
                msg: "x".into()
            }),
            EXIT_FORMAT
        );
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
    }
}

//! Flat `key = value` run configuration shared by every command.
//!
//! Each key is also a `--key` flag. Resolution order: built-in default, then
//! the `--config` file, then flags given on the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use tumorseg::data_pipeline::Partition;
use tumorseg::metrics::DiceMode;
use tumorseg::preprocess::SliceWindow;

use crate::CliError;

pub const TRAIN: &str = "train";
pub const EVALUATE: &str = "evaluate";
pub const PREDICT: &str = "predict";
pub const PLOT: &str = "plot";
pub const MAKE_FIXTURES: &str = "make-fixtures";

pub const COMMANDS: [(&str, &str); 5] = [
    (TRAIN, "Train a U-Net on a dataset root and write logs and checkpoints"),
    (EVALUATE, "Evaluate a checkpoint on one partition of one or more dataset roots"),
    (PREDICT, "Segment one case directory and write a label volume"),
    (PLOT, "Draw loss, accuracy and Dice curves from training logs"),
    (MAKE_FIXTURES, "Generate synthetic BraTS-layout cases"),
];

pub struct Key {
    pub name: &'static str,
    pub value_name: &'static str,
    pub default: Option<&'static str>,
    /// Accepts several values; in a config file they are comma-separated.
    pub multiple: bool,
    pub commands: &'static [&'static str],
    pub help: &'static str,
}

const ALL_DATA: &[&str] = &[TRAIN, EVALUATE, MAKE_FIXTURES];

pub const KEYS: &[Key] = &[
    Key {
        name: "data-root",
        value_name: "DIR",
        default: None,
        multiple: true,
        commands: ALL_DATA,
        help: "Dataset root holding one directory per case (repeat to evaluate several)",
    },
    Key {
        name: "output-dir",
        value_name: "DIR",
        default: Some("output"),
        multiple: false,
        commands: &[TRAIN, EVALUATE, PREDICT, PLOT],
        help: "Directory for logs, checkpoints, reports, predictions and images",
    },
    Key {
        name: "seed",
        value_name: "N",
        default: Some("0"),
        multiple: false,
        commands: ALL_DATA,
        help: "Seed for the split, initialisation, shuffling and fixture generation",
    },
    Key {
        name: "epochs",
        value_name: "N",
        default: Some("235"),
        multiple: false,
        commands: &[TRAIN],
        help: "Maximum number of epochs",
    },
    Key {
        name: "batch-size",
        value_name: "N",
        default: Some("1"),
        multiple: false,
        commands: &[TRAIN, EVALUATE],
        help: "Slices per batch",
    },
    Key {
        name: "learning-rate",
        value_name: "LR",
        default: Some("0.001"),
        multiple: false,
        commands: &[TRAIN],
        help: "Adam learning rate",
    },
    Key {
        name: "base-features",
        value_name: "N",
        default: Some("32"),
        multiple: false,
        commands: &[TRAIN],
        help: "Channels of the first encoder level",
    },
    Key {
        name: "depth",
        value_name: "N",
        default: Some("4"),
        multiple: false,
        commands: &[TRAIN],
        help: "Number of down-sampling levels",
    },
    Key {
        name: "input-size",
        value_name: "HxW",
        default: Some("128x128"),
        multiple: false,
        commands: &[TRAIN],
        help: "In-plane size slices are resized to",
    },
    Key {
        name: "window-start",
        value_name: "N",
        default: Some("22"),
        multiple: false,
        commands: &[TRAIN, EVALUATE, PREDICT],
        help: "First axial slice used",
    },
    Key {
        name: "window-length",
        value_name: "N",
        default: Some("100"),
        multiple: false,
        commands: &[TRAIN, EVALUATE, PREDICT],
        help: "Number of consecutive axial slices used",
    },
    Key {
        name: "split-ratios",
        value_name: "T,V,S",
        default: Some("0.68,0.20,0.12"),
        multiple: false,
        commands: &[TRAIN, EVALUATE],
        help: "Train, validation and test fractions",
    },
    Key {
        name: "patience",
        value_name: "N",
        default: Some("10"),
        multiple: false,
        commands: &[TRAIN],
        help: "Early-stopping patience in epochs",
    },
    Key {
        name: "min-delta",
        value_name: "X",
        default: Some("0"),
        multiple: false,
        commands: &[TRAIN],
        help: "Smallest change that counts as an improvement",
    },
    Key {
        name: "monitor",
        value_name: "METRIC",
        default: Some("val_loss"),
        multiple: false,
        commands: &[TRAIN],
        help: "Log column watched by checkpointing and early stopping",
    },
    Key {
        name: "record-time",
        value_name: "BOOL",
        default: Some("true"),
        multiple: false,
        commands: &[TRAIN],
        help: "Record wall-clock seconds per epoch; false writes 0 for reproducible logs",
    },
    Key {
        name: "partition",
        value_name: "NAME",
        default: Some("test"),
        multiple: false,
        commands: &[EVALUATE],
        help: "Partition to evaluate: train, validation or test",
    },
    Key {
        name: "decision-mode",
        value_name: "MODE",
        default: Some("hard"),
        multiple: false,
        commands: &[EVALUATE],
        help: "Dice from argmax decisions (hard) or probabilities (soft)",
    },
    Key {
        name: "checkpoint",
        value_name: "FILE",
        default: None,
        multiple: false,
        commands: &[EVALUATE, PREDICT],
        help: "Checkpoint file to load",
    },
    Key {
        name: "case-dir",
        value_name: "DIR",
        default: None,
        multiple: false,
        commands: &[PREDICT],
        help: "Directory of the case to segment",
    },
    Key {
        name: "csv",
        value_name: "FILE",
        default: None,
        multiple: true,
        commands: &[PLOT],
        help: "Training log to plot (repeat to compare runs)",
    },
    Key {
        name: "cases",
        value_name: "N",
        default: Some("10"),
        multiple: false,
        commands: &[MAKE_FIXTURES],
        help: "Number of synthetic cases",
    },
    Key {
        name: "fixture-shape",
        value_name: "HxWxD",
        default: Some("64x64x155"),
        multiple: false,
        commands: &[MAKE_FIXTURES],
        help: "Voxel grid of each synthetic volume",
    },
];

pub fn build_cli() -> Command {
    let mut cli = Command::new("tumorseg")
        .about("2D U-Net brain tumour segmentation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("Flat key = value file; flags override its entries"),
        );
        for key in KEYS.iter().filter(|k| k.commands.contains(&name)) {
            let mut help = key.help.to_string();
            if let Some(d) = key.default {
                help.push_str(&format!(" [default: {d}]"));
            }
            sub = sub.arg(
                Arg::new(key.name)
                    .long(key.name)
                    .value_name(key.value_name)
                    .help(help)
                    .action(if key.multiple {
                        ArgAction::Append
                    } else {
                        ArgAction::Set
                    }),
            );
        }
        cli = cli.subcommand(sub);
    }
    cli
}

/// Parses `key = value` lines. `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected 'key = value'", n + 1))?;
        let key = key.trim();
        if !KEYS.iter().any(|k| k.name == key) {
            return Err(format!("line {}: unknown key '{key}'", n + 1));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key '{key}'", n + 1));
        }
    }
    Ok(out)
}

/// Fully resolved settings of one command invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<&'static str, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Settings {
    pub fn resolve(command: &'static str, matches: &ArgMatches) -> Result<Settings, CliError> {
        let file = match matches.get_one::<String>("config") {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config file {path}: {e}")))?;
                parse_config_text(&text).map_err(|e| usage(format!("config file {path}: {e}")))?
            }
            None => BTreeMap::new(),
        };
        let mut values = BTreeMap::new();
        for key in KEYS.iter().filter(|k| k.commands.contains(&command)) {
            let from_flag = (matches.value_source(key.name) == Some(ValueSource::CommandLine))
                .then(|| {
                    matches
                        .get_many::<String>(key.name)
                        .map(|v| v.cloned().collect::<Vec<_>>().join(","))
                })
                .flatten();
            let value = from_flag
                .or_else(|| file.get(key.name).cloned())
                .or_else(|| key.default.map(str::to_string));
            if let Some(v) = value {
                values.insert(key.name, v);
            }
        }
        Ok(Settings { command, values })
    }

    /// Config-file text that reproduces these settings.
    pub fn to_config_text(&self) -> String {
        let mut out = format!("# resolved settings of '{}'\n", self.command);
        for key in KEYS {
            if let Some(v) = self.values.get(key.name) {
                let _ = writeln!(out, "{} = {v}", key.name);
            }
        }
        out
    }

    fn raw(&self, key: &str) -> Result<&str, CliError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| usage(format!("--{key} is required")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| usage(format!("invalid value '{raw}' for {key}: {e}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parsed(key)
    }

    pub fn string(&self, key: &str) -> Result<String, CliError> {
        self.raw(key).map(str::to_string)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn paths(&self, key: &str) -> Result<Vec<PathBuf>, CliError> {
        Ok(self
            .raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect())
    }

    fn dims(&self, key: &str, n: usize) -> Result<Vec<usize>, CliError> {
        let raw = self.raw(key)?;
        let dims = raw
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .filter(|d| d.len() == n)
            .ok_or_else(|| usage(format!("invalid value '{raw}' for {key}: expected {n} sizes joined by 'x'")))?;
        Ok(dims)
    }

    pub fn size2(&self, key: &str) -> Result<(usize, usize), CliError> {
        let d = self.dims(key, 2)?;
        Ok((d[0], d[1]))
    }

    pub fn size3(&self, key: &str) -> Result<(usize, usize, usize), CliError> {
        let d = self.dims(key, 3)?;
        Ok((d[0], d[1], d[2]))
    }

    pub fn window(&self) -> Result<SliceWindow, CliError> {
        let length = self.usize("window-length")?;
        if length == 0 {
            return Err(usage("window-length must be at least 1"));
        }
        Ok(SliceWindow::new(self.usize("window-start")?, length))
    }

    pub fn split_ratios(&self) -> Result<(f64, f64, f64), CliError> {
        let raw = self.raw("split-ratios")?;
        let parts = raw
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .filter(|p| p.len() == 3)
            .ok_or_else(|| usage(format!("invalid value '{raw}' for split-ratios: expected three numbers")))?;
        Ok((parts[0], parts[1], parts[2]))
    }

    pub fn partition(&self) -> Result<Partition, CliError> {
        self.parsed("partition")
    }

    pub fn decision_mode(&self) -> Result<DiceMode, CliError> {
        self.parsed("decision-mode")
    }
}

//! Command table, flag parsing and `key = value` config files.
//!
//! Every option is a `--name value` pair. Values from `--config` are applied
//! first and explicit flags win; the resolved map is what gets echoed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

use crate::CliError;

pub struct Opt {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn opt(name: &'static str, default: &'static str, help: &'static str) -> Opt {
    Opt { name, default: Some(default), help }
}

const fn req(name: &'static str, help: &'static str) -> Opt {
    Opt { name, default: None, help }
}

pub struct Spec {
    pub name: &'static str,
    pub about: &'static str,
    pub opts: Vec<Opt>,
}

pub fn specs() -> Vec<Spec> {
    vec![
        Spec {
            name: "synth-data",
            about: "Write a synthetic panorama corpus as <out>/<class>/<id>.png",
            opts: vec![
                req("out", "output corpus directory"),
                opt("classes", "3", "number of classes"),
                opt("count", "20", "panoramas per class"),
                opt("size", "64", "panorama width (height is half)"),
                opt("seed", "0", "seed base"),
            ],
        },
        Spec {
            name: "prepare",
            about: "Build a snapshot/panorama pair cache from a corpus",
            opts: vec![
                req("corpus", "corpus directory (<class>/<id>.png)"),
                req("out", "output pair-cache directory"),
                opt("size", "64", "target panorama width"),
                opt("cap", "none", "keep at most this many training images per class"),
                opt("split-seed", "0", "seed of the train/test split and cap"),
                opt("split-fraction", "0.75", "fraction of each class used for training"),
                opt("min-class-size", "10", "drop classes with fewer images"),
            ],
        },
        Spec {
            name: "train",
            about: "Train a generator/discriminator pair on a pair cache",
            opts: vec![
                req("pairs", "pair-cache directory"),
                req("out", "output directory"),
                opt("variant", "conditioned", "conditioned | independent | specific"),
                opt("channels", "64", "base channel count (64, 96 or 128 in the full setup)"),
                opt("pad", "on", "continuity padding on | off"),
                opt("iters", "200", "training iterations"),
                opt("batch", "1", "batch size"),
                opt("lr", "0.0002", "Adam learning rate"),
                opt("lambda", "100", "L1 weight"),
                opt("depth", "auto", "U-Net depth"),
                opt("seed", "0", "training seed"),
            ],
        },
        Spec {
            name: "train-classifier",
            about: "Train a scene classifier on panoramas or on snapshots",
            opts: vec![
                req("pairs", "pair-cache directory"),
                req("out", "output directory"),
                opt("target", "odi", "odi | snapshot"),
                opt("iters", "400", "training iterations"),
                opt("batch", "8", "batch size"),
                opt("lr", "0.001", "Adam learning rate"),
                opt("channels", "16", "base channel count"),
                opt("seed", "0", "training seed"),
            ],
        },
        Spec {
            name: "generate",
            about: "Generate panoramas from a snapshot",
            opts: vec![
                req("checkpoint", "generator checkpoint, or a directory of per-class checkpoints"),
                req("input", "snapshot PNG"),
                req("out", "output directory"),
                opt("class-from", "classifier", "classifier | ideal:<class name>"),
                opt("classifier", "none", "snapshot classifier checkpoint (for --class-from classifier)"),
                opt("lon", "0", "longitude of the snapshot, degrees"),
                opt("lat", "0", "latitude of the snapshot, degrees"),
                opt("paste", "off", "copy snapshot pixels over the output: on | off"),
                opt("seed", "0", "noise seed"),
                opt("reps", "1", "number of panoramas to generate"),
            ],
        },
        Spec {
            name: "reproject",
            about: "Extract a perspective view from a panorama",
            opts: vec![
                req("input", "panorama PNG"),
                req("out", "output directory"),
                opt("lon", "0", "view longitude, degrees"),
                opt("lat", "0", "view latitude, degrees"),
            ],
        },
        Spec {
            name: "evaluate",
            about: "Score generated panoramas and write a JSON report",
            opts: vec![
                req("method", "odi | views | fid | continuity"),
                req("out", "output directory"),
                opt("input", "none", "PNG or directory of PNGs (continuity)"),
                opt("checkpoint", "none", "generator checkpoint (odi, views, fid)"),
                opt("pairs", "none", "pair-cache directory (odi, views, fid)"),
                opt("classifier", "none", "scoring classifier: panorama target for odi and fid, snapshot target for views"),
                opt("conditioning", "ideal", "ideal | path to a snapshot classifier checkpoint"),
                opt("views", "8", "number of horizontal views (views)"),
                opt("reps", "5", "generations per test snapshot"),
                opt("paste", "off", "copy snapshot pixels over the output: on | off"),
                opt("seed", "0", "noise seed"),
            ],
        },
    ]
}

pub fn command() -> Command {
    let mut cmd = Command::new("odigen")
        .about("Panorama generation from a single perspective snapshot")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in specs() {
        let mut sub = Command::new(spec.name)
            .about(spec.about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value file; flags override it"));
        for o in &spec.opts {
            let help = match o.default {
                Some(d) => format!("{} [default: {d}]", o.help),
                None => o.help.to_string(),
            };
            sub = sub.arg(Arg::new(o.name).long(o.name).value_name("VALUE").help(help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Fully resolved options of one subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut m = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

impl RunConfig {
    pub fn resolve(command: &str, matches: &ArgMatches) -> Result<Self, CliError> {
        let spec = specs().into_iter().find(|s| s.name == command).expect("subcommand is in the table");
        let mut values = BTreeMap::new();
        if let Some(path) = matches.get_one::<String>("config") {
            let path = Path::new(path);
            if !path.is_file() {
                return Err(CliError::missing(path));
            }
            let text = std::fs::read_to_string(path).map_err(|e| CliError::other(e.to_string()))?;
            let file = parse_config_file(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            for (k, v) in file {
                if !spec.opts.iter().any(|o| o.name == k) {
                    return Err(CliError::usage(format!("{}: unknown key `{k}` for {command}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for o in &spec.opts {
            if matches.value_source(o.name) == Some(ValueSource::CommandLine) {
                values.insert(o.name.to_string(), matches.get_one::<String>(o.name).cloned().unwrap_or_default());
            }
        }
        for o in &spec.opts {
            if !values.contains_key(o.name) {
                match o.default {
                    Some(d) => values.insert(o.name.to_string(), d.to_string()),
                    None => return Err(CliError::usage(format!("{command}: --{} is required", o.name))),
                };
            }
        }
        Ok(Self { command: command.to_string(), values })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("none")
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V, CliError> {
        let v = self.str(key);
        v.parse().map_err(|_| CliError::usage(format!("--{key}: cannot parse `{v}`")))
    }

    /// `None` for the literal `none`.
    pub fn optional<V: FromStr>(&self, key: &str) -> Result<Option<V>, CliError> {
        match self.str(key) {
            "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self.optional::<String>(key)?.map(PathBuf::from))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)?.ok_or_else(|| CliError::usage(format!("{}: --{key} is required", self.command)))
    }

    /// An existing input path.
    pub fn input(&self, key: &str) -> Result<PathBuf, CliError> {
        let p = self.required_path(key)?;
        if !p.exists() {
            return Err(CliError::missing(&p));
        }
        Ok(p)
    }

    pub fn switch(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "on" => Ok(true),
            "off" => Ok(false),
            v => Err(CliError::usage(format!("--{key} must be on or off, got `{v}`"))),
        }
    }

    /// The resolved options in config-file form.
    pub fn to_text(&self) -> String {
        let mut s = format!("# odigen {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(argv: &[&str]) -> Result<RunConfig, CliError> {
        let m = command().try_get_matches_from(argv).unwrap();
        let (name, sub) = m.subcommand().unwrap();
        RunConfig::resolve(name, sub)
    }

    #[test]
    fn defaults_and_flags() {
        let c = resolve(&["odigen", "train", "--pairs", "p", "--out", "o", "--iters", "7"]).unwrap();
        assert_eq!(c.get::<usize>("iters").unwrap(), 7);
        assert_eq!(c.str("variant"), "conditioned");
        assert!(c.switch("pad").unwrap());
    }

    #[test]
    fn missing_required_is_usage_error() {
        let e = resolve(&["odigen", "train", "--pairs", "p"]).unwrap_err();
        assert_eq!(e.code, crate::EXIT_USAGE);
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "# comment\npairs = p\nout = o\niters = 3\nseed = 9\n").unwrap();
        let p = path.to_str().unwrap();
        let c = resolve(&["odigen", "train", "--config", p, "--seed", "4"]).unwrap();
        assert_eq!(c.str("iters"), "3");
        assert_eq!(c.str("seed"), "4");
        let echoed = dir.path().join("echo.txt");
        std::fs::write(&echoed, c.to_text()).unwrap();
        let again = resolve(&["odigen", "train", "--config", echoed.to_str().unwrap()]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        let e = resolve(&["odigen", "reproject", "--config", path.to_str().unwrap()]).unwrap_err();
        assert_eq!(e.code, crate::EXIT_USAGE);
    }
}

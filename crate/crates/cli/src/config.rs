//! Flat `key = value` run configuration.
//!
//! Every key is also a long flag of the same name. Values resolve as
//! flags > `--config` file > checkpoint echo (evaluate, rank) > defaults, and
//! the resolved set is echoed and written to `config.txt` before any work
//! starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};

/// A bad flag, config value or input path. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmd {
    Train,
    Evaluate,
    Rank,
    Precompute,
    Synthesize,
    Benchmark,
    Sweep,
}

impl Cmd {
    pub const ALL: [Cmd; 7] = [
        Cmd::Train,
        Cmd::Evaluate,
        Cmd::Rank,
        Cmd::Precompute,
        Cmd::Synthesize,
        Cmd::Benchmark,
        Cmd::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Cmd::Train => "train",
            Cmd::Evaluate => "evaluate",
            Cmd::Rank => "rank",
            Cmd::Precompute => "precompute",
            Cmd::Synthesize => "synthesize",
            Cmd::Benchmark => "benchmark",
            Cmd::Sweep => "sweep",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Cmd::Train => "Train a relevance model through the OWA ranking layer",
            Cmd::Evaluate => "Evaluate a checkpoint: DCG, group violations, regret",
            Cmd::Rank => "Sample rankings from a checkpoint's policies",
            Cmd::Precompute => "Solve and cache ground-truth target policies",
            Cmd::Synthesize => "Write a synthetic LETOR dataset",
            Cmd::Benchmark => "Time the solver and the SPO+ backward pass",
            Cmd::Sweep => "Train and evaluate over a lambda grid and seeds",
        }
    }
}

use Cmd::*;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub commands: &'static [Cmd],
    /// Taken from the checkpoint echo when not given explicitly.
    pub inherit: bool,
}

const fn key(
    name: &'static str,
    default: &'static str,
    help: &'static str,
    commands: &'static [Cmd],
) -> Key {
    Key {
        name,
        default,
        help,
        commands,
        inherit: false,
    }
}

const fn inherited(
    name: &'static str,
    default: &'static str,
    help: &'static str,
    commands: &'static [Cmd],
) -> Key {
    Key {
        name,
        default,
        help,
        commands,
        inherit: true,
    }
}

/// Empty defaults mean "required" for `data` and `checkpoint` and "derived"
/// elsewhere.
pub const KEYS: &[Key] = &[
    key("data", "", "LETOR input file", &[Train, Evaluate, Rank, Precompute, Sweep]),
    key("checkpoint", "", "model checkpoint written by train", &[Evaluate, Rank]),
    key("out", "owa-rank-out", "output directory", &Cmd::ALL),
    key("workers", "0", "worker threads (0 = all cores)", &Cmd::ALL),
    key("seed", "0", "model, shuffle and sampling seed", &[Train, Rank, Synthesize, Benchmark]),
    key("seeds", "0,1", "comma-separated seeds", &[Sweep]),
    inherited("lambda", "0.5", "fairness weight in [0, 1]", &[Train, Evaluate, Rank]),
    key("lambdas", "0,0.25,0.5,0.75,1", "comma-separated lambda grid", &[Precompute, Sweep, Benchmark]),
    inherited("list-size", "20", "items per query", &[Train, Evaluate, Precompute, Synthesize, Sweep]),
    key("groups", "2", "number of protected groups", &[Train, Precompute, Sweep, Benchmark]),
    key("group-feature", "1", "1-based feature id whose quantiles define groups", &[Train, Precompute, Synthesize, Sweep]),
    inherited("iters-train", "100", "Frank-Wolfe iterations in the backward pass", &[Train, Evaluate, Precompute, Sweep, Benchmark]),
    inherited("iters-infer", "500", "Frank-Wolfe iterations at inference", &[Train, Evaluate, Rank, Precompute, Sweep, Benchmark]),
    inherited("beta0", "1", "initial smoothing parameter", &[Train, Evaluate, Rank, Precompute, Sweep, Benchmark]),
    inherited("split", "0.8,0.1,0.1", "train,valid,test fractions", &[Train, Evaluate, Sweep]),
    inherited("split-seed", "0", "seed of the query split", &[Train, Evaluate, Sweep]),
    key("epochs", "20", "training epochs", &[Train, Sweep]),
    key("batch-size", "256", "queries per Adam step", &[Train, Sweep]),
    key("lr", "0.1", "Adam learning rate", &[Train, Sweep]),
    key("hidden", "auto", "first hidden width (auto = next power of two >= d)", &[Train, Sweep]),
    key("targets", "", "target cache file (default <out>/targets.jsonl)", &[Train, Evaluate, Precompute, Sweep]),
    key("part", "test", "split to evaluate: train, valid, test or all", &[Evaluate]),
    key("per-query", "false", "also write per-query group violations", &[Evaluate]),
    key("samples", "1", "rankings sampled per query", &[Rank]),
    key("queries", "200", "number of queries", &[Synthesize, Benchmark]),
    key("features", "16", "feature dimension", &[Synthesize]),
    key("noise", "0", "relevance noise scale", &[Synthesize]),
    key("signal", "0.15", "scale of the linear relevance signal", &[Synthesize]),
    key("sizes", "20,40,60,80,100", "comma-separated list sizes", &[Benchmark]),
];

fn keys_for(cmd: Cmd) -> impl Iterator<Item = &'static Key> {
    KEYS.iter().filter(move |k| k.commands.contains(&cmd))
}

pub fn cli() -> Command {
    let mut root = Command::new("owa-rank")
        .about("Fair learning to rank with an OWA optimization layer")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Cmd::ALL {
        let mut sub = Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags take precedence"),
        );
        for k in keys_for(cmd) {
            let mut arg = Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(k.help);
            if k.default == "false" {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    Checkpoint,
    File,
    Flag,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Cmd,
    values: BTreeMap<&'static str, (String, Source)>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_matches(command: Cmd, m: &ArgMatches) -> anyhow::Result<Self> {
        let mut values: BTreeMap<&'static str, (String, Source)> = keys_for(command)
            .map(|k| (k.name, (k.default.to_string(), Source::Default)))
            .collect();
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read --config file {path}: {e}")))?;
            for (k, v) in parse_config_text(&text)? {
                let slot = values.iter_mut().find(|(name, _)| **name == k).ok_or_else(|| {
                    usage(format!(
                        "config file {path}: unknown key `{k}` for `{}`",
                        command.name()
                    ))
                })?;
                *slot.1 = (v, Source::File);
            }
        }
        for k in keys_for(command) {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name, (v.clone(), Source::Flag));
            }
        }
        Ok(Self { command, values })
    }

    /// Fills inheritable keys that are still at their defaults.
    pub fn inherit(&mut self, echo: &BTreeMap<String, String>) {
        for k in keys_for(self.command).filter(|k| k.inherit) {
            if let (Some(slot), Some(v)) = (self.values.get_mut(k.name), echo.get(k.name)) {
                if slot.1 == Source::Default {
                    *slot = (v.clone(), Source::Checkpoint);
                }
            }
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("key {key} is not defined for {}", self.command.name()))
            .0
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| usage(format!("invalid value {raw:?} for --{key}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> anyhow::Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        let items = raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| usage(format!("invalid entry {s:?} in --{key}: {e}")))
            })
            .collect::<anyhow::Result<Vec<T>>>()?;
        if items.is_empty() {
            return Err(usage(format!("--{key} must not be empty")));
        }
        Ok(items)
    }

    pub fn flag(&self, key: &str) -> anyhow::Result<bool> {
        self.get(key)
    }

    /// An existing input file, or a usage error naming the flag.
    pub fn input_path(&self, key: &str) -> anyhow::Result<PathBuf> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(usage(format!(
                "missing required --{key} (or `{key} = ...` in the config file)"
            )));
        }
        let path = PathBuf::from(raw);
        if !path.is_file() {
            return Err(usage(format!("--{key} {raw}: no such file")));
        }
        Ok(path)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// The target cache file, defaulting to `<out>/targets.jsonl`.
    pub fn targets_path(&self) -> PathBuf {
        match self.raw("targets") {
            "" => self.out_dir().join("targets.jsonl"),
            p => PathBuf::from(p),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .map(|(k, (v, _))| (k.to_string(), v.clone()))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("# owa-rank {}\n", self.command.name());
        for (k, (v, _)) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join("config.txt"), self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str]) -> anyhow::Result<RunConfig> {
        let m = cli().try_get_matches_from(args)?;
        let (name, sub) = m.subcommand().unwrap();
        let cmd = Cmd::ALL.into_iter().find(|c| c.name() == name).unwrap();
        RunConfig::from_matches(cmd, sub)
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "# comment\nlambda = 0.25\nepochs=3 # trailing\n").unwrap();
        let cfg = resolve(&["owa-rank", "train", "--config", file.to_str().unwrap(), "--epochs", "7"]).unwrap();
        assert_eq!(cfg.get::<f64>("lambda").unwrap(), 0.25);
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), 7);
        assert_eq!(cfg.get::<usize>("batch-size").unwrap(), 256);
    }

    #[test]
    fn rendered_config_round_trips() {
        let cfg = resolve(&["owa-rank", "sweep", "--lambdas", "0,1", "--lr", "0.01"]).unwrap();
        let pairs = parse_config_text(&cfg.render()).unwrap();
        let map: BTreeMap<String, String> = pairs.into_iter().collect();
        assert_eq!(map, cfg.to_map());
        assert_eq!(cfg.list::<f64>("lambdas").unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn unknown_file_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "samples = 3\n").unwrap();
        let err = resolve(&["owa-rank", "train", "--config", file.to_str().unwrap()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("samples"));
    }

    #[test]
    fn checkpoint_echo_fills_only_defaults() {
        let mut cfg = resolve(&["owa-rank", "evaluate", "--lambda", "0.9"]).unwrap();
        let echo: BTreeMap<String, String> = [("lambda", "0.1"), ("iters-infer", "50"), ("epochs", "3")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        cfg.inherit(&echo);
        assert_eq!(cfg.raw("lambda"), "0.9");
        assert_eq!(cfg.raw("iters-infer"), "50");
    }

    #[test]
    fn missing_input_names_the_flag() {
        let cfg = resolve(&["owa-rank", "train"]).unwrap();
        let err = cfg.input_path("data").unwrap_err();
        assert!(err.to_string().contains("--data"));
    }

    #[test]
    fn boolean_flag_without_value() {
        let cfg = resolve(&["owa-rank", "evaluate", "--per-query"]).unwrap();
        assert!(cfg.flag("per-query").unwrap());
    }
}

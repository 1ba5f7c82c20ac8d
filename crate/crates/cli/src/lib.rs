//! Command-line harness for `owa-rank`: configuration, subcommands and
//! report files.

pub mod bench;
pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;

use anyhow::Result;
use clap::ArgMatches;

use config::{usage, Cmd, RunConfig, UsageError};
use report::Checkpoint;

/// Parses `args`, runs the subcommand and returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage or configuration errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match config::cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let cmd = Cmd::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("subcommands come from Cmd::ALL");
    match execute(cmd, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cmd: Cmd, matches: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::from_matches(cmd, matches)?;
    // Fail on missing inputs before anything is written to the output directory.
    if matches!(cmd, Cmd::Train | Cmd::Evaluate | Cmd::Rank | Cmd::Precompute | Cmd::Sweep) {
        cfg.input_path("data")?;
    }
    let checkpoint = match cmd {
        Cmd::Evaluate | Cmd::Rank => {
            let path = cfg.input_path("checkpoint")?;
            let ckpt = Checkpoint::load(&path).map_err(|e| usage(format!("{e:#}")))?;
            cfg.inherit(&ckpt.config);
            Some(ckpt)
        }
        _ => None,
    };
    eprint!("{}", cfg.render());
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    cfg.write(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.get("workers")?)
        .build()?;
    pool.install(|| commands::dispatch(cmd, &cfg, checkpoint.as_ref()))
}

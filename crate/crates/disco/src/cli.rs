//! Command line driver.
//!
//! `disco run --config PATH [--seed N] --out PATH [--trace PATH]
//! [--until MICROS]` runs the detection scenario and writes the metrics
//! document; `disco vocab-dump [--vocab PATH] [--out PATH]` prints the
//! numeric ids a bootstrap file maps to. Exit code 0 on success, 2 on
//! usage or config errors.

use std::fs;

use disco_core::scenario::run_scenario_until;
use disco_core::simnet::SimTime;

use crate::config::parse_config;
use crate::metrics_doc::{render_metrics, render_trace};
use crate::vocab_io::{builtin_bootstrap, dump_vocabulary, load_vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;

const USAGE: &str = "usage:
  disco run --config PATH [--seed N] --out PATH [--trace PATH] [--until MICROS]
  disco vocab-dump [--vocab PATH] [--out PATH]";

struct Flags {
    values: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, String> {
        let mut values = Vec::new();
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let name = flag
                .strip_prefix("--")
                .ok_or_else(|| format!("unexpected argument {flag:?}"))?;
            let value = it.next().ok_or_else(|| format!("--{name} needs a value"))?;
            values.push((name.to_string(), value.clone()));
        }
        Ok(Flags { values })
    }

    fn take(&mut self, name: &str) -> Option<String> {
        let idx = self.values.iter().position(|(n, _)| n == name)?;
        Some(self.values.remove(idx).1)
    }

    fn finish(self) -> Result<(), String> {
        match self.values.first() {
            Some((name, _)) => Err(format!("unknown flag --{name}")),
            None => Ok(()),
        }
    }
}

pub fn main_with_args(args: &[String], stderr: &mut dyn std::io::Write) -> i32 {
    match run_cli(args) {
        Ok(()) => EXIT_OK,
        Err(message) => {
            let _ = writeln!(stderr, "error: {message}");
            let _ = writeln!(stderr, "{USAGE}");
            EXIT_CONFIG
        }
    }
}

fn run_cli(args: &[String]) -> Result<(), String> {
    let Some(command) = args.first() else {
        return Err("missing command".into());
    };
    match command.as_str() {
        "run" => cmd_run(&args[1..]),
        "vocab-dump" => cmd_vocab_dump(&args[1..]),
        other => Err(format!("unknown command {other:?}")),
    }
}

fn cmd_run(args: &[String]) -> Result<(), String> {
    let mut flags = Flags::parse(args)?;
    let config_path = flags.take("config").ok_or("missing --config")?;
    let out_path = flags.take("out").ok_or("missing --out")?;
    let seed: u64 = match flags.take("seed") {
        Some(s) => s.parse().map_err(|_| format!("invalid --seed {s:?}"))?,
        None => 0,
    };
    let trace_path = flags.take("trace");
    let until: Option<u64> = match flags.take("until") {
        Some(s) => Some(s.parse().map_err(|_| format!("invalid --until {s:?}"))?),
        None => None,
    };
    flags.finish()?;

    let text = fs::read_to_string(&config_path)
        .map_err(|e| format!("cannot read config {config_path:?}: {e}"))?;
    let config = parse_config(&text).map_err(|e| e.to_string())?;
    let until = until.map(SimTime::from_micros);
    let output =
        run_scenario_until(&config, seed, trace_path.is_some(), until).map_err(|e| e.to_string())?;

    fs::write(&out_path, render_metrics(&output.metrics))
        .map_err(|e| format!("cannot write {out_path:?}: {e}"))?;
    if let Some(trace_path) = trace_path {
        fs::write(&trace_path, render_trace(&output.trace))
            .map_err(|e| format!("cannot write {trace_path:?}: {e}"))?;
    }
    Ok(())
}

fn cmd_vocab_dump(args: &[String]) -> Result<(), String> {
    let mut flags = Flags::parse(args)?;
    let text = match flags.take("vocab") {
        Some(path) => {
            fs::read_to_string(&path).map_err(|e| format!("cannot read vocabulary {path:?}: {e}"))?
        }
        None => builtin_bootstrap(),
    };
    let out_path = flags.take("out");
    flags.finish()?;

    let vocab = load_vocabulary(&text).map_err(|e| e.to_string())?;
    let dump = dump_vocabulary(&vocab);
    match out_path {
        Some(path) => {
            fs::write(&path, dump).map_err(|e| format!("cannot write {path:?}: {e}"))?
        }
        None => print!("{dump}"),
    }
    Ok(())
}

//! `ldmc`: command-line front end of `ldmc-core`.
//!
//! Exit codes: 0 on success, 2 on invalid input, 3 when a numerical
//! procedure fails or a result check does not pass.

mod commands;
mod config;

use clap::Parser;
use config::RunConfig;
use ldmc_core::Error;
use serde_json::Value;
use std::io::Write;
use std::process::ExitCode;

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

/// Indented `key: value` lines for a quick read of a JSON document.
fn render(value: &Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                if v.is_object() || (v.is_array() && v.as_array().is_some_and(|a| a.iter().any(|x| !x.is_number() && !x.is_string()))) {
                    out.push_str(&format!("{pad}{k}:\n"));
                    render(v, indent + 1, out);
                } else {
                    out.push_str(&format!("{pad}{k}: {}\n", scalar(v)));
                }
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                if v.is_object() || v.is_array() {
                    out.push_str(&format!("{pad}- [{i}]\n"));
                    render(v, indent + 1, out);
                } else {
                    out.push_str(&format!("{pad}- {}\n", scalar(v)));
                }
            }
        }
        v => out.push_str(&format!("{pad}{}\n", scalar(v))),
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => format!("[{}]", a.iter().map(scalar).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

fn write_file(path: &std::path::Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let config = RunConfig::parse();
    let report = match commands::run(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let json = serde_json::to_string_pretty(&report.json).expect("serializable report") + "\n";
    let machine = report.csv.clone().unwrap_or_else(|| json.clone());
    let stdout_text = if config.json {
        json
    } else if let Some(csv) = &report.csv {
        csv.clone()
    } else {
        let mut s = String::new();
        render(&report.json, 0, &mut s);
        s
    };
    if let Some(path) = &config.output {
        if let Err(e) = write_file(path, &machine) {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    }
    let _ = std::io::stdout().write_all(stdout_text.as_bytes());
    if let Some(e) = report.failure {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    ExitCode::SUCCESS
}

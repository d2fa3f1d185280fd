use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{CmdResult, Format, UsageContext};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped on every output: tool version, command and the
/// effective configuration.
#[derive(Clone, Debug)]
pub struct Echo {
    pub command: &'static str,
    pub config: Value,
}

impl Echo {
    pub fn new(command: &'static str, config: &impl Serialize) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).expect("configs serialize to JSON"),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "tool": "flowbev",
            "version": TOOL_VERSION,
            "command": self.command,
            "config": self.config,
        })
    }

    /// Comment lines placed before a CSV header or text report.
    pub fn preamble(&self) -> String {
        format!("# flowbev {TOOL_VERSION} {}\n# config {}\n", self.command, self.config)
    }
}

/// A report available as CSV, text and JSON.
pub struct Report {
    pub csv: String,
    pub text: String,
    pub json: Value,
}

impl Report {
    pub fn render(&self, format: Format, echo: &Echo) -> String {
        match format {
            Format::Csv => format!("{}{}", echo.preamble(), self.csv),
            Format::Text => format!("{}{}", echo.preamble(), self.text),
            Format::Json => {
                let mut v = echo.to_json();
                v["report"] = self.json.clone();
                format!("{}\n", serde_json::to_string_pretty(&v).expect("JSON values serialize"))
            }
        }
    }
}

pub fn emit(out: Option<&Path>, body: &str) -> CmdResult {
    match out {
        Some(path) => std::fs::write(path, body)
            .with_context(|| format!("writing {}", path.display()))
            .data(),
        None => std::io::stdout().write_all(body.as_bytes()).context("writing to stdout").data(),
    }
}

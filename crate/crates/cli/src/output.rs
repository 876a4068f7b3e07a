use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Metadata<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
    /// Command-specific inputs (file names, synthetic stream parameters).
    pub inputs: serde_json::Value,
}

impl<'a> Metadata<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig, inputs: serde_json::Value) -> Self {
        Self { tool: "cage", version: VERSION, command, config, inputs }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    metadata: &'a Metadata<'a>,
    result: &'a T,
}

pub fn json_string<T: Serialize>(meta: &Metadata, result: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(&Envelope { metadata: meta, result })
        .map_err(|e| CliError::Io(e.to_string()))
}

/// Writes the metadata envelope to `path`, or stdout when `path` is `None`.
pub fn emit_json<T: Serialize>(path: Option<&Path>, meta: &Metadata, result: &T) -> Result<(), CliError> {
    let text = json_string(meta, result)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

/// CSV writer whose first line is `# ` followed by the metadata as JSON.
pub fn csv_writer(path: &Path, meta: &Metadata) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    let line = serde_json::to_string(meta).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(f, "# {line}")?;
    Ok(csv::Writer::from_writer(f))
}

pub const SCHEMA: &str = "\
CSV files written by cage start with one '#' line holding the run metadata
as JSON (tool, version, command, effective config, inputs). A header row
follows.

solve --trace-csv
  round            iteration index, 0 is the initial profile
  max_step         max_j ||y^j(t) - y^j(t-1)||_inf
  policy_change    ||pi(t) - pi(t-1)||_inf
  pi_<i>           agent policy on candidate i
  y<j>_<i>         principal j's incentive on candidate i

sweep --out
  w_<k>            preference weight of objective k
  proxy_<k>        sum over steps of objective k's raw log-ratio reward for
                   the chosen token (a proxy, not a reward-model score)
  converged_frac   share of decoding steps whose equilibrium converged
  tokens           number of decoded steps

sweep --pf-out
  proxy_<k>        non-dominated proxy reward vectors

diagnose --regret-csv
  principal        principal index j
  horizon          T' (rounds included)
  regret           R_j(T')
  bound            2 L_f (J-1) sum_{t<=T'} (a_t + a_{t-1})
  a_t              max_j ||y^j(t) - y^j(T)||_inf (final iterate as stand-in
                   for the equilibrium)

sweep --points (input)
  w_1..w_d, r_1..r_d   preference then reward components, d in {2, 3};
                       an optional non-numeric header row and '#' lines
                       are skipped
";

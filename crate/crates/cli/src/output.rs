//! CSV emission with a leading comment block describing the run.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;

/// Shortest round-trip text of `x`, in exponent form for very small or large magnitudes.
pub fn num(x: f64) -> String {
    if x != 0.0 && x.is_finite() && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Comment lines written after the rows.
    pub summary: Vec<String>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

pub fn write_table(out: Option<&Path>, command: &str, cfg: &RunConfig, table: &Table) -> Result<(), CliError> {
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    };
    write_to(&mut sink, command, cfg, table).map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_to<W: Write>(w: &mut W, command: &str, cfg: &RunConfig, table: &Table) -> io::Result<()> {
    writeln!(w, "# ossbb {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "# command: {command}")?;
    writeln!(w, "# seed: {}", cfg.sim.seed)?;
    writeln!(w, "# resolved config:")?;
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            writeln!(w, "#")?;
        } else {
            writeln!(w, "#   {line}")?;
        }
    }
    {
        let mut csv = csv::Writer::from_writer(&mut *w);
        csv.write_record(&table.header)?;
        for row in &table.rows {
            csv.write_record(row)?;
        }
        csv.flush()?;
    }
    for line in &table.summary {
        writeln!(w, "# {line}")?;
    }
    w.flush()
}

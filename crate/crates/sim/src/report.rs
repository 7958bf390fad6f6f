// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use fedcrypt_core::protocol::Protocol;

pub const HEADER: &str = "parties,protocol,round,comm_time_s,transform_time_s,total_sync_time_s";

/// Per-round synchronization costs. Times are seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub parties: usize,
    pub protocol: Protocol,
    pub round: u32,
    pub comm_time_s: f64,
    pub transform_time_s: f64,
    pub total_sync_time_s: f64,
}

impl ReportRow {
    pub fn new(parties: usize, protocol: Protocol, round: u32, comm: f64, transform: f64) -> Self {
        Self {
            parties,
            protocol,
            round,
            comm_time_s: comm,
            transform_time_s: transform,
            total_sync_time_s: comm + transform,
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9},{:.9}",
            self.parties,
            self.protocol.name(),
            self.round,
            self.comm_time_s,
            self.transform_time_s,
            self.total_sync_time_s
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("report has no rows")]
    Empty,
    #[error("cannot write report: {0}")]
    Io(#[from] io::Error),
}

/// Sorts by (parties, protocol, round) and renders the CSV text.
pub fn render(rows: &[ReportRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.parties, a.protocol, a.round).cmp(&(b.parties, b.protocol, b.round)));
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    Ok(out)
}

/// Writes the report, truncating any existing file.
pub fn emit_report(rows: &[ReportRow], path: &Path) -> Result<(), ReportError> {
    let text = render(rows)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Ciphertext bytes per plaintext `f64` byte on the wire.
pub fn expansion_factor(key_bits: u64) -> f64 {
    (2 * key_bits.div_ceil(8)) as f64 / 8.0
}

/// Least-squares fit `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (a, b, r2)
}

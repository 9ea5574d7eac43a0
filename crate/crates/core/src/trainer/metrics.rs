//! Training metrics as an append-only CSV stream.

use std::io::Write;

pub const CSV_HEADER: &str =
    "step,lr,loss_total,loss_aux,loss_rtd,loss_sclm,replace_rate,replace_accuracy,grad_norm_preclip,clipped";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_aux: f64,
    pub loss_rtd: f64,
    /// NaN when the objective has no corrective LM term.
    pub loss_sclm: f64,
    pub replace_rate: f64,
    /// NaN when no position was replaced this batch.
    pub replace_accuracy: f64,
    pub grad_norm_preclip: f64,
    pub clipped: bool,
}

impl MetricsRow {
    /// One CSV line, no trailing newline. Floats use Rust's shortest
    /// round-trip formatting so logs are bit-reproducible.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss_total,
            self.loss_aux,
            self.loss_rtd,
            self.loss_sclm,
            self.replace_rate,
            self.replace_accuracy,
            self.grad_norm_preclip,
            self.clipped
        )
    }
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing file without re-emitting the header.
    pub fn resume(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.to_csv())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

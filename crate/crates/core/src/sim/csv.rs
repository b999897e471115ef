//! CSV report: one row per timed layer plus a total row per run.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use super::run::RunRecord;
use crate::error::Result;

pub const HEADER: &str = "model,batch,algo,threads,layer,m,n,k,time_s,gflops,workspace_bytes";

/// Writes `records` as CSV. Layer rows are labelled `conv<i>` / `fc<i>`; the
/// total row leaves the GEMM extents empty, sums the times and reports the
/// largest workspace.
pub fn write_csv<W: Write>(records: &[RunRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in records {
        let prefix = format!("{},{},{},{}", r.model, r.batch, r.algo, r.threads);
        for l in &r.layers {
            writeln!(
                w,
                "{prefix},{}{},{},{},{},{},{},{}",
                l.kind, l.index, l.dims.m, l.dims.n, l.dims.k, l.time_s, l.gflops, l.workspace_bytes
            )?;
        }
        if r.layers.is_empty() {
            continue;
        }
        let time = r.total_time();
        let ws = r.layers.iter().map(|l| l.workspace_bytes).max().unwrap_or(0);
        writeln!(w, "{prefix},total,,,,{time},{},{ws}", r.total_flops() / time / 1e9)?;
    }
    w.flush()
}

/// [`write_csv`] to a file.
pub fn emit_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_csv(records, BufWriter::new(file))?;
    Ok(())
}

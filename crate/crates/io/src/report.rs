//! CSV and JSON outputs.

use std::fmt::Write as _;

use comma_core::bench::BenchRow;
use comma_core::metrics::MetricsReport;
use comma_core::train::TrainRecord;
use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "iter,loss,loss_local,loss_global,val_dice";
pub const REPORT_HEADER: &str = "case,dice,cldice,nsd,si,di,sv_dice,sv_cldice,sv_nsd";
pub const BENCH_HEADER: &str = "L,scan_ms,attn_ms,scan_bytes,attn_bytes";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn metrics_row(r: &TrainRecord) -> String {
    let l = &r.losses;
    format!("{},{},{},{},{}", r.iteration, l.total, l.local, l.global, opt(r.val_dice))
}

/// One evaluated case. Small-vessel fields are absent without a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: String,
    pub dice: f64,
    pub cldice: f64,
    pub nsd: f64,
    pub si: f64,
    pub di: f64,
    pub sv_dice: Option<f64>,
    pub sv_cldice: Option<f64>,
    pub sv_nsd: Option<f64>,
}

impl ReportRow {
    pub fn new(case: impl Into<String>, r: &MetricsReport) -> Self {
        let sv = r.small_vessel;
        Self {
            case: case.into(),
            dice: r.dice,
            cldice: r.cldice,
            nsd: r.nsd,
            si: r.si,
            di: r.di,
            sv_dice: sv.map(|s| s.dice),
            sv_cldice: sv.map(|s| s.cldice),
            sv_nsd: sv.map(|s| s.nsd),
        }
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.case,
            r.dice,
            r.cldice,
            r.nsd,
            r.si,
            r.di,
            opt(r.sv_dice),
            opt(r.sv_cldice),
            opt(r.sv_nsd)
        );
    }
    out
}

pub fn report_json(rows: &[ReportRow]) -> serde_json::Result<String> {
    serde_json::to_string_pretty(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.len, r.scan_ms, r.attn_ms, r.scan_bytes, r.attn_bytes);
    }
    out
}

/// Parses [`bench_csv`] output.
pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some(BENCH_HEADER) {
        return Err(format!("missing header `{BENCH_HEADER}`"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let [len, s, a, sb, ab] = f[..] else {
                return Err(format!("bad row `{l}`"));
            };
            let e = |x: &str| format!("bad value `{x}` in `{l}`");
            Ok(BenchRow {
                len: len.parse().map_err(|_| e(len))?,
                scan_ms: s.parse().map_err(|_| e(s))?,
                attn_ms: a.parse().map_err(|_| e(a))?,
                scan_bytes: sb.parse().map_err(|_| e(sb))?,
                attn_bytes: ab.parse().map_err(|_| e(ab))?,
            })
        })
        .collect()
}

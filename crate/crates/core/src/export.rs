//! CSV renderings of datasets, trajectories, metric series and probe records.
//!
//! Floats are written in Rust's shortest round-trip form, so a value read
//! back parses to the same bits.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::{HistogramBin, MetricSeries};
use crate::probes::Record;
use crate::sampler::Trajectory;

/// One point per line, no header.
pub fn dataset_csv(points: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for p in points {
        push_row(&mut out, p.iter());
    }
    out
}

pub fn parse_dataset_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut points = Vec::new();
    let mut dim = None;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| {
                    Error::config(format!("line {}: bad number `{v}`: {e}", line_no + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if *dim.get_or_insert(row.len()) != row.len() {
            return Err(Error::config(format!("line {}: ragged row", line_no + 1)));
        }
        points.push(row);
    }
    Ok(points)
}

fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        write!(out, "{v}").expect("write to string");
    }
    out.push('\n');
}

/// `t,sigma,x0,..,d0,..`; the final state has no direction, so its `sigma`
/// and `d` cells are empty.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let dim = traj.states.first().map_or(0, Vec::len);
    let mut out = String::from("t,sigma");
    for k in 0..dim {
        write!(out, ",x{k}").expect("write");
    }
    for k in 0..dim {
        write!(out, ",d{k}").expect("write");
    }
    out.push('\n');
    for (t, x) in traj.states.iter().enumerate() {
        write!(out, "{t},").expect("write");
        if let Some(s) = traj.sigmas.get(t) {
            write!(out, "{s}").expect("write");
        }
        for v in x {
            write!(out, ",{v}").expect("write");
        }
        match traj.directions.get(t) {
            Some(d) => {
                for v in d {
                    write!(out, ",{v}").expect("write");
                }
            }
            None => out.push_str(&",".repeat(dim)),
        }
        out.push('\n');
    }
    out
}

/// `t,value,flag`.
pub fn metric_csv(series: &MetricSeries) -> String {
    let mut out = String::from("t,value,flag\n");
    for ((t, v), f) in series.steps.iter().zip(&series.values).zip(&series.flags) {
        writeln!(out, "{t},{v},{}", u8::from(*f)).expect("write");
    }
    out
}

/// `bin_left,bin_right,count`.
pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("bin_left,bin_right,count\n");
    for b in bins {
        writeln!(out, "{},{},{}", b.left, b.right, b.count).expect("write");
    }
    out
}

/// Probe records, one per line. Scalar records leave `t` empty.
pub fn records_csv<'a>(records: impl IntoIterator<Item = &'a Record>) -> String {
    let mut out = String::from("sample,metric,group,t,value,flag\n");
    for r in records {
        let t = r.step.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{t},{},{}",
            r.sample,
            r.metric,
            r.group.as_deref().unwrap_or(""),
            r.value,
            u8::from(r.flag)
        )
        .expect("write");
    }
    out
}

/// Compact, filename-safe rendering of a σ (`0.001` stays `0.001`).
pub fn sigma_tag(sigma: f64) -> String {
    format!("{sigma}")
}

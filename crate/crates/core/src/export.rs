// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV exports of sweeps, correlation matrices and cluster labels.
//!
//! Sweep files hold one row per task:
//!
//! ```text
//! task,n_items,base,layer_0,…,layer_{L-1},base_correct,layer_0_correct,…
//! ```
//!
//! Accuracies are fractions printed with 6 decimals; the `_correct` columns
//! carry the exact counts and are what [`parse_sweep_csv`] reads back.

use std::fmt::Write as _;

use crate::error::{Result, TaloError};
use crate::harness::Score;
use crate::interaction::{Clustering, CorrelationResult, SweepMatrix};
use crate::intervention::{InterventionKind, Target};

pub fn sweep_csv(sweep: &SweepMatrix) -> String {
    let layers = sweep.num_layers();
    let mut out = String::from("task,n_items,base");
    for l in 0..layers {
        let _ = write!(out, ",layer_{l}");
    }
    out.push_str(",base_correct");
    for l in 0..layers {
        let _ = write!(out, ",layer_{l}_correct");
    }
    out.push('\n');
    for (t, task) in sweep.tasks.iter().enumerate() {
        let base = sweep.base[t];
        let _ = write!(out, "{task},{},{:.6}", base.total, base.fraction());
        for cell in &sweep.cells[t] {
            let _ = write!(out, ",{:.6}", cell.fraction());
        }
        let _ = write!(out, ",{}", base.correct);
        for cell in &sweep.cells[t] {
            let _ = write!(out, ",{}", cell.correct);
        }
        out.push('\n');
    }
    out
}

pub fn parse_sweep_csv(text: &str, kind: InterventionKind, target: Target) -> Result<SweepMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| TaloError::InvalidInput("empty sweep file".into()))?
        .split(',')
        .collect();
    if header.len() < 4 || header[..3] != ["task", "n_items", "base"] || !(header.len() - 4).is_multiple_of(2) {
        return Err(TaloError::InvalidInput("not a sweep CSV header".into()));
    }
    let layers = (header.len() - 4) / 2;
    let count_col = 3 + layers;
    if header[count_col] != "base_correct" {
        return Err(TaloError::InvalidInput("sweep CSV lacks base_correct column".into()));
    }

    let mut sweep = SweepMatrix {
        kind,
        target,
        tasks: Vec::new(),
        base: Vec::new(),
        cells: Vec::new(),
    };
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(TaloError::ShapeMismatch(format!(
                "sweep row {} has {} fields, header has {}",
                n + 1,
                fields.len(),
                header.len()
            )));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| TaloError::InvalidInput(format!("sweep row {}: bad count `{s}`", n + 1)))
        };
        let total = num(fields[1])?;
        let score = |s: &str| num(s).map(|correct| Score { correct, total });
        sweep.tasks.push(fields[0].to_string());
        sweep.base.push(score(fields[count_col])?);
        sweep.cells.push(
            fields[count_col + 1..]
                .iter()
                .map(|f| score(f))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    sweep.validate()?;
    Ok(sweep)
}

fn square_csv(ids: &[String], values: &[Vec<f64>]) -> String {
    let mut out = String::from("task");
    for id in ids {
        let _ = write!(out, ",{id}");
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(values) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, ",{v:.12}");
        }
        out.push('\n');
    }
    out
}

pub fn rho_csv(result: &CorrelationResult) -> String {
    square_csv(&result.task_ids, &result.rho)
}

pub fn distance_csv(result: &CorrelationResult) -> String {
    square_csv(&result.task_ids, &result.distance)
}

pub fn clusters_csv(clustering: &Clustering) -> String {
    let mut out = String::from("task,cluster\n");
    for (id, label) in clustering.task_ids.iter().zip(&clustering.labels) {
        let _ = writeln!(out, "{id},{label}");
    }
    out
}

pub fn consistency_csv(points: &[(String, usize, f64, f64)]) -> String {
    let mut out = String::from("task,layer,x_accuracy,y_accuracy\n");
    for (task, layer, x, y) in points {
        let _ = writeln!(out, "{task},{layer},{x:.6},{y:.6}");
    }
    out
}

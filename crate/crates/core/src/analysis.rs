//! Loss-geometry curves on a fixed six-view anchor row.
//!
//! The row has similarities `base, base - C, ..., base - 5C` laid out as
//! positive, negative, positive, negative, negative, positive. Sweeping the
//! spacing `C` shows how the loss and its gradients react to the gap between
//! the two lower positives.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vgl::{tempered_sigmoid, AnchorSims, VglConfig};

/// Group pattern of the six ordered views; `true` marks a positive.
pub const PATTERN: [bool; 6] = [true, false, true, false, false, true];

pub const DEFAULT_BASE: f64 = 0.9;
pub const DEFAULT_TAUS: [f64; 5] = [0.01, 0.1, 0.2, 0.5, 1.0];

/// `C = 0.005 k` for `k = 1..=30`.
pub fn default_c_grid() -> Vec<f64> {
    (1..=30).map(|k| 0.005 * k as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderedExample {
    pub sims: [f64; 6],
    pub base: f64,
    pub spacing: f64,
}

impl OrderedExample {
    pub fn anchor_row(&self) -> AnchorSims {
        let pick = |want: bool| -> Vec<f64> {
            self.sims.iter().zip(PATTERN).filter(|(_, p)| *p == want).map(|(s, _)| *s).collect()
        };
        AnchorSims::new(pick(true), pick(false))
    }

    /// `c_3 - c_6`, the gap between the two lower positives.
    pub fn gap(&self) -> f64 {
        self.sims[2] - self.sims[5]
    }
}

pub fn ordered_example(base: f64, spacing: f64) -> Result<OrderedExample> {
    if !(spacing >= 0.0) || !(base <= 1.0) || base - 5.0 * spacing < -1.0 {
        return Err(Error::OutOfRange(format!(
            "ordered example needs C >= 0, base <= 1 and base - 5C >= -1 (base {base}, C {spacing})"
        )));
    }
    let mut sims = [0.0; 6];
    for (i, s) in sims.iter_mut().enumerate() {
        *s = base - i as f64 * spacing;
    }
    Ok(OrderedExample { sims, base, spacing })
}

fn vgl_config(tau: f64, attention: bool) -> Result<VglConfig> {
    VglConfig::new(tau, attention)
}

/// `(gap, |dL/dc_3| - |dL/dc_6|)` for each spacing.
pub fn gradient_gap_curve(tau: f64, attention: bool, c_grid: &[f64], base: f64) -> Result<Vec<(f64, f64)>> {
    let cfg = vgl_config(tau, attention)?;
    c_grid
        .par_iter()
        .map(|&c| {
            let ex = ordered_example(base, c)?;
            let eval = ex.anchor_row().evaluate(&cfg, true);
            // Positives in row order are c_1, c_3, c_6.
            Ok((ex.gap(), eval.grad_positives[1].abs() - eval.grad_positives[2].abs()))
        })
        .collect()
}

/// `(gap, anchor loss)` for each spacing.
pub fn loss_gap_curve(tau: f64, attention: bool, c_grid: &[f64], base: f64) -> Result<Vec<(f64, f64)>> {
    let cfg = vgl_config(tau, attention)?;
    c_grid
        .par_iter()
        .map(|&c| {
            let ex = ordered_example(base, c)?;
            Ok((ex.gap(), ex.anchor_row().loss(&cfg)))
        })
        .collect()
}

/// Contribution `sigma((s - positive) / tau)` of one negative at similarity
/// `s` to a positive's inner sum, for each `s` in the grid.
pub fn sigmoid_margin_curve(tau: f64, positive: f64, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(-1.0..=1.0).contains(&positive) {
        return Err(Error::OutOfRange(format!("reference positive {positive} outside [-1, 1]")));
    }
    grid.iter()
        .map(|&s| {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::OutOfRange(format!("similarity {s} outside [-1, 1]")));
            }
            Ok((s, tempered_sigmoid(s - positive, tau)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauCurve {
    pub tau: f64,
    pub points: Vec<(f64, f64)>,
}

/// Gradient-gap curve per temperature.
pub fn tau_sweep(taus: &[f64], attention: bool, c_grid: &[f64], base: f64) -> Result<Vec<TauCurve>> {
    if taus.is_empty() {
        return Err(Error::InvalidConfig("tau sweep needs at least one temperature".into()));
    }
    taus.iter()
        .map(|&tau| Ok(TauCurve { tau, points: gradient_gap_curve(tau, attention, c_grid, base)? }))
        .collect()
}

/// Two-column CSV with the given header.
pub fn curve_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (x, y) in points {
        writeln!(out, "{x},{y}").expect("string write");
    }
    out
}

/// Long-form `tau,gap,grad_diff` CSV.
pub fn tau_sweep_csv(curves: &[TauCurve]) -> String {
    let mut out = String::from("tau,gap,grad_diff\n");
    for c in curves {
        for (x, y) in &c.points {
            writeln!(out, "{},{x},{y}", c.tau).expect("string write");
        }
    }
    out
}

/// Sum of absolute successive differences of the y column.
pub fn total_variation(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].1 - w[0].1).abs()).sum()
}

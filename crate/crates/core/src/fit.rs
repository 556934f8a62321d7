//! Power law with an additive floor, `loss = a * x^(-alpha) + c`, fitted by a
//! grid search over `c` with ordinary least squares on
//! `ln(loss - c) = ln a - alpha * ln x` at each candidate. The candidate with
//! the highest R² wins; ties go to the lowest `c`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_GRID_SIZE: usize = 1000;

/// Upper end of the coarse grid as a fraction of the smallest loss.
const GRID_CEILING: f64 = 0.99;

/// Stop refining once the bracket is this small relative to the smallest loss.
const BRACKET_TOL: f64 = 1e-13;
const MAX_REFINEMENTS: usize = 200;

/// Below these the fit is reported as showing no scaling.
pub const FLAT_ALPHA: f64 = 0.02;
pub const FLAT_R2: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("need at least two distinct x values")]
    SingleX,
    #[error("all losses are identical; no power law can be fitted")]
    Degenerate,
    #[error("loss {loss} at x = {x} is not above the floor candidate {c}")]
    LossBelowFloor { x: f64, loss: f64, c: f64 },
    #[error("point {index} is invalid: x = {x}, loss = {loss} (both must be positive and finite)")]
    InvalidPoint { index: usize, x: f64, loss: f64 },
    #[error("grid size must be at least 2")]
    GridTooSmall,
    #[error("reading points: {0}")]
    Read(String),
}

/// One observation: scaling variable (usually parameter count) and the best
/// loss reached there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub x: f64,
    pub loss: f64,
    #[serde(default)]
    pub tag: String,
}

impl ScalingPoint {
    pub fn new(x: f64, loss: f64) -> Self {
        Self {
            x,
            loss,
            tag: String::new(),
        }
    }

    pub fn tagged(x: f64, loss: f64, tag: impl Into<String>) -> Self {
        Self {
            x,
            loss,
            tag: tag.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: f64,
    pub a: f64,
    pub c: f64,
    pub r2: f64,
    pub n: usize,
    pub c_grid_points: usize,
    pub refinement_passes: usize,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        predict(self, x)
    }

    /// True when the exponent or the fit quality indicates no power-law
    /// scaling in the data.
    pub fn looks_non_scaling(&self) -> bool {
        self.alpha.abs() < FLAT_ALPHA || self.r2 < FLAT_R2
    }
}

/// `(alpha, a, r2)` of the log-log regression at a fixed floor `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub alpha: f64,
    pub a: f64,
    pub r2: f64,
}

pub fn ols_loglog(points: &[ScalingPoint], c: f64) -> Result<LogLogFit, FitError> {
    if points.len() < 2 {
        return Err(FitError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    let mut t = Vec::with_capacity(points.len());
    let mut y = Vec::with_capacity(points.len());
    for p in points {
        if p.loss <= c {
            return Err(FitError::LossBelowFloor {
                x: p.x,
                loss: p.loss,
                c,
            });
        }
        t.push(p.x.ln());
        y.push((p.loss - c).ln());
    }
    let n = t.len() as f64;
    let t_mean = t.iter().sum::<f64>() / n;
    let y_mean = y.iter().sum::<f64>() / n;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for (ti, yi) in t.iter().zip(&y) {
        let (dt, dy) = (ti - t_mean, yi - y_mean);
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if stt == 0.0 {
        return Err(FitError::SingleX);
    }
    let slope = sty / stt;
    let intercept = y_mean - slope * t_mean;
    let ss_res: f64 = t
        .iter()
        .zip(&y)
        .map(|(ti, yi)| {
            let r = yi - (intercept + slope * ti);
            r * r
        })
        .sum();
    let r2 = if syy == 0.0 { 0.0 } else { 1.0 - ss_res / syy };
    Ok(LogLogFit {
        alpha: -slope,
        a: intercept.exp(),
        r2,
    })
}

fn validate(points: &[ScalingPoint]) -> Result<f64, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints {
            need: 3,
            got: points.len(),
        });
    }
    for (index, p) in points.iter().enumerate() {
        let ok = p.x > 0.0 && p.loss > 0.0 && p.x.is_finite() && p.loss.is_finite();
        if !ok {
            return Err(FitError::InvalidPoint {
                index,
                x: p.x,
                loss: p.loss,
            });
        }
    }
    if points.iter().all(|p| p.loss == points[0].loss) {
        return Err(FitError::Degenerate);
    }
    if points.iter().all(|p| p.x == points[0].x) {
        return Err(FitError::SingleX);
    }
    Ok(points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Copy)]
struct Candidate {
    c: f64,
    fit: LogLogFit,
}

/// Best candidate among `n` evenly spaced values on `[lo, hi]`, or on
/// `[lo, hi)` when `open_hi`. Returns the winner's index, the candidates, and
/// their count.
fn scan(
    points: &[ScalingPoint],
    lo: f64,
    hi: f64,
    n: usize,
    open_hi: bool,
) -> Result<(usize, Vec<f64>, Candidate), FitError> {
    let denom = if open_hi { n } else { n - 1 } as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / denom).collect();
    let mut best: Option<(usize, Candidate)> = None;
    for (i, &c) in grid.iter().enumerate() {
        let fit = match ols_loglog(points, c) {
            Ok(f) => f,
            Err(FitError::LossBelowFloor { .. }) => continue,
            Err(e) => return Err(e),
        };
        // Strict comparison keeps the lowest c on ties.
        if best.is_none_or(|(_, b)| fit.r2 > b.fit.r2) {
            best = Some((i, Candidate { c, fit }));
        }
    }
    let (i, cand) = best.ok_or(FitError::Degenerate)?;
    Ok((i, grid, cand))
}

/// Grid search over the floor followed by iterated local refinement.
///
/// The coarse grid spans `[0, 0.99 * min loss]`. Each refinement pass
/// re-scans the interval between the neighbours of the current winner with
/// the same resolution. When the winner sits on the coarse grid's upper edge,
/// the bracket is allowed to extend up to (but never reach) the smallest loss.
pub fn fit_power_law(points: &[ScalingPoint], grid_size: usize) -> Result<FitResult, FitError> {
    if grid_size < 2 {
        return Err(FitError::GridTooSmall);
    }
    let min_loss = validate(points)?;
    let ceiling = GRID_CEILING * min_loss;
    let (i, grid, mut best) = scan(points, 0.0, ceiling, grid_size, false)?;

    let bracket = |i: usize, grid: &[f64], lo: f64, hi: f64| {
        let left = if i == 0 { lo } else { grid[i - 1] };
        let right = grid.get(i + 1).copied().unwrap_or(hi);
        (left, right)
    };
    let (mut lo, mut hi) = bracket(i, &grid, 0.0, min_loss);
    let mut open_hi = hi == min_loss;
    let mut passes = 0;
    while passes < MAX_REFINEMENTS && hi - lo > BRACKET_TOL * min_loss.max(1.0) {
        let (j, grid, cand) = scan(points, lo, hi, grid_size, open_hi)?;
        passes += 1;
        let improved = cand.fit.r2 > best.fit.r2 || (cand.fit.r2 == best.fit.r2 && cand.c < best.c);
        if improved {
            best = cand;
        }
        let next = bracket(j, &grid, lo, hi);
        open_hi = open_hi && next.1 == hi;
        (lo, hi) = next;
    }
    Ok(FitResult {
        alpha: best.fit.alpha,
        a: best.fit.a,
        c: best.c,
        r2: best.fit.r2,
        n: points.len(),
        c_grid_points: grid_size,
        refinement_passes: passes,
    })
}

pub fn predict(fit: &FitResult, x: f64) -> f64 {
    fit.a * x.powf(-fit.alpha) + fit.c
}

#[derive(Deserialize)]
struct CsvRow {
    x: f64,
    loss: f64,
    #[serde(default)]
    tag: Option<String>,
}

/// Reads `x,loss[,tag]` rows; the first line must be a header naming the
/// columns.
pub fn read_points_csv(path: &Path) -> Result<Vec<ScalingPoint>, FitError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| FitError::Read(e.to_string()))?;
    reader
        .deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(|e| FitError::Read(e.to_string()))?;
            Ok(ScalingPoint {
                x: row.x,
                loss: row.loss,
                tag: row.tag.unwrap_or_default(),
            })
        })
        .collect()
}

pub fn write_points_csv(points: &[ScalingPoint], path: &Path) -> Result<(), FitError> {
    let err = |e: csv::Error| FitError::Read(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["x", "loss", "tag"]).map_err(err)?;
    for p in points {
        w.write_record([p.x.to_string(), p.loss.to_string(), p.tag.clone()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| FitError::Read(e.to_string()))
}

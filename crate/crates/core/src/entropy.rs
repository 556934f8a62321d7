//! Loss floors as information quantities: Gaussian NLL derived from MSE, and
//! differential entropy in bits per masked position from either floor.
//! Everything is computed in nats; bits appear only in the outputs.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{fit_power_law, FitError, FitResult, ScalingPoint};

/// Provenance label carried by every NLL value computed from an MSE.
pub const DERIVED_PROVENANCE: &str = "derived_from_best_mse";

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error(transparent)]
    Fit(#[from] FitError),
}

fn positive(what: &'static str, value: f64) -> Result<f64, EntropyError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(EntropyError::NonPositive { what, value })
    }
}

/// Gaussian NLL per position (nats) under homoscedastic residuals with
/// variance `mse`: `0.5 ln(2 pi mse) + 0.5`.
pub fn nll_from_mse(mse: f64) -> Result<f64, EntropyError> {
    let mse = positive("mse", mse)?;
    Ok(0.5 * (2.0 * PI * mse).ln() + 0.5)
}

/// `0.5 log2(2 pi e c)`.
pub fn bits_from_mse_floor(c_mse: f64) -> Result<f64, EntropyError> {
    let c = positive("mse floor", c_mse)?;
    Ok(0.5 * (2.0 * PI * std::f64::consts::E * c).log2())
}

pub fn bits_from_nll_floor(c_nll: f64) -> Result<f64, EntropyError> {
    let c = positive("nll floor", c_nll)?;
    Ok(c / LN_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedNll {
    pub value: f64,
    pub provenance: String,
}

pub fn nll_transform_runs(losses: &[f64]) -> Result<Vec<DerivedNll>, EntropyError> {
    losses
        .iter()
        .map(|&l| {
            Ok(DerivedNll {
                value: nll_from_mse(l)?,
                provenance: DERIVED_PROVENANCE.to_string(),
            })
        })
        .collect()
}

/// Same points with each loss replaced by its derived NLL.
pub fn nll_points(points: &[ScalingPoint]) -> Result<Vec<ScalingPoint>, EntropyError> {
    points
        .iter()
        .map(|p| {
            Ok(ScalingPoint::tagged(
                p.x,
                nll_from_mse(p.loss)?,
                p.tag.clone(),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorSource {
    MseFloor,
    NllFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub source: FloorSource,
    pub floor_value: f64,
    pub bits_per_position: f64,
}

impl EntropyEstimate {
    pub fn from_mse_floor(c: f64) -> Result<Self, EntropyError> {
        Ok(Self {
            source: FloorSource::MseFloor,
            floor_value: c,
            bits_per_position: bits_from_mse_floor(c)?,
        })
    }

    pub fn from_nll_floor(c: f64) -> Result<Self, EntropyError> {
        Ok(Self {
            source: FloorSource::NllFloor,
            floor_value: c,
            bits_per_position: bits_from_nll_floor(c)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mse_fit: FitResult,
    pub mse_floor: EntropyEstimate,
    /// Refit of the per-run losses after the NLL transform.
    pub nll_fit: Option<FitResult>,
    pub nll_floor: Option<EntropyEstimate>,
    /// `nll bits - mse bits` when both floors exist.
    pub gap_bits: Option<f64>,
    /// Bits from transforming the MSE floor itself; equals the MSE-floor bits
    /// up to rounding.
    pub transformed_floor_bits: f64,
    pub nll_provenance: Option<String>,
}

/// Refits the power law after replacing every run's MSE by its derived NLL.
pub fn refit_nll(points: &[ScalingPoint], grid_size: usize) -> Result<FitResult, EntropyError> {
    Ok(fit_power_law(&nll_points(points)?, grid_size)?)
}

/// Entropy estimates from an MSE fit and, optionally, from a fit of the
/// derived NLL values (see [`refit_nll`]).
pub fn entropy_report(
    mse_fit: &FitResult,
    nll_fit: Option<&FitResult>,
) -> Result<EntropyReport, EntropyError> {
    let mse_floor = EntropyEstimate::from_mse_floor(mse_fit.c)?;
    let transformed_floor_bits = bits_from_nll_floor(nll_from_mse(mse_fit.c)?)?;
    let nll_floor = nll_fit
        .map(|f| EntropyEstimate::from_nll_floor(f.c))
        .transpose()?;
    Ok(EntropyReport {
        mse_fit: *mse_fit,
        mse_floor,
        nll_fit: nll_fit.copied(),
        nll_floor,
        gap_bits: nll_floor.map(|e| e.bits_per_position - mse_floor.bits_per_position),
        transformed_floor_bits,
        nll_provenance: nll_fit.map(|_| DERIVED_PROVENANCE.to_string()),
    })
}

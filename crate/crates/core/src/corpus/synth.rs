use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CorpusError, ExpressionMatrix, Result, Stage};

/// Low-rank latent-factor expression model with additive Gaussian noise.
///
/// Clean signal is `softplus(Z W)` with `Z ~ N(0, 1)` of shape
/// `n_cells x latent_rank` and `W ~ N(0, 1/latent_rank)`; observed values add
/// `N(0, noise_sigma^2)` noise and are clamped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    pub latent_rank: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_genes == 0 || self.latent_rank == 0 {
            return Err(CorpusError::InvalidArgument(
                "synthetic dimensions must be positive".into(),
            ));
        }
        if self.latent_rank >= self.n_genes {
            return Err(CorpusError::InvalidArgument(format!(
                "latent rank {} must be below gene count {}",
                self.latent_rank, self.n_genes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CorpusError::InvalidArgument(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<ExpressionMatrix> {
    synthesize_with_signal(spec).map(|(m, _)| m)
}

/// Like [`synthesize`], also returning the clean signal (row-major, same
/// layout as the matrix values).
pub fn synthesize_with_signal(spec: &SyntheticSpec) -> Result<(ExpressionMatrix, Vec<f32>)> {
    spec.validate()?;
    let SyntheticSpec {
        n_cells,
        n_genes,
        latent_rank,
        noise_sigma,
        seed,
    } = *spec;
    let mut rng = crate::rng::stream(seed, "synthesize");
    let z: Vec<f64> = (0..n_cells * latent_rank)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let w_scale = 1.0 / (latent_rank as f64).sqrt();
    let w: Vec<f64> = (0..latent_rank * n_genes)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * w_scale
        })
        .collect();
    let noise =
        Normal::new(0.0, noise_sigma).map_err(|e| CorpusError::InvalidArgument(e.to_string()))?;

    let mut clean = Vec::with_capacity(n_cells * n_genes);
    let mut observed = Vec::with_capacity(n_cells * n_genes);
    for c in 0..n_cells {
        let zc = &z[c * latent_rank..(c + 1) * latent_rank];
        for g in 0..n_genes {
            let pre: f64 = zc
                .iter()
                .enumerate()
                .map(|(k, &zk)| zk * w[k * n_genes + g])
                .sum();
            let s = softplus(pre);
            let eps = if noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            clean.push(s as f32);
            observed.push((s + eps).max(0.0) as f32);
        }
    }
    let m = ExpressionMatrix::with_default_names(n_cells, n_genes, observed, Stage::NormalizedLog1p)?
        .with_provenance(format!(
            "synthetic n_cells={n_cells} n_genes={n_genes} latent_rank={latent_rank} noise_sigma={noise_sigma} seed={seed}"
        ));
    Ok((m, clean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_cells: usize, n_genes: usize, sigma: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_cells,
            n_genes,
            latent_rank: 4,
            noise_sigma: sigma,
            seed,
        }
    }

    #[test]
    fn zero_noise_is_the_clean_signal() {
        let (m, clean) = synthesize_with_signal(&spec(50, 16, 0.0, 3)).unwrap();
        assert_eq!(m.values(), clean.as_slice());
        assert!(clean.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synthesize(&spec(40, 12, 0.3, 5)).unwrap();
        assert_eq!(a, synthesize(&spec(40, 12, 0.3, 5)).unwrap());
        assert_ne!(a, synthesize(&spec(40, 12, 0.3, 6)).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(10, 4, 0.1, 0);
        s.latent_rank = 4;
        assert!(synthesize(&s).is_err());
        s.latent_rank = 2;
        s.noise_sigma = -1.0;
        assert!(synthesize(&s).is_err());
    }

    /// Expected second moment of `max(-s, e)` for `e ~ N(0, sigma^2)`, by
    /// midpoint quadrature over the censored density. Independent of the
    /// generator's sampling path.
    fn censored_noise_second_moment(s: f64, sigma: f64) -> f64 {
        let lo = -s;
        let steps = 4000;
        let hi = 8.0 * sigma;
        let h = (hi - lo) / steps as f64;
        let pdf = |e: f64| {
            (-(e * e) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut mass_above = 0.0;
        let mut second = 0.0;
        for i in 0..steps {
            let e = lo + (i as f64 + 0.5) * h;
            mass_above += pdf(e) * h;
            second += e * e * pdf(e) * h;
        }
        second + (1.0 - mass_above) * s * s
    }

    #[test]
    fn noise_matches_censored_gaussian() {
        let sigma = 0.5;
        let (m, clean) = synthesize_with_signal(&SyntheticSpec {
            n_cells: 10_000,
            n_genes: 64,
            latent_rank: 8,
            noise_sigma: sigma,
            seed: 21,
        })
        .unwrap();
        let resid: Vec<f64> = m
            .values()
            .iter()
            .zip(&clean)
            .map(|(&o, &c)| f64::from(o) - f64::from(c))
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let second = resid.iter().map(|r| r * r).sum::<f64>() / n;

        // quadrature oracle over a subsample of clean values
        let expected: f64 = clean
            .iter()
            .step_by(97)
            .map(|&s| censored_noise_second_moment(f64::from(s), sigma))
            .sum::<f64>()
            / clean.iter().step_by(97).count() as f64;
        assert!(
            (second - expected).abs() / expected < 0.03,
            "{second} vs {expected}"
        );
        // clamping at zero only removes variance
        assert!(var < sigma * sigma);
        assert!(var > 0.75 * sigma * sigma, "variance {var}");
    }
}

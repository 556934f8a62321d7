use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "XXS")]
    Xxs,
    #[serde(rename = "TINY")]
    Tiny,
    #[serde(rename = "XS")]
    Xs,
    S,
    M,
    L,
    #[serde(rename = "XL")]
    Xl,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Xxs,
        Preset::Tiny,
        Preset::Xs,
        Preset::S,
        Preset::M,
        Preset::L,
        Preset::Xl,
    ];

    /// `(dim, layers, heads, ffn_mult)`.
    pub fn shape(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Xxs => (1, 1, 1, 1),
            Preset::Tiny => (16, 1, 1, 1),
            Preset::Xs => (64, 2, 4, 4),
            Preset::S => (128, 4, 8, 4),
            Preset::M => (512, 6, 8, 4),
            Preset::L => (1020, 8, 12, 4),
            Preset::Xl => (1536, 12, 16, 4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Xxs => "XXS",
            Preset::Tiny => "TINY",
            Preset::Xs => "XS",
            Preset::S => "S",
            Preset::M => "M",
            Preset::L => "L",
            Preset::Xl => "XL",
        }
    }

    /// Published parameter counts at the two reference vocabularies.
    ///
    /// XS, S and M agree with [`param_count`]; XXS, TINY, L and XL differ by
    /// small residuals that no single layout change explains.
    pub fn published_params(self, vocab: usize) -> Option<u64> {
        let (v512, v1024) = match self {
            Preset::Xxs => (534, 1_046),
            Preset::Tiny => (9_937, 18_129),
            Preset::Xs => (132_993, 165_761),
            Preset::S => (859_137, 924_673),
            Preset::M => (19_178_497, 19_440_641),
            Preset::L => (101_033_041, 101_555_281),
            Preset::Xl => (341_295_105, 341_557_249),
        };
        match vocab {
            512 => Some(v512),
            1024 => Some(v1024),
            _ => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown preset {s:?}")))
    }
}

/// Encoder dimensions. `dim` must be divisible by `heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub preset: Option<Preset>,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, vocab: usize) -> Self {
        let (dim, layers, heads, ffn_mult) = preset.shape();
        Self {
            vocab,
            dim,
            layers,
            heads,
            ffn_mult,
            preset: Some(preset),
        }
    }

    pub fn custom(
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self, ModelError> {
        let c = Self {
            vocab,
            dim,
            layers,
            heads,
            ffn_mult,
            preset: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [self.vocab, self.dim, self.layers, self.heads, self.ffn_mult];
        if counts.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }

    pub fn label(&self) -> String {
        match self.preset {
            Some(p) => p.name().to_string(),
            None => format!(
                "d{}L{}H{}f{}",
                self.dim, self.layers, self.heads, self.ffn_mult
            ),
        }
    }

    pub fn param_count(&self) -> u64 {
        param_count(self)
    }
}

/// Number of learned scalars:
///
/// ```text
/// V*d                         gene embedding
/// + 2d                        value projection weight and bias
/// + d                         mask token
/// + L * [ 4(d^2 + d)          q, k, v, out projections
///         + 4d                two layer norms
///         + (d*f*d + f*d)     feed-forward in
///         + (f*d*d + d) ]     feed-forward out
/// + (d + 1)                   prediction head
/// ```
pub fn param_count(c: &ModelConfig) -> u64 {
    let (v, d, l, f) = (
        c.vocab as u64,
        c.dim as u64,
        c.layers as u64,
        c.ffn_mult as u64,
    );
    let per_layer = 4 * (d * d + d) + 4 * d + (d * f * d + f * d) + (f * d * d + d);
    v * d + 2 * d + d + l * per_layer + (d + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_that_match_exactly() {
        let cases = [
            (Preset::Xs, 512, 132_993),
            (Preset::S, 1024, 924_673),
            (Preset::M, 512, 19_178_497),
        ];
        for (p, v, want) in cases {
            assert_eq!(
                ModelConfig::from_preset(p, v).param_count(),
                want,
                "{p} V={v}"
            );
        }
    }

    #[test]
    fn residual_rows() {
        let at = |p| ModelConfig::from_preset(p, 512).param_count();
        assert_eq!(at(Preset::Xxs), 533);
        assert_eq!(at(Preset::Tiny), 9_953);
        assert_eq!(at(Preset::L), 100_510_801);
        assert_eq!(at(Preset::Xl), 340_770_817);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::custom(16, 8, 2, 3, 4).is_err());
        assert!(ModelConfig::custom(16, 8, 0, 2, 4).is_err());
        assert!(ModelConfig::custom(16, 8, 2, 2, 4).is_ok());
        assert_eq!("tiny".parse::<Preset>().unwrap(), Preset::Tiny);
        assert!("XXL".parse::<Preset>().is_err());
    }
}

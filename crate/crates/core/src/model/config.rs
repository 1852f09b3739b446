use serde::{Deserialize, Serialize};

use crate::autodiff::ConvPadding;
use crate::data::valid_interval;
use crate::{Error, Result};

/// Which streams feed the second attention module of each fusion layer,
/// written `[query_key_value]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AblationWiring {
    /// `[TM_TM_TM]` self-attention only.
    E1,
    /// Adds a second `[TM_TM_TM]` attention.
    E2,
    /// Second attention `[TM_TM_SM]`.
    E3,
    /// Second attention `[T_T_SM]`: queries and keys from calendar
    /// embeddings, values from the support modality.
    #[default]
    E4,
}

impl AblationWiring {
    pub const ALL: [AblationWiring; 4] = [Self::E1, Self::E2, Self::E3, Self::E4];

    pub fn has_second_attention(self) -> bool {
        self != Self::E1
    }

    pub fn uses_support(self) -> bool {
        matches!(self, Self::E3 | Self::E4)
    }

    pub fn uses_calendar(self) -> bool {
        self == Self::E4
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::E1 => "[TM_TM_TM]_1",
            Self::E2 => "+ [TM_TM_TM]_2",
            Self::E3 => "+ [TM_TM_SM]_2",
            Self::E4 => "+ [T_T_SM]_2",
        }
    }
}

impl std::str::FromStr for AblationWiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e1" => Ok(Self::E1),
            "e2" => Ok(Self::E2),
            "e3" => Ok(Self::E3),
            "e4" => Ok(Self::E4),
            _ => Err(Error::Usage(format!("unknown wiring {s:?}, expected e1..e4"))),
        }
    }
}

impl std::fmt::Display for AblationWiring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

/// How the final fusion-layer output is projected onto the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Linear `d -> L` on the last time step.
    #[default]
    LastToken,
    /// Linear `(H+1)*d -> L` on all time steps.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// H + 1
    pub input_len: usize,
    /// L
    pub horizon: usize,
    pub interval_minutes: u32,
    pub wiring: AblationWiring,
    pub use_te_self_attention: bool,
    pub kernel_size: usize,
    /// Padding of the token-embedding convolution.
    pub token_padding: ConvPadding,
    /// Padding of the convolution inside each fusion layer.
    pub conv_padding: ConvPadding,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            heads: 8,
            layers: 2,
            input_len: 96,
            horizon: 48,
            interval_minutes: 15,
            wiring: AblationWiring::E4,
            use_te_self_attention: true,
            kernel_size: 3,
            token_padding: ConvPadding::Circular,
            conv_padding: ConvPadding::Causal,
            readout: Readout::LastToken,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            problems.push(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.layers == 0 {
            problems.push("at least one fusion layer is required".to_string());
        }
        if self.input_len == 0 || self.horizon == 0 {
            problems.push("input_len and horizon must be positive".to_string());
        }
        if self.kernel_size.is_multiple_of(2) {
            problems.push(format!("kernel_size = {} must be odd", self.kernel_size));
        }
        if !valid_interval(self.interval_minutes) {
            problems.push(format!(
                "interval {} min must divide 60 or be a multiple of 60",
                self.interval_minutes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, k) = (self.d, self.kernel_size);
        let attn = 4 * (d * d + d);
        let streams = if self.wiring.uses_support() { 2 } else { 1 };
        let mut n = 2 + streams * (k * d + d);
        if self.wiring.uses_calendar() {
            let minute = if self.interval_minutes < 60 {
                (60 / self.interval_minutes) as usize
            } else {
                0
            };
            n += d * (12 + 31 + 24 + minute + 7 + 2);
            if self.use_te_self_attention {
                n += attn;
            }
        }
        let second = if self.wiring.has_second_attention() { attn } else { 0 };
        n += self.layers * (attn + second + 2 * d + k * d * d + d);
        let readin = match self.readout {
            Readout::LastToken => d,
            Readout::Flatten => d * self.input_len,
        };
        n + readin * self.horizon + self.horizon
    }
}

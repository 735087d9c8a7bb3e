use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};

/// Transition-model variant. Exactly one is active per model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// CCI removed from the selector input.
    Ab01,
    /// CCI removed from the mechanism input.
    Ab10,
    /// CCI removed from both.
    Ab00,
    /// One CCI per step, all slots updated from the time-t buffer.
    Parallel,
    /// An MLP over the order-concatenated slots replaces attention.
    MlpCci,
    /// Uniformly random mechanism per slot; the selector is bypassed.
    RandomMech,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::Ab01,
        Variant::Ab10,
        Variant::Ab00,
        Variant::Parallel,
        Variant::MlpCci,
        Variant::RandomMech,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ab01 => "ab01",
            Variant::Ab10 => "ab10",
            Variant::Ab00 => "ab00",
            Variant::Parallel => "parallel",
            Variant::MlpCci => "mlp_cci",
            Variant::RandomMech => "random_mech",
        }
    }

    pub fn cci_in_selector(self) -> bool {
        !matches!(self, Variant::Ab01 | Variant::Ab00)
    }

    pub fn cci_in_mechanisms(self) -> bool {
        !matches!(self, Variant::Ab10 | Variant::Ab00)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    /// Number of slots `N`.
    pub slots: usize,
    /// Number of mechanisms `M`.
    pub mechanisms: usize,
    pub slot_dim: usize,
    pub action_dim: usize,
    pub cci_dim: usize,
    pub hidden: usize,
    pub variant: Variant,
    pub heads: usize,
    pub temperature: f64,
}

impl TransitionConfig {
    /// Shapes: N=5, M=5, d_a=4. Balls: N=3, M=7, d_a=0. Both: d_s=4, hidden 512.
    pub fn for_env(kind: EnvKind) -> Self {
        let (slots, mechanisms) = match kind {
            EnvKind::Shapes => (5, 5),
            EnvKind::Balls => (3, 7),
        };
        Self {
            slots,
            mechanisms,
            slot_dim: 4,
            action_dim: kind.action_dim(),
            cci_dim: 32,
            hidden: 512,
            variant: Variant::Full,
            heads: 2,
            temperature: 1.0,
        }
    }

    /// Width of one attention row: a slot concatenated with its action row.
    pub fn model_dim(&self) -> usize {
        self.slot_dim + self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("slots", self.slots),
            ("mechanisms", self.mechanisms),
            ("slot_dim", self.slot_dim),
            ("cci_dim", self.cci_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.model_dim() % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim(),
                self.heads
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a world model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub env: EnvKind,
    pub transition: TransitionConfig,
    /// Channels of the first convolution.
    pub cnn_channels: usize,
    /// Hidden width of the per-map encoder MLP.
    pub encoder_hidden: usize,
}

impl ModelConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let transition = TransitionConfig::for_env(env);
        Self {
            env,
            encoder_hidden: transition.hidden,
            transition,
            cnn_channels: 32,
        }
    }

    /// Sets both the transition and encoder hidden widths.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.transition.hidden = hidden;
        self.encoder_hidden = hidden;
        self
    }

    pub fn input_channels(&self) -> usize {
        3 * self.env.input_frames()
    }

    pub fn validate(&self) -> Result<()> {
        self.transition.validate()?;
        if self.transition.action_dim != self.env.action_dim() {
            return Err(Error::ConfigMismatch(format!(
                "action_dim {} but {} actions have dimension {}",
                self.transition.action_dim,
                self.env,
                self.env.action_dim()
            )));
        }
        if self.cnn_channels == 0 || self.encoder_hidden == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

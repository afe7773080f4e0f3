use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::DecayVariant;
use crate::spatial_decay::BoundaryMode;

use super::ModelError;

/// Token mixer used by the attention sub-layer of every block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    Decay(DecayVariant),
    Softmax,
    /// Spatial-decay layers with a single softmax layer at index `⌊L/2⌋`.
    Hybrid,
}

/// Mixer of one concrete layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mixer {
    Decay(DecayVariant),
    Softmax,
}

impl AttentionKind {
    pub fn lasad() -> Self {
        AttentionKind::Decay(DecayVariant::Lasad)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Decay(DecayVariant::None) => f.write_str("linear"),
            AttentionKind::Decay(DecayVariant::Constant(l)) => write!(f, "constant:{l}"),
            AttentionKind::Decay(DecayVariant::DataDependent) => f.write_str("gated"),
            AttentionKind::Decay(DecayVariant::Hgrn2Shared) => f.write_str("hgrn2"),
            AttentionKind::Decay(DecayVariant::Lasad) => f.write_str("lasad"),
            AttentionKind::Softmax => f.write_str("softmax"),
            AttentionKind::Hybrid => f.write_str("hybrid"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s {
            "linear" => AttentionKind::Decay(DecayVariant::None),
            "gated" => AttentionKind::Decay(DecayVariant::DataDependent),
            "hgrn2" => AttentionKind::Decay(DecayVariant::Hgrn2Shared),
            "lasad" => AttentionKind::lasad(),
            "softmax" => AttentionKind::Softmax,
            "hybrid" => AttentionKind::Hybrid,
            _ => match s.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(l)) => AttentionKind::Decay(DecayVariant::Constant(l)),
                _ => return Err(ModelError::Config(format!("unknown attention kind {s:?}"))),
            },
        };
        if let AttentionKind::Decay(v) = kind {
            v.validate()
                .map_err(|e| ModelError::Config(e.to_string()))?;
        }
        Ok(kind)
    }
}

fn mode_name(mode: BoundaryMode) -> &'static str {
    match mode {
        BoundaryMode::Retain => "retain",
        BoundaryMode::Suppress => "suppress",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub classes: usize,
    pub attention: AttentionKind,
    /// Probability of replacing the class label by the null label in training.
    pub cfg_dropout: f64,
    pub boundary_mode: BoundaryMode,
    pub mlp_hidden: usize,
    pub norm_eps: f64,
}

/// `8d/3` rounded up to a multiple of 8.
pub fn default_mlp_hidden(hidden: usize) -> usize {
    (8 * hidden / 3).div_ceil(8) * 8
}

impl ModelConfig {
    fn preset(layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            vocab: 16384,
            grid_width: 16,
            grid_height: 16,
            classes: 1000,
            attention: AttentionKind::lasad(),
            cfg_dropout: 0.1,
            boundary_mode: BoundaryMode::Retain,
            mlp_hidden: default_mlp_hidden(hidden),
            norm_eps: 1e-5,
        }
    }

    /// Desk-scale preset: 2 layers, width 64, 2 heads, on a small grid.
    pub fn nano() -> Self {
        Self {
            vocab: 16,
            grid_width: 8,
            grid_height: 8,
            classes: 4,
            ..Self::preset(2, 64, 2)
        }
    }

    pub fn micro() -> Self {
        Self {
            vocab: 64,
            classes: 10,
            ..Self::preset(4, 128, 4)
        }
    }

    pub fn base() -> Self {
        Self::preset(12, 768, 12)
    }

    pub fn large() -> Self {
        Self::preset(24, 1024, 16)
    }

    pub fn xl() -> Self {
        Self::preset(36, 1280, 20)
    }

    pub fn xxl() -> Self {
        Self::preset(48, 1536, 24)
    }

    pub fn from_preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "nano" => Ok(Self::nano()),
            "micro" => Ok(Self::micro()),
            "B" | "base" => Ok(Self::base()),
            "L" | "large" => Ok(Self::large()),
            "XL" | "xl" => Ok(Self::xl()),
            "XXL" | "xxl" => Ok(Self::xxl()),
            _ => Err(ModelError::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.grid_width * self.grid_height
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Row of the class-embedding table used for the unconditional label.
    pub fn null_label(&self) -> usize {
        self.classes
    }

    pub fn mixer(&self, layer: usize) -> Mixer {
        match self.attention {
            AttentionKind::Decay(v) => Mixer::Decay(v),
            AttentionKind::Softmax => Mixer::Softmax,
            AttentionKind::Hybrid if layer == self.layers / 2 => Mixer::Softmax,
            AttentionKind::Hybrid => Mixer::Decay(DecayVariant::Lasad),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return fail("layers, hidden, heads and mlp_hidden must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.vocab < 2 || self.classes == 0 || self.grid_width == 0 || self.grid_height == 0 {
            return fail("vocab >= 2, classes >= 1 and a non-empty grid are required".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return fail(format!("cfg_dropout {} outside [0, 1]", self.cfg_dropout));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return fail("norm_eps must be positive".into());
        }
        if let AttentionKind::Decay(v) = self.attention {
            v.validate()
                .map_err(|e| ModelError::Config(e.to_string()))?;
        }
        let uses_rope = (0..self.layers).any(|l| self.mixer(l) == Mixer::Softmax);
        if uses_rope && !self.head_dim().is_multiple_of(2) {
            return fail("softmax layers need an even head dimension for rotary encoding".into());
        }
        Ok(())
    }

    /// Flat `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("vocab", self.vocab.to_string()),
            ("grid_width", self.grid_width.to_string()),
            ("grid_height", self.grid_height.to_string()),
            ("classes", self.classes.to_string()),
            ("attention", self.attention.to_string()),
            ("cfg_dropout", format!("{:?}", self.cfg_dropout)),
            ("boundary_mode", mode_name(self.boundary_mode).to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("norm_eps", format!("{:?}", self.norm_eps)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub const KEYS: [&'static str; 12] = [
        "layers",
        "hidden",
        "heads",
        "vocab",
        "grid_width",
        "grid_height",
        "classes",
        "attention",
        "cfg_dropout",
        "boundary_mode",
        "mlp_hidden",
        "norm_eps",
    ];

    /// Overrides fields of `self` from `key=value` pairs; unknown keys are
    /// an error. `hidden` without `mlp_hidden` re-derives the MLP width.
    pub fn apply_pairs<'a, I>(mut self, pairs: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let pairs: BTreeMap<&str, &str> = pairs.into_iter().collect();
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Config(format!("bad value {v:?} for {key}")))
        }
        for (&k, &v) in &pairs {
            match k {
                "layers" => self.layers = num(k, v)?,
                "hidden" => {
                    self.hidden = num(k, v)?;
                    if !pairs.contains_key("mlp_hidden") {
                        self.mlp_hidden = default_mlp_hidden(self.hidden);
                    }
                }
                "heads" => self.heads = num(k, v)?,
                "vocab" => self.vocab = num(k, v)?,
                "grid_width" => self.grid_width = num(k, v)?,
                "grid_height" => self.grid_height = num(k, v)?,
                "classes" => self.classes = num(k, v)?,
                "attention" => self.attention = v.parse()?,
                "cfg_dropout" => self.cfg_dropout = num(k, v)?,
                "boundary_mode" => {
                    self.boundary_mode = match v {
                        "retain" => BoundaryMode::Retain,
                        "suppress" => BoundaryMode::Suppress,
                        _ => {
                            return Err(ModelError::Config(format!("unknown boundary mode {v:?}")))
                        }
                    }
                }
                "mlp_hidden" => self.mlp_hidden = num(k, v)?,
                "norm_eps" => self.norm_eps = num(k, v)?,
                _ => return Err(ModelError::Config(format!("unknown model key {k:?}"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Parameter count computed from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden;
        let mut total = self.vocab * d + (self.classes + 1) * d + d + d * self.vocab;
        for layer in 0..self.layers {
            let attention = match self.mixer(layer) {
                Mixer::Softmax => 4 * d * d,
                Mixer::Decay(v) if v.shares_key() => 4 * d * d + 2 * d,
                Mixer::Decay(DecayVariant::DataDependent) => 5 * d * d + 2 * d,
                Mixer::Decay(_) => 4 * d * d + d,
            };
            total += attention + 2 * d + 3 * d * self.mlp_hidden;
        }
        total
    }
}

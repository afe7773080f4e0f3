use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::DecayVariant;
use crate::numerics::{Tensor, INIT_STD};

use super::config::{Mixer, ModelConfig};
use super::ModelError;

/// Named parameter tensors in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(pairs.len());
        let mut tensors = Vec::with_capacity(pairs.len());
        for (i, (name, t)) in pairs.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(ModelError::Config(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug)]
pub(crate) enum MixerSlots {
    /// Key tied to the decay (`k = 1 − λ`).
    Shared {
        wq: usize,
        wv: usize,
        wl: usize,
        bl: usize,
        wo: usize,
        out_norm: usize,
    },
    Gated {
        wq: usize,
        wk: usize,
        wv: usize,
        wg: usize,
        bg: usize,
        wo: usize,
        out_norm: usize,
    },
    Plain {
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
        out_norm: usize,
    },
    Softmax {
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct LayerSlots {
    pub mixer_kind: Mixer,
    pub attn_norm: usize,
    pub mixer: MixerSlots,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w3: usize,
    pub w2: usize,
}

/// Indices of every parameter in the [`ParamStore`].
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub cls_emb: usize,
    pub layers: Vec<LayerSlots>,
    pub final_norm: usize,
    pub head: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal,
    Ones,
    /// Gate bias spread linearly over `GATE_BIAS_RANGE` within each head,
    /// so every head starts with decays from fast to slow.
    GateRamp {
        head_dim: usize,
    },
}

/// Sigmoid gates start between about 0.12 and 0.88.
pub(crate) const GATE_BIAS_RANGE: (f64, f64) = (-2.0, 2.0);

fn gate_ramp(len: usize, head_dim: usize) -> Tensor {
    let (lo, hi) = GATE_BIAS_RANGE;
    let data = (0..len)
        .map(|i| match head_dim {
            0 | 1 => lo,
            h => lo + (hi - lo) * (i % h) as f64 / (h - 1) as f64,
        })
        .collect();
    Tensor::new(vec![len], data).expect("length matches shape")
}

pub(crate) struct Spec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(Spec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }
}

impl Layout {
    pub fn build(config: &ModelConfig) -> (Layout, Vec<Spec>) {
        let d = config.hidden;
        let m = config.mlp_hidden;
        let ramp = Init::GateRamp {
            head_dim: config.head_dim(),
        };
        let mut b = Builder { specs: Vec::new() };
        let tok_emb = b.add("tok_emb".into(), &[config.vocab, d], Init::Normal);
        let cls_emb = b.add("cls_emb".into(), &[config.classes + 1, d], Init::Normal);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = b.add(p("attn_norm"), &[d], Init::Ones);
            let mixer_kind = config.mixer(l);
            let mat = |b: &mut Builder, s: &str| b.add(p(s), &[d, d], Init::Normal);
            let mixer = match mixer_kind {
                Mixer::Decay(v) if v.shares_key() => MixerSlots::Shared {
                    wq: mat(&mut b, "attn.wq"),
                    wv: mat(&mut b, "attn.wv"),
                    wl: mat(&mut b, "attn.wl"),
                    bl: b.add(p("attn.bl"), &[d], ramp),
                    wo: mat(&mut b, "attn.wo"),
                    out_norm: b.add(p("attn.out_norm"), &[d], Init::Ones),
                },
                Mixer::Decay(DecayVariant::DataDependent) => MixerSlots::Gated {
                    wq: mat(&mut b, "attn.wq"),
                    wk: mat(&mut b, "attn.wk"),
                    wv: mat(&mut b, "attn.wv"),
                    wg: mat(&mut b, "attn.wg"),
                    bg: b.add(p("attn.bg"), &[d], ramp),
                    wo: mat(&mut b, "attn.wo"),
                    out_norm: b.add(p("attn.out_norm"), &[d], Init::Ones),
                },
                Mixer::Decay(_) => MixerSlots::Plain {
                    wq: mat(&mut b, "attn.wq"),
                    wk: mat(&mut b, "attn.wk"),
                    wv: mat(&mut b, "attn.wv"),
                    wo: mat(&mut b, "attn.wo"),
                    out_norm: b.add(p("attn.out_norm"), &[d], Init::Ones),
                },
                Mixer::Softmax => MixerSlots::Softmax {
                    wq: mat(&mut b, "attn.wq"),
                    wk: mat(&mut b, "attn.wk"),
                    wv: mat(&mut b, "attn.wv"),
                    wo: mat(&mut b, "attn.wo"),
                },
            };
            let ffn_norm = b.add(p("ffn_norm"), &[d], Init::Ones);
            let w1 = b.add(p("mlp.w1"), &[d, m], Init::Normal);
            let w3 = b.add(p("mlp.w3"), &[d, m], Init::Normal);
            let w2 = b.add(p("mlp.w2"), &[m, d], Init::Normal);
            layers.push(LayerSlots {
                mixer_kind,
                attn_norm,
                mixer,
                ffn_norm,
                w1,
                w3,
                w2,
            });
        }
        let final_norm = b.add("final_norm".into(), &[d], Init::Ones);
        let head = b.add("head".into(), &[d, config.vocab], Init::Normal);
        let layout = Layout {
            tok_emb,
            cls_emb,
            layers,
            final_norm,
            head,
        };
        (layout, b.specs)
    }
}

/// Fresh parameters: normal(0, 0.02) for matrices and embeddings, unit
/// gains, and per-head ramps for the decay-gate biases.
pub(crate) fn initialize(specs: &[Spec], seed: u64) -> Result<ParamStore, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = specs
        .iter()
        .map(|s| {
            let t = match s.init {
                Init::Normal => Tensor::randn(&s.shape, INIT_STD, &mut rng),
                Init::Ones => Tensor::ones(&s.shape),
                Init::GateRamp { head_dim } => gate_ramp(s.shape.iter().product(), head_dim),
            };
            (s.name.clone(), t)
        })
        .collect();
    ParamStore::from_pairs(pairs)
}

//! Incremental decoding and classifier-free-guided sampling.
//!
//! The decoder consumes one row at a time without a tape. Decay layers keep
//! one `d_k×d_v` state per head, so memory per step is independent of the
//! position; softmax layers (hybrid models) keep their rotated keys and
//! values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::rope_in_place;
use crate::attention::{decay_gate, DecayVariant, RecurrentState};
use crate::data::TokenGrid;
use crate::numerics::kernels::{self, dot, elu_plus_one, silu, softmax_in_place};
use crate::spatial_decay::is_boundary;

use super::config::Mixer;
use super::params::MixerSlots;
use super::{Model, ModelError};

enum LayerCache {
    Recurrent(Vec<RecurrentState>),
    Softmax { keys: Vec<f64>, values: Vec<f64> },
}

pub struct Decoder<'m> {
    model: &'m Model,
    caches: Vec<LayerCache>,
    position: usize,
}

fn matvec(x: &[f64], w: &crate::numerics::Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    kernels::matmul(1, k, n, x, w.data())
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        let cfg = model.config();
        let dh = cfg.head_dim();
        let caches = (0..cfg.layers)
            .map(|l| match cfg.mixer(l) {
                Mixer::Decay(_) => LayerCache::Recurrent(
                    (0..cfg.heads)
                        .map(|_| RecurrentState::new(dh, dh))
                        .collect(),
                ),
                Mixer::Softmax => LayerCache::Softmax {
                    keys: Vec::new(),
                    values: Vec::new(),
                },
            })
            .collect();
        Self {
            model,
            caches,
            position: 0,
        }
    }

    /// Rows consumed so far (the class token counts as row 0).
    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds the class token; returns the logits for the first image token.
    pub fn start(&mut self, label: Option<usize>) -> Result<Vec<f64>, ModelError> {
        if self.position != 0 {
            return Err(ModelError::Input("decoder already started".into()));
        }
        let row = self.model.class_row(label)?;
        let x = self.model.params.tensors()[self.model.layout.cls_emb]
            .row(row)
            .to_vec();
        Ok(self.step(x))
    }

    /// Feeds the next image token; returns the logits for the one after it.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>, ModelError> {
        let cfg = self.model.config();
        if self.position == 0 {
            return Err(ModelError::Input(
                "decoder needs the class token first".into(),
            ));
        }
        if self.position >= cfg.seq_len() {
            return Err(ModelError::Input("grid is already complete".into()));
        }
        if token >= cfg.vocab {
            return Err(ModelError::Input(format!(
                "token {token} out of range for vocab {}",
                cfg.vocab
            )));
        }
        let x = self.model.params.tensors()[self.model.layout.tok_emb]
            .row(token)
            .to_vec();
        Ok(self.step(x))
    }

    /// Scalars held in the recurrent states and softmax caches.
    pub fn state_floats(&self) -> usize {
        self.caches
            .iter()
            .map(|c| match c {
                LayerCache::Recurrent(states) => states.iter().map(|s| s.s.numel()).sum(),
                LayerCache::Softmax { keys, values } => keys.len() + values.len(),
            })
            .sum()
    }

    fn step(&mut self, mut x: Vec<f64>) -> Vec<f64> {
        let model = self.model;
        let cfg = model.config();
        let p = model.params.tensors();
        let eps = cfg.norm_eps;
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let pos = self.position;
        for (layer, cache) in model.layout.layers.iter().zip(self.caches.iter_mut()) {
            let h = kernels::rms_norm_rows(&x, p[layer.attn_norm].data(), eps);
            let (o, wo, out_norm) = match (&layer.mixer, cache) {
                (
                    &MixerSlots::Shared {
                        wq,
                        wv,
                        wl,
                        bl,
                        wo,
                        out_norm,
                    },
                    LayerCache::Recurrent(states),
                ) => {
                    let q: Vec<f64> = matvec(&h, &p[wq]).into_iter().map(silu).collect();
                    let v = matvec(&h, &p[wv]);
                    let lam: Vec<f64> = matvec(&h, &p[wl])
                        .iter()
                        .zip(p[bl].data())
                        .map(|(a, b)| decay_gate(a + b))
                        .collect();
                    let k: Vec<f64> = lam.iter().map(|l| 1.0 - l).collect();
                    let decay = if layer.mixer_kind == Mixer::Decay(DecayVariant::Lasad)
                        && is_boundary(pos, cfg.grid_width)
                    {
                        vec![cfg.boundary_mode.value(); lam.len()]
                    } else {
                        lam
                    };
                    (
                        scan_heads(states, &q, &k, &v, Some(&decay), dh),
                        wo,
                        Some(out_norm),
                    )
                }
                (
                    &MixerSlots::Gated {
                        wq,
                        wk,
                        wv,
                        wg,
                        bg,
                        wo,
                        out_norm,
                    },
                    LayerCache::Recurrent(states),
                ) => {
                    let q: Vec<f64> = matvec(&h, &p[wq]).into_iter().map(silu).collect();
                    let k: Vec<f64> = matvec(&h, &p[wk]).into_iter().map(silu).collect();
                    let v = matvec(&h, &p[wv]);
                    let lam: Vec<f64> = matvec(&h, &p[wg])
                        .iter()
                        .zip(p[bg].data())
                        .map(|(a, b)| decay_gate(a + b))
                        .collect();
                    (
                        scan_heads(states, &q, &k, &v, Some(&lam), dh),
                        wo,
                        Some(out_norm),
                    )
                }
                (
                    &MixerSlots::Plain {
                        wq,
                        wk,
                        wv,
                        wo,
                        out_norm,
                    },
                    LayerCache::Recurrent(states),
                ) => {
                    let q: Vec<f64> = matvec(&h, &p[wq]).into_iter().map(elu_plus_one).collect();
                    let k: Vec<f64> = matvec(&h, &p[wk]).into_iter().map(elu_plus_one).collect();
                    let v = matvec(&h, &p[wv]);
                    let decay = match layer.mixer_kind {
                        Mixer::Decay(DecayVariant::Constant(l)) => Some(vec![l; q.len()]),
                        _ => None,
                    };
                    (
                        scan_heads(states, &q, &k, &v, decay.as_deref(), dh),
                        wo,
                        Some(out_norm),
                    )
                }
                (&MixerSlots::Softmax { wq, wk, wv, wo }, LayerCache::Softmax { keys, values }) => {
                    let mut q = matvec(&h, &p[wq]);
                    let mut k = matvec(&h, &p[wk]);
                    rope_in_place(&mut q, pos, dh, false);
                    rope_in_place(&mut k, pos, dh, false);
                    keys.extend_from_slice(&k);
                    values.extend_from_slice(&matvec(&h, &p[wv]));
                    let d = heads * dh;
                    let len = pos + 1;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut o = vec![0.0; d];
                    let mut w = vec![0.0; len];
                    for hd in 0..heads {
                        let cols = hd * dh..(hd + 1) * dh;
                        for (j, wj) in w.iter_mut().enumerate() {
                            *wj = dot(&q[cols.clone()], &keys[j * d..(j + 1) * d][cols.clone()])
                                * scale;
                        }
                        softmax_in_place(&mut w, len);
                        for (j, wj) in w.iter().enumerate() {
                            for (oc, vc) in o[cols.clone()]
                                .iter_mut()
                                .zip(&values[j * d..(j + 1) * d][cols.clone()])
                            {
                                *oc += wj * vc;
                            }
                        }
                    }
                    (o, wo, None)
                }
                _ => unreachable!("cache kind follows the layer mixer"),
            };
            let o = match out_norm {
                Some(g) => kernels::rms_norm_rows(&o, p[g].data(), eps),
                None => o,
            };
            for (xi, a) in x.iter_mut().zip(matvec(&o, &p[wo])) {
                *xi += a;
            }
            let h = kernels::rms_norm_rows(&x, p[layer.ffn_norm].data(), eps);
            let u = matvec(&h, &p[layer.w1]);
            let g = matvec(&h, &p[layer.w3]);
            let m: Vec<f64> = u.iter().zip(&g).map(|(a, b)| silu(*a) * b).collect();
            for (xi, f) in x.iter_mut().zip(matvec(&m, &p[layer.w2])) {
                *xi += f;
            }
        }
        let x = kernels::rms_norm_rows(&x, p[model.layout.final_norm].data(), eps);
        self.position += 1;
        matvec(&x, &p[model.layout.head])
    }
}

fn scan_heads(
    states: &mut [RecurrentState],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    decay: Option<&[f64]>,
    dh: usize,
) -> Vec<f64> {
    let mut o = Vec::with_capacity(q.len());
    for (hd, st) in states.iter_mut().enumerate() {
        let cols = hd * dh..(hd + 1) * dh;
        o.extend(st.step(
            &q[cols.clone()],
            &k[cols.clone()],
            &v[cols.clone()],
            decay.map(|a| &a[cols.clone()]),
        ));
    }
    o
}

/// `ℓ_u + s·(ℓ_c − ℓ_u)`, returning `ℓ_c` itself at `s = 1` and `ℓ_u` at
/// `s = 0`.
pub fn guide_logits(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return cond.to_vec();
    }
    if scale == 0.0 {
        return uncond.to_vec();
    }
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub cfg_scale: f64,
    /// 0 means greedy.
    pub temperature: f64,
    /// 0 disables the top-k filter; 1 is greedy.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            cfg_scale: 1.0,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
        }
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from `logits` under temperature and top-k.
pub fn sample_logits<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_k: usize,
    rng: &mut R,
) -> usize {
    if top_k == 1 || temperature == 0.0 {
        return argmax(logits);
    }
    let mut scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    if top_k > 0 && top_k < scaled.len() {
        let mut sorted = scaled.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[top_k - 1];
        let mut kept = 0;
        for s in scaled.iter_mut() {
            if *s >= cut && kept < top_k {
                kept += 1;
            } else {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    let n = scaled.len();
    softmax_in_place(&mut scaled, n);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in scaled.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    scaled.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Generates one grid. `label = None` samples unconditionally; otherwise the
/// conditional and null-label streams are combined with `cfg_scale`.
pub fn sample(
    model: &Model,
    label: Option<usize>,
    opts: &SampleOptions,
) -> Result<TokenGrid, ModelError> {
    let cfg = model.config();
    if !(opts.cfg_scale >= 0.0 && opts.cfg_scale.is_finite()) {
        return Err(ModelError::Input(format!(
            "cfg scale {} must be finite and >= 0",
            opts.cfg_scale
        )));
    }
    if !(opts.temperature >= 0.0 && opts.temperature.is_finite()) {
        return Err(ModelError::Input(format!(
            "temperature {} must be finite and >= 0",
            opts.temperature
        )));
    }
    model.class_row(label)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let use_cond = label.is_some() && opts.cfg_scale != 0.0;
    let use_uncond = label.is_none() || opts.cfg_scale != 1.0;
    let mut cond = use_cond.then(|| Decoder::new(model));
    let mut uncond = use_uncond.then(|| Decoder::new(model));
    let mut lc = match cond.as_mut() {
        Some(d) => d.start(label)?,
        None => Vec::new(),
    };
    let mut lu = match uncond.as_mut() {
        Some(d) => d.start(None)?,
        None => Vec::new(),
    };
    let n = cfg.seq_len();
    let mut tokens = Vec::with_capacity(n);
    for t in 0..n {
        let logits = match (use_cond, use_uncond) {
            (true, true) => guide_logits(&lc, &lu, opts.cfg_scale),
            (true, false) => lc.clone(),
            _ => lu.clone(),
        };
        let tok = sample_logits(&logits, opts.temperature, opts.top_k, &mut rng);
        tokens.push(tok);
        if t + 1 < n {
            if let Some(d) = cond.as_mut() {
                lc = d.push(tok)?;
            }
            if let Some(d) = uncond.as_mut() {
                lu = d.push(tok)?;
            }
        }
    }
    TokenGrid::new(cfg.grid_height, cfg.grid_width, tokens, label.unwrap_or(0))
        .map_err(|e| ModelError::Input(e.to_string()))
}

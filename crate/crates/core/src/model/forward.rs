//! Batched, differentiable forward pass.
//!
//! A batch of `B` sequences of `T` input rows each is stacked into one
//! `(B·T)×d` activation matrix. Row 0 of every sequence is the class token;
//! row `t ≥ 1` holds image token `x_t` and produces the logits for `x_{t+1}`.

use crate::attention::tape_ops::{causal_softmax_attention, decay_scan, rope};
use crate::attention::DecayVariant;
use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var, DECAY_CEIL, DECAY_FLOOR};
use crate::spatial_decay::spatial_override;

use super::config::Mixer;
use super::params::{LayerSlots, MixerSlots};
use super::{Model, ModelError};

#[derive(Clone, Copy, Debug)]
enum Slot {
    Class(usize),
    Token(usize),
}

/// Looks up class rows and token rows from two tables into one matrix.
fn embed(tape: &mut Tape, tokens: Var, classes: Var, slots: &[Slot]) -> Result<Var, NumericsError> {
    let (_, d) = tape.value(tokens).dims2()?;
    let mut out = Vec::with_capacity(slots.len() * d);
    for s in slots {
        out.extend_from_slice(match *s {
            Slot::Class(c) => tape.value(classes).row(c),
            Slot::Token(t) => tape.value(tokens).row(t),
        });
    }
    let out = Tensor::new(vec![slots.len(), d], out)?;
    tape.custom(
        &[tokens, classes],
        out,
        Box::new(Embed {
            slots: slots.to_vec(),
            d,
        }),
    )
}

struct Embed {
    slots: Vec<Slot>,
    d: usize,
}

impl CustomOp for Embed {
    fn name(&self) -> &'static str {
        "embed"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let mut gt = vec![0.0; inputs[0].numel()];
        let mut gc = vec![0.0; inputs[1].numel()];
        for (s, g) in self.slots.iter().zip(grad_output.chunks_exact(self.d)) {
            let (dst, row) = match *s {
                Slot::Class(c) => (&mut gc, c),
                Slot::Token(t) => (&mut gt, t),
            };
            for (a, b) in dst[row * self.d..(row + 1) * self.d].iter_mut().zip(g) {
                *a += b;
            }
        }
        vec![Some(gt), Some(gc)]
    }
}

/// `x + 1·bᵀ`: adds the bias vector to every row.
fn add_row(tape: &mut Tape, x: Var, bias: Var) -> Result<Var, NumericsError> {
    let (_, d) = tape.value(x).dims2()?;
    let b = tape.value(bias);
    if b.shape() != [d] {
        return Err(NumericsError::ShapeMismatch {
            op: "add_row",
            lhs: tape.value(x).shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = tape.value(x).data().to_vec();
    for row in out.chunks_exact_mut(d) {
        for (o, bb) in row.iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    let out = Tensor::new(tape.value(x).shape().to_vec(), out)?;
    tape.custom(&[x, bias], out, Box::new(AddRow { d }))
}

struct AddRow {
    d: usize,
}

impl CustomOp for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gb = vec![0.0; self.d];
        for row in grad_output.chunks_exact(self.d) {
            for (a, b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        vec![Some(grad_output.to_vec()), Some(gb)]
    }
}

/// Clamped sigmoid gate from `h W + b`.
fn gate(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let logits = tape.matmul(h, w)?;
    let logits = add_row(tape, logits, b)?;
    let g = tape.sigmoid(logits)?;
    tape.clamp(g, DECAY_FLOOR, DECAY_CEIL)
}

impl Model {
    fn mixer_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        layer: &LayerSlots,
        h: Var,
        seq_len: usize,
    ) -> Result<Var, NumericsError> {
        let cfg = &self.config;
        let heads = cfg.heads;
        let eps = cfg.norm_eps;
        let (o, wo, out_norm) = match layer.mixer {
            MixerSlots::Shared {
                wq,
                wv,
                wl,
                bl,
                wo,
                out_norm,
            } => {
                let q = tape.matmul(h, vars[wq])?;
                let q = tape.silu(q)?;
                let v = tape.matmul(h, vars[wv])?;
                let lam = gate(tape, h, vars[wl], vars[bl])?;
                let one = tape.constant(Tensor::scalar(1.0));
                let k = tape.sub(one, lam)?;
                let decay = if layer.mixer_kind == Mixer::Decay(DecayVariant::Lasad) {
                    spatial_override(tape, lam, seq_len, cfg.grid_width, 0, cfg.boundary_mode)?
                } else {
                    lam
                };
                (
                    decay_scan(tape, q, k, v, Some(decay), heads, seq_len)?,
                    wo,
                    Some(out_norm),
                )
            }
            MixerSlots::Gated {
                wq,
                wk,
                wv,
                wg,
                bg,
                wo,
                out_norm,
            } => {
                let q = tape.matmul(h, vars[wq])?;
                let q = tape.silu(q)?;
                let k = tape.matmul(h, vars[wk])?;
                let k = tape.silu(k)?;
                let v = tape.matmul(h, vars[wv])?;
                let lam = gate(tape, h, vars[wg], vars[bg])?;
                (
                    decay_scan(tape, q, k, v, Some(lam), heads, seq_len)?,
                    wo,
                    Some(out_norm),
                )
            }
            MixerSlots::Plain {
                wq,
                wk,
                wv,
                wo,
                out_norm,
            } => {
                let q = tape.matmul(h, vars[wq])?;
                let q = tape.elu_plus_one(q)?;
                let k = tape.matmul(h, vars[wk])?;
                let k = tape.elu_plus_one(k)?;
                let v = tape.matmul(h, vars[wv])?;
                let decay = match layer.mixer_kind {
                    Mixer::Decay(DecayVariant::Constant(l)) => {
                        let shape = tape.value(q).shape().to_vec();
                        Some(tape.constant(Tensor::filled(&shape, l)))
                    }
                    _ => None,
                };
                (
                    decay_scan(tape, q, k, v, decay, heads, seq_len)?,
                    wo,
                    Some(out_norm),
                )
            }
            MixerSlots::Softmax { wq, wk, wv, wo } => {
                let q = tape.matmul(h, vars[wq])?;
                let q = rope(tape, q, heads, seq_len)?;
                let k = tape.matmul(h, vars[wk])?;
                let k = rope(tape, k, heads, seq_len)?;
                let v = tape.matmul(h, vars[wv])?;
                (
                    causal_softmax_attention(tape, q, k, v, heads, seq_len)?,
                    wo,
                    None,
                )
            }
        };
        let o = match out_norm {
            Some(g) => tape.rms_norm(o, vars[g], eps)?,
            None => o,
        };
        tape.matmul(o, vars[wo])
    }

    /// Records the forward pass for a batch and returns the `(B·T)×V`
    /// logits. `class_rows[b]` indexes the class-embedding table (the null
    /// label is row `classes`); every prefix has length `T − 1`.
    pub(crate) fn logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        class_rows: &[usize],
        prefixes: &[&[usize]],
    ) -> Result<Var, ModelError> {
        let seq_len = self.check_batch(class_rows, prefixes)?;
        let cfg = &self.config;
        let layout = &self.layout;
        let mut slots = Vec::with_capacity(prefixes.len() * seq_len);
        for (&c, p) in class_rows.iter().zip(prefixes) {
            slots.push(Slot::Class(c));
            slots.extend(p.iter().map(|&t| Slot::Token(t)));
        }
        let mut x = embed(tape, vars[layout.tok_emb], vars[layout.cls_emb], &slots)?;
        for layer in &layout.layers {
            let h = tape.rms_norm(x, vars[layer.attn_norm], cfg.norm_eps)?;
            let a = self.mixer_on_tape(tape, vars, layer, h, seq_len)?;
            x = tape.add(x, a)?;
            let h = tape.rms_norm(x, vars[layer.ffn_norm], cfg.norm_eps)?;
            let u = tape.matmul(h, vars[layer.w1])?;
            let u = tape.silu(u)?;
            let g = tape.matmul(h, vars[layer.w3])?;
            let m = tape.mul(u, g)?;
            let f = tape.matmul(m, vars[layer.w2])?;
            x = tape.add(x, f)?;
        }
        let x = tape.rms_norm(x, vars[layout.final_norm], cfg.norm_eps)?;
        Ok(tape.matmul(x, vars[layout.head])?)
    }

    /// Validates a batch and returns its per-sequence length `T`.
    fn check_batch(
        &self,
        class_rows: &[usize],
        prefixes: &[&[usize]],
    ) -> Result<usize, ModelError> {
        let cfg = &self.config;
        if prefixes.is_empty() || class_rows.len() != prefixes.len() {
            return Err(ModelError::Input(format!(
                "{} labels for {} sequences",
                class_rows.len(),
                prefixes.len()
            )));
        }
        let prefix = prefixes[0].len();
        if prefix >= cfg.seq_len() {
            return Err(ModelError::Input(format!(
                "prefix of {prefix} tokens; at most {} fit the grid",
                cfg.seq_len() - 1
            )));
        }
        if let Some(&c) = class_rows.iter().find(|&&c| c > cfg.classes) {
            return Err(ModelError::Input(format!("label row {c} out of range")));
        }
        for p in prefixes {
            if p.len() != prefix {
                return Err(ModelError::Input(
                    "sequences in a batch must share one length".into(),
                ));
            }
            if let Some(&t) = p.iter().find(|&&t| t >= cfg.vocab) {
                return Err(ModelError::Input(format!(
                    "token {t} out of range for vocab {}",
                    cfg.vocab
                )));
            }
        }
        Ok(prefix + 1)
    }

    pub(crate) fn class_row(&self, label: Option<usize>) -> Result<usize, ModelError> {
        match label {
            None => Ok(self.config.null_label()),
            Some(c) if c < self.config.classes => Ok(c),
            Some(c) => Err(ModelError::Input(format!(
                "label {c} out of range for {} classes",
                self.config.classes
            ))),
        }
    }

    /// Logits for a batch of prefixes, `(B·T)×V`, row `b·T + t` predicting
    /// token `t + 1` of sequence `b`. `None` labels are unconditional.
    pub fn forward(
        &self,
        labels: &[Option<usize>],
        prefixes: &[&[usize]],
    ) -> Result<Tensor, ModelError> {
        let rows = labels
            .iter()
            .map(|&l| self.class_row(l))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let logits = self.logits_on_tape(&mut tape, &vars, &rows, prefixes)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean next-token cross-entropy over every position of every grid.
    pub fn loss(
        &self,
        grids: &[crate::data::TokenGrid],
        labels: &[Option<usize>],
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let loss = self.loss_on_tape(&mut tape, &vars, grids, labels)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and its gradient with respect to every parameter, in
    /// [`ParamStore`](super::ParamStore) order.
    pub fn loss_and_gradients(
        &self,
        grids: &[crate::data::TokenGrid],
        labels: &[Option<usize>],
    ) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let loss = self.loss_on_tape(&mut tape, &vars, grids, labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(ModelError::Numerics(NumericsError::NonFinite {
                op: "loss",
                index: 0,
                value,
            }));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(v, t)| tape.take_grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, grads))
    }

    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        grids: &[crate::data::TokenGrid],
        labels: &[Option<usize>],
    ) -> Result<Var, ModelError> {
        let n = self.config.seq_len();
        for g in grids {
            if g.height != self.config.grid_height || g.width != self.config.grid_width {
                return Err(ModelError::Input(format!(
                    "{}x{} grid for a {}x{} model",
                    g.height, g.width, self.config.grid_height, self.config.grid_width
                )));
            }
        }
        let rows = labels
            .iter()
            .map(|&l| self.class_row(l))
            .collect::<Result<Vec<_>, _>>()?;
        let prefixes: Vec<&[usize]> = grids.iter().map(|g| &g.tokens[..n - 1]).collect();
        let logits = self.logits_on_tape(tape, vars, &rows, &prefixes)?;
        let targets: Vec<usize> = grids
            .iter()
            .flat_map(|g| g.tokens.iter().copied())
            .collect();
        Ok(tape.cross_entropy(logits, &targets)?)
    }
}

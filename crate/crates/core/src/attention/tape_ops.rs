//! Fused, differentiable attention ops over stacked batches.
//!
//! Inputs are `R×(H·d)` with `R = B·T`: `B` sequences of `T` rows each laid
//! end to end, heads side by side in the columns. Every (sequence, head)
//! pair is processed independently.

use crate::numerics::kernels::{dot, softmax_in_place};
use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var};

use super::decay::scan;
use super::softmax::rope_in_place;

#[derive(Clone, Copy, Debug)]
struct Blocks {
    seqs: usize,
    seq_len: usize,
    heads: usize,
}

impl Blocks {
    fn new(
        rows: usize,
        seq_len: usize,
        heads: usize,
        op: &'static str,
    ) -> Result<Self, NumericsError> {
        if seq_len == 0 || heads == 0 || !rows.is_multiple_of(seq_len) {
            return Err(NumericsError::Usage(format!(
                "{op}: {rows} rows cannot be split into sequences of {seq_len} with {heads} heads"
            )));
        }
        Ok(Self {
            seqs: rows / seq_len,
            seq_len,
            heads,
        })
    }

    /// Copies the `(seq, head)` block of a `R×(H·width)` buffer.
    fn extract(&self, data: &[f64], width: usize, seq: usize, head: usize) -> Vec<f64> {
        let cols = width * self.heads;
        let mut out = Vec::with_capacity(self.seq_len * width);
        for t in 0..self.seq_len {
            let row = (seq * self.seq_len + t) * cols + head * width;
            out.extend_from_slice(&data[row..row + width]);
        }
        out
    }

    fn scatter(&self, dst: &mut [f64], src: &[f64], width: usize, seq: usize, head: usize) {
        let cols = width * self.heads;
        for t in 0..self.seq_len {
            let row = (seq * self.seq_len + t) * cols + head * width;
            dst[row..row + width].copy_from_slice(&src[t * width..(t + 1) * width]);
        }
    }
}

fn head_width(
    tape: &Tape,
    var: Var,
    heads: usize,
    op: &'static str,
) -> Result<(usize, usize), NumericsError> {
    let (rows, cols) = tape.value(var).dims2()?;
    if heads == 0 || cols % heads != 0 {
        return Err(NumericsError::Usage(format!(
            "{op}: {cols} columns not divisible by {heads} heads"
        )));
    }
    Ok((rows, cols / heads))
}

/// Multi-head decayed linear-attention scan,
/// `s_t = diag(decay_t) s_{t−1} + k_t v_tᵀ`, `o_t = s_tᵀ q_t`.
/// `decay = None` gives the undecayed recurrence.
pub fn decay_scan(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    decay: Option<Var>,
    heads: usize,
    seq_len: usize,
) -> Result<Var, NumericsError> {
    let (rows, dk) = head_width(tape, q, heads, "decay_scan")?;
    let (rows_v, dv) = head_width(tape, v, heads, "decay_scan")?;
    let same = |var: Var| tape.value(var).shape() == tape.value(q).shape();
    if rows_v != rows || !same(k) || decay.is_some_and(|d| !same(d)) {
        return Err(NumericsError::ShapeMismatch {
            op: "decay_scan",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        });
    }
    let blocks = Blocks::new(rows, seq_len, heads, "decay_scan")?;
    let mut out = vec![0.0; rows * heads * dv];
    let mut states = Vec::with_capacity(blocks.seqs * heads);
    for b in 0..blocks.seqs {
        for h in 0..heads {
            let qb = blocks.extract(tape.value(q).data(), dk, b, h);
            let kb = blocks.extract(tape.value(k).data(), dk, b, h);
            let vb = blocks.extract(tape.value(v).data(), dv, b, h);
            let ab = decay.map(|d| blocks.extract(tape.value(d).data(), dk, b, h));
            let mut st = vec![0.0; seq_len * dk * dv];
            let ob = scan(&qb, &kb, &vb, ab.as_deref(), seq_len, dk, dv, Some(&mut st));
            blocks.scatter(&mut out, &ob, dv, b, h);
            states.push(st);
        }
    }
    let out = Tensor::new(vec![rows, heads * dv], out)?;
    let mut inputs = vec![q, k, v];
    inputs.extend(decay);
    tape.custom(
        &inputs,
        out,
        Box::new(DecayScan {
            blocks,
            dk,
            dv,
            states,
        }),
    )
}

struct DecayScan {
    blocks: Blocks,
    dk: usize,
    dv: usize,
    /// State after every step, per (sequence, head).
    states: Vec<Vec<f64>>,
}

impl CustomOp for DecayScan {
    fn name(&self) -> &'static str {
        "decay_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let Blocks {
            seqs,
            seq_len,
            heads,
        } = self.blocks;
        let (dk, dv) = (self.dk, self.dv);
        let has_decay = inputs.len() == 4;
        let mut dq = vec![0.0; inputs[0].numel()];
        let mut dk_all = vec![0.0; inputs[1].numel()];
        let mut dv_all = vec![0.0; inputs[2].numel()];
        let mut da_all = if has_decay {
            vec![0.0; inputs[3].numel()]
        } else {
            Vec::new()
        };

        let mut g = vec![0.0; dk * dv];
        for b in 0..seqs {
            for h in 0..heads {
                let qb = self.blocks.extract(inputs[0].data(), dk, b, h);
                let kb = self.blocks.extract(inputs[1].data(), dk, b, h);
                let vb = self.blocks.extract(inputs[2].data(), dv, b, h);
                let ab = has_decay.then(|| self.blocks.extract(inputs[3].data(), dk, b, h));
                let gob = self.blocks.extract(grad_output, dv, b, h);
                let st = &self.states[b * heads + h];

                let mut dqb = vec![0.0; seq_len * dk];
                let mut dkb = vec![0.0; seq_len * dk];
                let mut dvb = vec![0.0; seq_len * dv];
                let mut dab = vec![0.0; seq_len * dk];
                g.fill(0.0);
                for t in (0..seq_len).rev() {
                    let qt = &qb[t * dk..(t + 1) * dk];
                    let kt = &kb[t * dk..(t + 1) * dk];
                    let vt = &vb[t * dv..(t + 1) * dv];
                    let got = &gob[t * dv..(t + 1) * dv];
                    let s_t = &st[t * dk * dv..(t + 1) * dk * dv];
                    for i in 0..dk {
                        let grow = &mut g[i * dv..(i + 1) * dv];
                        let qi = qt[i];
                        for (gg, go) in grow.iter_mut().zip(got) {
                            *gg += qi * go;
                        }
                        dqb[t * dk + i] = dot(&s_t[i * dv..(i + 1) * dv], got);
                        dkb[t * dk + i] = dot(grow, vt);
                        let ki = kt[i];
                        for (d, gg) in dvb[t * dv..(t + 1) * dv].iter_mut().zip(grow.iter()) {
                            *d += ki * gg;
                        }
                        if let Some(ab) = &ab {
                            if t > 0 {
                                let s_prev = &st
                                    [(t - 1) * dk * dv + i * dv..(t - 1) * dk * dv + (i + 1) * dv];
                                dab[t * dk + i] = dot(grow, s_prev);
                            }
                            let ai = ab[t * dk + i];
                            for gg in grow.iter_mut() {
                                *gg *= ai;
                            }
                        }
                    }
                }
                self.blocks.scatter(&mut dq, &dqb, dk, b, h);
                self.blocks.scatter(&mut dk_all, &dkb, dk, b, h);
                self.blocks.scatter(&mut dv_all, &dvb, dv, b, h);
                if has_decay {
                    self.blocks.scatter(&mut da_all, &dab, dk, b, h);
                }
            }
        }
        let mut out = vec![Some(dq), Some(dk_all), Some(dv_all)];
        if has_decay {
            out.push(Some(da_all));
        }
        out
    }
}

/// Multi-head causal `softmax(QKᵀ/√d)V`.
pub fn causal_softmax_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq_len: usize,
) -> Result<Var, NumericsError> {
    let (rows, dk) = head_width(tape, q, heads, "causal_softmax_attention")?;
    let (rows_v, dv) = head_width(tape, v, heads, "causal_softmax_attention")?;
    if rows_v != rows || tape.value(k).shape() != tape.value(q).shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "causal_softmax_attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    let blocks = Blocks::new(rows, seq_len, heads, "causal_softmax_attention")?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; rows * heads * dv];
    let mut probs = Vec::with_capacity(blocks.seqs * heads);
    for b in 0..blocks.seqs {
        for h in 0..heads {
            let qb = blocks.extract(tape.value(q).data(), dk, b, h);
            let kb = blocks.extract(tape.value(k).data(), dk, b, h);
            let vb = blocks.extract(tape.value(v).data(), dv, b, h);
            let mut p = vec![0.0; seq_len * seq_len];
            let mut ob = vec![0.0; seq_len * dv];
            for t in 0..seq_len {
                let row = &mut p[t * seq_len..(t + 1) * seq_len];
                for j in 0..=t {
                    row[j] = dot(&qb[t * dk..(t + 1) * dk], &kb[j * dk..(j + 1) * dk]) * scale;
                }
                softmax_in_place(row, t + 1);
                for j in 0..=t {
                    let w = row[j];
                    for (o, x) in ob[t * dv..(t + 1) * dv]
                        .iter_mut()
                        .zip(&vb[j * dv..(j + 1) * dv])
                    {
                        *o += w * x;
                    }
                }
            }
            blocks.scatter(&mut out, &ob, dv, b, h);
            probs.push(p);
        }
    }
    let out = Tensor::new(vec![rows, heads * dv], out)?;
    tape.custom(
        &[q, k, v],
        out,
        Box::new(CausalSoftmax {
            blocks,
            dk,
            dv,
            scale,
            probs,
        }),
    )
}

struct CausalSoftmax {
    blocks: Blocks,
    dk: usize,
    dv: usize,
    scale: f64,
    probs: Vec<Vec<f64>>,
}

impl CustomOp for CausalSoftmax {
    fn name(&self) -> &'static str {
        "causal_softmax_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let Blocks {
            seqs,
            seq_len: n,
            heads,
        } = self.blocks;
        let (dk, dv) = (self.dk, self.dv);
        let mut dq = vec![0.0; inputs[0].numel()];
        let mut dkk = vec![0.0; inputs[1].numel()];
        let mut dvv = vec![0.0; inputs[2].numel()];
        for b in 0..seqs {
            for h in 0..heads {
                let qb = self.blocks.extract(inputs[0].data(), dk, b, h);
                let kb = self.blocks.extract(inputs[1].data(), dk, b, h);
                let vb = self.blocks.extract(inputs[2].data(), dv, b, h);
                let gob = self.blocks.extract(grad_output, dv, b, h);
                let p = &self.probs[b * heads + h];
                let mut dqb = vec![0.0; n * dk];
                let mut dkb = vec![0.0; n * dk];
                let mut dvb = vec![0.0; n * dv];
                let mut dp = vec![0.0; n];
                for t in 0..n {
                    let go = &gob[t * dv..(t + 1) * dv];
                    for j in 0..=t {
                        dp[j] = dot(go, &vb[j * dv..(j + 1) * dv]);
                        let w = p[t * n + j];
                        for (d, g) in dvb[j * dv..(j + 1) * dv].iter_mut().zip(go) {
                            *d += w * g;
                        }
                    }
                    let s: f64 = (0..=t).map(|j| dp[j] * p[t * n + j]).sum();
                    for j in 0..=t {
                        let ds = p[t * n + j] * (dp[j] - s) * self.scale;
                        for i in 0..dk {
                            dqb[t * dk + i] += ds * kb[j * dk + i];
                            dkb[j * dk + i] += ds * qb[t * dk + i];
                        }
                    }
                }
                self.blocks.scatter(&mut dq, &dqb, dk, b, h);
                self.blocks.scatter(&mut dkk, &dkb, dk, b, h);
                self.blocks.scatter(&mut dvv, &dvb, dv, b, h);
            }
        }
        vec![Some(dq), Some(dkk), Some(dvv)]
    }
}

/// Rotary encoding of every head; row `r` sits at position `r mod seq_len`.
pub fn rope(tape: &mut Tape, x: Var, heads: usize, seq_len: usize) -> Result<Var, NumericsError> {
    let (rows, dh) = head_width(tape, x, heads, "rope")?;
    Blocks::new(rows, seq_len, heads, "rope")?;
    let cols = dh * heads;
    let mut out = tape.value(x).data().to_vec();
    for (r, row) in out.chunks_exact_mut(cols).enumerate() {
        rope_in_place(row, r % seq_len, dh, false);
    }
    let out = Tensor::new(vec![rows, cols], out)?;
    tape.custom(
        &[x],
        out,
        Box::new(Rope {
            seq_len,
            head_dim: dh,
        }),
    )
}

struct Rope {
    seq_len: usize,
    head_dim: usize,
}

impl CustomOp for Rope {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let cols = inputs[0].shape()[1];
        let mut g = grad_output.to_vec();
        for (r, row) in g.chunks_exact_mut(cols).enumerate() {
            rope_in_place(row, r % self.seq_len, self.head_dim, true);
        }
        vec![Some(g)]
    }
}

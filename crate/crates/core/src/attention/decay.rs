use crate::numerics::kernels::sigmoid;
use crate::numerics::{Tensor, DECAY_CEIL, DECAY_FLOOR};
use crate::spatial_decay::{apply_spatial, BoundaryMode};

use super::{AttentionError, AttentionInputs};

/// Largest sequence the materialized oracle will evaluate.
pub const ORACLE_MAX_LEN: usize = 256;

/// How the per-step decay `λ_t` is produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecayVariant {
    /// No decay: vanilla causal linear attention.
    None,
    /// Data-independent decay shared by every step and channel.
    Constant(f64),
    /// Decay gated from the input, independent key projection.
    DataDependent,
    /// Decay gated from the input, key tied to `1 − λ_t`.
    Hgrn2Shared,
    /// As `Hgrn2Shared`, with the decay forced to 1 at row ends.
    Lasad,
}

impl DecayVariant {
    pub fn validate(&self) -> Result<(), AttentionError> {
        match *self {
            DecayVariant::Constant(l) if !(l > 0.0 && l <= 1.0) => Err(AttentionError::Config(
                format!("constant decay must lie in (0, 1], got {l}"),
            )),
            _ => Ok(()),
        }
    }

    /// Whether the key is derived from the decay (`k_t = 1 − λ_t`).
    pub fn shares_key(&self) -> bool {
        matches!(self, DecayVariant::Hgrn2Shared | DecayVariant::Lasad)
    }

    pub fn is_gated(&self) -> bool {
        matches!(
            self,
            DecayVariant::DataDependent | DecayVariant::Hgrn2Shared | DecayVariant::Lasad
        )
    }
}

/// Sigmoid gate clamped to `[DECAY_FLOOR, DECAY_CEIL]`.
#[inline]
pub fn decay_gate(logit: f64) -> f64 {
    sigmoid(logit).clamp(DECAY_FLOOR, DECAY_CEIL)
}

/// Running `d_k×d_v` state of a decayed linear-attention scan.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub s: Tensor,
    /// Number of steps consumed so far; the next step is position `t + 1`.
    pub t: usize,
}

impl RecurrentState {
    pub fn new(dk: usize, dv: usize) -> Self {
        Self {
            s: Tensor::zeros(&[dk, dv]),
            t: 0,
        }
    }

    /// `s ← diag(decay) s + k vᵀ`, returns `o = sᵀ q`.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], decay: Option<&[f64]>) -> Vec<f64> {
        let dv = self.s.shape()[1];
        let mut out = vec![0.0; dv];
        state_step(self.s.data_mut(), dv, q, k, v, decay, &mut out);
        self.t += 1;
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.s.data().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[inline]
pub(crate) fn state_step(
    s: &mut [f64],
    dv: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    decay: Option<&[f64]>,
    out: &mut [f64],
) {
    for (i, row) in s.chunks_exact_mut(dv).enumerate() {
        if let Some(a) = decay {
            let ai = a[i];
            for x in row.iter_mut() {
                *x *= ai;
            }
        }
        let ki = k[i];
        for (x, vj) in row.iter_mut().zip(v) {
            *x += ki * vj;
        }
    }
    out.fill(0.0);
    for (row, qi) in s.chunks_exact(dv).zip(q) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += qi * x;
        }
    }
}

/// Sequential scan over raw row-major buffers. When `states` is given, the
/// state after every step is written to it (`n·dk·dv` values).
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    decay: Option<&[f64]>,
    n: usize,
    dk: usize,
    dv: usize,
    mut states: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut s = vec![0.0; dk * dv];
    let mut out = vec![0.0; n * dv];
    for t in 0..n {
        let a = decay.map(|a| &a[t * dk..(t + 1) * dk]);
        state_step(
            &mut s,
            dv,
            &q[t * dk..(t + 1) * dk],
            &k[t * dk..(t + 1) * dk],
            &v[t * dv..(t + 1) * dv],
            a,
            &mut out[t * dv..(t + 1) * dv],
        );
        if let Some(buf) = states.as_deref_mut() {
            buf[t * dk * dv..(t + 1) * dk * dv].copy_from_slice(&s);
        }
    }
    out
}

pub(crate) fn validate_decay(decay: &Tensor, n: usize, dk: usize) -> Result<(), AttentionError> {
    if decay.shape() != [n, dk] {
        return Err(AttentionError::Shape(format!(
            "decay {:?}, expected [{n}, {dk}]",
            decay.shape()
        )));
    }
    for (idx, &value) in decay.data().iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(AttentionError::DecayOutOfRange {
                position: idx / dk + 1,
                channel: idx % dk,
                value,
            });
        }
    }
    Ok(())
}

/// `s_t = diag(λ_t) s_{t−1} + k_t v_tᵀ`, `o_t = s_tᵀ q_t`.
pub fn decay_attention_recurrent(
    inputs: &AttentionInputs,
    decay: &Tensor,
) -> Result<Tensor, AttentionError> {
    let (n, dk, dv) = inputs.dims()?;
    validate_decay(decay, n, dk)?;
    let out = scan(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        Some(decay.data()),
        n,
        dk,
        dv,
        None,
    );
    Ok(Tensor::new(vec![n, dv], out)?)
}

fn one_minus(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|l| 1.0 - l).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Parameter-shared decay scan: the key is `1 − λ_t`.
pub fn hgrn2_recurrent(q: &Tensor, v: &Tensor, decay: &Tensor) -> Result<Tensor, AttentionError> {
    let inputs = AttentionInputs::new(q.clone(), one_minus(decay), v.clone())?;
    decay_attention_recurrent(&inputs, decay)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LasadOptions {
    pub width: usize,
    /// Position of row 0; 1 for a bare image sequence, 0 when row 0 is a
    /// conditioning prefix token.
    pub first_position: usize,
    pub mode: BoundaryMode,
}

impl LasadOptions {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            first_position: 1,
            mode: BoundaryMode::Retain,
        }
    }
}

fn lasad_parts(
    q: &Tensor,
    v: &Tensor,
    decay: &Tensor,
    opts: &LasadOptions,
) -> Result<(AttentionInputs, Tensor), AttentionError> {
    if opts.width == 0 {
        return Err(AttentionError::Config(
            "row width must be at least 1".into(),
        ));
    }
    let inputs = AttentionInputs::new(q.clone(), one_minus(decay), v.clone())?;
    let (n, dk, _) = inputs.dims()?;
    validate_decay(decay, n, dk)?;
    let spatial = apply_spatial(decay.data(), dk, opts.width, opts.first_position, opts.mode);
    Ok((inputs, Tensor::new(vec![n, dk], spatial)?))
}

/// Spatial-aware decay scan: `k_t = 1 − λ_t` from the raw gate, state decay
/// replaced by 1 wherever `t mod w == 0`.
pub fn lasad_recurrent(
    q: &Tensor,
    v: &Tensor,
    decay: &Tensor,
    width: usize,
) -> Result<Tensor, AttentionError> {
    lasad_recurrent_with(q, v, decay, &LasadOptions::new(width))
}

pub fn lasad_recurrent_with(
    q: &Tensor,
    v: &Tensor,
    decay: &Tensor,
    opts: &LasadOptions,
) -> Result<Tensor, AttentionError> {
    let (inputs, spatial) = lasad_parts(q, v, decay, opts)?;
    decay_attention_recurrent(&inputs, &spatial)
}

/// Chunkwise evaluation of the decayed scan.
///
/// Inside a chunk the pairwise decay between positions `j ≤ t` is
/// `exp(b_t − b_j)` with `b` the running sum of `log λ`; the state entering
/// the chunk is carried serially.
pub fn decay_chunked(
    inputs: &AttentionInputs,
    decay: &Tensor,
    chunk: usize,
) -> Result<Tensor, AttentionError> {
    if chunk == 0 {
        return Err(AttentionError::Config(
            "chunk size must be at least 1".into(),
        ));
    }
    let (n, dk, dv) = inputs.dims()?;
    validate_decay(decay, n, dk)?;
    let (q, k, v) = (inputs.q.data(), inputs.k.data(), inputs.v.data());
    let log_decay: Vec<f64> = decay.data().iter().map(|a| a.ln()).collect();

    let mut state = vec![0.0; dk * dv];
    let mut out = vec![0.0; n * dv];
    let mut cum = vec![0.0; chunk * dk];
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let len = end - start;
        for r in 0..len {
            for i in 0..dk {
                let prev = if r == 0 { 0.0 } else { cum[(r - 1) * dk + i] };
                cum[r * dk + i] = prev + log_decay[(start + r) * dk + i];
            }
        }
        for r in 0..len {
            let t = start + r;
            let qt = &q[t * dk..(t + 1) * dk];
            let bt = &cum[r * dk..(r + 1) * dk];
            let ot = &mut out[t * dv..(t + 1) * dv];
            for i in 0..dk {
                let c = qt[i] * bt[i].exp();
                for (o, s) in ot.iter_mut().zip(&state[i * dv..(i + 1) * dv]) {
                    *o += c * s;
                }
            }
            for rj in 0..=r {
                let j = start + rj;
                let kj = &k[j * dk..(j + 1) * dk];
                let bj = &cum[rj * dk..(rj + 1) * dk];
                let mut coef = 0.0;
                for i in 0..dk {
                    coef += qt[i] * kj[i] * (bt[i] - bj[i]).exp();
                }
                for (o, vv) in ot.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                    *o += coef * vv;
                }
            }
        }
        let blast = &cum[(len - 1) * dk..len * dk];
        for i in 0..dk {
            let carry = blast[i].exp();
            let row = &mut state[i * dv..(i + 1) * dv];
            for x in row.iter_mut() {
                *x *= carry;
            }
            for rj in 0..len {
                let j = start + rj;
                let w = k[j * dk + i] * (blast[i] - cum[rj * dk + i]).exp();
                for (x, vv) in row.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                    *x += w * vv;
                }
            }
        }
        start = end;
    }
    Ok(Tensor::new(vec![n, dv], out)?)
}

pub fn lasad_chunked(
    q: &Tensor,
    v: &Tensor,
    decay: &Tensor,
    width: usize,
    chunk: usize,
) -> Result<Tensor, AttentionError> {
    let (inputs, spatial) = lasad_parts(q, v, decay, &LasadOptions::new(width))?;
    decay_chunked(&inputs, &spatial, chunk)
}

/// Explicit `O(N²)` evaluation
/// `o_t = Σ_{j≤t} (q_t ⊙ a_{t,j})ᵀ (k_j v_jᵀ)` with
/// `a_{t,j} = Π_{i=j+1..t} λ_i` (elementwise) and `a_{t,t} = 1`.
pub fn materialized_decay_oracle(
    inputs: &AttentionInputs,
    decay: &Tensor,
) -> Result<Tensor, AttentionError> {
    let (n, dk, dv) = inputs.dims()?;
    if n > ORACLE_MAX_LEN {
        return Err(AttentionError::OracleTooLong {
            n,
            cap: ORACLE_MAX_LEN,
        });
    }
    if decay.shape() != [n, dk] {
        return Err(AttentionError::Shape(format!("decay {:?}", decay.shape())));
    }
    let (q, k, v, lam) = (
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        decay.data(),
    );
    let mut out = vec![0.0; n * dv];
    let mut a = vec![0.0; dk];
    for t in 0..n {
        a.fill(1.0);
        let ot = &mut out[t * dv..(t + 1) * dv];
        for j in (0..=t).rev() {
            let mut coef = 0.0;
            for i in 0..dk {
                coef += q[t * dk + i] * a[i] * k[j * dk + i];
            }
            for (o, vv) in ot.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += coef * vv;
            }
            for i in 0..dk {
                a[i] *= lam[j * dk + i];
            }
        }
    }
    Ok(Tensor::new(vec![n, dv], out)?)
}

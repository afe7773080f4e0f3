use crate::numerics::kernels::{self, elu_plus_one, Layout};
use crate::numerics::Tensor;

use super::decay::scan;
use super::{AttentionError, AttentionInputs};

/// Feature map `φ` applied to queries and keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMap {
    Identity,
    /// `elu(x) + 1`, strictly positive.
    #[default]
    EluPlusOne,
}

impl FeatureMap {
    fn apply(self, t: &Tensor) -> Tensor {
        match self {
            FeatureMap::Identity => t.clone(),
            FeatureMap::EluPlusOne => {
                let d = t.data().iter().map(|x| elu_plus_one(*x)).collect();
                Tensor::new(t.shape().to_vec(), d).expect("same shape")
            }
        }
    }
}

/// Output normalization for the parallel form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearNorm {
    /// Divide each row by `φ(q_t)·Σ_j φ(k_j)`.
    Delta,
    /// Row RMS normalization with unit gain.
    Rms { eps: f64 },
    /// Raw `φ(Q)[φ(K)ᵀV]`.
    None,
}

/// Kernelized linear attention in matrix form.
///
/// Non-causal: `φ(Q)[φ(K)ᵀV]`, computed right-to-left in `O(N)`.
/// Causal: `(φ(Q)φ(K)ᵀ ⊙ M)V` with the lower-triangular mask `M`, an
/// `O(N²)` route that shares no arithmetic with the recurrent scan. Delta
/// normalization is only offered non-causally.
pub fn linear_attention_parallel(
    inputs: &AttentionInputs,
    feature_map: FeatureMap,
    norm: LinearNorm,
    causal: bool,
) -> Result<Tensor, AttentionError> {
    let (n, dk, dv) = inputs.dims()?;
    let fq = feature_map.apply(&inputs.q);
    let fk = feature_map.apply(&inputs.k);
    let mut out = vec![0.0; n * dv];
    if causal {
        if norm == LinearNorm::Delta {
            return Err(AttentionError::Unsupported(
                "delta normalization is implemented for the non-causal form only".into(),
            ));
        }
        let mut scores = vec![0.0; n * n];
        kernels::gemm(
            n,
            dk,
            n,
            fq.data(),
            Layout::Normal,
            fk.data(),
            Layout::Transposed,
            &mut scores,
            false,
        );
        for (t, row) in scores.chunks_exact_mut(n).enumerate() {
            row[t + 1..].fill(0.0);
        }
        kernels::gemm(
            n,
            n,
            dv,
            &scores,
            Layout::Normal,
            inputs.v.data(),
            Layout::Normal,
            &mut out,
            false,
        );
    } else {
        let mut kv = vec![0.0; dk * dv];
        kernels::gemm(
            dk,
            n,
            dv,
            fk.data(),
            Layout::Transposed,
            inputs.v.data(),
            Layout::Normal,
            &mut kv,
            false,
        );
        kernels::gemm(
            n,
            dk,
            dv,
            fq.data(),
            Layout::Normal,
            &kv,
            Layout::Normal,
            &mut out,
            false,
        );
    }
    match norm {
        LinearNorm::None => {}
        LinearNorm::Rms { eps } => {
            out = kernels::rms_norm_rows(&out, &vec![1.0; dv], eps);
        }
        LinearNorm::Delta => {
            let mut ksum = vec![0.0; dk];
            for row in fk.data().chunks_exact(dk) {
                for (s, x) in ksum.iter_mut().zip(row) {
                    *s += x;
                }
            }
            for (t, row) in out.chunks_exact_mut(dv).enumerate() {
                let z = kernels::dot(fq.row(t), &ksum);
                if !(z > 0.0 && z.is_finite()) {
                    return Err(AttentionError::SingularNormalizer { row: t, value: z });
                }
                for x in row {
                    *x /= z;
                }
            }
        }
    }
    let out = Tensor::new(vec![n, dv], out)?;
    out.ensure_finite("linear_attention_parallel")?;
    Ok(out)
}

/// `s_t = s_{t−1} + k_t v_tᵀ`, `o_t = s_tᵀ q_t` (no feature map, no norm).
pub fn linear_attention_recurrent(inputs: &AttentionInputs) -> Result<Tensor, AttentionError> {
    let (n, dk, dv) = inputs.dims()?;
    let out = scan(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        None,
        n,
        dk,
        dv,
        None,
    );
    Ok(Tensor::new(vec![n, dv], out)?)
}

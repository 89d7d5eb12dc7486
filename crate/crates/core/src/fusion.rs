//! Group partitioning and the three fusion operators.
//!
//! Layers are split into contiguous groups of `T`. The encoder feeds the decoder
//! a layer-normalized average of the gated last layer of every group. Each
//! decoder group collapses its layers into one gated sum, is projected to a
//! vocabulary distribution, and the group distributions are mixed with
//! temperature-softmax weights.

use std::ops::Range;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LnParams, LN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Partition of `total` layers into groups of `size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupScheme {
    total: usize,
    size: usize,
    /// 1-based index of the last layer of each group: `min(i·T, L)`.
    boundaries: Vec<usize>,
}

pub fn group_boundaries(total: usize, size: usize) -> Result<GroupScheme> {
    if total == 0 || size == 0 {
        return Err(Error::Parameter(format!(
            "group partition needs L >= 1 and T >= 1, got L={total}, T={size}"
        )));
    }
    let groups = total.div_ceil(size);
    let boundaries = (1..=groups).map(|i| (i * size).min(total)).collect();
    Ok(GroupScheme {
        total,
        size,
        boundaries,
    })
}

impl GroupScheme {
    pub fn total_layers(&self) -> usize {
        self.total
    }

    pub fn group_size(&self) -> usize {
        self.size
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_groups(&self) -> usize {
        self.boundaries.len()
    }

    /// 0-based layer indices belonging to group `k` (0-based).
    pub fn group_layers(&self, k: usize) -> Range<usize> {
        k * self.size..self.boundaries[k]
    }

    /// Scheme over only the bottom `keep` layers. `keep` must end a group.
    pub fn truncate(&self, keep: usize) -> Result<GroupScheme> {
        if keep == self.total {
            return Ok(self.clone());
        }
        if keep == 0 || keep > self.total || keep % self.size != 0 {
            return Err(Error::Parameter(format!(
                "cannot keep {keep} of {} layers with group size {}: keep must be a multiple of the group size or all layers",
                self.total, self.size
            )));
        }
        group_boundaries(keep, self.size)
    }
}

/// Learned fusion scalars and the fusion layer norm.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// One per encoder group.
    pub enc_weights: ParamId,
    /// One per decoder layer.
    pub dec_rep_weights: ParamId,
    /// One per decoder group.
    pub dec_prob_weights: ParamId,
    pub ln: LnParams,
    pub tau: f64,
}

impl FusionParams {
    /// All weights start at zero: every gate is 0.5 and the group mixture uniform.
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        enc: &GroupScheme,
        dec: &GroupScheme,
        d_model: usize,
        tau: f64,
    ) -> Self {
        FusionParams {
            enc_weights: store.add("fusion.enc_weights", Tensor::zeros(vec![enc.num_groups()])),
            dec_rep_weights: store.add("fusion.dec_rep_weights", Tensor::zeros(vec![dec.total_layers()])),
            dec_prob_weights: store.add("fusion.dec_prob_weights", Tensor::zeros(vec![dec.num_groups()])),
            ln: LnParams::init(store, "fusion.enc_ln", d_model),
            tau,
        }
    }
}

/// `LN((1/M) Σ_i σ(w_i) · H[α_i])` over the groups of `scheme`.
///
/// Only the last layer of each group is read. `layers` holds one state per
/// layer of `scheme`; with a truncated scheme the average runs over the kept
/// groups and uses their own weights.
pub fn encoder_group_fuse<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    fp: &FusionParams,
    layers: &[Var],
    scheme: &GroupScheme,
) -> Result<Var> {
    if layers.len() != scheme.total_layers() {
        return Err(Error::Dimension(format!(
            "encoder fusion expects {} layer states, got {}",
            scheme.total_layers(),
            layers.len()
        )));
    }
    let w = tape.param(store, fp.enc_weights);
    if tape.value(w).len() < scheme.num_groups() {
        return Err(Error::Dimension(format!(
            "{} encoder fusion weights for {} groups",
            tape.value(w).len(),
            scheme.num_groups()
        )));
    }
    let gates = tape.sigmoid(w)?;
    let mut acc: Option<Var> = None;
    for (i, &alpha) in scheme.boundaries().iter().enumerate() {
        let g = tape.index(gates, i)?;
        let term = tape.scale_by(layers[alpha - 1], g)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let m = scheme.num_groups() as f64;
    let mean = tape.scale(acc.expect("at least one group"), F::from_f64_lossy(1.0 / m))?;
    fp.ln.forward(tape, store, mean, LN_EPS)
}

/// `h_k = Σ_{i ∈ group k} σ(w_i) · H[i]` for every group, with no averaging
/// and no normalization.
pub fn decoder_group_fuse<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    fp: &FusionParams,
    layers: &[Var],
    scheme: &GroupScheme,
) -> Result<Vec<Var>> {
    if layers.len() != scheme.total_layers() {
        return Err(Error::Dimension(format!(
            "decoder fusion expects {} layer states, got {}",
            scheme.total_layers(),
            layers.len()
        )));
    }
    let w = tape.param(store, fp.dec_rep_weights);
    let gates = tape.sigmoid(w)?;
    let mut fused = Vec::with_capacity(scheme.num_groups());
    for k in 0..scheme.num_groups() {
        let mut acc: Option<Var> = None;
        for i in scheme.group_layers(k) {
            let g = tape.index(gates, i)?;
            let term = tape.scale_by(layers[i], g)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        fused.push(acc.expect("groups are non-empty"));
    }
    Ok(fused)
}

/// `ψ = softmax(w / τ)` over the decoder groups in `groups` (0-based range).
pub fn fusion_prob_weights<F: Scalar>(tape: &mut Tape<F>, weights: Var, tau: f64, groups: Range<usize>) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::Parameter("empty decoder group range".into()));
    }
    let w = if groups.start == 0 && groups.end == tape.value(weights).len() {
        weights
    } else {
        tape.slice(weights, groups.start, groups.len())?
    };
    tape.softmax(w, tau)
}

/// `ψ = softmax(w / τ)` on plain values.
pub fn prob_weights<F: Scalar>(weights: &[F], tau: f64) -> Result<Vec<F>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    let mut out = weights.to_vec();
    crate::autograd::softmax_in_place(&mut out, F::from_f64_lossy(tau));
    Ok(out)
}

const NORM_TOL: f64 = 1e-5;

/// `P = Σ_i ψ_i · P_i`; each `P_i` is `[T × V]` with rows summing to one.
pub fn probability_fuse<F: Scalar>(group_probs: &[Tensor<F>], psi: &[F]) -> Result<Tensor<F>> {
    if group_probs.is_empty() || group_probs.len() != psi.len() {
        return Err(Error::Dimension(format!(
            "{} group distributions for {} mixture weights",
            group_probs.len(),
            psi.len()
        )));
    }
    let psi_sum: f64 = psi.iter().map(|p| p.as_f64()).sum();
    if (psi_sum - 1.0).abs() > NORM_TOL || psi.iter().any(|p| *p < F::zero()) {
        return Err(Error::Contract(format!("mixture weights sum to {psi_sum}, not 1")));
    }
    let shape = group_probs[0].shape().to_vec();
    let v = group_probs[0].last_dim();
    let mut out = vec![F::zero(); group_probs[0].len()];
    for (i, (p, &w)) in group_probs.iter().zip(psi).enumerate() {
        if p.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "group {i} distribution shape {:?} differs from {shape:?}",
                p.shape()
            )));
        }
        for (r, row) in p.data().chunks(v).enumerate() {
            let s: f64 = row.iter().map(|x| x.as_f64()).sum();
            if (s - 1.0).abs() > NORM_TOL {
                return Err(Error::Contract(format!("group {i} row {r} sums to {s}, not 1")));
            }
        }
        for (o, &x) in out.iter_mut().zip(p.data()) {
            *o += w * x;
        }
    }
    Tensor::new(shape, out)
}

/// `log Σ_i ψ_i · exp(logP_i)` row by row, computed stably in log space.
pub fn fused_log_probs<F: Scalar>(group_log_probs: &[&[F]], psi: &[F]) -> Vec<F> {
    let n = group_log_probs[0].len();
    let log_psi: Vec<F> = psi.iter().map(|p| p.ln()).collect();
    let mut out = vec![F::zero(); n];
    for (j, o) in out.iter_mut().enumerate() {
        let mut max = F::neg_infinity();
        for (lp, &lw) in group_log_probs.iter().zip(&log_psi) {
            max = max.max(lp[j] + lw);
        }
        let s: F = group_log_probs
            .iter()
            .zip(&log_psi)
            .map(|(lp, &lw)| (lp[j] + lw - max).exp())
            .sum();
        *o = max + s.ln();
    }
    out
}

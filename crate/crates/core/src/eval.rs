//! Corpus BLEU, token accuracy, per-layer gradient norms, fusion-weight traces.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{batch_loss, Model};
use crate::scalar::Scalar;
use crate::tensor::ParamId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0–100.
    pub score: f64,
    /// Modified n-gram precisions for n = 1..4 (after smoothing).
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with one reference per hypothesis.
///
/// Precisions are clipped against the reference counts. For n >= 2 a
/// precision with zero corpus-level matches is smoothed to `1 / (total + 1)`.
pub fn bleu4<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::Data("BLEU needs at least one sentence".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        c += hyp.len();
        r += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let rc = ngram_counts(reference, n);
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
            matches[n - 1] += h
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions[0] == 0.0 || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        (100.0 * brevity_penalty * log_mean.exp()).min(100.0)
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

/// Position-wise accuracy of decoded sequences against references; length
/// mismatches count as errors.
pub fn token_accuracy<H: AsRef<[u32]>, R: AsRef<[u32]>>(hyps: &[H], refs: &[R]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        total += h.len().max(r.len());
        correct += h.iter().zip(r).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    }
}

/// L2 gradient norms by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub step: u64,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    /// Embeddings, output projection and fusion parameters.
    pub other: f64,
}

impl GradientReport {
    pub fn global(&self) -> f64 {
        let sq = self.encoder.iter().chain(&self.decoder).map(|n| n * n).sum::<f64>() + self.other * self.other;
        sq.sqrt()
    }
}

/// Parameter ids bucketed by layer, computed once per model.
#[derive(Clone, Debug)]
pub struct LayerGroups {
    pub encoder: Vec<Vec<ParamId>>,
    pub decoder: Vec<Vec<ParamId>>,
    pub other: Vec<ParamId>,
}

impl LayerGroups {
    pub fn of<F: Scalar>(model: &Model<F>) -> Self {
        let cfg = model.config();
        let encoder: Vec<Vec<ParamId>> = (0..cfg.enc_layers)
            .map(|i| model.params_with_prefix(&format!("encoder.{i}")))
            .collect();
        let decoder: Vec<Vec<ParamId>> = (0..cfg.dec_layers)
            .map(|i| model.params_with_prefix(&format!("decoder.{i}")))
            .collect();
        let mut in_layer = vec![false; model.store().len()];
        for id in encoder.iter().chain(&decoder).flatten() {
            in_layer[id.0] = true;
        }
        let other = model
            .store()
            .iter()
            .map(|(id, _)| id)
            .filter(|id| !in_layer[id.0])
            .collect();
        LayerGroups { encoder, decoder, other }
    }

    /// Norms of the gradients currently held in the model's store.
    pub fn report<F: Scalar>(&self, model: &Model<F>, step: u64) -> GradientReport {
        let norm = |ids: &[ParamId]| {
            ids.iter()
                .map(|&id| model.store().get(id).grad_norm_sq())
                .sum::<f64>()
                .sqrt()
        };
        GradientReport {
            step,
            encoder: self.encoder.iter().map(|ids| norm(ids)).collect(),
            decoder: self.decoder.iter().map(|ids| norm(ids)).collect(),
            other: norm(&self.other),
        }
    }
}

/// One eval-mode forward/backward of the multi-level loss on `batch`, reporting
/// per-layer gradient norms. Encoder layers listed in `frozen_encoder` are
/// treated as constants. Gradients are zeroed before and after.
pub fn gradient_norm_report<F: Scalar>(
    model: &mut Model<F>,
    batch: &Batch,
    frozen_encoder: &[usize],
    step: u64,
) -> Result<GradientReport> {
    let groups = LayerGroups::of(model);
    model.store_mut().zero_grad();
    let mut tape = Tape::eval();
    for &l in frozen_encoder {
        for &id in groups.encoder.get(l).ok_or_else(|| {
            Error::Parameter(format!("encoder layer {l} does not exist"))
        })? {
            tape.freeze(id);
        }
    }
    let (loss, _) = batch_loss(model, &mut tape, batch, 0.0)?;
    tape.backward_into(loss, model.store_mut())?;
    let report = groups.report(model, step);
    model.store_mut().zero_grad();
    Ok(report)
}

pub fn write_gradient_csv<W: Write>(out: W, reports: &[GradientReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = reports.first() {
        let mut header = vec!["step".to_string()];
        header.extend((1..=first.encoder.len()).map(|i| format!("enc_{i}")));
        header.extend((1..=first.decoder.len()).map(|i| format!("dec_{i}")));
        header.push("other".into());
        header.push("global".into());
        w.write_record(&header)?;
    }
    for r in reports {
        let mut row = vec![r.step.to_string()];
        row.extend(r.encoder.iter().chain(&r.decoder).map(|v| v.to_string()));
        row.push(r.other.to_string());
        row.push(r.global().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Snapshot of the learned fusion weights after their squashing functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub step: u64,
    /// σ(w^e), one per encoder group.
    pub enc: Vec<f64>,
    /// σ(w^{d_r}), one per decoder layer.
    pub dec_rep: Vec<f64>,
    /// ψ(W^{d_p}), one per decoder group.
    pub psi: Vec<f64>,
}

impl WeightTrace {
    pub fn capture<F: Scalar>(model: &Model<F>, step: u64) -> Option<Self> {
        let w = model.fusion_weights()?;
        Some(WeightTrace {
            step,
            enc: w.enc,
            dec_rep: w.dec_rep,
            psi: w.psi,
        })
    }
}

/// CSV with a `step` column then one column per weight. Values are written
/// in shortest round-trip form.
pub fn export_weight_trace<W: Write>(out: W, history: &[WeightTrace]) -> Result<()> {
    let Some(first) = history.first() else {
        return Err(Error::Data("weight trace is empty".into()));
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend((1..=first.enc.len()).map(|i| format!("enc_sigma_{i}")));
    header.extend((1..=first.dec_rep.len()).map(|i| format!("dec_rep_sigma_{i}")));
    header.extend((1..=first.psi.len()).map(|i| format!("psi_{i}")));
    w.write_record(&header)?;
    for t in history {
        let mut row = vec![t.step.to_string()];
        row.extend(t.enc.iter().chain(&t.dec_rep).chain(&t.psi).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

//! The full encoder/decoder with group fusion.

use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{PaddedSeqs, PAD};
use crate::error::{Error, Result};
use crate::fusion::{
    decoder_group_fuse, encoder_group_fuse, fused_log_probs, fusion_prob_weights, group_boundaries,
    probability_fuse, FusionParams, GroupScheme,
};
use crate::nn::{
    decoder_layer_forward, encoder_layer_forward, sinusoidal_positions, AttentionMask, DecoderLayerParams,
    EncoderLayerParams, LayerSettings, NormStyle, LN_EPS,
};
use crate::rng::{derive, Stream};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Encoder layers per group.
    pub enc_group_size: usize,
    /// Decoder layers per group.
    pub dec_group_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub norm_style: NormStyle,
    /// 0 means "take it from the data".
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Output projection is the transposed target embedding.
    pub tie_embeddings: bool,
    /// Source and target share one embedding table (needs equal vocab sizes).
    pub share_embeddings: bool,
    /// Probability-fusion temperature; `sqrt(d_model)` when unset.
    pub tau_override: Option<f64>,
    pub max_len: usize,
    /// `false` gives a plain Transformer: last encoder layer feeds
    /// cross-attention and only the last decoder layer predicts.
    pub fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            enc_group_size: 3,
            dec_group_size: 2,
            d_model: 512,
            ffn_dim: 1024,
            heads: 8,
            dropout: 0.3,
            norm_style: NormStyle::Post,
            src_vocab: 0,
            tgt_vocab: 0,
            tie_embeddings: true,
            share_embeddings: true,
            tau_override: None,
            max_len: crate::data::DEFAULT_MAX_LEN,
            fusion: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("enc_group_size", self.enc_group_size),
            ("dec_group_size", self.dec_group_size),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            errs.push(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        for (name, v) in [("src_vocab", self.src_vocab), ("tgt_vocab", self.tgt_vocab)] {
            if v < 5 {
                errs.push(format!("{name} must be >= 5, got {v}"));
            }
        }
        if self.share_embeddings && self.src_vocab != self.tgt_vocab {
            errs.push(format!(
                "share_embeddings needs src_vocab == tgt_vocab ({} vs {})",
                self.src_vocab, self.tgt_vocab
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if let Some(t) = self.tau_override {
            if !(t > 0.0) {
                errs.push(format!("tau_override must be > 0, got {t}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau_override.unwrap_or((self.d_model as f64).sqrt())
    }

    pub fn enc_scheme(&self) -> Result<GroupScheme> {
        group_boundaries(self.enc_layers, self.enc_group_size)
    }

    pub fn dec_scheme(&self) -> Result<GroupScheme> {
        group_boundaries(self.dec_layers, self.dec_group_size)
    }

    /// Number of decoder groups that produce a distribution.
    pub fn prediction_groups(&self) -> usize {
        if self.fusion {
            self.dec_layers.div_ceil(self.dec_group_size)
        } else {
            1
        }
    }

    fn settings(&self) -> LayerSettings {
        LayerSettings {
            heads: self.heads,
            dropout: self.dropout,
            style: self.norm_style,
            eps: LN_EPS,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    out_proj: Option<ParamId>,
    encoder: Vec<EncoderLayerParams>,
    decoder: Vec<DecoderLayerParams>,
    fusion: Option<FusionParams>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    store: ParamStore<F>,
    layout: Layout,
    enc_scheme: GroupScheme,
    dec_scheme: GroupScheme,
    positions: Vec<f64>,
}

/// Every encoder layer's output plus the fused representation the decoder reads.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub layers: Vec<Var>,
    pub fused: Var,
    pub batch: usize,
    pub len: usize,
    pub key_pad: Vec<bool>,
}

/// Per-group fused states and distributions, and their mixture weights.
#[derive(Clone, Debug)]
pub struct GroupPrediction {
    pub fused_states: Vec<Var>,
    /// `log P_i` per group, each `[rows × V]`.
    pub group_log_probs: Vec<Var>,
    /// Mixture weights over the groups, `[N]`.
    pub psi: Var,
    pub rows: usize,
    pub vocab: usize,
}

impl<F: Scalar> Model<F> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
        let embed = |store: &mut ParamStore<F>, name: &str, v: usize, rng: &mut crate::rng::Rng| {
            let data = (0..v * d).map(|_| F::from_f64_lossy(normal.sample(rng))).collect();
            store.add(name, Tensor::new(vec![v, d], data).expect("embed shape"))
        };
        let (src_embed, tgt_embed) = if config.share_embeddings {
            let e = embed(&mut store, "embed.shared", config.tgt_vocab, &mut rng);
            (e, e)
        } else {
            let s = embed(&mut store, "embed.src", config.src_vocab, &mut rng);
            let t = embed(&mut store, "embed.tgt", config.tgt_vocab, &mut rng);
            (s, t)
        };
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayerParams::init(&mut store, &format!("encoder.{i}"), d, config.ffn_dim, &mut rng))
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayerParams::init(&mut store, &format!("decoder.{i}"), d, config.ffn_dim, &mut rng))
            .collect();
        let out_proj = (!config.tie_embeddings).then(|| {
            store.add("output.weight", crate::nn::xavier_uniform(d, config.tgt_vocab, &mut rng))
        });
        let enc_scheme = config.enc_scheme()?;
        let dec_scheme = config.dec_scheme()?;
        let fusion = config
            .fusion
            .then(|| FusionParams::init(&mut store, &enc_scheme, &dec_scheme, d, config.tau()));
        let positions = sinusoidal_positions(config.max_len + 1, d);
        Ok(Model {
            config,
            store,
            layout: Layout {
                src_embed,
                tgt_embed,
                out_proj,
                encoder,
                decoder,
                fusion,
            },
            enc_scheme,
            dec_scheme,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn enc_scheme(&self) -> &GroupScheme {
        &self.enc_scheme
    }

    pub fn dec_scheme(&self) -> &GroupScheme {
        &self.dec_scheme
    }

    pub fn fusion_params(&self) -> Option<&FusionParams> {
        self.layout.fusion.as_ref()
    }

    pub fn encoder_layer(&self, i: usize) -> &EncoderLayerParams {
        &self.layout.encoder[i]
    }

    /// Parameters whose names start with `prefix.` (e.g. `encoder.3`).
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        let dotted = format!("{prefix}.");
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(&dotted))
            .map(|(id, _)| id)
            .collect()
    }

    /// Same parameters in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            enc_scheme: self.enc_scheme.clone(),
            dec_scheme: self.dec_scheme.clone(),
            positions: self.positions.clone(),
        }
    }

    fn embed(&self, tape: &mut Tape<F>, table: ParamId, seqs: &PaddedSeqs, vocab: usize) -> Result<Var> {
        if let Some(&id) = seqs.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Vocab { id, size: vocab });
        }
        let d = self.config.d_model;
        let t = tape.param(&self.store, table);
        let x = tape.gather(t, &seqs.ids)?;
        let x = tape.scale(x, F::from_f64_lossy((d as f64).sqrt()))?;
        let pe = if seqs.len <= self.config.max_len + 1 {
            self.positions[..seqs.len * d].to_vec()
        } else {
            sinusoidal_positions(seqs.len, d)
        };
        let mut tiled = Vec::with_capacity(seqs.batch * seqs.len * d);
        for _ in 0..seqs.batch {
            tiled.extend(pe.iter().map(|&v| F::from_f64_lossy(v)));
        }
        let pe = tape.constant(Tensor::new(vec![seqs.batch * seqs.len, d], tiled)?)?;
        let x = tape.add(x, pe)?;
        tape.dropout(x, self.config.dropout)
    }

    /// Runs the encoder and fuses its group outputs. With `keep = Some(k)`
    /// only the bottom `k` layers run and fusion covers the groups they complete.
    pub fn encode(&self, tape: &mut Tape<F>, src: &PaddedSeqs, keep: Option<usize>) -> Result<EncoderOutput> {
        let keep = keep.unwrap_or(self.config.enc_layers);
        let scheme = self.enc_scheme.truncate(keep)?;
        let key_pad = src.pad_mask();
        let mask = Arc::new(AttentionMask::padding(src.batch, src.len, &key_pad));
        let settings = self.config.settings();
        let mut x = self.embed(tape, self.layout.src_embed, src, self.config.src_vocab)?;
        let mut layers = Vec::with_capacity(keep);
        for p in &self.layout.encoder[..keep] {
            x = encoder_layer_forward(tape, &self.store, p, x, &mask, &settings)?;
            layers.push(x);
        }
        let fused = match &self.layout.fusion {
            Some(fp) => encoder_group_fuse(tape, &self.store, fp, &layers, &scheme)?,
            None => *layers.last().expect("at least one encoder layer"),
        };
        Ok(EncoderOutput {
            layers,
            fused,
            batch: src.batch,
            len: src.len,
            key_pad,
        })
    }

    /// Runs the decoder on `tgt_in` and produces one distribution per decoder
    /// group in `groups` (0-based; all groups when `None`).
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        tgt_in: &PaddedSeqs,
        enc: &EncoderOutput,
        groups: Option<Range<usize>>,
    ) -> Result<GroupPrediction> {
        if tgt_in.batch != enc.batch {
            return Err(Error::Dimension(format!(
                "target batch {} does not match encoder batch {}",
                tgt_in.batch, enc.batch
            )));
        }
        let n_groups = self.config.prediction_groups();
        let groups = groups.unwrap_or(0..n_groups);
        if groups.is_empty() || groups.end > n_groups {
            return Err(Error::Parameter(format!(
                "decoder group range {}..{} invalid for {n_groups} groups",
                groups.start + 1,
                groups.end
            )));
        }
        let settings = self.config.settings();
        let tgt_pad = tgt_in.pad_mask();
        let self_mask = Arc::new(AttentionMask::causal_with_padding(tgt_in.batch, tgt_in.len, &tgt_pad));
        let cross_mask = Arc::new(AttentionMask::padding(tgt_in.batch, tgt_in.len, &enc.key_pad));
        let run_layers = match self.layout.fusion {
            Some(_) => self.dec_scheme.group_layers(groups.end - 1).end,
            None => self.config.dec_layers,
        };
        let mut y = self.embed(tape, self.layout.tgt_embed, tgt_in, self.config.tgt_vocab)?;
        let mut layers = Vec::with_capacity(run_layers);
        for p in &self.layout.decoder[..run_layers] {
            y = decoder_layer_forward(tape, &self.store, p, y, enc.fused, &self_mask, &cross_mask, &settings)?;
            layers.push(y);
        }
        let (states, psi) = match &self.layout.fusion {
            Some(fp) => {
                let scheme = self.dec_scheme.truncate(run_layers)?;
                let all = decoder_group_fuse(tape, &self.store, fp, &layers, &scheme)?;
                let w = tape.param(&self.store, fp.dec_prob_weights);
                let psi = fusion_prob_weights(tape, w, fp.tau, groups.clone())?;
                (all[groups].to_vec(), psi)
            }
            None => {
                let one = tape.constant(Tensor::scalar(F::one()))?;
                (vec![*layers.last().expect("at least one decoder layer")], one)
            }
        };
        let mut group_log_probs = Vec::with_capacity(states.len());
        for &h in &states {
            let logits = self.project(tape, h)?;
            group_log_probs.push(tape.log_softmax(logits)?);
        }
        Ok(GroupPrediction {
            fused_states: states,
            group_log_probs,
            psi,
            rows: tgt_in.batch * tgt_in.len,
            vocab: self.config.tgt_vocab,
        })
    }

    /// Shared output matrix applied to one fused state.
    fn project(&self, tape: &mut Tape<F>, h: Var) -> Result<Var> {
        match self.layout.out_proj {
            Some(w) => {
                let w = tape.param(&self.store, w);
                tape.matmul(h, w)
            }
            None => {
                let e = tape.param(&self.store, self.layout.tgt_embed);
                tape.matmul_nt(h, e)
            }
        }
    }

    /// Plain-value fusion weights: σ(w^e), σ(w^{d_r}), ψ(W^{d_p}).
    pub fn fusion_weights(&self) -> Option<FusionWeights> {
        let fp = self.layout.fusion.as_ref()?;
        let sig = |id: ParamId| -> Vec<f64> {
            self.store
                .get(id)
                .value
                .data()
                .iter()
                .map(|&w| crate::autograd::sigmoid(w).as_f64())
                .collect()
        };
        let w: Vec<f64> = self.store.get(fp.dec_prob_weights).value.to_f64_vec();
        Some(FusionWeights {
            enc: sig(fp.enc_weights),
            dec_rep: sig(fp.dec_rep_weights),
            psi: crate::fusion::prob_weights(&w, fp.tau).expect("tau validated"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub enc: Vec<f64>,
    pub dec_rep: Vec<f64>,
    pub psi: Vec<f64>,
}

impl GroupPrediction {
    pub fn num_groups(&self) -> usize {
        self.group_log_probs.len()
    }

    pub fn psi<F: Scalar>(&self, tape: &Tape<F>) -> Vec<F> {
        tape.value(self.psi).data().to_vec()
    }

    /// Per-group probabilities `P_i`.
    pub fn group_probs<F: Scalar>(&self, tape: &Tape<F>) -> Vec<Tensor<F>> {
        self.group_log_probs
            .iter()
            .map(|&lp| {
                let t = tape.value(lp);
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect()).expect("same shape")
            })
            .collect()
    }

    /// Mixture distribution `Σ ψ_i P_i`, `[rows × V]`.
    pub fn fused_probs<F: Scalar>(&self, tape: &Tape<F>) -> Result<Tensor<F>> {
        probability_fuse(&self.group_probs(tape), &self.psi(tape))
    }

    /// `log Σ ψ_i P_i`, `[rows × V]` flattened.
    pub fn fused_log_probs<F: Scalar>(&self, tape: &Tape<F>) -> Vec<F> {
        let lps: Vec<&[F]> = self.group_log_probs.iter().map(|&v| tape.value(v).data()).collect();
        fused_log_probs(&lps, &self.psi(tape))
    }
}

/// `Σ_i ψ_i · NLL_i`: the ψ-weighted sum of each group's mean negative
/// log-likelihood (not the log of the mixture).
pub fn multi_level_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: &GroupPrediction,
    targets: &[u32],
    pad: u32,
    smoothing: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &lp) in pred.group_log_probs.iter().enumerate() {
        let nll = tape.nll_loss(lp, targets, pad, smoothing)?;
        let w = tape.index(pred.psi, i)?;
        let term = tape.mul(w, nll)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or(Error::EmptyBatch)
}

/// Teacher-forced forward pass and loss on one batch.
pub fn batch_loss<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    batch: &crate::data::Batch,
    smoothing: f64,
) -> Result<(Var, GroupPrediction)> {
    let enc = model.encode(tape, &batch.src, None)?;
    let pred = model.decode(tape, &batch.tgt_in, &enc, None)?;
    let loss = multi_level_loss(tape, &pred, &batch.tgt_out.ids, PAD, smoothing)?;
    Ok((loss, pred))
}

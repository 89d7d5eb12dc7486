//! Run configuration files and the end-to-end training driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{encode_pairs, make_batches, read_tsv_lines, SentencePair, Vocabulary, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::{export_weight_trace, write_gradient_csv, GradientReport, WeightTrace};
use crate::model::{Model, ModelConfig};
use crate::training::{check_runaway, evaluate, train_epoch, DivergenceReport, TrainConfig, TrainState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training TSV (`source<TAB>target`).
    pub train: Option<PathBuf>,
    /// Validation TSV; when absent the tail `valid_fraction` of `train` is held out.
    pub valid: Option<PathBuf>,
    pub valid_fraction: f64,
    /// Longest sequence kept, markers included.
    pub max_len: usize,
    /// Content tokens kept in the joint vocabulary.
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            valid_fraction: 0.1,
            max_len: DEFAULT_MAX_LEN,
            max_vocab: 32_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(vec![format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )]));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Training and validation pairs with their shared vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub vocab: Vocabulary,
}

/// Reads the TSV files named in `data`. The vocabulary is built from the
/// training side only; validation tokens outside it map to `<unk>`.
pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    let train_path = data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["data.train is not set".into()]))?;
    let mut train_lines = read_tsv_lines(train_path)?;
    let valid_lines = match &data.valid {
        Some(p) => read_tsv_lines(p)?,
        None => {
            if !(data.valid_fraction > 0.0 && data.valid_fraction < 1.0) {
                return Err(Error::Config(vec!["data.valid_fraction must be in (0, 1)".into()]));
            }
            let n = ((train_lines.len() as f64 * data.valid_fraction).round() as usize).max(1);
            if n >= train_lines.len() {
                return Err(Error::Data("too few lines to hold out a validation set".into()));
            }
            train_lines.split_off(train_lines.len() - n)
        }
    };
    let vocab = Vocabulary::build(train_lines.iter().flat_map(|(s, t)| [s, t]), data.max_vocab)?;
    let (train, _) = encode_pairs(&train_lines, &vocab, data.max_len);
    let (valid, _) = encode_pairs(&valid_lines, &vocab, data.max_len);
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data(format!("no pairs within max_len {}", data.max_len)));
    }
    Ok(Dataset { train, valid, vocab })
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_token_acc: f64,
    pub lr: f64,
    pub psi: Vec<f64>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model<f32>,
    pub state: TrainState<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub gradients: Vec<GradientReport>,
    pub weights: Vec<WeightTrace>,
    pub diverged: Option<DivergenceReport>,
    /// Per-step logging of the first few steps of training (loss before any update).
    pub initial_valid_loss: f64,
}

impl RunOutcome {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

/// Files written by [`run_training`] inside its output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const GRADIENTS_FILE: &str = "gradients.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains from scratch. Vocabulary sizes of 0 in `model_cfg` are filled from
/// `vocab`. With `out_dir`, writes metrics, traces and checkpoints as it goes.
/// Divergence ends the run early and is reported in the outcome, not as an error.
pub fn run_training(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let mut cfg = model_cfg.clone();
    if cfg.src_vocab == 0 {
        cfg.src_vocab = data.vocab.len();
    }
    if cfg.tgt_vocab == 0 {
        cfg.tgt_vocab = data.vocab.len();
    }
    let mut errs = Vec::new();
    for r in [cfg.validate(), train_cfg.validate()] {
        if let Err(Error::Config(e)) = r {
            errs.extend(e);
        }
    }
    if cfg.src_vocab < data.vocab.len() || cfg.tgt_vocab < data.vocab.len() {
        errs.push(format!("vocabulary has {} entries, more than the model's", data.vocab.len()));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut metrics_out = match out_dir {
        Some(dir) => Some(std::io::BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?)),
        None => None,
    };

    let mut model = Model::<f32>::build(cfg, train_cfg.seed)?;
    let mut state = TrainState::new(model.store(), train_cfg.seed);
    let valid_batches = make_batches(&data.valid, train_cfg.batch_tokens, train_cfg.seed)?;
    let initial_valid_loss = evaluate(&model, &valid_batches)?.loss;
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut gradients = Vec::new();
    let mut weights: Vec<WeightTrace> = WeightTrace::capture(&model, 0).into_iter().collect();
    let mut train_losses = Vec::new();
    let mut diverged = None;

    for epoch in 1..=train_cfg.epochs {
        let batches = make_batches(&data.train, train_cfg.batch_tokens, epoch_seed(train_cfg.seed, epoch))?;
        let report = match train_epoch(&mut model, &batches, &mut state, train_cfg) {
            Ok(r) => r,
            Err(Error::Diverged(d)) => {
                diverged = Some(*d);
                break;
            }
            Err(e) => return Err(e),
        };
        gradients.extend(report.gradients.iter().cloned());
        weights.extend(report.weights.iter().cloned());
        train_losses.push(report.mean_loss);
        let eval = match evaluate(&model, &valid_batches) {
            Ok(e) => e,
            Err(Error::NonFinite { op }) => {
                diverged = Some(DivergenceReport {
                    step: state.step,
                    epoch,
                    loss: f64::NAN,
                    reason: format!("non-finite value during validation ({op})"),
                    last_gradients: gradients.last().cloned(),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let m = EpochMetrics {
            epoch,
            train_loss: report.mean_loss,
            valid_loss: eval.loss,
            valid_token_acc: eval.token_acc,
            lr: report.lr,
            psi: report.psi.clone(),
        };
        if let Some(out) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *out, &m)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        metrics.push(m);
        let improved = state.best_valid.map_or(true, |b| eval.loss < b);
        if improved {
            state.best_valid = Some(eval.loss);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(LAST_CHECKPOINT), &model, &state, Some(&data.vocab))?;
            if improved {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), &model, &state, Some(&data.vocab))?;
            }
        }
        if let Some(reason) = check_runaway(&train_losses, train_cfg.divergence_factor, 5) {
            diverged = Some(DivergenceReport {
                step: state.step,
                epoch,
                loss: report.mean_loss,
                reason,
                last_gradients: gradients.last().cloned(),
            });
            break;
        }
        if train_cfg.target_valid_acc.is_some_and(|t| eval.token_acc >= t) {
            break;
        }
    }

    if let Some(dir) = out_dir {
        if !weights.is_empty() {
            export_weight_trace(fs::File::create(dir.join(WEIGHTS_FILE))?, &weights)?;
        }
        write_gradient_csv(fs::File::create(dir.join(GRADIENTS_FILE))?, &gradients)?;
        if let Some(d) = &diverged {
            fs::write(dir.join("divergence.json"), serde_json::to_vec_pretty(d)?)?;
        }
    }
    Ok(RunOutcome {
        model,
        state,
        metrics,
        gradients,
        weights,
        diverged,
        initial_valid_loss,
    })
}

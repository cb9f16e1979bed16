//! Training: cross-entropy and the pessimistic DRO objective for credal
//! models, the full-batch training loop with early stopping, and checkpoint
//! serialization.
//!
//! The DRO loss is an optimistic mean cross-entropy on the upper
//! probability bounds over all training nodes, plus a pessimistic term on
//! the lower bounds restricted to the hardest ceil(delta * N) nodes. The
//! hard set is recomputed every forward pass but held constant in the
//! backward pass: the top-k selection is not differentiable, so gradients
//! flow only through the selected cross-entropy terms.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::credal::{interval_uncertainty_rows, point_prediction, Bound, CredalPrediction};
use crate::error::{Error, Result};
use crate::eval::{auroc, macro_f1};
use crate::graph::{remap_id_labels, ClassPartition, GraphDataset, SplitMasks};
use crate::model::{dropout_masks, BackboneConfig, Model, ModelKind, ModelOutput, TapeOutput};
use crate::tape::{AdamConfig, AdamState, ParamSet, Tape, Tensor, VarId};

/// Per-node cross-entropy -ln q[row, label] in nats, with q clamped to
/// [1e-12, 1], over the given rows in order.
pub fn cross_entropy_rows(q: &Tensor, labels: &[i64], rows: &[usize]) -> Result<Vec<f64>> {
    let (n, c) = q.shape();
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        if r >= n {
            return Err(Error::shape("cross_entropy_rows", format!("row {r} out of {n}")));
        }
        let y = labels[r];
        if y < 0 || y as usize >= c {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("label {y} at row {r} out of range for {c} classes"),
            ));
        }
        out.push(-q.get(r, y as usize).clamp(1e-12, 1.0).ln());
    }
    Ok(out)
}

/// Indices of the ceil(delta * N) largest entries, ties broken towards the
/// smaller index; returned ascending.
pub fn select_hard_set(lower_ce: &[f64], delta: f64) -> Result<Vec<usize>> {
    if lower_ce.is_empty() {
        return Err(Error::InvalidConfig("select_hard_set needs at least one node".into()));
    }
    if !(0.0 < delta && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0, 1], got {delta}")));
    }
    let k = (delta * lower_ce.len() as f64).ceil() as usize;
    let k = k.clamp(1, lower_ce.len());
    let mut order: Vec<usize> = (0..lower_ce.len()).collect();
    order.sort_by(|&a, &b| {
        lower_ce[b].partial_cmp(&lower_ce[a]).expect("finite losses").then(a.cmp(&b))
    });
    let mut hard = order[..k].to_vec();
    hard.sort_unstable();
    Ok(hard)
}

/// DRO objective value on a finished prediction:
/// mean_n CE(q_upper) + (1 / (delta * N)) * sum over the hard set of
/// CE(q_lower), both restricted to `train_nodes`.
pub fn dro_loss(
    pred: &CredalPrediction,
    labels: &[i64],
    train_nodes: &[usize],
    delta: f64,
) -> Result<f64> {
    if train_nodes.is_empty() {
        return Err(Error::Training("dro_loss needs a non-empty training set".into()));
    }
    let n = train_nodes.len() as f64;
    let upper_ce = cross_entropy_rows(&pred.q_upper, labels, train_nodes)?;
    let lower_ce = cross_entropy_rows(&pred.q_lower, labels, train_nodes)?;
    let hard = select_hard_set(&lower_ce, delta)?;
    let mut loss = 0.0;
    for ce in &upper_ce {
        loss += ce / n;
    }
    for &i in &hard {
        loss += lower_ce[i] / (delta * n);
    }
    Ok(loss)
}

/// The same objective recorded on a tape. The hard set is selected from the
/// current forward values and enters the graph as fixed NLL terms, so the
/// backward pass treats it as constant.
pub fn dro_loss_on_tape(
    tape: &mut Tape,
    q_lower: VarId,
    q_upper: VarId,
    labels: &[i64],
    train_nodes: &[usize],
    delta: f64,
) -> Result<VarId> {
    if train_nodes.is_empty() {
        return Err(Error::Training("dro_loss needs a non-empty training set".into()));
    }
    let n = train_nodes.len() as f64;
    let lower_ce = cross_entropy_rows(tape.value(q_lower), labels, train_nodes)?;
    let hard = select_hard_set(&lower_ce, delta)?;
    let train_labels: Vec<usize> = train_nodes.iter().map(|&v| labels[v] as usize).collect();

    let upper_weights = vec![1.0 / n; train_nodes.len()];
    let optimistic = tape.masked_nll(q_upper, train_nodes, &train_labels, &upper_weights)?;

    let hard_rows: Vec<usize> = hard.iter().map(|&i| train_nodes[i]).collect();
    let hard_labels: Vec<usize> = hard.iter().map(|&i| train_labels[i]).collect();
    let hard_weights = vec![1.0 / (delta * n); hard_rows.len()];
    let pessimistic = tape.masked_nll(q_lower, &hard_rows, &hard_labels, &hard_weights)?;

    tape.weighted_sum(&[(optimistic, 1.0), (pessimistic, 1.0)])
}

/// What the validation metric watches for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    ValEpistemicAuroc,
    ValMacroF1,
}

/// Hyperparameters for one training run. `early_stop_metric` defaults by
/// model kind: credal models watch validation epistemic AUROC, the vanilla
/// model watches validation macro-F1. `lr = 0` is allowed and freezes the
/// parameters, which is occasionally useful in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub early_stop_metric: Option<EarlyStopMetric>,
    /// Record wall-clock epoch times. Off by default so reruns of the same
    /// configuration produce byte-identical history files.
    #[serde(default)]
    pub record_timings: bool,
}

fn default_delta() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if !(0.0 < self.delta && self.delta <= 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        self.backbone.validate()?;
        if self.model_kind == ModelKind::Vanilla
            && self.early_stop_metric == Some(EarlyStopMetric::ValEpistemicAuroc)
        {
            return Err(Error::InvalidConfig(
                "a vanilla model has no epistemic uncertainty to early-stop on".into(),
            ));
        }
        Ok(())
    }

    /// The metric actually used, after kind-dependent defaulting.
    pub fn resolved_metric(&self) -> EarlyStopMetric {
        self.early_stop_metric.unwrap_or(match self.model_kind {
            ModelKind::Vanilla => EarlyStopMetric::ValMacroF1,
            _ => EarlyStopMetric::ValEpistemicAuroc,
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the returned model carries.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// CSV rendering: epoch,loss,val_metric,seconds with LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_metric,seconds\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.loss, r.val_metric, r.seconds));
        }
        out
    }
}

/// Validation metric for the current parameters.
fn validation_metric(
    model: &Model,
    features: &Tensor,
    op: &crate::graph::SparseOperator,
    remapped: &[i64],
    masks: &SplitMasks,
    metric: EarlyStopMetric,
) -> Result<f64> {
    let (_, output) = model.forward(features, op)?;
    let val_nodes = SplitMasks::indices(&masks.val);
    match metric {
        EarlyStopMetric::ValEpistemicAuroc => {
            let ModelOutput::Credal { prediction, .. } = output else {
                return Err(Error::Training(
                    "epistemic early stopping needs a credal model".into(),
                ));
            };
            let eu = interval_uncertainty_rows(&prediction, &val_nodes)?.eu;
            let mut id_scores = Vec::new();
            let mut ood_scores = Vec::new();
            for (i, &v) in val_nodes.iter().enumerate() {
                if remapped[v] >= 0 {
                    id_scores.push(eu[i]);
                } else {
                    ood_scores.push(eu[i]);
                }
            }
            auroc(&id_scores, &ood_scores)
        }
        EarlyStopMetric::ValMacroF1 => {
            let predicted_all = match &output {
                ModelOutput::Vanilla { logits } => logits.argmax_rows(),
                ModelOutput::Credal { prediction, .. } => {
                    point_prediction(prediction, Bound::Lower)
                }
            };
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for &v in &val_nodes {
                if remapped[v] >= 0 {
                    predicted.push(predicted_all[v]);
                    truth.push(remapped[v] as usize);
                }
            }
            macro_f1(&predicted, &truth, model.num_classes)
        }
    }
}

/// Full-batch training with Adam and patience-based early stopping on the
/// validation metric; returns the model restored to its best epoch. The
/// split must already respect the partition: OOD nodes never sit in train.
pub fn train_model(
    dataset: &GraphDataset,
    masks: &SplitMasks,
    partition: &ClassPartition,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    masks.validate(dataset, partition)?;
    if config.backbone.input_dim != dataset.feature_dim() {
        return Err(Error::InvalidConfig(format!(
            "backbone.input_dim is {} but the dataset has {} features",
            config.backbone.input_dim,
            dataset.feature_dim()
        )));
    }
    let remapped = remap_id_labels(&dataset.labels, partition);
    let train_nodes = SplitMasks::indices(&masks.train);
    if train_nodes.is_empty() {
        return Err(Error::Training("empty training mask".into()));
    }
    let train_labels: Vec<usize> = train_nodes.iter().map(|&v| remapped[v] as usize).collect();

    let mut model = Model::new(
        config.model_kind,
        config.backbone.clone(),
        partition.num_id_classes(),
        config.seed,
    )?;
    let op = std::sync::Arc::new(model.operator(&dataset.edges));
    let metric_kind = config.resolved_metric();
    let adam_cfg = AdamConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamConfig::default() };
    let mut adam = AdamState::new(&model.params);

    let mut records = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamSet> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut step = || -> Result<f64> {
            let masks_vec = if config.backbone.dropout > 0.0 {
                Some(dropout_masks(
                    &config.backbone,
                    dataset.num_nodes,
                    config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                ))
            } else {
                None
            };
            let mut tape = Tape::new();
            let fwd = model.forward_on_tape(&mut tape, &dataset.features, &op, masks_vec.as_deref())?;
            let loss = match fwd.output {
                TapeOutput::Vanilla { logits } => {
                    let probs = tape.softmax(logits)?;
                    let weights = vec![1.0 / train_nodes.len() as f64; train_nodes.len()];
                    tape.masked_nll(probs, &train_nodes, &train_labels, &weights)?
                }
                TapeOutput::Credal { q_lower, q_upper } => dro_loss_on_tape(
                    &mut tape,
                    q_lower,
                    q_upper,
                    &remapped,
                    &train_nodes,
                    config.delta,
                )?,
            };
            let loss_value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let grad_vec: Vec<Option<Tensor>> =
                fwd.param_vars.iter().map(|&v| grads.get(v).cloned()).collect();
            adam.step(&adam_cfg, &mut model.params, &grad_vec)?;
            Ok(loss_value)
        };
        let loss_value = step().map_err(|e| {
            Error::Training(format!(
                "aborted at epoch {epoch}/{} (last val metric {best_metric:.6}): {e}",
                config.max_epochs
            ))
        })?;

        let val_metric =
            validation_metric(&model, &dataset.features, &op, &remapped, masks, metric_kind)
                .map_err(|e| Error::Training(format!("validation failed at epoch {epoch}: {e}")))?;
        if !val_metric.is_finite() {
            return Err(Error::Training(format!(
                "non-finite validation metric at epoch {epoch}"
            )));
        }
        let seconds =
            if config.record_timings { started.elapsed().as_secs_f64() } else { 0.0 };
        records.push(EpochRecord { epoch, loss: loss_value, val_metric, seconds });

        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best_params = Some(model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    model.params = best_params.expect("at least one epoch ran");
    Ok((model, TrainHistory { records, best_epoch }))
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    kind: ModelKind,
    num_classes: usize,
    backbone: BackboneConfig,
    dtype: String,
    params: Vec<ParamEntry>,
}

/// Write `checkpoint.json` (manifest: kind, shapes, dtype) and
/// `checkpoint.bin` (little-endian f64 coordinates, parameters concatenated
/// in manifest order) into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        kind: model.kind,
        num_classes: model.num_classes,
        backbone: model.backbone.clone(),
        dtype: "f64".into(),
        params: model
            .params
            .entries()
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), rows: t.rows(), cols: t.cols() })
            .collect(),
    };
    let json_path = dir.join("checkpoint.json");
    let mut body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    body.push('\n');
    std::fs::write(&json_path, body).map_err(|e| Error::io(&json_path, e))?;

    let mut blob = Vec::with_capacity(8 * model.params.num_coordinates());
    for (_, tensor) in model.params.entries() {
        for &v in tensor.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join("checkpoint.bin");
    std::fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Load a model saved by [`save_checkpoint`]. The manifest must describe
/// exactly the parameters its (kind, backbone, num_classes) triple implies,
/// and the blob must hold exactly 8 bytes per coordinate.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let json_path = dir.join("checkpoint.json");
    let body = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&body)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let mut model =
        Model::new(manifest.kind, manifest.backbone.clone(), manifest.num_classes, 0)?;
    let entries = model.params.entries();
    if manifest.params.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model kind {:?} needs {}",
            manifest.params.len(),
            manifest.kind,
            entries.len()
        )));
    }
    for (entry, (name, tensor)) in manifest.params.iter().zip(entries) {
        if entry.name != *name || (entry.rows, entry.cols) != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "manifest entry {:?} ({}x{}) does not match expected {:?} {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                tensor.shape()
            )));
        }
    }

    let bin_path = dir.join("checkpoint.bin");
    let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = 8 * model.params.num_coordinates();
    if blob.len() != expected {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest implies {expected}",
            blob.len()
        )));
    }
    let mut offset = 0;
    for i in 0..model.params.len() {
        let tensor = model.params.tensor_at_mut(i);
        for slot in tensor.as_mut_slice() {
            let bytes: [u8; 8] = blob[offset..offset + 8].try_into().expect("length checked");
            *slot = f64::from_le_bytes(bytes);
            offset += 8;
        }
    }
    Ok(model)
}

//! Message-passing backbones (GCN and mean-aggregation SAGE) and the models
//! built on them: a vanilla softmax classifier and credal variants whose
//! interval head reads either the final layer or the joint representation
//! concatenated across all layers.
//!
//! Every layer applies ReLU, including the last backbone layer: the output
//! nonlinearity (plain or interval softmax) belongs to the head. Forward
//! passes exist twice — as pure tensor functions for evaluation and as tape
//! programs for training — built from the same primitive ops in the same
//! order, so both produce bit-identical values.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::credal::{credal_layer_forward, interval_softmax, CredalPrediction, IntervalLogits};
use crate::error::{Error, Result};
use crate::graph::{gcn_normalize, row_normalize, Csr, SparseOperator};
use crate::tape::{glorot_uniform, ParamSet, Tape, Tensor, VarId};

/// Message-passing encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gcn,
    Sage,
}

/// Shape of the encoder stack. `dropout` is the drop probability applied to
/// each layer's input at train time (0 disables it, and is the default: the
/// masks are seeded but any stochastic regularizer still weakens exact
/// reproducibility arguments, so it is opt-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.hidden_dim < 1 || self.input_dim < 1 {
            return Err(Error::InvalidConfig("hidden_dim and input_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Input width of layer `l` (1-based).
    fn layer_input_dim(&self, l: usize) -> usize {
        if l == 1 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    /// Width of the final embedding Z^L.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Width of the joint representation [Z0 | Z1 | ... | ZL].
    pub fn joint_dim(&self) -> usize {
        self.input_dim + self.num_layers * self.hidden_dim
    }
}

/// Per-layer node embeddings [Z0, Z1, ..., ZL]; Z0 is the raw feature
/// matrix. All entries share the node (row) count.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    layers: Vec<Tensor>,
}

impl LayerTrace {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::shape("LayerTrace", "empty trace"))?;
        let rows = first.rows();
        for (i, layer) in layers.iter().enumerate() {
            if layer.rows() != rows {
                return Err(Error::shape(
                    "LayerTrace",
                    format!("layer {i} has {} rows, layer 0 has {rows}", layer.rows()),
                ));
            }
        }
        Ok(LayerTrace { layers })
    }

    /// Number of stored embeddings: num_layers + 1.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Z^l.
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    /// Z^L, the final embedding.
    pub fn final_layer(&self) -> &Tensor {
        self.layers.last().expect("trace is never empty")
    }
}

/// [Z0 | Z1 | ... | ZL] by column concatenation. Each block is preserved
/// bit-exactly; a single-entry trace returns Z0 itself.
pub fn joint_concat(trace: &LayerTrace) -> Result<Tensor> {
    let parts: Vec<&Tensor> = trace.layers().iter().collect();
    Tensor::concat_cols(&parts)
}

/// The normalized propagation operator each backbone kind aggregates with:
/// symmetric degree normalization with self-loops for GCN, plain neighbor
/// averaging for SAGE.
pub fn backbone_operator(kind: BackboneKind, adjacency: &Csr) -> SparseOperator {
    match kind {
        BackboneKind::Gcn => gcn_normalize(adjacency),
        BackboneKind::Sage => row_normalize(adjacency),
    }
}

fn add_bias_rows(m: Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.rows() != 1 || bias.cols() != m.cols() {
        return Err(Error::shape(
            "add_bias",
            format!("bias {:?} for activations {:?}", bias.shape(), m.shape()),
        ));
    }
    let mut out = m;
    for r in 0..out.rows() {
        for (c, slot) in out.row_mut(r).iter_mut().enumerate() {
            *slot += bias.get(0, c);
        }
    }
    Ok(out)
}

fn relu_tensor(m: Tensor) -> Tensor {
    m.map(|v| v.max(0.0))
}

/// One GCN layer: (op H) W + b, optionally through ReLU.
pub fn gcn_layer(
    h: &Tensor,
    op: &SparseOperator,
    w: &Tensor,
    b: &Tensor,
    activate: bool,
) -> Result<Tensor> {
    let pre = add_bias_rows(op.matmul(h)?.matmul(w)?, b)?;
    Ok(if activate { relu_tensor(pre) } else { pre })
}

/// One mean-aggregation SAGE layer: H W_self + (row_op H) W_neigh + b,
/// optionally through ReLU. Isolated nodes have an all-zero neighbor term.
pub fn sage_layer(
    h: &Tensor,
    row_op: &SparseOperator,
    w_self: &Tensor,
    w_neigh: &Tensor,
    b: &Tensor,
    activate: bool,
) -> Result<Tensor> {
    let self_term = h.matmul(w_self)?;
    let neigh_term = row_op.matmul(h)?.matmul(w_neigh)?;
    let pre = add_bias_rows(self_term.add(&neigh_term)?, b)?;
    Ok(if activate { relu_tensor(pre) } else { pre })
}

/// Run the full encoder stack; returns [Z0, ..., ZL] with Z0 = `features`.
/// Evaluation path: dropout is never applied here.
pub fn backbone_forward(
    features: &Tensor,
    op: &SparseOperator,
    config: &BackboneConfig,
    params: &ParamSet,
) -> Result<LayerTrace> {
    config.validate()?;
    if features.cols() != config.input_dim {
        return Err(Error::shape(
            "backbone_forward",
            format!("features have {} columns, config.input_dim is {}", features.cols(), config.input_dim),
        ));
    }
    let get = |name: &str| -> Result<&Tensor> {
        params.get(name).ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name:?}")))
    };
    let mut layers = vec![features.clone()];
    let mut stream = features.clone();
    for l in 1..=config.num_layers {
        stream = match config.kind {
            BackboneKind::Gcn => gcn_layer(
                &stream,
                op,
                get(&format!("gcn{l}.weight"))?,
                get(&format!("gcn{l}.bias"))?,
                true,
            )?,
            BackboneKind::Sage => sage_layer(
                &stream,
                op,
                get(&format!("sage{l}.self_weight"))?,
                get(&format!("sage{l}.neigh_weight"))?,
                get(&format!("sage{l}.bias"))?,
                true,
            )?,
        };
        layers.push(stream.clone());
    }
    LayerTrace::new(layers)
}

/// Inverted-dropout masks for each layer's input: entry 1/(1-p) with
/// probability 1-p, else 0. Returns one mask per layer (empty when p = 0).
pub fn dropout_masks(config: &BackboneConfig, num_nodes: usize, seed: u64) -> Vec<Tensor> {
    if config.dropout == 0.0 {
        return Vec::new();
    }
    let keep = 1.0 - config.dropout;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (1..=config.num_layers)
        .map(|l| {
            Tensor::from_fn(num_nodes, config.layer_input_dim(l), |_, _| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// What sits on top of the backbone: a plain softmax classifier head, a
/// credal head over the final embedding, or a credal head over the joint
/// representation across all layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vanilla,
    CredalFinal,
    CredalLj,
}

impl ModelKind {
    pub fn is_credal(&self) -> bool {
        !matches!(self, ModelKind::Vanilla)
    }

    /// Snake-case name, matching the serde representation.
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::CredalFinal => "credal_final",
            ModelKind::CredalLj => "credal_lj",
        }
    }
}

/// A classifier: encoder stack plus head parameters. `num_classes` counts
/// only the classes the model is trained on.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub params: ParamSet,
}

/// Pure forward output, by head type.
#[derive(Debug, Clone)]
pub enum ModelOutput {
    Vanilla { logits: Tensor },
    Credal { intervals: IntervalLogits, prediction: CredalPrediction },
}

/// Tape forward output, by head type.
#[derive(Debug, Clone, Copy)]
pub enum TapeOutput {
    Vanilla { logits: VarId },
    Credal { q_lower: VarId, q_upper: VarId },
}

/// Handles into a tape built by [`Model::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Leaf ids for every parameter, in `ParamSet` order.
    pub param_vars: Vec<VarId>,
    /// Tape nodes for [Z0, ..., ZL].
    pub trace: Vec<VarId>,
    pub output: TapeOutput,
}

impl Model {
    /// Fresh model with Glorot-uniform weights and zero biases, drawn in a
    /// fixed parameter order from a seeded generator.
    pub fn new(
        kind: ModelKind,
        backbone: BackboneConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Model> {
        backbone.validate()?;
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "a classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let model = Model { kind, backbone, num_classes, params: ParamSet::new() };
        for (name, rows, cols, is_weight) in model.param_spec() {
            let tensor = if is_weight {
                glorot_uniform(rows, cols, &mut rng)
            } else {
                Tensor::zeros(rows, cols)
            };
            params.insert(name, tensor)?;
        }
        Ok(Model { params, ..model })
    }

    /// (name, rows, cols, is_weight) for every parameter, in storage order.
    fn param_spec(&self) -> Vec<(String, usize, usize, bool)> {
        let mut spec = Vec::new();
        let hidden = self.backbone.hidden_dim;
        for l in 1..=self.backbone.num_layers {
            let d_in = self.backbone.layer_input_dim(l);
            match self.backbone.kind {
                BackboneKind::Gcn => {
                    spec.push((format!("gcn{l}.weight"), d_in, hidden, true));
                    spec.push((format!("gcn{l}.bias"), 1, hidden, false));
                }
                BackboneKind::Sage => {
                    spec.push((format!("sage{l}.self_weight"), d_in, hidden, true));
                    spec.push((format!("sage{l}.neigh_weight"), d_in, hidden, true));
                    spec.push((format!("sage{l}.bias"), 1, hidden, false));
                }
            }
        }
        let head_in = self.head_input_dim();
        let c = self.num_classes;
        match self.kind {
            ModelKind::Vanilla => {
                spec.push(("head.weight".into(), head_in, c, true));
                spec.push(("head.bias".into(), 1, c, false));
            }
            ModelKind::CredalFinal | ModelKind::CredalLj => {
                spec.push(("head.mid_weight".into(), head_in, c, true));
                spec.push(("head.mid_bias".into(), 1, c, false));
                spec.push(("head.half_weight".into(), head_in, c, true));
                spec.push(("head.half_bias".into(), 1, c, false));
            }
        }
        spec
    }

    /// Width of the embedding the head consumes.
    pub fn head_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::CredalLj => self.backbone.joint_dim(),
            _ => self.backbone.output_dim(),
        }
    }

    /// Propagation operator this model's backbone uses on a given graph.
    pub fn operator(&self, adjacency: &Csr) -> SparseOperator {
        backbone_operator(self.backbone.kind, adjacency)
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name:?}")))
    }

    /// Evaluation forward pass (no dropout, no tape).
    pub fn forward(
        &self,
        features: &Tensor,
        op: &SparseOperator,
    ) -> Result<(LayerTrace, ModelOutput)> {
        let trace = backbone_forward(features, op, &self.backbone, &self.params)?;
        let z = match self.kind {
            ModelKind::CredalLj => joint_concat(&trace)?,
            _ => trace.final_layer().clone(),
        };
        let output = match self.kind {
            ModelKind::Vanilla => {
                let logits = add_bias_rows(z.matmul(self.param("head.weight")?)?, self.param("head.bias")?)?;
                ModelOutput::Vanilla { logits }
            }
            ModelKind::CredalFinal | ModelKind::CredalLj => {
                let intervals = credal_layer_forward(
                    &z,
                    self.param("head.mid_weight")?,
                    self.param("head.mid_bias")?,
                    self.param("head.half_weight")?,
                    self.param("head.half_bias")?,
                )?;
                let prediction = interval_softmax(&intervals)?;
                ModelOutput::Credal { intervals, prediction }
            }
        };
        Ok((trace, output))
    }

    /// Training forward pass recorded on a tape. Every parameter becomes a
    /// gradient-carrying leaf (ids returned in `ParamSet` order). Dropout
    /// masks, when given, multiply each layer's input; `None` reproduces the
    /// pure forward bit-for-bit.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        op: &Arc<SparseOperator>,
        masks: Option<&[Tensor]>,
    ) -> Result<TapeForward> {
        let x = tape.constant(features.clone())?;
        self.forward_from_var(tape, x, op, masks)
    }

    /// [`Model::forward_on_tape`] with the feature matrix already on the
    /// tape — the node may be a gradient-carrying leaf, which is how
    /// input-gradient methods (feature perturbations) hook in.
    pub fn forward_from_var(
        &self,
        tape: &mut Tape,
        features: VarId,
        op: &Arc<SparseOperator>,
        masks: Option<&[Tensor]>,
    ) -> Result<TapeForward> {
        self.backbone.validate()?;
        if tape.value(features).cols() != self.backbone.input_dim {
            return Err(Error::shape(
                "forward_on_tape",
                format!(
                    "features have {} columns, config.input_dim is {}",
                    tape.value(features).cols(),
                    self.backbone.input_dim
                ),
            ));
        }
        if let Some(masks) = masks {
            if masks.len() != self.backbone.num_layers {
                return Err(Error::shape(
                    "forward_on_tape",
                    format!("{} dropout masks for {} layers", masks.len(), self.backbone.num_layers),
                ));
            }
        }
        let mut param_vars = Vec::with_capacity(self.params.len());
        for (_, tensor) in self.params.entries() {
            param_vars.push(tape.leaf(tensor.clone(), true)?);
        }
        let var = |name: &str| -> Result<VarId> {
            self.params
                .entries()
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| param_vars[i])
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name:?}")))
        };

        let mut trace = vec![features];
        let mut stream = features;
        for l in 1..=self.backbone.num_layers {
            if let Some(masks) = masks {
                stream = tape.mul_mask(stream, &masks[l - 1])?;
            }
            stream = match self.backbone.kind {
                BackboneKind::Gcn => {
                    let h = tape.sp_matmul(op.clone(), stream)?;
                    let h = tape.matmul(h, var(&format!("gcn{l}.weight"))?)?;
                    let h = tape.add_bias(h, var(&format!("gcn{l}.bias"))?)?;
                    tape.relu(h)?
                }
                BackboneKind::Sage => {
                    let self_term = tape.matmul(stream, var(&format!("sage{l}.self_weight"))?)?;
                    let neigh = tape.sp_matmul(op.clone(), stream)?;
                    let neigh_term = tape.matmul(neigh, var(&format!("sage{l}.neigh_weight"))?)?;
                    let h = tape.add(self_term, neigh_term)?;
                    let h = tape.add_bias(h, var(&format!("sage{l}.bias"))?)?;
                    tape.relu(h)?
                }
            };
            trace.push(stream);
        }
        let z = match self.kind {
            ModelKind::CredalLj => tape.concat_cols(&trace)?,
            _ => stream,
        };
        let output = match self.kind {
            ModelKind::Vanilla => {
                let logits = tape.matmul(z, var("head.weight")?)?;
                let logits = tape.add_bias(logits, var("head.bias")?)?;
                TapeOutput::Vanilla { logits }
            }
            ModelKind::CredalFinal | ModelKind::CredalLj => {
                let mid = tape.matmul(z, var("head.mid_weight")?)?;
                let mid = tape.add_bias(mid, var("head.mid_bias")?)?;
                let half = tape.matmul(z, var("head.half_weight")?)?;
                let half = tape.add_bias(half, var("head.half_bias")?)?;
                let half = tape.softplus(half)?;
                let lower = tape.sub(mid, half)?;
                let upper = tape.add(mid, half)?;
                let (q_lower, q_upper) = tape.interval_softmax(lower, upper)?;
                TapeOutput::Credal { q_lower, q_upper }
            }
        };
        Ok(TapeForward { param_vars, trace, output })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_features(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| {
            let x = (r * cols + c) as f64;
            ((x * 0.8231 + seed).sin() * 1.1) + 0.07
        })
    }

    fn config(kind: BackboneKind, num_layers: usize, input_dim: usize, hidden: usize) -> BackboneConfig {
        BackboneConfig { kind, num_layers, hidden_dim: hidden, input_dim, dropout: 0.0 }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = config(BackboneKind::Gcn, 2, 4, 8);
        assert!(cfg.validate().is_ok());
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
        cfg.num_layers = 2;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gcn_layer_on_edgeless_graph_with_identity_weights_is_relu() {
        // No edges: with self-loops every degree is 1, so the operator is I.
        let csr = Csr::from_edge_list(3, &[]).unwrap();
        let op = gcn_normalize(&csr);
        let h = Tensor::from_rows(&[vec![1.0, -2.0], vec![-0.5, 3.0], vec![0.0, 0.25]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::zeros(1, 2);
        let out = gcn_layer(&h, &op, &w, &b, true).unwrap();
        let expected = h.map(|v| v.max(0.0));
        assert_eq!(out.as_slice(), expected.as_slice());
    }

    #[test]
    fn gcn_layer_matches_hand_arithmetic_on_a_path() {
        // Path 0-1-2, scalar features/weights. With self-loops the degrees
        // are (2, 3, 2), so the operator rows are
        //   [1/2, 1/sqrt(6), 0], [1/sqrt(6), 1/3, 1/sqrt(6)], [0, 1/sqrt(6), 1/2].
        let csr = Csr::from_edge_list(3, &[(0, 1), (1, 2)]).unwrap();
        let op = gcn_normalize(&csr);
        let h = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.1]]).unwrap();
        let out = gcn_layer(&h, &op, &w, &b, true).unwrap();

        let s6 = 6.0f64.sqrt();
        let agg = [
            0.5 * 1.0 + 2.0 / s6,
            1.0 / s6 + 2.0 / 3.0 + 3.0 / s6,
            2.0 / s6 + 0.5 * 3.0,
        ];
        for (v, a) in agg.iter().enumerate() {
            let expected = (a * 2.0 + 0.1).max(0.0);
            assert!(
                (out.get(v, 0) - expected).abs() < 1e-12,
                "node {v}: {} vs {expected}",
                out.get(v, 0)
            );
        }
    }

    #[test]
    fn gcn_layer_gives_equal_outputs_to_symmetric_nodes() {
        let csr = Csr::from_edge_list(2, &[(0, 1)]).unwrap();
        let op = gcn_normalize(&csr);
        let h = Tensor::from_rows(&[vec![0.3, -1.2], vec![0.3, -1.2]]).unwrap();
        let w = test_features(2, 3, 0.4);
        let b = test_features(1, 3, 1.9);
        let out = gcn_layer(&h, &op, &w, &b, true).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn sage_layer_matches_hand_arithmetic_on_a_star() {
        // Star with center 0 and leaves 1..3; scalar features 1,2,3,4.
        // Mean aggregation: node 0 sees (2+3+4)/3 = 3, each leaf sees 1.
        let csr = Csr::from_edge_list(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let op = row_normalize(&csr);
        let h = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let w_self = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let w_neigh = Tensor::from_rows(&[vec![0.5]]).unwrap();
        let b = Tensor::from_rows(&[vec![-1.0]]).unwrap();
        let out = sage_layer(&h, &op, &w_self, &w_neigh, &b, true).unwrap();
        let expected = [
            (1.0 * 2.0 + 3.0 * 0.5 - 1.0),
            (2.0 * 2.0 + 1.0 * 0.5 - 1.0),
            (3.0 * 2.0 + 1.0 * 0.5 - 1.0),
            (4.0 * 2.0 + 1.0 * 0.5 - 1.0),
        ];
        for (v, &e) in expected.iter().enumerate() {
            assert!((out.get(v, 0) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_layer_isolated_node_reduces_to_mlp() {
        let csr = Csr::from_edge_list(3, &[(0, 1)]).unwrap();
        let op = row_normalize(&csr);
        let h = test_features(3, 2, 0.9);
        let w_self = test_features(2, 4, 1.3);
        let w_neigh = test_features(2, 4, 2.7);
        let b = test_features(1, 4, 0.2);
        let out = sage_layer(&h, &op, &w_self, &w_neigh, &b, true).unwrap();
        // Node 2 has no neighbors: its row is relu(h2 W_self + b).
        let mlp = add_bias_rows(h.gather_rows(&[2]).unwrap().matmul(&w_self).unwrap(), &b)
            .unwrap()
            .map(|v| v.max(0.0));
        assert_eq!(out.row(2), mlp.row(0));
    }

    #[test]
    fn sage_layer_with_zero_neighbor_weights_is_a_pointwise_mlp() {
        let csr = Csr::from_edge_list(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let op = row_normalize(&csr);
        let h = test_features(3, 2, 0.5);
        let w_self = test_features(2, 3, 1.1);
        let w_neigh = Tensor::zeros(2, 3);
        let b = test_features(1, 3, 0.8);
        let out = sage_layer(&h, &op, &w_self, &w_neigh, &b, true).unwrap();
        let mlp = add_bias_rows(h.matmul(&w_self).unwrap(), &b).unwrap().map(|v| v.max(0.0));
        assert_eq!(out.as_slice(), mlp.as_slice());
    }

    #[test]
    fn backbone_trace_has_num_layers_plus_one_entries() {
        let cfg = config(BackboneKind::Gcn, 2, 4, 8);
        let model = Model::new(ModelKind::Vanilla, cfg.clone(), 3, 7).unwrap();
        let csr = Csr::from_edge_list(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let op = model.operator(&csr);
        let x = test_features(5, 4, 0.1);
        let trace = backbone_forward(&x, &op, &cfg, &model.params).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace.layer(0).as_slice(), x.as_slice());
        for l in 1..=2 {
            assert_eq!(trace.layer(l).shape(), (5, 8));
        }
    }

    #[test]
    fn backbone_on_edgeless_graph_equals_mlp_stack() {
        let cfg = config(BackboneKind::Gcn, 2, 3, 4);
        let model = Model::new(ModelKind::Vanilla, cfg.clone(), 2, 11).unwrap();
        let csr = Csr::from_edge_list(4, &[]).unwrap();
        let op = model.operator(&csr);
        let x = test_features(4, 3, 0.6);
        let trace = backbone_forward(&x, &op, &cfg, &model.params).unwrap();

        let mut h = x.clone();
        for l in 1..=2 {
            let w = model.params.get(&format!("gcn{l}.weight")).unwrap();
            let b = model.params.get(&format!("gcn{l}.bias")).unwrap();
            h = add_bias_rows(h.matmul(w).unwrap(), b).unwrap().map(|v| v.max(0.0));
        }
        assert_eq!(trace.final_layer().as_slice(), h.as_slice());
    }

    /// Apply a node permutation to features and edge list.
    fn permute_graph(
        x: &Tensor,
        edges: &[(usize, usize)],
        perm: &[usize],
    ) -> (Tensor, Vec<(usize, usize)>) {
        let mut px = Tensor::zeros(x.rows(), x.cols());
        for v in 0..x.rows() {
            px.row_mut(perm[v]).copy_from_slice(x.row(v));
        }
        let pe = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        (px, pe)
    }

    #[test]
    fn backbone_forward_is_permutation_equivariant() {
        // Equivariance is exact up to float summation order: permuting a
        // node's neighbor list reassociates the aggregation sum, so we
        // compare at 1e-12 rather than bitwise.
        let edges = [(0, 1), (0, 2), (0, 3), (1, 2), (2, 4), (3, 4), (4, 5)];
        let perm = [3, 5, 0, 4, 2, 1];
        let x = test_features(6, 3, 0.2);
        let (px, pedges) = permute_graph(&x, &edges, &perm);

        for kind in [BackboneKind::Gcn, BackboneKind::Sage] {
            let cfg = config(kind, 2, 3, 5);
            let model = Model::new(ModelKind::Vanilla, cfg.clone(), 2, 3).unwrap();
            let csr = Csr::from_edge_list(6, &edges).unwrap();
            let pcsr = Csr::from_edge_list(6, &pedges).unwrap();
            let trace = backbone_forward(&x, &backbone_operator(kind, &csr), &cfg, &model.params).unwrap();
            let ptrace =
                backbone_forward(&px, &backbone_operator(kind, &pcsr), &cfg, &model.params).unwrap();
            for l in 0..trace.len() {
                for v in 0..6 {
                    for c in 0..trace.layer(l).cols() {
                        let a = trace.layer(l).get(v, c);
                        let b = ptrace.layer(l).get(perm[v], c);
                        assert!(
                            (a - b).abs() <= 1e-12,
                            "{kind:?} layer {l} node {v} col {c}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn joint_concat_width_and_blocks() {
        let cfg = config(BackboneKind::Gcn, 2, 4, 8);
        let model = Model::new(ModelKind::CredalLj, cfg.clone(), 3, 5).unwrap();
        let csr = Csr::from_edge_list(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let op = model.operator(&csr);
        let x = test_features(5, 4, 0.3);
        let trace = backbone_forward(&x, &op, &cfg, &model.params).unwrap();
        let joint = joint_concat(&trace).unwrap();
        assert_eq!(joint.shape(), (5, 4 + 2 * 8));
        assert_eq!(cfg.joint_dim(), 20);
        // Each constituent block survives bit-exactly.
        for v in 0..5 {
            assert_eq!(&joint.row(v)[0..4], trace.layer(0).row(v));
            assert_eq!(&joint.row(v)[4..12], trace.layer(1).row(v));
            assert_eq!(&joint.row(v)[12..20], trace.layer(2).row(v));
        }
    }

    #[test]
    fn joint_concat_of_a_bare_trace_returns_the_features() {
        let x = test_features(3, 4, 0.7);
        let trace = LayerTrace::new(vec![x.clone()]).unwrap();
        let joint = joint_concat(&trace).unwrap();
        assert_eq!(joint.as_slice(), x.as_slice());
    }

    #[test]
    fn model_init_is_seed_deterministic() {
        let cfg = config(BackboneKind::Sage, 2, 4, 6);
        let a = Model::new(ModelKind::CredalLj, cfg.clone(), 3, 42).unwrap();
        let b = Model::new(ModelKind::CredalLj, cfg.clone(), 3, 42).unwrap();
        let c = Model::new(ModelKind::CredalLj, cfg, 3, 43).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.tensor_at(i).as_slice(), b.params.tensor_at(i).as_slice());
        }
        let differs = (0..a.params.len())
            .any(|i| a.params.tensor_at(i).as_slice() != c.params.tensor_at(i).as_slice());
        assert!(differs, "different seeds produced identical weights");
    }

    #[test]
    fn model_param_shapes_follow_the_head_kind() {
        let cfg = config(BackboneKind::Gcn, 2, 4, 8);
        let vanilla = Model::new(ModelKind::Vanilla, cfg.clone(), 3, 1).unwrap();
        assert_eq!(vanilla.params.get("head.weight").unwrap().shape(), (8, 3));
        assert!(vanilla.params.get("head.mid_weight").is_none());

        let credal_final = Model::new(ModelKind::CredalFinal, cfg.clone(), 3, 1).unwrap();
        assert_eq!(credal_final.params.get("head.mid_weight").unwrap().shape(), (8, 3));
        assert_eq!(credal_final.params.get("head.half_weight").unwrap().shape(), (8, 3));

        let credal_lj = Model::new(ModelKind::CredalLj, cfg, 3, 1).unwrap();
        assert_eq!(credal_lj.params.get("head.mid_weight").unwrap().shape(), (20, 3));
        assert_eq!(credal_lj.head_input_dim(), 20);
    }

    #[test]
    fn credal_forward_produces_a_valid_prediction() {
        let cfg = config(BackboneKind::Gcn, 2, 4, 8);
        let model = Model::new(ModelKind::CredalLj, cfg, 3, 9).unwrap();
        let csr = Csr::from_edge_list(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        let op = model.operator(&csr);
        let x = test_features(6, 4, 1.4);
        let (_, out) = model.forward(&x, &op).unwrap();
        match out {
            ModelOutput::Credal { intervals, prediction } => {
                assert_eq!(prediction.q_lower.shape(), (6, 3));
                prediction.validate().unwrap();
                for (l, u) in intervals.a_lower.as_slice().iter().zip(intervals.a_upper.as_slice()) {
                    assert!(l <= u);
                }
            }
            ModelOutput::Vanilla { .. } => panic!("expected credal output"),
        }
    }

    #[test]
    fn tape_forward_matches_pure_forward_bit_for_bit() {
        let cases = [
            (ModelKind::Vanilla, BackboneKind::Gcn),
            (ModelKind::CredalFinal, BackboneKind::Gcn),
            (ModelKind::CredalLj, BackboneKind::Sage),
        ];
        let edges = [(0usize, 1usize), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)];
        let csr = Csr::from_edge_list(5, &edges).unwrap();
        let x = test_features(5, 4, 0.45);
        for (kind, backbone) in cases {
            let cfg = config(backbone, 2, 4, 6);
            let model = Model::new(kind, cfg, 3, 17).unwrap();
            let op = Arc::new(model.operator(&csr));

            let (trace, pure_out) = model.forward(&x, &op).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward_on_tape(&mut tape, &x, &op, None).unwrap();

            for (l, &var) in fwd.trace.iter().enumerate() {
                assert_eq!(
                    tape.value(var).as_slice(),
                    trace.layer(l).as_slice(),
                    "{kind:?}/{backbone:?} trace layer {l} diverged"
                );
            }
            match (pure_out, fwd.output) {
                (ModelOutput::Vanilla { logits }, TapeOutput::Vanilla { logits: lv }) => {
                    assert_eq!(tape.value(lv).as_slice(), logits.as_slice());
                }
                (ModelOutput::Credal { prediction, .. }, TapeOutput::Credal { q_lower, q_upper }) => {
                    assert_eq!(tape.value(q_lower).as_slice(), prediction.q_lower.as_slice());
                    assert_eq!(tape.value(q_upper).as_slice(), prediction.q_upper.as_slice());
                }
                _ => panic!("head kinds diverged"),
            }
        }
    }

    #[test]
    fn dropout_masks_are_seeded_and_scaled() {
        let mut cfg = config(BackboneKind::Gcn, 2, 4, 8);
        cfg.dropout = 0.5;
        let a = dropout_masks(&cfg, 50, 3);
        let b = dropout_masks(&cfg, 50, 3);
        let c = dropout_masks(&cfg, 50, 4);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].shape(), (50, 4));
        assert_eq!(a[1].shape(), (50, 8));
        for (ma, mb) in a.iter().zip(&b) {
            assert_eq!(ma.as_slice(), mb.as_slice());
        }
        assert!(a.iter().zip(&c).any(|(ma, mc)| ma.as_slice() != mc.as_slice()));
        let mut kept = 0usize;
        let mut total = 0usize;
        for m in &a {
            for &v in m.as_slice() {
                assert!(v == 0.0 || v == 2.0, "mask entry {v} not in {{0, 1/keep}}");
                kept += (v != 0.0) as usize;
                total += 1;
            }
        }
        // 600 Bernoulli(0.5) draws: stay within 5 standard deviations.
        let rate = kept as f64 / total as f64;
        assert!((rate - 0.5).abs() < 5.0 * 0.5 / (total as f64).sqrt(), "keep rate {rate}");
    }

    #[test]
    fn all_ones_dropout_masks_change_nothing() {
        let cfg = config(BackboneKind::Gcn, 2, 4, 6);
        let model = Model::new(ModelKind::CredalFinal, cfg, 3, 23).unwrap();
        let csr = Csr::from_edge_list(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let op = Arc::new(model.operator(&csr));
        let x = test_features(4, 4, 0.15);
        let ones = vec![
            Tensor::from_fn(4, 4, |_, _| 1.0),
            Tensor::from_fn(4, 6, |_, _| 1.0),
        ];

        let mut plain = Tape::new();
        let f_plain = model.forward_on_tape(&mut plain, &x, &op, None).unwrap();
        let mut masked = Tape::new();
        let f_masked = model.forward_on_tape(&mut masked, &x, &op, Some(&ones)).unwrap();
        match (f_plain.output, f_masked.output) {
            (TapeOutput::Credal { q_lower: a, .. }, TapeOutput::Credal { q_lower: b, .. }) => {
                assert_eq!(plain.value(a).as_slice(), masked.value(b).as_slice());
            }
            _ => panic!("expected credal outputs"),
        }
    }

    #[test]
    fn dropout_mask_count_is_checked() {
        let cfg = config(BackboneKind::Gcn, 2, 4, 6);
        let model = Model::new(ModelKind::Vanilla, cfg, 3, 2).unwrap();
        let csr = Csr::from_edge_list(3, &[(0, 1)]).unwrap();
        let op = Arc::new(model.operator(&csr));
        let x = test_features(3, 4, 0.0);
        let one_mask = vec![Tensor::from_fn(3, 4, |_, _| 1.0)];
        let mut tape = Tape::new();
        assert!(model.forward_on_tape(&mut tape, &x, &op, Some(&one_mask)).is_err());
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let cfg = config(BackboneKind::Gcn, 1, 4, 6);
        let model = Model::new(ModelKind::Vanilla, cfg.clone(), 2, 2).unwrap();
        let csr = Csr::from_edge_list(3, &[(0, 1)]).unwrap();
        let op = model.operator(&csr);
        let x = test_features(3, 5, 0.0);
        assert!(model.forward(&x, &op).is_err());
        assert!(backbone_forward(&x, &op, &cfg, &model.params).is_err());
    }

    #[test]
    fn model_kind_serde_names_are_snake_case() {
        assert_eq!(serde_json::to_string(&ModelKind::CredalLj).unwrap(), "\"credal_lj\"");
        assert_eq!(serde_json::to_string(&BackboneKind::Sage).unwrap(), "\"sage\"");
        let cfg: BackboneConfig = serde_json::from_str(
            r#"{"kind":"gcn","num_layers":2,"hidden_dim":8,"input_dim":4}"#,
        )
        .unwrap();
        assert_eq!(cfg.dropout, 0.0);
        assert!(serde_json::from_str::<BackboneConfig>(
            r#"{"kind":"gcn","num_layers":2,"hidden_dim":8,"input_dim":4,"typo":1}"#
        )
        .is_err());
    }
}

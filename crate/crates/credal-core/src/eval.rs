//! Evaluation machinery: ranking and classification metrics, the
//! leave-out-class OOD experiment runner, and result serialization.
//!
//! Scores follow one convention everywhere: higher means more
//! out-of-distribution, and AUROC treats OOD as the positive class.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    classical_ensemble_scores, credal_ensemble_scores, energy_score, gnnsafe_score, knn_score,
    knnlj_score, odin_score, GaussianClassModel,
};
use crate::credal::{interval_uncertainty_rows, point_prediction, Bound};
use crate::error::{Error, Result};
use crate::graph::{leave_out_class_split, ClassPartition, GraphDataset, SplitMasks};
use crate::graph::remap_id_labels;
use crate::model::{BackboneConfig, LayerTrace, Model, ModelKind, ModelOutput};
use crate::tape::Tensor;
use crate::train::{train_model, TrainConfig};

/// Area under the ROC curve for separating ID from OOD scores, computed via
/// sorted mid-ranks (ties contribute half): the normalized Mann-Whitney U
/// statistic. OOD is the positive class and higher scores mean more OOD.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::Eval("auroc needs at least one score per class".into()));
    }
    for &s in scores_id.iter().chain(scores_ood) {
        if !s.is_finite() {
            return Err(Error::Eval(format!("non-finite score {s} in auroc input")));
        }
    }
    let n_id = scores_id.len();
    let n_ood = scores_ood.len();
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Mid-rank over each tie group, 1-based.
    let mut rank_sum_ood = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j + 1) as f64 / 2.0;
        for entry in &all[i..j] {
            if entry.1 {
                rank_sum_ood += mid_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class
/// absent from both predictions and truth contributes F1 = 0.
pub fn macro_f1(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Eval(format!(
            "macro_f1 needs matching non-empty label vectors, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Eval("macro_f1 needs at least one class".into()));
    }
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Eval(format!(
                "label out of range: predicted {p}, truth {t}, {num_classes} classes"
            )));
        }
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(total / num_classes as f64)
}

/// ROC staircase points (fpr, tpr) from sweeping the decision threshold over
/// every distinct score, descending. Always starts at (0,0) and ends (1,1).
pub fn roc_points(scores_id: &[f64], scores_ood: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::Eval("roc_points needs at least one score per class".into()));
    }
    let mut thresholds: Vec<f64> = scores_id.iter().chain(scores_ood).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).ok_or(()).expect("finite scores"));
    thresholds.dedup();

    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fp = scores_id.iter().filter(|&&s| s >= t).count();
        let tp = scores_ood.iter().filter(|&&s| s >= t).count();
        let point =
            (fp as f64 / scores_id.len() as f64, tp as f64 / scores_ood.len() as f64);
        if *points.last().expect("non-empty") != point {
            points.push(point);
        }
    }
    if *points.last().expect("non-empty") != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }
    Ok(points)
}

/// Which uncertainty a score row reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "au")]
    Aleatoric,
    #[serde(rename = "eu")]
    Epistemic,
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "error")]
    Error,
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::Aleatoric => "au",
            ScoreKind::Epistemic => "eu",
            ScoreKind::Single => "single",
            ScoreKind::Error => "error",
        }
    }
}

/// One (dataset, method, uncertainty kind, seed) evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub method: String,
    pub kind: ScoreKind,
    pub seed: u64,
    pub auroc: Option<f64>,
    pub f1_lower: Option<f64>,
    pub f1_upper: Option<f64>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// ROC sweep for one (method, kind), kept for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub method: String,
    pub kind: ScoreKind,
    pub points: Vec<(f64, f64)>,
}

/// Everything one experiment run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub dataset: String,
    pub results: Vec<ExperimentResult>,
    pub roc_curves: Vec<RocCurve>,
}

/// Mean and sample standard deviation of AUROC across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub seeds: usize,
}

/// results.json layout: rows grouped by method, with per-kind summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub dataset: String,
    pub methods: BTreeMap<String, MethodBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodBlock {
    pub rows: Vec<ExperimentResult>,
    pub summary: BTreeMap<String, SummaryStats>,
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// Render rows as results.csv: fixed header, fixed float widths, LF endings.
pub fn results_to_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("dataset,method,kind,seed,auroc,f1_lower,f1_upper,seconds\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.dataset,
            r.method,
            r.kind.as_str(),
            r.seed,
            fmt_opt(r.auroc),
            fmt_opt(r.f1_lower),
            fmt_opt(r.f1_upper),
            r.seconds
        ));
    }
    out
}

/// Group rows by method and summarize AUROC per kind across seeds (error
/// rows are kept in `rows` but excluded from summaries).
pub fn summarize(output: &ExperimentOutput) -> ResultsDocument {
    let mut methods: BTreeMap<String, MethodBlock> = BTreeMap::new();
    for row in &output.results {
        methods
            .entry(row.method.clone())
            .or_insert_with(|| MethodBlock { rows: Vec::new(), summary: BTreeMap::new() })
            .rows
            .push(row.clone());
    }
    for block in methods.values_mut() {
        let mut by_kind: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        for row in &block.rows {
            if row.kind != ScoreKind::Error {
                if let Some(a) = row.auroc {
                    by_kind.entry(row.kind.as_str()).or_default().push(a);
                }
            }
        }
        for (kind, values) in by_kind {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
                    .sqrt()
            };
            block
                .summary
                .insert(kind.to_string(), SummaryStats { mean_auroc: mean, std_auroc: std, seeds: n });
        }
    }
    ResultsDocument { dataset: output.dataset.clone(), methods }
}

/// Write results.csv, results.json, and one roc_<method>_<kind>.csv per
/// stored curve. Returns the paths written.
pub fn emit_results(output: &ExperimentOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, results_to_csv(&output.results))
        .map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    let doc = summarize(output);
    let json_path = out_dir.join("results.json");
    let mut body = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Eval(format!("results serialization failed: {e}")))?;
    body.push('\n');
    std::fs::write(&json_path, body).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    for curve in &output.roc_curves {
        let path = out_dir.join(format!("roc_{}_{}.csv", curve.method, curve.kind.as_str()));
        let mut body = String::from("fpr,tpr\n");
        for (fpr, tpr) in &curve.points {
            body.push_str(&format!("{fpr:.6},{tpr:.6}\n"));
        }
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn default_unit_temperature() -> f64 {
    1.0
}

fn default_odin_temperature() -> f64 {
    1000.0
}

fn default_neighbors() -> usize {
    10
}

fn default_alpha() -> f64 {
    0.5
}

fn default_k_prop() -> usize {
    2
}

fn default_members() -> usize {
    5
}

fn default_delta() -> f64 {
    1.0
}

fn default_jobs() -> usize {
    1
}

/// One scoring method with its parameters. The `name` tag doubles as the
/// method name in result rows. Post-hoc scorers (everything that is not an
/// ensemble or a credal model) wrap the seed's trained vanilla model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Negated max-softmax probability of the vanilla model.
    Msp,
    /// -T logsumexp(logits / T) of the vanilla model.
    Energy {
        #[serde(default = "default_unit_temperature")]
        temperature: f64,
    },
    /// Temperature-scaled max-softmax with sign-gradient input perturbation.
    Odin {
        #[serde(default = "default_odin_temperature")]
        temperature: f64,
        #[serde(default)]
        epsilon: f64,
    },
    /// Min squared Mahalanobis distance to class-conditional Gaussians in
    /// the final-layer embedding space.
    Mahalanobis,
    /// Mean distance to the k nearest training nodes, final-layer space.
    Knn {
        #[serde(default = "default_neighbors")]
        k: usize,
    },
    /// Same, but in the joint latent space across all backbone layers.
    Knnlj {
        #[serde(default = "default_neighbors")]
        k: usize,
    },
    /// Energy scores smoothed over the graph by K propagation rounds.
    Gnnsafe {
        #[serde(default = "default_unit_temperature")]
        temperature: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_k_prop")]
        k_prop: usize,
    },
    /// Deep ensemble of vanilla models; entropy decomposition of the mean.
    ClassicalEnsemble {
        #[serde(default = "default_members")]
        members: usize,
    },
    /// Convex hull of ensemble member predictions, entropy extremes.
    CredalEnsemble {
        #[serde(default = "default_members")]
        members: usize,
    },
    /// Credal model with interval logits from the final layer only.
    CredalFinal,
    /// Credal model on the joint latent representation.
    CredalLj,
}

impl MethodSpec {
    /// Method name as it appears in result rows and ROC file names.
    pub fn method_name(&self) -> &'static str {
        match self {
            MethodSpec::Msp => "msp",
            MethodSpec::Energy { .. } => "energy",
            MethodSpec::Odin { .. } => "odin",
            MethodSpec::Mahalanobis => "mahalanobis",
            MethodSpec::Knn { .. } => "knn",
            MethodSpec::Knnlj { .. } => "knnlj",
            MethodSpec::Gnnsafe { .. } => "gnnsafe",
            MethodSpec::ClassicalEnsemble { .. } => "classical_ensemble",
            MethodSpec::CredalEnsemble { .. } => "credal_ensemble",
            MethodSpec::CredalFinal => "credal_final",
            MethodSpec::CredalLj => "credal_lj",
        }
    }

    /// Schema-level parameter validation (runtime conditions such as k
    /// exceeding the training-set size are handled per cell instead).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            MethodSpec::Energy { temperature } | MethodSpec::Odin { temperature, .. }
                if !(temperature > 0.0 && temperature.is_finite()) =>
            {
                bad(format!("{}: temperature must be positive, got {temperature}", self.method_name()))
            }
            MethodSpec::Odin { epsilon, .. } if !(epsilon >= 0.0 && epsilon.is_finite()) => {
                bad(format!("odin: epsilon must be >= 0, got {epsilon}"))
            }
            MethodSpec::Knn { k } | MethodSpec::Knnlj { k } if k == 0 => {
                bad(format!("{}: k must be at least 1", self.method_name()))
            }
            MethodSpec::Gnnsafe { temperature, alpha, .. }
                if !(temperature > 0.0 && temperature.is_finite())
                    || !(0.0..=1.0).contains(&alpha) =>
            {
                bad(format!("gnnsafe: need temperature > 0 and alpha in [0,1], got {temperature} and {alpha}"))
            }
            MethodSpec::ClassicalEnsemble { members } if members < 2 => {
                bad(format!("classical_ensemble: needs at least 2 members, got {members}"))
            }
            MethodSpec::CredalEnsemble { members } if members < 1 => {
                bad("credal_ensemble: needs at least 1 member".into())
            }
            _ => Ok(()),
        }
    }
}

/// Split fractions plus the seeds to sweep; one experiment cell runs per
/// (method, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub train_frac: f64,
    pub val_frac: f64,
    pub seeds: Vec<u64>,
}

/// Training hyperparameters shared by every model an experiment trains;
/// the runner fills in the model kind and seed per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTemplate {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub backbone: BackboneConfig,
}

impl TrainTemplate {
    /// Concrete training configuration for one model.
    pub fn config(&self, kind: ModelKind, seed: u64, record_timings: bool) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            delta: self.delta,
            seed,
            model_kind: kind,
            backbone: self.backbone.clone(),
            early_stop_metric: None,
            record_timings,
        }
    }
}

/// Everything an OOD experiment needs beyond the dataset and partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub split: SplitPlan,
    pub train: TrainTemplate,
    pub methods: Vec<MethodSpec>,
    /// Record wall-clock cell times. Off by default so reruns of the same
    /// configuration produce byte-identical result files.
    #[serde(default)]
    pub record_timings: bool,
    /// Upper bound on concurrently processed seeds.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.split.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("need at least one method".into()));
        }
        if self.jobs == 0 {
            return Err(Error::InvalidConfig("jobs must be at least 1".into()));
        }
        for method in &self.methods {
            method.validate()?;
        }
        self.train.config(ModelKind::Vanilla, 0, false).validate()
    }
}

/// Trained vanilla model for one seed plus its cached full-graph forward,
/// shared by every post-hoc scorer and reused as ensemble member 0.
struct VanillaArtifacts {
    model: Model,
    trace: LayerTrace,
    logits: Tensor,
    f1_id_test: f64,
}

/// Rows and (first-seed) ROC curves from one (method, seed) cell.
struct CellOutput {
    rows: Vec<ExperimentResult>,
    curves: Vec<RocCurve>,
}

/// Per-seed state: the split, label remap, and a cache of trained vanilla
/// models keyed by training seed (ensemble members land here too).
struct SeedContext<'a> {
    dataset: &'a GraphDataset,
    partition: &'a ClassPartition,
    plan: &'a ExperimentPlan,
    seed: u64,
    keep_curves: bool,
    masks: SplitMasks,
    remapped: Vec<i64>,
    train_nodes: Vec<usize>,
    test_nodes: Vec<usize>,
    /// Positions within `test_nodes`, not node ids.
    id_test_pos: Vec<usize>,
    ood_test_pos: Vec<usize>,
    id_test_nodes: Vec<usize>,
    truth_id_test: Vec<usize>,
    vanilla_cache: RefCell<HashMap<u64, Rc<VanillaArtifacts>>>,
}

fn select(values: &[f64], positions: &[usize]) -> Vec<f64> {
    positions.iter().map(|&p| values[p]).collect()
}

impl<'a> SeedContext<'a> {
    fn new(
        dataset: &'a GraphDataset,
        partition: &'a ClassPartition,
        plan: &'a ExperimentPlan,
        seed: u64,
        keep_curves: bool,
    ) -> Result<Self> {
        let masks = leave_out_class_split(
            dataset,
            partition,
            plan.split.train_frac,
            plan.split.val_frac,
            seed,
        )?;
        let remapped = remap_id_labels(&dataset.labels, partition);
        let train_nodes = SplitMasks::indices(&masks.train);
        let test_nodes = SplitMasks::indices(&masks.test);
        let mut id_test_pos = Vec::new();
        let mut ood_test_pos = Vec::new();
        for (pos, &v) in test_nodes.iter().enumerate() {
            if remapped[v] >= 0 {
                id_test_pos.push(pos);
            } else {
                ood_test_pos.push(pos);
            }
        }
        if id_test_pos.is_empty() || ood_test_pos.is_empty() {
            return Err(Error::Eval(format!(
                "seed {seed}: test split needs both ID and OOD nodes, got {} and {}",
                id_test_pos.len(),
                ood_test_pos.len()
            )));
        }
        let id_test_nodes: Vec<usize> = id_test_pos.iter().map(|&p| test_nodes[p]).collect();
        let truth_id_test: Vec<usize> =
            id_test_nodes.iter().map(|&v| remapped[v] as usize).collect();
        Ok(SeedContext {
            dataset,
            partition,
            plan,
            seed,
            keep_curves,
            masks,
            remapped,
            train_nodes,
            test_nodes,
            id_test_pos,
            ood_test_pos,
            id_test_nodes,
            truth_id_test,
            vanilla_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Seed for ensemble member m; member 0 reuses the cell seed, so the
    /// shared post-hoc vanilla model doubles as the first member.
    fn member_seed(&self, m: usize) -> u64 {
        self.seed.wrapping_add((m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn train(&self, kind: ModelKind, train_seed: u64) -> Result<Model> {
        let config = self.plan.train.config(kind, train_seed, self.plan.record_timings);
        let (model, _) = train_model(self.dataset, &self.masks, self.partition, &config)?;
        Ok(model)
    }

    fn vanilla(&self, train_seed: u64) -> Result<Rc<VanillaArtifacts>> {
        if let Some(art) = self.vanilla_cache.borrow().get(&train_seed) {
            return Ok(Rc::clone(art));
        }
        let model = self.train(ModelKind::Vanilla, train_seed)?;
        let op = model.operator(&self.dataset.edges);
        let (trace, output) = model.forward(&self.dataset.features, &op)?;
        let ModelOutput::Vanilla { logits } = output else {
            return Err(Error::Eval("vanilla model produced non-logit output".into()));
        };
        let predicted = logits.gather_rows(&self.id_test_nodes)?.argmax_rows();
        let f1_id_test = macro_f1(&predicted, &self.truth_id_test, model.num_classes)?;
        let art = Rc::new(VanillaArtifacts { model, trace, logits, f1_id_test });
        self.vanilla_cache.borrow_mut().insert(train_seed, Rc::clone(&art));
        Ok(art)
    }

    /// Member softmax predictions restricted to test rows.
    fn member_test_probs(&self, members: usize) -> Result<Vec<Tensor>> {
        (0..members)
            .map(|m| {
                let art = self.vanilla(self.member_seed(m))?;
                art.logits.softmax_rows().gather_rows(&self.test_nodes)
            })
            .collect()
    }

    /// Macro-F1 of the ensemble mean prediction on ID test nodes.
    fn ensemble_f1(&self, test_probs: &[Tensor]) -> Result<f64> {
        let (rows, cols) = test_probs[0].shape();
        let mut mean = Tensor::zeros(rows, cols);
        for probs in test_probs {
            for (acc, &p) in mean.as_mut_slice().iter_mut().zip(probs.as_slice()) {
                *acc += p;
            }
        }
        let mean = mean.scale(1.0 / test_probs.len() as f64);
        let predicted: Vec<usize> =
            self.id_test_pos.iter().map(|&p| mean.row(p).iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best }).0).collect();
        macro_f1(&predicted, &self.truth_id_test, self.partition.num_id_classes())
    }

    /// Scores over test rows for every uncertainty kind the method emits,
    /// plus the F1 bounds attached to each of its rows.
    fn score_method(
        &self,
        spec: &MethodSpec,
    ) -> Result<(Vec<(ScoreKind, Vec<f64>)>, Option<f64>, Option<f64>)> {
        match *spec {
            MethodSpec::Msp => {
                let art = self.vanilla(self.seed)?;
                let probs = art.logits.softmax_rows();
                let scores: Vec<f64> = self
                    .test_nodes
                    .iter()
                    .map(|&v| -probs.row(v).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
                    .collect();
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::Energy { temperature } => {
                let art = self.vanilla(self.seed)?;
                let all = energy_score(&art.logits, temperature)?;
                let scores = self.test_nodes.iter().map(|&v| all[v]).collect();
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::Odin { temperature, epsilon } => {
                let art = self.vanilla(self.seed)?;
                let all = odin_score(
                    &self.dataset.features,
                    &self.dataset.edges,
                    &art.model,
                    temperature,
                    epsilon,
                )?;
                let scores = self.test_nodes.iter().map(|&v| all[v]).collect();
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::Mahalanobis => {
                let art = self.vanilla(self.seed)?;
                let final_layer = art.trace.final_layer();
                let train = final_layer.gather_rows(&self.train_nodes)?;
                let labels: Vec<usize> =
                    self.train_nodes.iter().map(|&v| self.remapped[v] as usize).collect();
                let gaussian =
                    GaussianClassModel::fit(&train, &labels, self.partition.num_id_classes())?;
                let queries = final_layer.gather_rows(&self.test_nodes)?;
                let scores = gaussian.score(&queries)?;
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::Knn { k } => {
                let art = self.vanilla(self.seed)?;
                let final_layer = art.trace.final_layer();
                let train = final_layer.gather_rows(&self.train_nodes)?;
                let queries = final_layer.gather_rows(&self.test_nodes)?;
                let scores = knn_score(&queries, &train, k)?;
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::Knnlj { k } => {
                let art = self.vanilla(self.seed)?;
                let scores = knnlj_score(
                    &self.dataset.features,
                    &self.dataset.edges,
                    &art.model,
                    &self.train_nodes,
                    &self.test_nodes,
                    k,
                )?;
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::Gnnsafe { temperature, alpha, k_prop } => {
                let art = self.vanilla(self.seed)?;
                let energies = energy_score(&art.logits, temperature)?;
                let all = gnnsafe_score(&energies, &self.dataset.edges, alpha, k_prop)?;
                let scores = self.test_nodes.iter().map(|&v| all[v]).collect();
                Ok((vec![(ScoreKind::Single, scores)], Some(art.f1_id_test), Some(art.f1_id_test)))
            }
            MethodSpec::ClassicalEnsemble { members } => {
                let probs = self.member_test_probs(members)?;
                let (au, eu) = classical_ensemble_scores(&probs)?;
                let f1 = self.ensemble_f1(&probs)?;
                Ok((
                    vec![(ScoreKind::Aleatoric, au), (ScoreKind::Epistemic, eu)],
                    Some(f1),
                    Some(f1),
                ))
            }
            MethodSpec::CredalEnsemble { members } => {
                let probs = self.member_test_probs(members)?;
                let (au, eu) = credal_ensemble_scores(&probs)?;
                let f1 = self.ensemble_f1(&probs)?;
                Ok((
                    vec![(ScoreKind::Aleatoric, au), (ScoreKind::Epistemic, eu)],
                    Some(f1),
                    Some(f1),
                ))
            }
            MethodSpec::CredalFinal | MethodSpec::CredalLj => {
                let kind = if matches!(spec, MethodSpec::CredalFinal) {
                    ModelKind::CredalFinal
                } else {
                    ModelKind::CredalLj
                };
                let model = self.train(kind, self.seed)?;
                let op = model.operator(&self.dataset.edges);
                let (_, output) = model.forward(&self.dataset.features, &op)?;
                let ModelOutput::Credal { prediction, .. } = output else {
                    return Err(Error::Eval("credal model produced non-credal output".into()));
                };
                let scores = interval_uncertainty_rows(&prediction, &self.test_nodes)?;
                let lower = point_prediction(&prediction, Bound::Lower);
                let upper = point_prediction(&prediction, Bound::Upper);
                let pick = |preds: &[usize]| -> Vec<usize> {
                    self.id_test_nodes.iter().map(|&v| preds[v]).collect()
                };
                let f1_lower =
                    macro_f1(&pick(&lower), &self.truth_id_test, self.partition.num_id_classes())?;
                let f1_upper =
                    macro_f1(&pick(&upper), &self.truth_id_test, self.partition.num_id_classes())?;
                Ok((
                    vec![(ScoreKind::Aleatoric, scores.au), (ScoreKind::Epistemic, scores.eu)],
                    Some(f1_lower),
                    Some(f1_upper),
                ))
            }
        }
    }

    /// Run one method cell; failures collapse to a single error row so the
    /// other cells proceed.
    fn run_cell(&self, spec: &MethodSpec) -> CellOutput {
        let started = std::time::Instant::now();
        let outcome = self.score_method(spec).and_then(|(kinds, f1_lower, f1_upper)| {
            let mut rows = Vec::new();
            let mut curves = Vec::new();
            for (kind, scores) in kinds {
                let id = select(&scores, &self.id_test_pos);
                let ood = select(&scores, &self.ood_test_pos);
                rows.push(ExperimentResult {
                    dataset: self.dataset.name.clone(),
                    method: spec.method_name().to_string(),
                    kind,
                    seed: self.seed,
                    auroc: Some(auroc(&id, &ood)?),
                    f1_lower,
                    f1_upper,
                    seconds: 0.0,
                    error: None,
                });
                if self.keep_curves {
                    curves.push(RocCurve {
                        method: spec.method_name().to_string(),
                        kind,
                        points: roc_points(&id, &ood)?,
                    });
                }
            }
            Ok((rows, curves))
        });
        let seconds =
            if self.plan.record_timings { started.elapsed().as_secs_f64() } else { 0.0 };
        match outcome {
            Ok((mut rows, curves)) => {
                for row in &mut rows {
                    row.seconds = seconds;
                }
                CellOutput { rows, curves }
            }
            Err(e) => CellOutput {
                rows: vec![ExperimentResult {
                    dataset: self.dataset.name.clone(),
                    method: spec.method_name().to_string(),
                    kind: ScoreKind::Error,
                    seed: self.seed,
                    auroc: None,
                    f1_lower: None,
                    f1_upper: None,
                    seconds,
                    error: Some(e.to_string()),
                }],
                curves: Vec::new(),
            },
        }
    }
}

/// All cells for one seed, in method order. A split failure fails every
/// cell of the seed with the same message.
fn run_seed(
    dataset: &GraphDataset,
    partition: &ClassPartition,
    plan: &ExperimentPlan,
    seed: u64,
    keep_curves: bool,
) -> Vec<CellOutput> {
    match SeedContext::new(dataset, partition, plan, seed, keep_curves) {
        Ok(ctx) => plan.methods.iter().map(|spec| ctx.run_cell(spec)).collect(),
        Err(e) => plan
            .methods
            .iter()
            .map(|spec| CellOutput {
                rows: vec![ExperimentResult {
                    dataset: dataset.name.clone(),
                    method: spec.method_name().to_string(),
                    kind: ScoreKind::Error,
                    seed,
                    auroc: None,
                    f1_lower: None,
                    f1_upper: None,
                    seconds: 0.0,
                    error: Some(e.to_string()),
                }],
                curves: Vec::new(),
            })
            .collect(),
    }
}

/// Run the leave-out-class OOD experiment: for every seed, split the
/// graph, train what each method needs, score the test nodes, and compute
/// AUROC (ID vs OOD test nodes) per uncertainty kind plus macro-F1 bounds
/// on ID test nodes. Rows come out grouped by method, then seed; ROC
/// curves are taken from the first seed. Seeds run in parallel waves of
/// `plan.jobs`, and the output is identical regardless of the job count.
pub fn run_ood_experiment(
    dataset: &GraphDataset,
    partition: &ClassPartition,
    plan: &ExperimentPlan,
) -> Result<ExperimentOutput> {
    plan.validate()?;
    dataset.validate()?;

    let seeds = &plan.split.seeds;
    let mut per_seed: Vec<Option<Vec<CellOutput>>> = seeds.iter().map(|_| None).collect();
    if plan.jobs == 1 {
        for (si, &seed) in seeds.iter().enumerate() {
            per_seed[si] = Some(run_seed(dataset, partition, plan, seed, si == 0));
        }
    } else {
        let indices: Vec<usize> = (0..seeds.len()).collect();
        for wave in indices.chunks(plan.jobs) {
            let outputs = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&si| {
                        let seed = seeds[si];
                        scope.spawn(move || {
                            (si, run_seed(dataset, partition, plan, seed, si == 0))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("seed worker panicked"))
                    .collect::<Vec<_>>()
            });
            for (si, output) in outputs {
                per_seed[si] = Some(output);
            }
        }
    }

    let mut per_seed: Vec<Vec<CellOutput>> =
        per_seed.into_iter().map(|o| o.expect("every seed ran")).collect();
    let mut results = Vec::new();
    let mut roc_curves = Vec::new();
    for mi in 0..plan.methods.len() {
        for cells in per_seed.iter_mut() {
            let cell = &mut cells[mi];
            results.append(&mut cell.rows);
            roc_curves.append(&mut cell.curves);
        }
    }
    Ok(ExperimentOutput { dataset: dataset.name.clone(), results, roc_curves })
}

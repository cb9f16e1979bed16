//! Post-hoc OOD scorers and ensemble methods. Every scorer follows one
//! direction convention: higher score means more out-of-distribution.
//!
//! The post-hoc scorers (energy, ODIN, Mahalanobis, KNN variants, GNNSafe
//! propagation) read a trained vanilla model or its embeddings; the
//! ensemble scorers decompose uncertainty over several members' softmax
//! predictions.

use std::sync::Arc;

use crate::credal::{ensemble_entropy_decompose, hull_uncertainty};
use crate::error::{Error, Result};
use crate::graph::{row_normalize, Csr, SparseOperator};
use crate::model::{joint_concat, Model, ModelKind};
use crate::tape::{Tape, Tensor};

/// Energy score -T logsumexp(logits / T) per node, stabilized by row-max
/// subtraction. Low energy means confident ID, so the raw value already
/// ranks OOD above ID.
pub fn energy_score(logits: &Tensor, t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
    }
    let (n, _) = logits.shape();
    let mut scores = Vec::with_capacity(n);
    for v in 0..n {
        let row = logits.row(v);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x / t));
        let sum: f64 = row.iter().map(|&x| (x / t - m).exp()).sum();
        scores.push(-t * (m + sum.ln()));
    }
    Ok(scores)
}

/// -max softmax(logits / T) per row.
fn negative_max_softmax(logits: &Tensor, t: f64) -> Vec<f64> {
    let scaled = logits.scale(1.0 / t);
    let probs = scaled.softmax_rows();
    (0..probs.rows())
        .map(|v| -probs.row(v).iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x)))
        .collect()
}

/// ODIN: temperature-scaled max-softmax with an optional adversarial-style
/// input nudge. The perturbation direction is the input gradient of the
/// summed NLL at the (frozen) predicted classes:
/// x~ = x - eps * sign(d/dx sum_v -ln max-softmax(logits_v / T)), and the
/// score is -max softmax(logits(x~) / T). With eps = 0 and T = 1 this is
/// the plain max-softmax-probability baseline.
pub fn odin_score(
    features: &Tensor,
    adjacency: &Csr,
    model: &Model,
    t: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if model.kind != ModelKind::Vanilla {
        return Err(Error::InvalidConfig("odin wraps a vanilla model".into()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let op = Arc::new(model.operator(adjacency));

    let perturbed = if epsilon == 0.0 {
        features.clone()
    } else {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone(), true)?;
        let fwd = model.forward_from_var(&mut tape, x, &op, None)?;
        let crate::model::TapeOutput::Vanilla { logits } = fwd.output else {
            unreachable!("vanilla model produces logits");
        };
        let scaled = tape.scale(logits, 1.0 / t)?;
        let probs = tape.softmax(scaled)?;
        // Freeze the predicted classes, then sum their NLL over all nodes.
        let labels = tape.value(probs).argmax_rows();
        let rows: Vec<usize> = (0..features.rows()).collect();
        let weights = vec![1.0; rows.len()];
        let loss = tape.masked_nll(probs, &rows, &labels, &weights)?;
        let grads = tape.backward(loss)?;
        let g = grads
            .get(x)
            .ok_or_else(|| Error::Eval("odin input gradient vanished".into()))?;
        let mut nudged = features.clone();
        for (slot, &d) in nudged.as_mut_slice().iter_mut().zip(g.as_slice()) {
            if d != 0.0 {
                *slot -= epsilon * d.signum();
            }
        }
        nudged
    };

    let op_ref: &SparseOperator = &op;
    let (_, output) = model.forward(&perturbed, op_ref)?;
    let crate::model::ModelOutput::Vanilla { logits } = output else {
        unreachable!("vanilla model produces logits");
    };
    Ok(negative_max_softmax(&logits, t))
}

/// Class-conditional Gaussian density model: per-class means with one
/// shared covariance (pooled within-class scatter plus 1e-6 I), factored
/// once by Cholesky for distance evaluation.
#[derive(Debug, Clone)]
pub struct GaussianClassModel {
    means: Vec<Vec<f64>>,
    /// Lower-triangular Cholesky factor of the regularized covariance.
    chol: Vec<Vec<f64>>,
}

fn cholesky(matrix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = matrix.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = matrix[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Eval(format!(
                        "covariance is not positive definite (pivot {sum} at {i})"
                    )));
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solve L y = b by forward substitution; the squared Mahalanobis distance
/// is then |y|^2 since z' (L L')^{-1} z = |L^{-1} z|^2.
fn forward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    y
}

impl GaussianClassModel {
    /// Fit per-class means and the pooled within-class covariance
    /// (normalized by the sample count, regularized by +1e-6 I).
    pub fn fit(embeddings: &Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        let (n, d) = embeddings.shape();
        if n == 0 || labels.len() != n {
            return Err(Error::Eval(format!(
                "gaussian fit needs matching non-empty inputs, got {n} rows and {} labels",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Eval("gaussian fit needs at least one class".into()));
        }
        let mut counts = vec![0usize; num_classes];
        let mut means = vec![vec![0.0; d]; num_classes];
        for (v, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Eval(format!("label {y} out of range")));
            }
            counts[y] += 1;
            for (acc, &x) in means[y].iter_mut().zip(embeddings.row(v)) {
                *acc += x;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            if *count == 0 {
                return Err(Error::Eval(format!("class {c} has no samples")));
            }
            for slot in means[c].iter_mut() {
                *slot /= *count as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (v, &y) in labels.iter().enumerate() {
            let row = embeddings.row(v);
            let mu = &means[y];
            for i in 0..d {
                let di = row[i] - mu[i];
                for j in 0..=i {
                    cov[i][j] += di * (row[j] - mu[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i][j] /= n as f64;
                cov[j][i] = cov[i][j];
            }
            cov[i][i] += 1e-6;
        }
        Self::from_parts(means, cov)
    }

    /// Build from explicit means and covariance (must be positive definite).
    pub fn from_parts(means: Vec<Vec<f64>>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Eval("gaussian model needs at least one class mean".into()));
        }
        let d = covariance.len();
        if means.iter().any(|m| m.len() != d) || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::Eval("mean/covariance dimensions disagree".into()));
        }
        let chol = cholesky(&covariance)?;
        Ok(GaussianClassModel { means, chol })
    }

    /// Minimum squared Mahalanobis distance to any class mean, per query.
    pub fn score(&self, queries: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = queries.shape();
        if d != self.chol.len() {
            return Err(Error::shape(
                "mahalanobis",
                format!("queries have {d} dims, model has {}", self.chol.len()),
            ));
        }
        let mut scores = Vec::with_capacity(n);
        for v in 0..n {
            let row = queries.row(v);
            let mut best = f64::INFINITY;
            for mu in &self.means {
                let diff: Vec<f64> = row.iter().zip(mu).map(|(&x, &m)| x - m).collect();
                let y = forward_solve(&self.chol, &diff);
                let dist: f64 = y.iter().map(|&a| a * a).sum();
                best = best.min(dist);
            }
            scores.push(best);
        }
        Ok(scores)
    }
}

/// Minimum-squared-Mahalanobis scorer over a fitted Gaussian class model.
pub fn mahalanobis_score(queries: &Tensor, model: &GaussianClassModel) -> Result<Vec<f64>> {
    model.score(queries)
}

/// Mean Euclidean distance to the k nearest training embeddings, brute
/// force and exact; distance ties resolve towards the smaller train index.
pub fn knn_score(queries: &Tensor, train: &Tensor, k: usize) -> Result<Vec<f64>> {
    let (n_train, d) = train.shape();
    if n_train == 0 {
        return Err(Error::Eval("knn needs a non-empty training set".into()));
    }
    if !(1..=n_train).contains(&k) {
        return Err(Error::Eval(format!("k = {k} out of range 1..={n_train}")));
    }
    if queries.cols() != d {
        return Err(Error::shape(
            "knn_score",
            format!("queries have {} dims, train has {d}", queries.cols()),
        ));
    }
    let mut scores = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let qrow = queries.row(q);
        let mut dists: Vec<(f64, usize)> = (0..n_train)
            .map(|t| {
                let trow = train.row(t);
                let d2: f64 = qrow.iter().zip(trow).map(|(&a, &b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), t)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        scores.push(dists[..k].iter().map(|(d, _)| d).sum::<f64>() / k as f64);
    }
    Ok(scores)
}

/// KNN distance in the joint latent space [Z0 | ... | ZL] of a vanilla
/// backbone: embeddings from the model's layer trace, train rows as the
/// reference set, query rows scored.
pub fn knnlj_score(
    features: &Tensor,
    adjacency: &Csr,
    model: &Model,
    train_nodes: &[usize],
    query_nodes: &[usize],
    k: usize,
) -> Result<Vec<f64>> {
    let op = model.operator(adjacency);
    let (trace, _) = model.forward(features, &op)?;
    let joint = joint_concat(&trace)?;
    let train = joint.gather_rows(train_nodes)?;
    let queries = joint.gather_rows(query_nodes)?;
    knn_score(&queries, &train, k)
}

/// GNNSafe-style energy propagation: K rounds of
/// E <- alpha E + (1 - alpha) row_normalize(A) E. Inputs are energies in
/// the "higher = more OOD" convention, which propagation preserves.
pub fn gnnsafe_score(
    energy: &[f64],
    adjacency: &Csr,
    alpha: f64,
    k_prop: usize,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if energy.len() != adjacency.num_nodes() {
        return Err(Error::shape(
            "gnnsafe_score",
            format!("{} energies for {} nodes", energy.len(), adjacency.num_nodes()),
        ));
    }
    // alpha = 1 and K = 0 are exact identities by contract, so return the
    // input unchanged rather than trusting float arithmetic to do it.
    if alpha == 1.0 || k_prop == 0 {
        return Ok(energy.to_vec());
    }
    let op = row_normalize(adjacency);
    let mut e = Tensor::new(energy.len(), 1, energy.to_vec())?;
    for _ in 0..k_prop {
        let prop = op.matmul(&e)?;
        for (slot, &p) in e.as_mut_slice().iter_mut().zip(prop.as_slice()) {
            *slot = alpha * *slot + (1.0 - alpha) * p;
        }
    }
    Ok(e.as_slice().to_vec())
}

/// Classical deep-ensemble decomposition over member softmax predictions:
/// per node, AU = mean member entropy, EU = H(mean) - AU (clamped at 0).
/// Returns (AU scores, EU scores).
pub fn classical_ensemble_scores(member_probs: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    if member_probs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a classical ensemble needs at least 2 members, got {}",
            member_probs.len()
        )));
    }
    let scores = ensemble_entropy_decompose(member_probs)?;
    Ok((scores.au, scores.eu))
}

/// Credal ensemble: per node, entropy extremes over the convex hull of the
/// member predictions. AU is the hull minimum (smallest member entropy),
/// EU the hull entropy range. Returns (AU scores, EU scores).
pub fn credal_ensemble_scores(member_probs: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = member_probs
        .first()
        .ok_or_else(|| Error::InvalidConfig("a credal ensemble needs at least 1 member".into()))?;
    let (n, c) = first.shape();
    for m in member_probs {
        if m.shape() != (n, c) {
            return Err(Error::shape(
                "credal_ensemble_scores",
                format!("member shape {:?} vs {:?}", m.shape(), (n, c)),
            ));
        }
    }
    let mut au = Vec::with_capacity(n);
    let mut eu = Vec::with_capacity(n);
    for v in 0..n {
        let members: Vec<Vec<f64>> = member_probs.iter().map(|m| m.row(v).to_vec()).collect();
        let (_, hull_au, hull_eu) = hull_uncertainty(&members)?;
        au.push(hull_au);
        eu.push(hull_eu);
    }
    Ok((au, eu))
}

//! Credal predictions: interval logits, the interval softmax, and
//! entropy-based uncertainty decomposition into total / aleatoric /
//! epistemic parts (all in bits).

mod entropy;

pub use entropy::{
    ensemble_entropy_decompose, entropy_bits, entropy_bounds_oracle, hull_uncertainty,
    max_entropy_interval, min_entropy_interval, MinEntropy,
};

use crate::error::{Error, Result};
use crate::tape::{softplus, Tensor};

/// Per-class logit intervals [a_lower, a_upper], elementwise ordered.
#[derive(Debug, Clone)]
pub struct IntervalLogits {
    pub a_lower: Tensor,
    pub a_upper: Tensor,
}

impl IntervalLogits {
    pub fn new(a_lower: Tensor, a_upper: Tensor) -> Result<Self> {
        if a_lower.shape() != a_upper.shape() {
            return Err(Error::shape(
                "IntervalLogits",
                format!("{:?} vs {:?}", a_lower.shape(), a_upper.shape()),
            ));
        }
        for (l, u) in a_lower.as_slice().iter().zip(a_upper.as_slice()) {
            if l > u {
                return Err(Error::Infeasible(format!("logit interval [{l}, {u}] inverted")));
            }
        }
        Ok(IntervalLogits { a_lower, a_upper })
    }
}

/// Per-class probability intervals [q_lower, q_upper] describing one credal
/// set per row.
#[derive(Debug, Clone)]
pub struct CredalPrediction {
    pub q_lower: Tensor,
    pub q_upper: Tensor,
}

impl CredalPrediction {
    pub fn num_nodes(&self) -> usize {
        self.q_lower.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.q_lower.cols()
    }

    /// Non-emptiness and ordering of every row's credal set, at 1e-9 slack:
    /// 0 < qL <= qU < 1 elementwise and sum qL <= 1 <= sum qU.
    pub fn validate(&self) -> Result<()> {
        if self.q_lower.shape() != self.q_upper.shape() {
            return Err(Error::shape(
                "CredalPrediction",
                format!("{:?} vs {:?}", self.q_lower.shape(), self.q_upper.shape()),
            ));
        }
        for v in 0..self.num_nodes() {
            let lo = self.q_lower.row(v);
            let hi = self.q_upper.row(v);
            let mut sum_lo = 0.0;
            let mut sum_hi = 0.0;
            for i in 0..lo.len() {
                if !(lo[i] > 0.0 && hi[i] < 1.0 && lo[i] <= hi[i] + 1e-9) {
                    return Err(Error::Infeasible(format!(
                        "row {v} class {i}: bounds [{}, {}] invalid",
                        lo[i], hi[i]
                    )));
                }
                sum_lo += lo[i];
                sum_hi += hi[i];
            }
            if sum_lo > 1.0 + 1e-9 || sum_hi < 1.0 - 1e-9 {
                return Err(Error::Infeasible(format!(
                    "row {v}: credal set empty (sum lower {sum_lo}, sum upper {sum_hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Per-node uncertainty decomposition in bits: total, aleatoric, epistemic.
#[derive(Debug, Clone)]
pub struct UncertaintyScores {
    pub tu: Vec<f64>,
    pub au: Vec<f64>,
    pub eu: Vec<f64>,
}

impl UncertaintyScores {
    pub fn len(&self) -> usize {
        self.tu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tu.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let cap = (num_classes as f64).log2() + 1e-9;
        if self.tu.len() != self.au.len() || self.tu.len() != self.eu.len() {
            return Err(Error::shape("UncertaintyScores", "length mismatch"));
        }
        for v in 0..self.tu.len() {
            let (tu, au, eu) = (self.tu[v], self.au[v], self.eu[v]);
            if !(tu >= au - 1e-9 && au >= -1e-9 && (eu - (tu - au)).abs() <= 1e-9 && tu <= cap) {
                return Err(Error::Eval(format!(
                    "node {v}: inconsistent uncertainties tu={tu} au={au} eu={eu}"
                )));
            }
        }
        Ok(())
    }
}

/// Credal output layer: midpoint m = z W + b, half-length h = softplus(z W2
/// + b2) >= 0, intervals [m - h, m + h]. Pure-tensor version for evaluation;
/// the training path records the same composition on a tape.
pub fn credal_layer_forward(
    z: &Tensor,
    w: &Tensor,
    b: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<IntervalLogits> {
    let broadcast = |m: Tensor, bias: &Tensor| -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != m.cols() {
            return Err(Error::shape(
                "credal_layer_forward",
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
    };
    let mid = broadcast(z.matmul(w)?, b)?;
    let half = broadcast(z.matmul(w2)?, b2)?.map(softplus);
    IntervalLogits::new(mid.sub(&half)?, mid.add(&half)?)
}

/// Interval softmax on raw logit tensors; returns (q_lower, q_upper).
pub(crate) fn interval_softmax_raw(lower: &Tensor, upper: &Tensor) -> (Tensor, Tensor) {
    let ql = crate::tape::one_sided_interval_softmax(lower, upper);
    let qu = crate::tape::one_sided_interval_softmax(upper, lower);
    (ql, qu)
}

/// Map logit intervals to probability intervals:
/// qL_i = exp(aL_i) / (exp(aL_i) + sum_{k != i} exp(aU_k)) and symmetrically
/// for qU. Guarantees a non-empty credal set per row.
pub fn interval_softmax(il: &IntervalLogits) -> Result<CredalPrediction> {
    if !il.a_lower.is_finite() || !il.a_upper.is_finite() {
        return Err(Error::NonFinite("interval softmax input".into()));
    }
    let (q_lower, q_upper) = interval_softmax_raw(&il.a_lower, &il.a_upper);
    Ok(CredalPrediction { q_lower, q_upper })
}

/// Per-node entropy extremes over each row's credal set: tu is the maximum
/// entropy, au the minimum, eu their gap.
pub fn interval_uncertainty(pred: &CredalPrediction) -> Result<UncertaintyScores> {
    let n = pred.num_nodes();
    let mut tu = vec![0.0; n];
    let mut au = vec![0.0; n];
    let mut eu = vec![0.0; n];
    let mut approx = 0usize;
    for v in 0..n {
        let lo = pred.q_lower.row(v);
        let hi = pred.q_upper.row(v);
        let (_, h_max) = max_entropy_interval(lo, hi)?;
        let mn = min_entropy_interval(lo, hi)?;
        if !mn.exact {
            approx += 1;
        }
        tu[v] = h_max;
        au[v] = mn.h_bits;
        eu[v] = (h_max - mn.h_bits).max(0.0);
    }
    if approx > 0 {
        log::debug!("minimum-entropy solve used the greedy fallback on {approx} rows");
    }
    Ok(UncertaintyScores { tu, au, eu })
}

/// [`interval_uncertainty`] restricted to a subset of rows (in the given
/// order); scores index into `rows`, not the original prediction.
pub fn interval_uncertainty_rows(
    pred: &CredalPrediction,
    rows: &[usize],
) -> Result<UncertaintyScores> {
    let sub = CredalPrediction {
        q_lower: pred.q_lower.gather_rows(rows)?,
        q_upper: pred.q_upper.gather_rows(rows)?,
    };
    interval_uncertainty(&sub)
}

/// Which credal bound a point prediction reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

/// Row-wise argmax of the chosen bound; ties go to the lowest class index.
pub fn point_prediction(pred: &CredalPrediction, which: Bound) -> Vec<usize> {
    match which {
        Bound::Lower => pred.q_lower.argmax_rows(),
        Bound::Upper => pred.q_upper.argmax_rows(),
    }
}

/// CSV export: node_id, q_lower per class, q_upper per class, tu, au, eu.
pub fn predictions_to_csv(pred: &CredalPrediction, scores: &UncertaintyScores) -> Result<String> {
    if scores.len() != pred.num_nodes() {
        return Err(Error::shape(
            "predictions_to_csv",
            format!("{} scores for {} nodes", scores.len(), pred.num_nodes()),
        ));
    }
    let c = pred.num_classes();
    let mut out = String::from("node_id");
    for i in 0..c {
        out.push_str(&format!(",q_lower_{i}"));
    }
    for i in 0..c {
        out.push_str(&format!(",q_upper_{i}"));
    }
    out.push_str(",tu,au,eu\n");
    for v in 0..pred.num_nodes() {
        out.push_str(&format!("{v}"));
        for &x in pred.q_lower.row(v) {
            out.push_str(&format!(",{x}"));
        }
        for &x in pred.q_upper.row(v) {
            out.push_str(&format!(",{x}"));
        }
        out.push_str(&format!(",{},{},{}\n", scores.tu[v], scores.au[v], scores.eu[v]));
    }
    Ok(out)
}

//! Extremal Shannon entropy over credal sets, in bits.
//!
//! For interval credal sets (a box intersected with the simplex) the maximum
//! is found by water-filling and the minimum by vertex enumeration; both are
//! exact. A brute-force grid oracle over the same polytope backs the tests.
//! For finite hulls the maximum is a Frank-Wolfe solve over mixture weights.

use crate::credal::UncertaintyScores;
use crate::error::{Error, Result};
use crate::tape::Tensor;

const LN_2: f64 = std::f64::consts::LN_2;
/// Slack allowed on simplex/bound feasibility before we refuse the input.
const FEAS_TOL: f64 = 1e-9;

/// Shannon entropy in bits with the convention 0 * log 0 = 0.
pub fn entropy_bits(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.log2();
        }
    }
    h
}

/// Check interval bounds describe a non-empty credal set, repairing
/// sub-tolerance violations: qL is scaled down when it sums slightly above 1,
/// qU scaled up when it sums slightly below. Anything beyond `FEAS_TOL` is an
/// error rather than silent repair.
fn normalize_bounds(q_lower: &[f64], q_upper: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if q_lower.len() != q_upper.len() || q_lower.is_empty() {
        return Err(Error::Infeasible("bound vectors empty or of unequal length".into()));
    }
    let mut lo = q_lower.to_vec();
    let mut hi = q_upper.to_vec();
    for i in 0..lo.len() {
        if !(lo[i].is_finite() && hi[i].is_finite()) {
            return Err(Error::Infeasible("non-finite probability bound".into()));
        }
        if lo[i] > hi[i] + FEAS_TOL {
            return Err(Error::Infeasible(format!(
                "lower bound {} above upper bound {} at coordinate {i}",
                lo[i], hi[i]
            )));
        }
        if lo[i] < 0.0 {
            if lo[i] < -FEAS_TOL {
                return Err(Error::Infeasible(format!("negative lower bound {}", lo[i])));
            }
            lo[i] = 0.0;
        }
        if hi[i] > 1.0 {
            if hi[i] > 1.0 + FEAS_TOL {
                return Err(Error::Infeasible(format!("upper bound {} above one", hi[i])));
            }
            hi[i] = 1.0;
        }
        hi[i] = hi[i].max(lo[i]);
    }
    let sum_lo: f64 = lo.iter().sum();
    let sum_hi: f64 = hi.iter().sum();
    if sum_lo > 1.0 + FEAS_TOL {
        return Err(Error::Infeasible(format!("lower bounds sum to {sum_lo} > 1")));
    }
    if sum_hi < 1.0 - FEAS_TOL {
        return Err(Error::Infeasible(format!("upper bounds sum to {sum_hi} < 1")));
    }
    if sum_lo > 1.0 {
        log::debug!("projecting lower bounds down: sum {sum_lo} slightly above 1");
        let s = 1.0 / sum_lo;
        for x in &mut lo {
            *x *= s;
        }
    }
    if sum_hi < 1.0 {
        log::debug!("projecting upper bounds up: sum {sum_hi} slightly below 1");
        let s = 1.0 / sum_hi;
        for x in &mut hi {
            *x *= s;
        }
        for i in 0..lo.len() {
            hi[i] = hi[i].max(lo[i]);
        }
    }
    Ok((lo, hi))
}

/// Maximum-entropy distribution in the interval credal set, by water-filling:
/// p*_i = clamp(lambda, qL_i, qU_i) with the level lambda found by bisection
/// so the coordinates sum to one. Returns (p*, H(p*) in bits).
pub fn max_entropy_interval(q_lower: &[f64], q_upper: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (lo, hi) = normalize_bounds(q_lower, q_upper)?;
    let fill = |lambda: f64| -> f64 {
        lo.iter().zip(&hi).map(|(&l, &h)| lambda.clamp(l, h)).sum::<f64>()
    };
    let mut lambda_lo = lo.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lambda_hi = hi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        if lambda_hi - lambda_lo <= 1e-12 {
            break;
        }
        let mid = 0.5 * (lambda_lo + lambda_hi);
        if fill(mid) < 1.0 {
            lambda_lo = mid;
        } else {
            lambda_hi = mid;
        }
    }
    let lambda = 0.5 * (lambda_lo + lambda_hi);
    let p: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| lambda.clamp(l, h)).collect();
    let h = entropy_bits(&p);
    Ok((p, h))
}

/// Minimum entropy over an interval credal set.
#[derive(Debug, Clone)]
pub struct MinEntropy {
    pub p: Vec<f64>,
    pub h_bits: f64,
    /// False when the greedy fallback produced the value (C > 15).
    pub exact: bool,
}

/// Minimum-entropy distribution in the interval credal set. Entropy is
/// concave, so the minimum sits at a vertex of the box-simplex polytope, and
/// every vertex has at most one coordinate strictly between its bounds:
/// enumerate (subset at upper bound, one fractional coordinate, rest at
/// lower). Exact for C <= 15; beyond that a greedy mass-pouring heuristic is
/// used and flagged.
pub fn min_entropy_interval(q_lower: &[f64], q_upper: &[f64]) -> Result<MinEntropy> {
    let (lo, hi) = normalize_bounds(q_lower, q_upper)?;
    let c = lo.len();
    if c == 1 {
        return Ok(MinEntropy { p: vec![1.0], h_bits: 0.0, exact: true });
    }
    if c > 15 {
        return Ok(greedy_min_entropy(&lo, &hi));
    }
    let sum_lo: f64 = lo.iter().sum();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << c) {
        // Mass already committed: upper bounds on S, lower elsewhere.
        let mut committed = sum_lo;
        for i in 0..c {
            if mask & (1 << i) != 0 {
                committed += hi[i] - lo[i];
            }
        }
        for j in 0..c {
            if mask & (1 << j) != 0 {
                continue;
            }
            // Coordinate j absorbs the remainder on top of its lower bound.
            let p_j = lo[j] + (1.0 - committed);
            if p_j < lo[j] - FEAS_TOL || p_j > hi[j] + FEAS_TOL {
                continue;
            }
            let mut p: Vec<f64> = (0..c)
                .map(|i| if mask & (1 << i) != 0 { hi[i] } else { lo[i] })
                .collect();
            p[j] = p_j.clamp(lo[j], hi[j]);
            let h = entropy_bits(&p);
            if best.as_ref().map_or(true, |(bh, _)| h < *bh) {
                best = Some((h, p));
            }
        }
    }
    let (h_bits, p) =
        best.ok_or_else(|| Error::Infeasible("no feasible vertex found".into()))?;
    Ok(MinEntropy { p, h_bits, exact: true })
}

/// Start from the lower bounds and pour the remaining mass into the largest
/// coordinate with slack, repeatedly. A good heuristic for concentrating
/// mass, not guaranteed optimal.
fn greedy_min_entropy(lo: &[f64], hi: &[f64]) -> MinEntropy {
    let mut p = lo.to_vec();
    let mut remaining = 1.0 - p.iter().sum::<f64>();
    while remaining > 1e-15 {
        let mut target = None;
        for i in 0..p.len() {
            if hi[i] - p[i] > 1e-15 {
                let better = match target {
                    None => true,
                    Some(t) => p[i] > p[t],
                };
                if better {
                    target = Some(i);
                }
            }
        }
        let Some(i) = target else { break };
        let pour = remaining.min(hi[i] - p[i]);
        p[i] += pour;
        remaining -= pour;
    }
    let h_bits = entropy_bits(&p);
    MinEntropy { p, h_bits, exact: false }
}

/// Brute-force entropy extremes over the box-simplex polytope, for C <= 4.
/// One coordinate at a time plays the dependent role (fixed by the simplex
/// constraint) while the others sweep a grid that includes both interval
/// endpoints, so every polytope vertex is evaluated exactly. Returns
/// (H_max, H_min) in bits.
pub fn entropy_bounds_oracle(
    q_lower: &[f64],
    q_upper: &[f64],
    resolution: f64,
) -> Result<(f64, f64)> {
    let (lo, hi) = normalize_bounds(q_lower, q_upper)?;
    let c = lo.len();
    if c > 4 {
        return Err(Error::InvalidConfig(format!("entropy oracle supports C <= 4, got {c}")));
    }
    if resolution < 1e-3 {
        return Err(Error::InvalidConfig("oracle resolution must be >= 1e-3".into()));
    }
    let ticks = |i: usize| -> Vec<f64> {
        let mut t = Vec::new();
        let mut x = lo[i];
        while x < hi[i] - 1e-15 {
            t.push(x);
            x += resolution;
        }
        t.push(hi[i]);
        t
    };
    let mut h_max = f64::NEG_INFINITY;
    let mut h_min = f64::INFINITY;
    let mut p = vec![0.0; c];
    for dep in 0..c {
        let free: Vec<usize> = (0..c).filter(|&i| i != dep).collect();
        let grids: Vec<Vec<f64>> = free.iter().map(|&i| ticks(i)).collect();
        let mut idx = vec![0usize; free.len()];
        loop {
            let mut sum = 0.0;
            for (k, &i) in free.iter().enumerate() {
                p[i] = grids[k][idx[k]];
                sum += p[i];
            }
            let rest = 1.0 - sum;
            if rest >= lo[dep] - FEAS_TOL && rest <= hi[dep] + FEAS_TOL {
                p[dep] = rest.max(0.0);
                let h = entropy_bits(&p);
                h_max = h_max.max(h);
                h_min = h_min.min(h);
            }
            // Odometer increment over the free grids.
            let mut k = 0;
            loop {
                if k == free.len() {
                    break;
                }
                idx[k] += 1;
                if idx[k] < grids[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == free.len() {
                break;
            }
        }
    }
    if !h_min.is_finite() {
        return Err(Error::Infeasible("oracle found no feasible grid point".into()));
    }
    Ok((h_max, h_min))
}

/// Entropy extremes over the convex hull of `members`, in bits:
/// (TU, AU, EU). AU is the smallest member entropy (exact, since a concave
/// function attains its polytope minimum at a vertex). TU maximizes
/// H(sum_m w_m p_m) over the weight simplex with Frank-Wolfe: linear oracle
/// plus bisection line search on the concave 1-D restriction, stopping at
/// duality gap < 1e-8 or 10^4 iterations.
pub fn hull_uncertainty(members: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
    if members.is_empty() {
        return Err(Error::Infeasible("hull of zero members".into()));
    }
    let c = members[0].len();
    for m in members {
        if m.len() != c {
            return Err(Error::Infeasible("hull members of unequal length".into()));
        }
        let s: f64 = m.iter().sum();
        if (s - 1.0).abs() > 1e-6 || m.iter().any(|&x| x < -1e-12) {
            return Err(Error::Infeasible(format!("hull member is not a distribution (sum {s})")));
        }
    }
    let member_entropy: Vec<f64> = members.iter().map(|m| entropy_bits(m)).collect();
    let au = member_entropy.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_member_h = member_entropy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let m_count = members.len();
    let mut tu = if m_count == 1 {
        member_entropy[0]
    } else {
        // Mixture tracked directly; start from the uniform mixture.
        let mut q: Vec<f64> = (0..c)
            .map(|i| members.iter().map(|p| p[i]).sum::<f64>() / m_count as f64)
            .collect();
        for _ in 0..10_000 {
            // dH/dq_i in bits, clamped away from the q_i = 0 singularity:
            // such coordinates are only reachable when some member is
            // positive there, and the huge finite slope selects it anyway.
            let grad: Vec<f64> = q
                .iter()
                .map(|&x| -((x.max(1e-300)).log2() + 1.0 / LN_2))
                .collect();
            let score = |p: &[f64]| -> f64 { p.iter().zip(&grad).map(|(&a, &b)| a * b).sum() };
            let mut best = 0;
            let mut best_score = score(&members[0]);
            for (m, p) in members.iter().enumerate().skip(1) {
                let s = score(p);
                if s > best_score {
                    best = m;
                    best_score = s;
                }
            }
            let gap = best_score - score(&q);
            if gap < 1e-8 {
                break;
            }
            let target = &members[best];
            // Line search: phi(gamma) = H((1-gamma) q + gamma target) is
            // concave; bisect on the sign of its derivative.
            let dphi = |gamma: f64| -> f64 {
                let mut d = 0.0;
                for i in 0..c {
                    let mix = (1.0 - gamma) * q[i] + gamma * target[i];
                    d += (target[i] - q[i]) * -((mix.max(1e-300)).log2() + 1.0 / LN_2);
                }
                d
            };
            let gamma = if dphi(1.0) >= 0.0 {
                1.0
            } else {
                let (mut a, mut b) = (0.0f64, 1.0f64);
                for _ in 0..100 {
                    let mid = 0.5 * (a + b);
                    if dphi(mid) > 0.0 {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                0.5 * (a + b)
            };
            for i in 0..c {
                q[i] = (1.0 - gamma) * q[i] + gamma * target[i];
            }
        }
        entropy_bits(&q)
    };
    // Hull contains every member, so TU can never fall below the best
    // member entropy; enforce against line-search rounding.
    tu = tu.max(max_member_h);
    Ok((tu, au, tu - au))
}

/// Entropy-based decomposition for an ensemble of probability matrices
/// (Jensen gap form): per node, TU = H(mean prediction), AU = mean member
/// entropy, EU = TU - AU >= 0.
pub fn ensemble_entropy_decompose(members: &[Tensor]) -> Result<UncertaintyScores> {
    let first = members
        .first()
        .ok_or_else(|| Error::Infeasible("ensemble of zero members".into()))?;
    let (n, c) = first.shape();
    for m in members {
        if m.shape() != (n, c) {
            return Err(Error::shape(
                "ensemble_entropy_decompose",
                format!("member shape {:?} vs {:?}", m.shape(), (n, c)),
            ));
        }
    }
    let m_count = members.len() as f64;
    let mut tu = vec![0.0; n];
    let mut au = vec![0.0; n];
    let mut eu = vec![0.0; n];
    let mut mean = vec![0.0; c];
    for v in 0..n {
        mean.iter_mut().for_each(|x| *x = 0.0);
        let mut h_sum = 0.0;
        for m in members {
            let row = m.row(v);
            for (acc, &x) in mean.iter_mut().zip(row) {
                *acc += x / m_count;
            }
            h_sum += entropy_bits(row);
        }
        tu[v] = entropy_bits(&mean);
        au[v] = h_sum / m_count;
        eu[v] = (tu[v] - au[v]).max(0.0);
    }
    Ok(UncertaintyScores { tu, au, eu })
}

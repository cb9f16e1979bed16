//! Contextual stochastic block model generator. Class-conditional Gaussian
//! features around scaled one-hot means, block-structured edges. Setting
//! p_out > p_in produces heterophilic graphs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Csr, GraphDataset};
use crate::tape::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsbmParams {
    pub nodes_per_class: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub mean_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl CsbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_class < 1 || self.num_classes < 1 || self.feature_dim < 1 {
            return Err(Error::InvalidConfig("csbm counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return Err(Error::InvalidConfig("csbm edge probabilities must lie in [0,1]".into()));
        }
        if self.noise_sigma <= 0.0 {
            return Err(Error::InvalidConfig("csbm noise_sigma must be > 0".into()));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::InvalidConfig(
                "csbm feature_dim must be >= num_classes (class means are scaled one-hot axes)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Generate a cSBM graph. Node i belongs to class i / nodes_per_class; the
/// class-c mean is mean_separation * e_c. Fully seeded and reproducible.
pub fn generate_csbm(params: &CsbmParams) -> Result<GraphDataset> {
    params.validate()?;
    let n = params.nodes_per_class * params.num_classes;
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("bad noise_sigma: {e}")))?;

    let class_of = |v: usize| v / params.nodes_per_class;

    let mut features = Tensor::zeros(n, params.feature_dim);
    for v in 0..n {
        let c = class_of(v);
        let row = features.row_mut(v);
        for (d, x) in row.iter_mut().enumerate() {
            let mean = if d == c { params.mean_separation } else { 0.0 };
            *x = mean + noise.sample(&mut rng);
        }
    }

    let mut edge_list = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if class_of(u) == class_of(v) { params.p_in } else { params.p_out };
            if p > 0.0 && rng.gen::<f64>() < p {
                edge_list.push((u, v));
            }
        }
    }

    let labels: Vec<i64> = (0..n).map(|v| class_of(v) as i64).collect();
    let edges = Csr::from_edge_list(n, &edge_list)?;
    let name = format!(
        "csbm_c{}x{}_pin{}_pout{}_s{}",
        params.num_classes, params.nodes_per_class, params.p_in, params.p_out, params.seed
    );
    GraphDataset::new(n, params.num_classes, features, labels, edges, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> CsbmParams {
        CsbmParams {
            nodes_per_class: 30,
            num_classes: 3,
            p_in: 0.2,
            p_out: 0.05,
            feature_dim: 4,
            mean_separation: 1.0,
            noise_sigma: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn pure_intra_edges_give_homophily_one() {
        let params = CsbmParams { p_in: 0.5, p_out: 0.0, ..base() };
        let ds = generate_csbm(&params).unwrap();
        assert_eq!(ds.edge_homophily().unwrap(), 1.0);
    }

    #[test]
    fn pure_inter_edges_give_homophily_zero() {
        let params = CsbmParams { p_in: 0.0, p_out: 0.5, ..base() };
        let ds = generate_csbm(&params).unwrap();
        assert_eq!(ds.edge_homophily().unwrap(), 0.0);
    }

    #[test]
    fn same_seed_identical_dataset() {
        let a = generate_csbm(&base()).unwrap();
        let b = generate_csbm(&base()).unwrap();
        assert_eq!(a.features.as_slice(), b.features.as_slice());
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn feature_dim_must_cover_classes() {
        let params = CsbmParams { feature_dim: 2, ..base() };
        assert!(generate_csbm(&params).is_err());
    }

    #[test]
    fn intra_class_density_matches_p_in() {
        let params = CsbmParams {
            nodes_per_class: 200,
            num_classes: 2,
            p_in: 0.05,
            p_out: 0.01,
            feature_dim: 2,
            mean_separation: 1.0,
            noise_sigma: 1.0,
            seed: 5,
        };
        let ds = generate_csbm(&params).unwrap();
        let m = params.nodes_per_class;
        let intra_pairs = (params.num_classes * m * (m - 1) / 2) as f64;
        let intra_edges = ds
            .edges
            .undirected_edges()
            .filter(|&(u, v)| ds.labels[u] == ds.labels[v])
            .count() as f64;
        let p_hat = intra_edges / intra_pairs;
        let se = (params.p_in * (1.0 - params.p_in) / intra_pairs).sqrt();
        assert!(
            (p_hat - params.p_in).abs() <= 3.0 * se,
            "p_hat={p_hat} p_in={} se={se}",
            params.p_in
        );
    }
}

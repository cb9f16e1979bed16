//! Graph storage, normalization operators, dataset ingestion, leave-out-class
//! splitting, and synthetic graph generation.
//!
//! Graphs are undirected and stored in CSR form with no self-loops and no
//! duplicate edges; every dataset is symmetrized at load time. All types here
//! are immutable after construction and safe to share across workers.

mod csbm;
mod io;
mod operators;
mod split;

pub use csbm::{generate_csbm, CsbmParams};
pub use io::{load_dataset, save_dataset};
pub use operators::{gcn_normalize, row_normalize, SparseOperator};
pub use split::{leave_out_class_split, remap_id_labels};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Undirected adjacency in compressed sparse row form. Column indices within
/// each row are strictly increasing; edge (u,v) is present iff (v,u) is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl Csr {
    /// Build from an edge list. Drops self-loops, symmetrizes, deduplicates.
    pub fn from_edge_list(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Csr> {
        let mut pairs = std::collections::BTreeSet::new();
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidDataset(format!(
                    "edge ({u},{v}) references a node outside 0..{num_nodes}"
                )));
            }
            if u == v {
                continue;
            }
            pairs.insert((u, v));
            pairs.insert((v, u));
        }
        let mut row_ptr = vec![0usize; num_nodes + 1];
        for &(u, _) in &pairs {
            row_ptr[u + 1] += 1;
        }
        for i in 1..row_ptr.len() {
            row_ptr[i] += row_ptr[i - 1];
        }
        // BTreeSet iteration is already (u, v)-sorted, so columns land in
        // strictly increasing order within each row.
        let col_idx = pairs.iter().map(|&(_, v)| v).collect();
        Ok(Csr { row_ptr, col_idx })
    }

    pub fn num_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_ptr[u + 1] - self.row_ptr[u]
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    /// Each undirected edge once, as (u, v) with u < v, ascending.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes())
            .flat_map(move |u| self.neighbors(u).iter().map(move |&v| (u, v)))
            .filter(|&(u, v)| u < v)
    }

    /// Number of directed entries (twice the undirected edge count).
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }
}

/// An attributed node-classification graph.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub features: Tensor,
    pub labels: Vec<i64>,
    pub edges: Csr,
    pub name: String,
}

impl GraphDataset {
    pub fn new(
        num_nodes: usize,
        num_classes: usize,
        features: Tensor,
        labels: Vec<i64>,
        edges: Csr,
        name: String,
    ) -> Result<Self> {
        let ds = GraphDataset { num_nodes, num_classes, features, labels, edges, name };
        ds.validate()?;
        Ok(ds)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.num_nodes {
            return Err(Error::InvalidDataset(format!(
                "feature rows {} != num_nodes {}",
                self.features.rows(),
                self.num_nodes
            )));
        }
        if self.labels.len() != self.num_nodes {
            return Err(Error::InvalidDataset(format!(
                "label count {} != num_nodes {}",
                self.labels.len(),
                self.num_nodes
            )));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l < 0 || l >= self.num_classes as i64)
        {
            return Err(Error::InvalidDataset(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if self.edges.row_ptr.len() != self.num_nodes + 1 {
            return Err(Error::InvalidDataset("CSR row pointer length mismatch".into()));
        }
        for u in 0..self.num_nodes {
            let nbrs = self.edges.neighbors(u);
            for w in nbrs.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidDataset(format!(
                        "row {u} column indices not strictly increasing"
                    )));
                }
            }
            for &v in nbrs {
                if v >= self.num_nodes {
                    return Err(Error::InvalidDataset(format!("neighbor {v} out of range")));
                }
                if v == u {
                    return Err(Error::InvalidDataset(format!("self-loop stored at node {u}")));
                }
                if !self.edges.neighbors(v).binary_search(&u).is_ok() {
                    return Err(Error::InvalidDataset(format!("edge ({u},{v}) not symmetric")));
                }
            }
        }
        Ok(())
    }

    /// Fraction of undirected edges whose endpoints share a label.
    pub fn edge_homophily(&self) -> Result<f64> {
        let mut total = 0usize;
        let mut same = 0usize;
        for (u, v) in self.edges.undirected_edges() {
            total += 1;
            if self.labels[u] == self.labels[v] {
                same += 1;
            }
        }
        if total == 0 {
            return Err(Error::InvalidDataset(
                "undefined homophily: graph has no edges".into(),
            ));
        }
        Ok(same as f64 / total as f64)
    }
}

/// Split of the label space into in-distribution and out-of-distribution
/// classes for the leave-out-class protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    id_classes: Vec<usize>,
    ood_classes: Vec<usize>,
}

impl ClassPartition {
    pub fn new(mut id_classes: Vec<usize>, mut ood_classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        id_classes.sort_unstable();
        id_classes.dedup();
        ood_classes.sort_unstable();
        ood_classes.dedup();
        if id_classes.len() < 2 {
            return Err(Error::InvalidConfig(
                "partition needs at least two in-distribution classes".into(),
            ));
        }
        if id_classes.iter().chain(&ood_classes).any(|&c| c >= num_classes) {
            return Err(Error::InvalidConfig(format!(
                "partition references a class outside 0..{num_classes}"
            )));
        }
        if id_classes.iter().any(|c| ood_classes.binary_search(c).is_ok()) {
            return Err(Error::InvalidConfig("ID and OOD classes overlap".into()));
        }
        Ok(ClassPartition { id_classes, ood_classes })
    }

    /// ID classes are the complement of the given OOD classes.
    pub fn from_ood_classes(num_classes: usize, ood_classes: &[usize]) -> Result<Self> {
        let ood: std::collections::BTreeSet<usize> = ood_classes.iter().copied().collect();
        let id: Vec<usize> = (0..num_classes).filter(|c| !ood.contains(c)).collect();
        ClassPartition::new(id, ood.into_iter().collect(), num_classes)
    }

    pub fn id_classes(&self) -> &[usize] {
        &self.id_classes
    }

    pub fn ood_classes(&self) -> &[usize] {
        &self.ood_classes
    }

    pub fn num_id_classes(&self) -> usize {
        self.id_classes.len()
    }

    pub fn is_id(&self, class: i64) -> bool {
        class >= 0 && self.id_classes.binary_search(&(class as usize)).is_ok()
    }

    pub fn is_ood(&self, class: i64) -> bool {
        class >= 0 && self.ood_classes.binary_search(&(class as usize)).is_ok()
    }
}

/// Boolean train/val/test masks over nodes. Pairwise disjoint; the train mask
/// never covers an OOD-class node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    /// Structural checks that need no class partition: mask lengths match
    /// the node count and no node sits in more than one split.
    pub fn validate_shape(&self, num_nodes: usize) -> Result<()> {
        if self.train.len() != num_nodes
            || self.val.len() != num_nodes
            || self.test.len() != num_nodes
        {
            return Err(Error::InvalidConfig("mask length != num_nodes".into()));
        }
        for v in 0..num_nodes {
            let memberships = self.train[v] as u8 + self.val[v] as u8 + self.test[v] as u8;
            if memberships > 1 {
                return Err(Error::InvalidConfig(format!("node {v} in multiple splits")));
            }
        }
        Ok(())
    }

    pub fn validate(&self, dataset: &GraphDataset, partition: &ClassPartition) -> Result<()> {
        self.validate_shape(dataset.num_nodes)?;
        for v in 0..dataset.num_nodes {
            if self.train[v] && !partition.is_id(dataset.labels[v]) {
                return Err(Error::InvalidConfig(format!(
                    "node {v} with OOD label {} in train mask",
                    dataset.labels[v]
                )));
            }
        }
        Ok(())
    }

    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

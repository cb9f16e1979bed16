//! Leave-out-class splitting: OOD-class nodes are masked from training and
//! distributed over validation and test, where they must be detected.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::{ClassPartition, GraphDataset, SplitMasks};

/// Split nodes into train/val/test. ID-class nodes are split per class by the
/// given fractions; OOD-class nodes go to val and test only, in proportion
/// val_frac : (1 - train_frac - val_frac). Each ID class keeps at least one
/// node in every subset.
pub fn leave_out_class_split(
    dataset: &GraphDataset,
    partition: &ClassPartition,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<SplitMasks> {
    if !(0.0 < train_frac && train_frac < 1.0 && 0.0 < val_frac && val_frac < 1.0) {
        return Err(Error::InvalidConfig("split fractions must lie in (0,1)".into()));
    }
    if train_frac + val_frac >= 1.0 {
        return Err(Error::InvalidConfig("train_frac + val_frac must be < 1".into()));
    }
    let test_frac = 1.0 - train_frac - val_frac;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = dataset.num_nodes;
    let mut masks = SplitMasks { train: vec![false; n], val: vec![false; n], test: vec![false; n] };

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (v, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(v);
    }

    for &c in partition.id_classes() {
        let mut nodes = by_class[c].clone();
        if nodes.is_empty() {
            return Err(Error::InvalidConfig(format!("ID class {c} has no nodes")));
        }
        if nodes.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "ID class {c} has {} nodes; at least 3 are needed for non-empty train/val/test",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        let m = nodes.len();
        let mut n_train = ((train_frac * m as f64).floor() as usize).max(1);
        let mut n_val = ((val_frac * m as f64).floor() as usize).max(1);
        // keep at least one test node
        if n_train + n_val > m - 1 {
            let overflow = n_train + n_val - (m - 1);
            let cut = overflow.min(n_train - 1);
            n_train -= cut;
            n_val -= overflow - cut;
        }
        for (i, &v) in nodes.iter().enumerate() {
            if i < n_train {
                masks.train[v] = true;
            } else if i < n_train + n_val {
                masks.val[v] = true;
            } else {
                masks.test[v] = true;
            }
        }
    }

    let val_share = val_frac / (val_frac + test_frac);
    for &c in partition.ood_classes() {
        let mut nodes = by_class[c].clone();
        nodes.shuffle(&mut rng);
        let n_val = (val_share * nodes.len() as f64).floor() as usize;
        for (i, &v) in nodes.iter().enumerate() {
            if i < n_val {
                masks.val[v] = true;
            } else {
                masks.test[v] = true;
            }
        }
    }

    Ok(masks)
}

/// Remap labels so ID classes become contiguous 0..|C_ID|-1 in ascending
/// original order; every other node gets the sentinel -1 ("unknown").
pub fn remap_id_labels(labels: &[i64], partition: &ClassPartition) -> Vec<i64> {
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                return -1;
            }
            match partition.id_classes().binary_search(&(l as usize)) {
                Ok(new) => new as i64,
                Err(_) => -1,
            }
        })
        .collect()
}

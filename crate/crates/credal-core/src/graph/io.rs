//! Dataset directory format: `meta.json`, `edges.tsv`, `features.csv`,
//! `labels.txt`, and an optional `split.json`. Writes are canonical (edges
//! ascending with u < v, shortest round-trip float formatting, LF endings)
//! so saving the same dataset twice produces identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Csr, GraphDataset, SplitMasks};
use crate::tape::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    name: String,
    num_nodes: usize,
    num_classes: usize,
    feature_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load a dataset directory. The split file is optional; everything else is
/// required and validated against `meta.json` counts.
pub fn load_dataset(dir: &Path) -> Result<(GraphDataset, Option<SplitMasks>)> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read_to_string(&meta_path)?)
        .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
    if meta.num_nodes == 0 || meta.num_classes == 0 || meta.feature_dim == 0 {
        return Err(Error::InvalidDataset(format!(
            "meta.json for {} declares zero-sized dataset",
            meta.name
        )));
    }

    let feat_path = dir.join("features.csv");
    let mut features = Tensor::zeros(meta.num_nodes, meta.feature_dim);
    let mut rows = 0usize;
    for (lineno, line) in read_to_string(&feat_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if rows >= meta.num_nodes {
            return Err(Error::InvalidDataset(format!(
                "features.csv has more than {} rows",
                meta.num_nodes
            )));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != meta.feature_dim {
            return Err(Error::parse(
                &feat_path,
                format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 1,
                    meta.feature_dim,
                    fields.len()
                ),
            ));
        }
        let out = features.row_mut(rows);
        for (d, field) in fields.iter().enumerate() {
            let x: f64 = field.trim().parse().map_err(|_| {
                Error::parse(&feat_path, format!("line {}: bad float {field:?}", lineno + 1))
            })?;
            if !x.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "features.csv line {} contains non-finite value",
                    lineno + 1
                )));
            }
            out[d] = x;
        }
        rows += 1;
    }
    if rows != meta.num_nodes {
        return Err(Error::InvalidDataset(format!(
            "features.csv has {rows} rows, meta.json declares {}",
            meta.num_nodes
        )));
    }

    let labels_path = dir.join("labels.txt");
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (lineno, line) in read_to_string(&labels_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let y: i64 = line.trim().parse().map_err(|_| {
            Error::parse(&labels_path, format!("line {}: bad label {line:?}", lineno + 1))
        })?;
        labels.push(y);
    }
    if labels.len() != meta.num_nodes {
        return Err(Error::InvalidDataset(format!(
            "labels.txt has {} entries, meta.json declares {}",
            labels.len(),
            meta.num_nodes
        )));
    }

    let edges_path = dir.join("edges.tsv");
    let mut edge_list = Vec::new();
    for (lineno, line) in read_to_string(&edges_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let parse_end = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.trim().parse().ok()).ok_or_else(|| {
                Error::parse(&edges_path, format!("line {}: expected 'u\\tv'", lineno + 1))
            })
        };
        let u = parse_end(it.next())?;
        let v = parse_end(it.next())?;
        if it.next().is_some() {
            return Err(Error::parse(
                &edges_path,
                format!("line {}: expected exactly two fields", lineno + 1),
            ));
        }
        edge_list.push((u, v));
    }
    let edges = Csr::from_edge_list(meta.num_nodes, &edge_list)?;

    let dataset =
        GraphDataset::new(meta.num_nodes, meta.num_classes, features, labels, edges, meta.name)?;

    let split_path = dir.join("split.json");
    let split = if split_path.exists() {
        let sf: SplitFile = serde_json::from_str(&read_to_string(&split_path)?)
            .map_err(|e| Error::parse(&split_path, e.to_string()))?;
        let to_mask = |idx: &[usize], which: &str| -> Result<Vec<bool>> {
            let mut mask = vec![false; meta.num_nodes];
            for &v in idx {
                if v >= meta.num_nodes {
                    return Err(Error::InvalidDataset(format!(
                        "split.json {which} index {v} out of range (num_nodes={})",
                        meta.num_nodes
                    )));
                }
                mask[v] = true;
            }
            Ok(mask)
        };
        let masks = SplitMasks {
            train: to_mask(&sf.train, "train")?,
            val: to_mask(&sf.val, "val")?,
            test: to_mask(&sf.test, "test")?,
        };
        masks.validate_shape(dataset.num_nodes)?;
        Some(masks)
    } else {
        None
    };

    Ok((dataset, split))
}

/// Write a dataset directory in canonical form, creating `dir` if needed.
pub fn save_dataset(dir: &Path, dataset: &GraphDataset, split: Option<&SplitMasks>) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = Meta {
        name: dataset.name.clone(),
        num_nodes: dataset.num_nodes,
        num_classes: dataset.num_classes,
        feature_dim: dataset.features.cols(),
    };
    let mut meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::parse(&dir.join("meta.json"), e.to_string()))?;
    meta_json.push('\n');
    write_file(&dir.join("meta.json"), &meta_json)?;

    let mut feats = String::new();
    for v in 0..dataset.num_nodes {
        let row = dataset.features.row(v);
        for (d, x) in row.iter().enumerate() {
            if d > 0 {
                feats.push(',');
            }
            feats.push_str(&format!("{x}"));
        }
        feats.push('\n');
    }
    write_file(&dir.join("features.csv"), &feats)?;

    let mut labels = String::new();
    for &y in &dataset.labels {
        labels.push_str(&format!("{y}\n"));
    }
    write_file(&dir.join("labels.txt"), &labels)?;

    let mut edges = String::new();
    for (u, v) in dataset.edges.undirected_edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write_file(&dir.join("edges.tsv"), &edges)?;

    if let Some(masks) = split {
        masks.validate_shape(dataset.num_nodes)?;
        let indices = |mask: &[bool]| -> Vec<usize> {
            mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
        };
        let sf = SplitFile {
            train: indices(&masks.train),
            val: indices(&masks.val),
            test: indices(&masks.test),
        };
        let mut split_json = serde_json::to_string_pretty(&sf)
            .map_err(|e| Error::parse(&dir.join("split.json"), e.to_string()))?;
        split_json.push('\n');
        write_file(&dir.join("split.json"), &split_json)?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

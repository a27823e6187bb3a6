//! Versioned little-endian binary format for fitted classifiers.
//!
//! ```text
//! magic   b"SLRC"
//! version u32
//! kind    u8      0 zero, 1 constant, 2 linear, 3 mlp, 4 boosted
//! labels  u64
//! dim     u64
//! body:
//!   zero      (nothing)
//!   constant  labels x f64
//!   linear    labels*dim x f64 (row-major W)
//!   mlp       hidden u64, hidden*dim x f64 (U), labels*hidden x f64 (W)
//!   boosted   shrinkage f64, then per class: trees u64, then per tree:
//!             nodes u64, then per node in preorder:
//!               tag u8 = 0 (leaf): value f64
//!               tag u8 = 1 (split): feature u64, threshold f64, left u64, right u64
//! ```

use std::io::{Read, Write};

use super::{Classifier, Ensemble, LinearModel, MlpModel, Tree, TreeNode};
use crate::error::{invalid, Error, Result};

pub const CLASSIFIER_MAGIC: &[u8; 4] = b"SLRC";
pub const CLASSIFIER_VERSION: u32 = 1;

// Guards allocations against corrupt length fields.
const MAX_LEN: u64 = 1 << 32;

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_all(w: &mut impl Write, values: &[f64]) -> Result<()> {
    values.iter().try_for_each(|&v| put_f64(w, v))
}

pub(crate) fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => invalid("classifier data is truncated"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r)?))
}

pub(crate) fn get_len(r: &mut impl Read) -> Result<usize> {
    let v = get_u64(r)?;
    if v > MAX_LEN {
        return Err(invalid(format!("implausible length {v} in classifier data")));
    }
    Ok(v as usize)
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    let v = f64::from_le_bytes(get_bytes(r)?);
    if !v.is_finite() {
        return Err(invalid("non-finite value in classifier data"));
    }
    Ok(v)
}

fn get_all(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| get_f64(r)).collect()
}

pub fn write_classifier(w: &mut impl Write, classifier: &Classifier) -> Result<()> {
    w.write_all(CLASSIFIER_MAGIC)?;
    w.write_all(&CLASSIFIER_VERSION.to_le_bytes())?;
    let tag: u8 = match classifier {
        Classifier::Zero { .. } => 0,
        Classifier::Constant { .. } => 1,
        Classifier::Linear(_) => 2,
        Classifier::Mlp(_) => 3,
        Classifier::Boosted(_) => 4,
    };
    w.write_all(&[tag])?;
    put_u64(w, classifier.num_labels() as u64)?;
    put_u64(w, classifier.dim() as u64)?;
    match classifier {
        Classifier::Zero { .. } => {}
        Classifier::Constant { offsets, .. } => put_all(w, offsets)?,
        Classifier::Linear(m) => put_all(w, &m.weights)?,
        Classifier::Mlp(m) => {
            put_u64(w, m.hidden as u64)?;
            put_all(w, &m.input_weights)?;
            put_all(w, &m.output_weights)?;
        }
        Classifier::Boosted(e) => {
            put_f64(w, e.shrinkage())?;
            for class in 0..e.num_labels() {
                let trees = e.class_trees(class);
                put_u64(w, trees.len() as u64)?;
                for tree in trees {
                    put_u64(w, tree.nodes().len() as u64)?;
                    for node in tree.nodes() {
                        match *node {
                            TreeNode::Leaf { value } => {
                                w.write_all(&[0])?;
                                put_f64(w, value)?;
                            }
                            TreeNode::Split { feature, threshold, left, right } => {
                                w.write_all(&[1])?;
                                put_u64(w, feature as u64)?;
                                put_f64(w, threshold)?;
                                put_u64(w, left as u64)?;
                                put_u64(w, right as u64)?;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn read_classifier(r: &mut impl Read) -> Result<Classifier> {
    if &get_bytes::<4>(r)? != CLASSIFIER_MAGIC {
        return Err(invalid("not a classifier file (bad magic)"));
    }
    let version = u32::from_le_bytes(get_bytes(r)?);
    if version != CLASSIFIER_VERSION {
        return Err(invalid(format!(
            "unsupported classifier version {version} (expected {CLASSIFIER_VERSION})"
        )));
    }
    let [tag] = get_bytes::<1>(r)?;
    let num_labels = get_len(r)?;
    let dim = get_len(r)?;
    if num_labels < 2 {
        return Err(invalid(format!("classifier has {num_labels} labels")));
    }
    let classifier = match tag {
        0 => Classifier::Zero { num_labels, dim },
        1 => Classifier::Constant { dim, offsets: get_all(r, num_labels)? },
        2 => Classifier::Linear(LinearModel { num_labels, dim, weights: get_all(r, num_labels * dim)? }),
        3 => {
            let hidden = get_len(r)?;
            let input_weights = get_all(r, hidden * dim)?;
            let output_weights = get_all(r, num_labels * hidden)?;
            Classifier::Mlp(MlpModel { num_labels, dim, hidden, input_weights, output_weights })
        }
        4 => {
            let shrinkage = get_f64(r)?;
            let mut trees = Vec::with_capacity(num_labels);
            for _ in 0..num_labels {
                let count = get_len(r)?;
                let mut class_trees = Vec::new();
                for _ in 0..count {
                    let nodes = get_len(r)?;
                    let mut list = Vec::new();
                    for _ in 0..nodes {
                        let [node_tag] = get_bytes::<1>(r)?;
                        list.push(match node_tag {
                            0 => TreeNode::Leaf { value: get_f64(r)? },
                            1 => TreeNode::Split {
                                feature: get_len(r)?,
                                threshold: get_f64(r)?,
                                left: get_len(r)?,
                                right: get_len(r)?,
                            },
                            other => return Err(invalid(format!("unknown tree node tag {other}"))),
                        });
                    }
                    class_trees.push(Tree::from_nodes(list)?);
                }
                trees.push(class_trees);
            }
            Classifier::Boosted(Ensemble::from_trees(dim, shrinkage, trees)?)
        }
        other => return Err(invalid(format!("unknown classifier kind tag {other}"))),
    };
    Ok(classifier)
}

//! Examples and datasets, the synthetic denoising generator, image feature
//! extraction, and on-disk formats.

mod denoise;
mod format;
mod image;

pub use self::denoise::{gaussian_blur, gen_denoising, GenConfig};
pub use self::format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use self::image::{
    example_from_image, extract_image_features, ingest_images, load_label_mask, load_rgb_image, write_label_image,
    RgbImage, IMAGE_D_PAIRWISE, IMAGE_D_UNARY,
};

use crate::error::{invalid, mismatch, Result};
use crate::graph::RegionGraph;

/// One structured input: a graph, per-node and per-edge local features, and
/// optionally the gold labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    graph: RegionGraph,
    d_unary: usize,
    d_pairwise: usize,
    /// `num_vars x d_unary`, row-major.
    unary: Vec<f64>,
    /// `num_edges x d_pairwise`, row-major, in graph edge order.
    pairwise: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Example {
    pub fn new(
        graph: RegionGraph,
        d_unary: usize,
        unary: Vec<f64>,
        d_pairwise: usize,
        pairwise: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if unary.len() != graph.num_vars() * d_unary {
            return Err(mismatch(format!(
                "expected {} unary feature values ({} nodes x {d_unary}), got {}",
                graph.num_vars() * d_unary,
                graph.num_vars(),
                unary.len()
            )));
        }
        if pairwise.len() != graph.num_edges() * d_pairwise {
            return Err(mismatch(format!(
                "expected {} pairwise feature values ({} edges x {d_pairwise}), got {}",
                graph.num_edges() * d_pairwise,
                graph.num_edges(),
                pairwise.len()
            )));
        }
        if unary.iter().chain(&pairwise).any(|v| !v.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        if let Some(labels) = &labels {
            graph.check_labeling(labels)?;
        }
        Ok(Self { graph, d_unary, d_pairwise, unary, pairwise, labels })
    }

    pub fn graph(&self) -> &RegionGraph {
        &self.graph
    }

    pub fn d_unary(&self) -> usize {
        self.d_unary
    }

    pub fn d_pairwise(&self) -> usize {
        self.d_pairwise
    }

    pub fn unary_features(&self, node: usize) -> &[f64] {
        &self.unary[node * self.d_unary..(node + 1) * self.d_unary]
    }

    pub fn pairwise_features(&self, edge: usize) -> &[f64] {
        &self.pairwise[edge * self.d_pairwise..(edge + 1) * self.d_pairwise]
    }

    pub fn unary_values(&self) -> &[f64] {
        &self.unary
    }

    pub fn pairwise_values(&self) -> &[f64] {
        &self.pairwise
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn without_labels(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }
}

/// Examples sharing a label count and feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_labels: usize,
    d_unary: usize,
    d_pairwise: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(num_labels: usize, d_unary: usize, d_pairwise: usize, examples: Vec<Example>) -> Result<Self> {
        for (k, ex) in examples.iter().enumerate() {
            if ex.graph.num_labels() != num_labels || ex.d_unary != d_unary || ex.d_pairwise != d_pairwise {
                return Err(mismatch(format!(
                    "example {k} has L={}, d_unary={}, d_pairwise={}; dataset has L={num_labels}, \
                     d_unary={d_unary}, d_pairwise={d_pairwise}",
                    ex.graph.num_labels(),
                    ex.d_unary,
                    ex.d_pairwise
                )));
            }
        }
        Ok(Self { num_labels, d_unary, d_pairwise, examples })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn d_unary(&self) -> usize {
        self.d_unary
    }

    pub fn d_pairwise(&self) -> usize {
        self.d_pairwise
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn total_vars(&self) -> usize {
        self.examples.iter().map(|e| e.graph.num_vars()).sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.labels.is_some())
    }

    /// The first `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        Self { examples: self.examples.iter().take(n).cloned().collect(), ..self.clone() }
    }
}

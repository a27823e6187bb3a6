//! Synthetic binary denoising data: blurred uniform noise thresholded into
//! blobs, observed through overlapping uniform feature distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, Example};
use crate::error::{invalid, mismatch, Result};
use crate::graph::RegionGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_train: usize,
    pub num_test: usize,
    pub width: usize,
    pub height: usize,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { num_train: 16, num_test: 16, width: 100, height: 100, blur_sigma: 10.0, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("image size must be positive, got {}x{}", self.width, self.height)));
        }
        if self.num_train + self.num_test == 0 {
            return Err(invalid("at least one image must be generated"));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(invalid(format!("blur sigma must be positive, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

fn blur_pass(input: &[f64], output: &mut [f64], len: usize, stride: usize, lines: usize, line_step: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as isize;
    for line in 0..lines {
        let base = line * line_step;
        for p in 0..len as isize {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, w) in kernel.iter().enumerate() {
                let q = p + t as isize - radius;
                if q >= 0 && q < len as isize {
                    acc += w * input[base + q as usize * stride];
                    norm += w;
                }
            }
            output[base + p as usize * stride] = acc / norm;
        }
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur of a row-major `width x height` field. The kernel
/// is truncated at `ceil(3 sigma)` and renormalized where it overhangs the
/// border.
pub fn gaussian_blur(field: &[f64], width: usize, height: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    if field.len() != width * height {
        return Err(mismatch(format!("field has {} values, expected {width}x{height}", field.len())));
    }
    let kernel = gaussian_kernel(sigma);
    let mut rows = vec![0.0; field.len()];
    blur_pass(field, &mut rows, width, 1, height, width, &kernel);
    let mut out = vec![0.0; field.len()];
    blur_pass(&rows, &mut out, height, width, width, 1, &kernel);
    Ok(out)
}

fn gen_image(cfg: &GenConfig, stream: u64) -> Result<Example> {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let field: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
    let smooth = gaussian_blur(&field, w, h, cfg.blur_sigma)?;
    let labels: Vec<usize> = smooth.iter().map(|&v| usize::from(v >= 0.5)).collect();

    let mut unary = Vec::with_capacity(2 * w * h);
    for &y in &labels {
        let phi = if y == 0 { rng.gen_range(0.0..=0.9) } else { rng.gen_range(0.1..=1.0) };
        unary.extend([phi, 1.0]);
    }
    let graph = RegionGraph::grid(w, h, 2)?;
    let mut pairwise = Vec::with_capacity(2 * graph.num_edges());
    for e in 0..graph.num_edges() {
        let (i, j) = graph.edge_vars(e);
        let phi = if labels[i] == labels[j] { rng.gen_range(0.0..=0.8) } else { rng.gen_range(0.2..=1.0) };
        pairwise.extend([phi, 1.0]);
    }
    Example::new(graph, 2, unary, 2, pairwise, Some(labels))
}

/// Generates `(train, test)` denoising datasets. Image `k` (train images
/// first) draws from its own stream of the seeded generator, so results do
/// not depend on thread scheduling.
pub fn gen_denoising(config: &GenConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let total = config.num_train + config.num_test;
    let mut examples: Vec<Example> =
        (0..total).into_par_iter().map(|k| gen_image(config, k as u64)).collect::<Result<_>>()?;
    let test = examples.split_off(config.num_train);
    Ok((Dataset::new(2, 2, 2, examples)?, Dataset::new(2, 2, 2, test)?))
}

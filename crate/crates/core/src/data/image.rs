//! Generic image features on a 4-connected pixel grid, pixmap/graymap input,
//! and graymap output of labelings.
//!
//! Unary features per pixel: `1, R, G, B, x / W, y / H` with channels in
//! `[0, 1]`. Pairwise features per edge: `1`, the Euclidean RGB distance of
//! the two pixels, and the Sobel gradient magnitude of the gray image
//! averaged over the two pixels, scaled into `[0, 1]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::ImageReader;

use super::{Dataset, Example};
use crate::error::{invalid, mismatch, Result};
use crate::graph::RegionGraph;

pub const IMAGE_D_UNARY: usize = 6;
pub const IMAGE_D_PAIRWISE: usize = 3;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(mismatch(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        if pixels.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel channels must lie in [0, 1]"));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let malformed = |e: &dyn std::fmt::Display| invalid(format!("malformed image {}: {e}", path.display()));
    ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| malformed(&e))
}

/// Reads a portable pixmap or graymap as RGB.
pub fn load_rgb_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = decode(path.as_ref())?.to_rgb8();
    let pixels = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    RgbImage::new(img.width() as usize, img.height() as usize, pixels)
}

/// Reads a graymap of labels; intensity `v` maps to the nearest of the `L`
/// evenly spaced levels `label * 255 / (L - 1)`. Returns `(labels, width, height)`.
pub fn load_label_mask(path: impl AsRef<Path>, num_labels: usize) -> Result<(Vec<usize>, usize, usize)> {
    if num_labels < 2 {
        return Err(invalid("a label mask needs at least 2 labels"));
    }
    let img = decode(path.as_ref())?.to_luma8();
    let scale = (num_labels - 1) as f64 / 255.0;
    let labels = img.pixels().map(|p| (p.0[0] as f64 * scale).round() as usize).collect();
    Ok((labels, img.width() as usize, img.height() as usize))
}

fn gray(img: &RgbImage) -> Vec<f64> {
    img.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Sobel gradient magnitude per pixel with replicated borders, divided by
/// its largest possible value `4 * sqrt(2)`.
fn sobel_magnitude(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        values[y * w + x]
    };
    let scale = 4.0 * 2f64.sqrt();
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt() / scale;
        }
    }
    out
}

/// Builds a grid example from an image and optional labels.
pub fn example_from_image(img: &RgbImage, num_labels: usize, labels: Option<Vec<usize>>) -> Result<Example> {
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return Err(invalid(format!("images must be at least 2x2, got {w}x{h}")));
    }
    let graph = RegionGraph::grid(w, h, num_labels)?;
    let mut unary = Vec::with_capacity(IMAGE_D_UNARY * w * h);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.pixel(x, y);
            unary.extend([1.0, r, g, b, x as f64 / w as f64, y as f64 / h as f64]);
        }
    }
    let sobel = sobel_magnitude(&gray(img), w, h);
    let mut pairwise = Vec::with_capacity(IMAGE_D_PAIRWISE * graph.num_edges());
    for e in 0..graph.num_edges() {
        let (i, j) = graph.edge_vars(e);
        let (a, b) = (img.pixels[i], img.pixels[j]);
        let dist = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        pairwise.extend([1.0, dist, (sobel[i] + sobel[j]) / 2.0]);
    }
    Example::new(graph, IMAGE_D_UNARY, unary, IMAGE_D_PAIRWISE, pairwise, labels)
}

/// Unlabeled example carrying the image's features.
pub fn extract_image_features(img: &RgbImage, num_labels: usize) -> Result<Example> {
    example_from_image(img, num_labels, None)
}

/// Loads `(image, optional mask)` pairs into one dataset.
pub fn ingest_images<P: AsRef<Path>>(items: &[(P, Option<P>)], num_labels: usize) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(items.len());
    for (image_path, mask_path) in items {
        let img = load_rgb_image(image_path)?;
        let labels = match mask_path {
            Some(mask) => {
                let (labels, w, h) = load_label_mask(mask, num_labels)?;
                if (w, h) != (img.width, img.height) {
                    return Err(mismatch(format!(
                        "mask {} is {w}x{h} but image {} is {}x{}",
                        mask.as_ref().display(),
                        image_path.as_ref().display(),
                        img.width,
                        img.height
                    )));
                }
                Some(labels)
            }
            None => None,
        };
        examples.push(example_from_image(&img, num_labels, labels)?);
    }
    Dataset::new(num_labels, IMAGE_D_UNARY, IMAGE_D_PAIRWISE, examples)
}

/// Writes a binary graymap (P5) with intensity `label * 255 / (L - 1)`.
pub fn write_label_image(
    path: impl AsRef<Path>,
    labels: &[usize],
    width: usize,
    height: usize,
    num_labels: usize,
) -> Result<()> {
    if labels.len() != width * height {
        return Err(mismatch(format!("{} labels for a {width}x{height} image", labels.len())));
    }
    if num_labels < 2 {
        return Err(invalid("need at least 2 labels"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_labels) {
        return Err(invalid(format!("label {bad} out of range for {num_labels} labels")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> =
        labels.iter().map(|&y| ((y * 255) as f64 / (num_labels - 1) as f64).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_gray(path: &Path) -> Vec<u8> {
        image::open(path).unwrap().to_luma8().into_raw()
    }

    #[test]
    fn uniform_gray_has_no_edges() {
        let img = RgbImage::new(4, 3, vec![[0.5; 3]; 12]).unwrap();
        let ex = extract_image_features(&img, 2).unwrap();
        for e in 0..ex.graph().num_edges() {
            assert_eq!(ex.pairwise_features(e), &[1.0, 0.0, 0.0]);
        }
        assert_eq!(&ex.unary_features(0)[4..], &[0.0, 0.0]);
        assert_eq!(ex.unary_features(0)[0], 1.0);
    }

    #[test]
    fn vertical_step_peaks_on_crossing_edges() {
        // Columns 0..3 black, 3..6 white; 8 rows.
        let (w, h) = (6, 8);
        let pixels = (0..w * h).map(|k| if k % w < 3 { [0.0; 3] } else { [1.0; 3] }).collect();
        let ex = extract_image_features(&RgbImage::new(w, h, pixels).unwrap(), 2).unwrap();
        let g = ex.graph();
        let sobel: Vec<f64> = (0..g.num_edges()).map(|e| ex.pairwise_features(e)[2]).collect();
        let max = sobel.iter().cloned().fold(0.0, f64::max);
        // Each pixel beside the step sees gx = 4, gy = 0.
        assert!((max - 4.0 / (4.0 * 2f64.sqrt())).abs() < 1e-12);
        for (e, &s) in sobel.iter().enumerate() {
            let (i, j) = g.edge_vars(e);
            let (ci, cj) = (i % w, j % w);
            if (ci, cj) == (2, 3) {
                assert_eq!(s, max);
                assert!((ex.pairwise_features(e)[1] - 3f64.sqrt()).abs() < 1e-12);
            }
            if ci == 0 && cj == 0 || ci == 5 && cj == 5 {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn tiny_images_rejected() {
        let img = RgbImage::new(1, 3, vec![[0.0; 3]; 3]).unwrap();
        assert!(extract_image_features(&img, 2).is_err());
    }

    #[test]
    fn label_images_round_trip_through_reference_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.pgm");
        write_label_image(&path, &[0; 6], 3, 2, 2).unwrap();
        assert_eq!(read_gray(&path), vec![0; 6]);

        let checker: Vec<usize> = (0..20).map(|k| (k % 5 + k / 5) % 2).collect();
        write_label_image(&path, &checker, 5, 4, 2).unwrap();
        let expected: Vec<u8> = checker.iter().map(|&y| (y * 255) as u8).collect();
        assert_eq!(read_gray(&path), expected);
        let (labels, w, h) = load_label_mask(&path, 2).unwrap();
        assert_eq!((labels, w, h), (checker, 5, 4));

        assert!(write_label_image(&path, &[2], 1, 1, 2).is_err());
    }

    #[test]
    fn ingests_pixmaps_with_masks() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("a.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
        std::fs::write(&img_path, bytes).unwrap();
        let mask_path = dir.path().join("a.pgm");
        write_label_image(&mask_path, &[0, 1, 1, 0], 2, 2, 2).unwrap();
        let d = ingest_images(&[(img_path.clone(), Some(mask_path)), (img_path, None)], 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.examples()[0].labels(), Some(&[0, 1, 1, 0][..]));
        assert_eq!(d.examples()[0].unary_features(1), &[1.0, 0.0, 1.0, 0.0, 0.5, 0.0]);
        assert!(d.examples()[1].labels().is_none());
    }
}

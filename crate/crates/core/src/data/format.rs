//! Line-oriented dataset files.
//!
//! Line 1 is a JSON header:
//!
//! ```text
//! {"format":"slr-dataset","version":1,"num_examples":N,"num_labels":L,"d_unary":du,"d_pairwise":dp}
//! ```
//!
//! followed by exactly `N` lines, one JSON record per example. Grid examples
//! carry `width` and `height`; other graphs carry `num_vars` and `edges`
//! (`[[i, j], ...]`). Every record has `unary` (node-major, `du` values per
//! node), `pairwise` (edge-major in graph edge order, `dp` per edge) and
//! `labels` (`null` when unlabeled).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::graph::RegionGraph;

pub const DATASET_FORMAT: &str = "slr-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    num_examples: usize,
    num_labels: usize,
    d_unary: usize,
    d_pairwise: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_vars: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[usize; 2]>>,
    unary: Vec<f64>,
    pairwise: Vec<f64>,
    labels: Option<Vec<usize>>,
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

pub fn write_dataset(w: &mut impl Write, dataset: &Dataset) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        num_examples: dataset.len(),
        num_labels: dataset.num_labels(),
        d_unary: dataset.d_unary(),
        d_pairwise: dataset.d_pairwise(),
    };
    serde_json::to_writer(&mut *w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for ex in dataset.examples() {
        let g = ex.graph();
        let (width, height, num_vars, edges) = match g.grid_dims() {
            Some((w, h)) => (Some(w), Some(h), None, None),
            None => {
                let edges = (0..g.num_edges()).map(|e| g.edge_vars(e)).map(|(i, j)| [i, j]).collect();
                (None, None, Some(g.num_vars()), Some(edges))
            }
        };
        let record = Record {
            width,
            height,
            num_vars,
            edges,
            unary: ex.unary_values().to_vec(),
            pairwise: ex.pairwise_values().to_vec(),
            labels: ex.labels().map(<[usize]>::to_vec),
        };
        serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn graph_of(record: &Record, num_labels: usize, line: usize) -> Result<RegionGraph> {
    let graph = match (record.width, record.height, record.num_vars, &record.edges) {
        (Some(w), Some(h), None, None) => RegionGraph::grid(w, h, num_labels),
        (None, None, Some(n), Some(edges)) => {
            let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
            RegionGraph::from_edges(n, num_labels, &pairs)
        }
        _ => return Err(parse_error(line, "record needs either width/height or num_vars/edges")),
    };
    graph.map_err(|e| parse_error(line, e.to_string()))
}

pub fn read_dataset(r: impl BufRead) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| parse_error(1, "empty file, expected a dataset header"))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_error(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_error(1, format!("format is `{}`, expected `{DATASET_FORMAT}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(parse_error(
            1,
            format!("unsupported dataset version {} (expected {DATASET_VERSION})", header.version),
        ));
    }
    let mut examples = Vec::with_capacity(header.num_examples.min(1 << 16));
    for k in 0..header.num_examples {
        let line = k + 2;
        let text = match lines.next() {
            Some(text) => text?,
            None => {
                return Err(parse_error(
                    line,
                    format!("file ends before example {k} (header promises {})", header.num_examples),
                ))
            }
        };
        let record: Record =
            serde_json::from_str(&text).map_err(|e| parse_error(line, format!("example {k}: {e}")))?;
        let graph = graph_of(&record, header.num_labels, line)?;
        let example = Example::new(
            graph,
            header.d_unary,
            record.unary,
            header.d_pairwise,
            record.pairwise,
            record.labels,
        )
        .map_err(|e| parse_error(line, format!("example {k}: {e}")))?;
        examples.push(example);
    }
    let extra = header.num_examples + 2;
    for (offset, rest) in lines.enumerate() {
        if !rest?.trim().is_empty() {
            return Err(parse_error(extra + offset, "unexpected content after the last example"));
        }
    }
    Dataset::new(header.num_labels, header.d_unary, header.d_pairwise, examples)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

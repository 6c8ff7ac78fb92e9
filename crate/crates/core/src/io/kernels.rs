//! Kernel bundle files: `.svk` text header plus sibling `.raw` float32
//! payload.
//!
//! The header lists the chain labels, discount, iteration count, and one
//! `edge` line per directed kernel: `edge <from> <to> <side> <ax> <ay> <az>`.
//! Edges appear in a fixed order — every up edge (`labels[e] -> labels[e+1]`)
//! first, then every down edge — and the payload concatenates the kernel
//! arrays in exactly that order.

use std::path::Path;

use super::header::Header;
use super::{payload_path, read_f32_payload, write_f32_payload, FormatError};
use crate::message::{ChainGraph, DisplacementKernel};

const FORMAT: &str = "kernel-bundle";
const VERSION: u32 = 1;

/// Unit-sum tolerance for reloaded kernels; float32 quantization of a kernel
/// that summed to 1 in f64 can drift by a few ulps per element.
const RELOAD_SUM_TOL: f64 = 1e-5;

fn edge_values(from: &str, to: &str, k: &DisplacementKernel) -> Vec<String> {
    let a = k.anchor();
    vec![
        from.to_string(),
        to.to_string(),
        k.side().to_string(),
        a[0].to_string(),
        a[1].to_string(),
        a[2].to_string(),
    ]
}

/// Writes `graph` as a header at `path` (conventionally `.svk`) and the
/// kernel weights in a sibling `.raw` file, quantized to float32.
pub fn write_kernels(path: &Path, graph: &ChainGraph) -> Result<(), FormatError> {
    let raw = payload_path(path);
    let labels = graph.labels();
    let edges = labels.len() - 1;
    let mut h = Header::new();
    h.push("labels", labels);
    h.push_f64s("alpha", &[graph.alpha()]);
    h.push_usizes("iterations", &[graph.iterations()]);
    let mut payload = Vec::new();
    for e in 0..edges {
        let k = graph.up_kernel(e);
        h.push("edge", &edge_values(&labels[e], &labels[e + 1], k));
        payload.extend_from_slice(k.weights());
    }
    for e in 0..edges {
        let k = graph.down_kernel(e);
        h.push("edge", &edge_values(&labels[e + 1], &labels[e], k));
        payload.extend_from_slice(k.weights());
    }
    h.push_str("dtype", "float32");
    h.push_str("byteorder", "little");
    h.push_str(
        "payload",
        raw.file_name()
            .expect("payload path has a file name")
            .to_str()
            .expect("payload file name is utf-8"),
    );
    h.write(path, FORMAT, VERSION)?;
    write_f32_payload(&raw, &payload)
}

struct EdgeLine {
    from: String,
    to: String,
    half_width: usize,
    anchor: [i64; 3],
    len: usize,
}

fn parse_edge(path: &Path, vals: &[String]) -> Result<EdgeLine, FormatError> {
    if vals.len() != 6 {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("edge line wants 6 values, has {}", vals.len()),
        ));
    }
    let side: usize = vals[2]
        .parse()
        .map_err(|_| FormatError::malformed(path, FORMAT, format!("bad side {:?}", vals[2])))?;
    if side == 0 || side % 2 == 0 {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("kernel side {side} must be odd"),
        ));
    }
    let mut anchor = [0i64; 3];
    for (a, v) in anchor.iter_mut().zip(&vals[3..6]) {
        *a = v
            .parse()
            .map_err(|_| FormatError::malformed(path, FORMAT, format!("bad anchor {v:?}")))?;
    }
    Ok(EdgeLine {
        from: vals[0].clone(),
        to: vals[1].clone(),
        half_width: (side - 1) / 2,
        anchor,
        len: side * side * side,
    })
}

/// Reads a chain graph written by [`write_kernels`].
pub fn read_kernels(path: &Path) -> Result<ChainGraph, FormatError> {
    let h = Header::read(path, FORMAT, VERSION)?;
    let labels: Vec<String> = h.require(path, FORMAT, "labels")?.to_vec();
    if labels.len() < 2 {
        return Err(FormatError::malformed(path, FORMAT, "need >= 2 labels"));
    }
    let [alpha] = h.require_f64s(path, FORMAT, "alpha")?;
    let [iterations] = h.require_usizes(path, FORMAT, "iterations")?;
    let dtype = h.require_str(path, FORMAT, "dtype")?;
    if dtype != "float32" {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("unsupported dtype {dtype:?}"),
        ));
    }
    let order = h.require_str(path, FORMAT, "byteorder")?;
    if order != "little" {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("unsupported byteorder {order:?}"),
        ));
    }
    let payload_name = h.require_str(path, FORMAT, "payload")?;
    let raw = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(payload_name);

    let edges = labels.len() - 1;
    let lines = h.all("edge");
    if lines.len() != 2 * edges {
        return Err(FormatError::malformed(
            path,
            FORMAT,
            format!("{} labels want {} edges, found {}", labels.len(), 2 * edges, lines.len()),
        ));
    }
    let parsed: Vec<EdgeLine> = lines
        .iter()
        .map(|vals| parse_edge(path, vals))
        .collect::<Result<_, _>>()?;
    for (e, line) in parsed.iter().enumerate() {
        let (want_from, want_to) = if e < edges {
            (&labels[e], &labels[e + 1])
        } else {
            (&labels[e - edges + 1], &labels[e - edges])
        };
        if &line.from != want_from || &line.to != want_to {
            return Err(FormatError::malformed(
                path,
                FORMAT,
                format!(
                    "edge {} is {} -> {}, expected {want_from} -> {want_to}",
                    e, line.from, line.to
                ),
            ));
        }
    }

    let total: usize = parsed.iter().map(|l| l.len).sum();
    let flat = read_f32_payload(&raw, total)?;
    let mut off = 0;
    let mut kernels = Vec::with_capacity(parsed.len());
    for line in &parsed {
        let weights = flat[off..off + line.len].to_vec();
        off += line.len;
        kernels.push(
            DisplacementKernel::from_raw(line.half_width, line.anchor, weights, RELOAD_SUM_TOL)
                .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))?,
        );
    }
    let down = kernels.split_off(edges);
    ChainGraph::new(labels, kernels, down, alpha, iterations)
        .map_err(|e| FormatError::malformed(path, FORMAT, e.to_string()))
}

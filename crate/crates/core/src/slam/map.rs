//! Global descriptor map persisted in the tensor container.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::encoder::DescriptorSet;
use crate::geometry::Point3;
use crate::numerics::checkpoint::{read_tensors, write_tensors};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Writes `map.coords` (M×3), `map.feats` (M×C) and `map.frames` (M×1).
pub fn write_descriptor_map(path: &Path, map: &[DescriptorSet]) -> Result<()> {
    let total: usize = map.iter().map(DescriptorSet::len).sum();
    let dim = map.iter().find(|d| !d.is_empty()).map_or(0, |d| d.feats.cols());
    let mut coords = Vec::with_capacity(3 * total);
    let mut feats = Vec::with_capacity(dim * total);
    let mut frames = Vec::with_capacity(total);
    for d in map {
        if !d.is_empty() && d.feats.cols() != dim {
            return Err(Error::LengthMismatch(d.feats.cols(), dim));
        }
        for (i, p) in d.coords.iter().enumerate() {
            coords.extend_from_slice(&p.to_array());
            feats.extend_from_slice(d.feats.row(i));
            frames.push(d.source_frame as f64);
        }
    }
    let coords = Tensor::from_vec(total, 3, coords)?;
    let feats = Tensor::from_vec(total, dim, feats)?;
    let frames = Tensor::from_vec(total, 1, frames)?;
    let w = BufWriter::new(File::create(path)?);
    write_tensors(w, [("map.coords", &coords), ("map.feats", &feats), ("map.frames", &frames)])
}

/// Reads a map written by [`write_descriptor_map`], one set per frame in
/// order of first appearance.
pub fn read_descriptor_map(path: &Path) -> Result<Vec<DescriptorSet>> {
    let tensors = read_tensors(BufReader::new(File::open(path)?))?;
    let get = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("descriptor map", format!("missing tensor `{name}`")))
    };
    let (coords, feats, frames) = (get("map.coords")?, get("map.feats")?, get("map.frames")?);
    let m = coords.rows();
    if feats.rows() != m || frames.rows() != m {
        return Err(Error::LengthMismatch(feats.rows().min(frames.rows()), m));
    }
    let mut out: Vec<DescriptorSet> = Vec::new();
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for i in 0..m {
        let frame = frames.row(i)[0] as usize;
        let slot = match out.iter().position(|d| d.source_frame == frame) {
            Some(s) => s,
            None => {
                out.push(DescriptorSet {
                    coords: Vec::new(),
                    feats: Tensor::zeros(0, feats.cols()),
                    source_frame: frame,
                    labels: None,
                });
                rows.push(Vec::new());
                out.len() - 1
            }
        };
        let c = coords.row(i);
        out[slot].coords.push(Point3::new(c[0], c[1], c[2]));
        rows[slot].push(i);
    }
    for (d, idx) in out.iter_mut().zip(rows) {
        let data = idx.iter().flat_map(|&i| feats.row(i).iter().copied()).collect();
        d.feats = Tensor::from_vec(idx.len(), feats.cols(), data)?;
    }
    Ok(out)
}

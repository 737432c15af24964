//! Flat binary parameter files.
//!
//! Layout, all little-endian: `u64` layer count, then per layer `u64`
//! fan-out and `u64` fan-in, then for each layer the row-major weights
//! followed by the bias as `f64`. A text sidecar lists the shapes and the
//! seed parameters were initialized from.

use std::io::{Read, Write};
use std::path::Path;

use super::{LayerParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_params(params: &ModelParams, mut out: impl Write) -> Result<()> {
    out.write_all(&(params.layers.len() as u64).to_le_bytes())?;
    for l in &params.layers {
        out.write_all(&(l.fan_out() as u64).to_le_bytes())?;
        out.write_all(&(l.fan_in() as u64).to_le_bytes())?;
    }
    for l in &params.layers {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(input: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::parse("parameter header", format!("reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_params(mut input: impl Read) -> Result<ModelParams> {
    let count = read_u64(&mut input, "layer count")? as usize;
    if count > 1 << 20 {
        return Err(Error::parse(
            "parameter header",
            format!("implausible layer count {count}"),
        ));
    }
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let rows = read_u64(&mut input, &format!("layer {i} fan-out"))? as usize;
        let cols = read_u64(&mut input, &format!("layer {i} fan-in"))? as usize;
        shapes.push((rows, cols));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, (rows, cols)) in shapes.into_iter().enumerate() {
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; n * 8];
            input
                .read_exact(&mut bytes)
                .map_err(|e| Error::parse(format!("layer {i} values"), e.to_string()))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let w = read_block(rows * cols)?;
        let b = read_block(rows)?;
        layers.push(LayerParams {
            weight: Tensor::matrix(rows, cols, w)?,
            bias: Tensor::vector(b),
        });
    }
    Ok(ModelParams { layers })
}

pub fn write_sidecar(params: &ModelParams, seed: u64, path: &Path) -> Result<()> {
    let mut text = format!("seed = {seed}\nlayers = {}\n", params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        text.push_str(&format!(
            "layer{} = {}x{}\n",
            i + 1,
            l.fan_out(),
            l.fan_in()
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_sidecar_seed(path: &Path) -> Result<u64> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .find_map(|l| l.strip_prefix("seed = "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing seed line"))
}

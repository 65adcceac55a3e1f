//! Flat binary serialization for parameter sets (little-endian f64).
//!
//! Layout: u64 tensor count, then per tensor: u64 ndim, u64 dims..., f64 data.

use ndarray::{ArrayD, IxDyn};

use crate::error::{D2rError, Result};

pub fn write_params(params: &[&ArrayD<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.ndim() as u64).to_le_bytes());
        for d in p.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_params(bytes: &[u8]) -> Result<Vec<ArrayD<f64>>> {
    let mut pos = 0usize;
    let take_u64 = |pos: &mut usize| -> Result<u64> {
        let end = *pos + 8;
        if end > bytes.len() {
            return Err(D2rError::invalid("parameter blob truncated"));
        }
        let v = u64::from_le_bytes(bytes[*pos..end].try_into().unwrap());
        *pos = end;
        Ok(v)
    };
    let count = take_u64(&mut pos)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = take_u64(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u64(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let end = pos + n * 8;
        if end > bytes.len() {
            return Err(D2rError::invalid("parameter blob truncated"));
        }
        let vals: Vec<f64> = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        params.push(
            ArrayD::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|e| D2rError::invalid(e.to_string()))?,
        );
    }
    if pos != bytes.len() {
        return Err(D2rError::invalid("trailing bytes in parameter blob"));
    }
    Ok(params)
}

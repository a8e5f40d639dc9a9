//! IDX container (MNIST family): `0x00 0x00 <type> <ndim>`, then `ndim`
//! big-endian u32 dimension sizes, then the payload.

use crate::codec::ByteReader;
use crate::error::{invalid, parse_err, Result};
use crate::tensor::Tensor;

use super::Dataset;

/// Type code for unsigned bytes, the only payload type supported.
pub const IDX_U8: u8 = 0x08;

/// Parses an IDX file. Multi-dimensional payloads (images) are scaled to
/// `[0, 1]` by `/255`; one-dimensional payloads (labels) keep their raw
/// values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<2>("magic")?;
    if magic != [0, 0] {
        return Err(parse_err(0, format!("bad magic {magic:02x?}, expected 00 00")));
    }
    let type_code = r.u8("type code")?;
    if type_code != IDX_U8 {
        return Err(parse_err(2, format!("unsupported type code 0x{type_code:02x}")));
    }
    let ndim = r.u8("dimension count")? as usize;
    if ndim == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = r.position();
        let d = r.u32_be("dimension size")? as usize;
        if d == 0 {
            return Err(parse_err(at, "zero-length dimension"));
        }
        shape.push(d);
    }
    let total = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "declared size overflows"))?;
    let payload = r.take(total, "payload")?;
    let scale = if ndim == 1 { 1.0 } else { 1.0 / 255.0 };
    let data = payload.iter().map(|&b| b as f64 * scale).collect();
    Tensor::new(shape, data)
}

/// Builds a dataset from an image file and a label file, flattening each
/// image into one row.
pub fn load_idx_dataset(images: &[u8], labels: &[u8], class_count: usize) -> Result<Dataset> {
    let images = parse_idx(images)?;
    let labels = parse_idx(labels)?;
    if labels.shape().len() != 1 {
        return Err(invalid(format!("label file has shape {:?}", labels.shape())));
    }
    let n = images.shape()[0];
    let features = if images.shape().len() == 1 {
        images.reshape(vec![n, 1])?
    } else {
        let width = images.cols();
        images.reshape(vec![n, width])?
    };
    let labels = labels.data().iter().map(|&v| v as usize).collect();
    Dataset::new(features, labels, class_count)
}

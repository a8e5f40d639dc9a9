//! Noise-batch dump, little-endian like the model container:
//!
//! ```text
//! "FSNB" | u32 version | u32 source_client | u32 count | u32 dim | u32 classes
//! | count·dim f64 samples | count·classes f64 soft labels
//! | count f64 achieved loss | count f64 initial loss | count u32 iterations
//! ```

use crate::codec::{dim_u32, put_f64s, put_u32, ByteReader};
use crate::error::{parse_err, Result};
use crate::tensor::Tensor;

use super::NoiseBatch;

pub const NOISE_MAGIC: &[u8; 4] = b"FSNB";
const NOISE_VERSION: u32 = 1;

pub fn write_noise_batch(batch: &NoiseBatch) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(NOISE_MAGIC);
    put_u32(&mut out, NOISE_VERSION);
    put_u32(&mut out, dim_u32(batch.source_client, "client id")?);
    put_u32(&mut out, dim_u32(batch.len(), "sample count")?);
    put_u32(&mut out, dim_u32(batch.samples.cols(), "sample width")?);
    put_u32(&mut out, dim_u32(batch.soft_labels.cols(), "class count")?);
    put_f64s(&mut out, batch.samples.data());
    put_f64s(&mut out, batch.soft_labels.data());
    put_f64s(&mut out, &batch.achieved_loss);
    put_f64s(&mut out, &batch.initial_loss);
    for &i in &batch.iterations_used {
        put_u32(&mut out, i);
    }
    Ok(out)
}

pub fn read_noise_batch(bytes: &[u8]) -> Result<NoiseBatch> {
    let mut r = ByteReader::new(bytes);
    if &r.array::<4>("magic")? != NOISE_MAGIC {
        return Err(parse_err(0, "bad magic, expected \"FSNB\""));
    }
    let at = r.position();
    let version = r.u32_le("version")?;
    if version != NOISE_VERSION {
        return Err(parse_err(at, format!("unsupported version {version}")));
    }
    let source_client = r.u32_le("client id")? as usize;
    let at = r.position();
    let count = r.u32_le("sample count")? as usize;
    let dim = r.u32_le("sample width")? as usize;
    let classes = r.u32_le("class count")? as usize;
    if count == 0 || dim == 0 || classes == 0 {
        return Err(parse_err(at, "zero-sized noise batch"));
    }
    let samples = Tensor::new(vec![count, dim], r.f64s_le(count * dim, "samples")?)?;
    let soft_labels = Tensor::new(vec![count, classes], r.f64s_le(count * classes, "soft labels")?)?;
    let achieved_loss = r.f64s_le(count, "achieved loss")?;
    let initial_loss = r.f64s_le(count, "initial loss")?;
    let iterations_used = (0..count)
        .map(|_| r.u32_le("iterations"))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(NoiseBatch {
        source_client,
        samples,
        soft_labels,
        achieved_loss,
        initial_loss,
        iterations_used,
    })
}

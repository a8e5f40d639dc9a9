//! Little-endian model container:
//!
//! ```text
//! "FSND" | u32 version | u32 layer_count
//! | layer_count × (u32 rows, u32 cols)
//! | (layer_count − 1) × f64 dropout rate
//! | per layer: rows·cols f64 weights, then cols f64 biases
//! ```

use crate::codec::{dim_u32, put_f64s, put_u32, ByteReader};
use crate::error::{parse_err, Result};
use crate::tensor::Tensor;

use super::mlp::{Dense, MlpModel};

pub const MODEL_MAGIC: &[u8; 4] = b"FSND";
pub const MODEL_VERSION: u32 = 1;

pub fn serialize(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.param_count() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    let layers = model.layers();
    put_u32(&mut out, dim_u32(layers.len(), "layer count").expect("small model"));
    for l in layers {
        put_u32(&mut out, dim_u32(l.weight.rows(), "rows").expect("small model"));
        put_u32(&mut out, dim_u32(l.weight.cols(), "cols").expect("small model"));
    }
    put_f64s(&mut out, model.dropout_rates());
    for l in layers {
        put_f64s(&mut out, l.weight.data());
        put_f64s(&mut out, &l.bias);
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if &magic != MODEL_MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}, expected \"FSND\"")));
    }
    let at = r.position();
    let version = r.u32_le("version")?;
    if version != MODEL_VERSION {
        return Err(parse_err(at, format!("unsupported version {version}")));
    }
    let at = r.position();
    let count = r.u32_le("layer count")? as usize;
    if count == 0 {
        return Err(parse_err(at, "model has zero layers"));
    }
    let mut shapes = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let at = r.position();
        let rows = r.u32_le("layer rows")? as usize;
        let cols = r.u32_le("layer cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(parse_err(at, format!("layer {i} has a zero dimension")));
        }
        if let Some(&(_, prev_cols)) = shapes.last() {
            if prev_cols != rows {
                return Err(parse_err(
                    at,
                    format!("layer {i} expects {rows} inputs but layer {} emits {prev_cols}", i - 1),
                ));
            }
        }
        shapes.push((rows, cols));
    }
    let at = r.position();
    let dropout = r.f64s_le(count - 1, "dropout rates")?;
    if let Some(bad) = dropout.iter().find(|d| !(0.0..1.0).contains(*d)) {
        return Err(parse_err(at, format!("dropout rate {bad} outside [0, 1)")));
    }
    let mut layers = Vec::with_capacity(count);
    for &(rows, cols) in &shapes {
        let w = r.f64s_le(rows * cols, "weights")?;
        let bias = r.f64s_le(cols, "biases")?;
        layers.push(Dense {
            weight: Tensor::new(vec![rows, cols], w)?,
            bias,
        });
    }
    r.finish()?;
    MlpModel::from_layers(layers, dropout)
}

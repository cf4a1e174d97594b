//! Model checkpoints.
//!
//! ```text
//! "DSCK" | version u16 | layers, d_model, heads, patch_size, stride,
//! t_in, t_out: u32 | mlp_ratio f64 | seed u64 | n_ids u32 | ids u32...
//! | n_tensors u32 | per tensor: name_len u32, name utf-8, rank u32,
//! extents u32..., f64 payload
//! ```
//!
//! All integers and floats little-endian. Tensors appear in canonical
//! parameter order and are checked by name on load.

use std::path::Path;

use crate::codec::{put_f64, put_u16, put_u32, put_u64, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelConfig, Weights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u16 = 1;

pub fn encode(model: &ForecastModel) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    for (v, what) in [
        (c.layers, "layers"),
        (c.d_model, "d_model"),
        (c.heads, "heads"),
        (c.patch_size, "patch_size"),
        (c.stride, "stride"),
        (c.t_in, "t_in"),
        (c.t_out, "t_out"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    put_f64(&mut out, c.mlp_ratio);
    put_u64(&mut out, c.seed);
    put_u32(&mut out, to_u32(model.layer_ids.len(), "layer count")?);
    for &id in &model.layer_ids {
        put_u32(&mut out, to_u32(id, "layer id")?);
    }
    let mut tensors = Vec::new();
    model.weights.visit(&model.layer_ids, |n, _, t| tensors.push((n.to_string(), t)));
    put_u32(&mut out, to_u32(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.rank(), "rank")?);
        for &e in t.shape() {
            put_u32(&mut out, to_u32(e, "extent")?);
        }
        for v in t.data() {
            put_f64(&mut out, *v);
        }
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<ForecastModel> {
    let mut r = Reader::new(buf);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::format_at("not a checkpoint (bad magic)", 0));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format_at(format!("unsupported checkpoint version {version}"), 4));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32("config")? as usize;
    }
    let config = ModelConfig {
        layers: dims[0],
        d_model: dims[1],
        heads: dims[2],
        patch_size: dims[3],
        stride: dims[4],
        t_in: dims[5],
        t_out: dims[6],
        mlp_ratio: r.f64("mlp_ratio")?,
        seed: r.u64("seed")?,
    };
    config.validate().map_err(|e| r.err(format!("invalid model config: {e}")))?;
    let n_ids = r.u32("layer count")? as usize;
    if n_ids > config.layers {
        return Err(r.err(format!("{n_ids} layer ids for a {}-layer model", config.layers)));
    }
    let layer_ids = (0..n_ids)
        .map(|_| r.u32("layer id").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let shapes = Weights::<Tensor>::shapes(&config, &layer_ids);
    let mut expected = Vec::new();
    shapes.visit(&layer_ids, |n, _, s| expected.push((n.to_string(), s.clone())));
    let count_at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::format_at(
            format!("expected {} tensors, found {count}", expected.len()),
            count_at,
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "tensor name")?)
            .map_err(|_| Error::format_at("tensor name is not utf-8", at))?;
        if name != want_name {
            return Err(Error::format_at(format!("expected tensor {want_name}, found {name}"), at));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::format_at(
                format!("tensor {name} has shape {shape:?}, expected {want_shape:?}"),
                at,
            ));
        }
        let data = r.f64s(shape.iter().product(), "tensor payload")?;
        tensors.push(Tensor::new(shape, data)?);
    }
    r.expect_end()?;
    let mut it = tensors.into_iter();
    let weights = Weights::try_build::<()>(&layer_ids, |_, _| Ok(it.next().expect("counted"))).expect("counted");
    let model = ForecastModel {
        config,
        layer_ids,
        weights,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &ForecastModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ForecastModel> {
    decode(&std::fs::read(path)?)
}

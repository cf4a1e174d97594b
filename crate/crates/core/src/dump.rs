//! Binary trace dumps for analyzing activations produced elsewhere.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "LTRC"
//!      4     2  version (1)
//!      6     2  L       blocks
//!      8     2  H       heads
//!     10     4  N_p     patches
//!     14     4  d_model
//!     18     4  B       samples
//!     22     2  dtype   (0 = f32)
//!     24        L+1 hidden states [B, N_p, d_model], then
//!               L attention maps  [B, H, N_p, N_p]
//! ```
//!
//! Everything little-endian, layer-major, no padding. The payload must be
//! exactly the size the header implies.

use std::path::Path;

use crate::codec::{put_u16, put_u32, to_u16, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::LayerTrace;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTRC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u16 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DumpHeader {
    pub layers: usize,
    pub heads: usize,
    pub num_patches: usize,
    pub d_model: usize,
    pub batch: usize,
}

impl DumpHeader {
    fn hidden_len(&self) -> usize {
        self.batch * self.num_patches * self.d_model
    }

    fn attn_len(&self) -> usize {
        self.batch * self.heads * self.num_patches * self.num_patches
    }

    /// Payload size in bytes implied by the header.
    pub fn payload_bytes(&self) -> u128 {
        let elems = (self.layers as u128 + 1) * self.hidden_len() as u128 + self.layers as u128 * self.attn_len() as u128;
        elems * 4
    }
}

/// A trace held at dump precision, so write/read round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceDump {
    pub header: DumpHeader,
    pub hidden: Vec<Vec<f32>>,
    pub attn: Vec<Vec<f32>>,
}

impl TraceDump {
    pub fn from_trace(trace: &LayerTrace) -> Result<Self> {
        if trace.hidden.len() != trace.attn.len() + 1 {
            return Err(Error::config("trace needs one more hidden state than attention maps"));
        }
        let header = DumpHeader {
            layers: trace.num_blocks(),
            heads: trace.heads(),
            num_patches: trace.num_patches(),
            d_model: trace.d_model(),
            batch: trace.instances(),
        };
        let f = |t: &Tensor| t.data().iter().map(|&v| v as f32).collect();
        Ok(Self {
            header,
            hidden: trace.hidden.iter().map(f).collect(),
            attn: trace.attn.iter().map(f).collect(),
        })
    }

    /// Widens to a trace; layer ids are `0..L` and no normalization
    /// statistics are attached.
    pub fn to_trace(&self) -> LayerTrace {
        let h = &self.header;
        let wide = |v: &Vec<f32>, shape: Vec<usize>| {
            Tensor::new(shape, v.iter().map(|&x| f64::from(x)).collect()).expect("header shape")
        };
        LayerTrace {
            hidden: self
                .hidden
                .iter()
                .map(|v| wide(v, vec![h.batch, h.num_patches, h.d_model]))
                .collect(),
            attn: self
                .attn
                .iter()
                .map(|v| wide(v, vec![h.batch, h.heads, h.num_patches, h.num_patches]))
                .collect(),
            layer_ids: (0..h.layers).collect(),
            stats: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + h.payload_bytes() as usize);
        out.extend_from_slice(MAGIC);
        put_u16(&mut out, VERSION);
        put_u16(&mut out, to_u16(h.layers, "layer count")?);
        put_u16(&mut out, to_u16(h.heads, "head count")?);
        put_u32(&mut out, to_u32(h.num_patches, "patch count")?);
        put_u32(&mut out, to_u32(h.d_model, "d_model")?);
        put_u32(&mut out, to_u32(h.batch, "batch")?);
        put_u16(&mut out, DTYPE_F32);
        for v in self.hidden.iter().chain(&self.attn) {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != MAGIC {
            return Err(Error::format_at("not a trace dump (bad magic)", 0));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format_at(format!("unsupported dump version {version}"), 4));
        }
        let header = DumpHeader {
            layers: r.u16("L")? as usize,
            heads: r.u16("H")? as usize,
            num_patches: r.u32("N_p")? as usize,
            d_model: r.u32("d_model")? as usize,
            batch: r.u32("B")? as usize,
        };
        let dtype = r.u16("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format_at(format!("unsupported dtype code {dtype}"), 22));
        }
        if header.heads == 0 || header.num_patches == 0 || header.d_model == 0 || header.batch == 0 {
            return Err(Error::format_at("header has a zero extent", 8));
        }
        let want = header.payload_bytes();
        let have = r.remaining() as u128;
        if want != have {
            return Err(Error::format_at(
                format!("payload is {have} bytes, header implies {want}"),
                (HEADER_LEN as u128 + have.min(want)) as u64,
            ));
        }
        let hidden = (0..=header.layers)
            .map(|_| r.f32s(header.hidden_len(), "hidden state"))
            .collect::<Result<Vec<_>>>()?;
        let attn = (0..header.layers)
            .map(|_| r.f32s(header.attn_len(), "attention map"))
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(Self { header, hidden, attn })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

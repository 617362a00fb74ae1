//! Binary encoding of a branch-cube triple.
//!
//! ```text
//! "TMTC"  u16 version (=1)  u32 T  u32 H  u32 W  u32 C  u32 views (=3)
//! views × T·H·W·C f32, row-major [t][h][w][c]
//! ```
//!
//! All integers and reals are little-endian. Views are stored in
//! spatial-, temporal-, spatial-temporal-branch order.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::pooling::FeatureCube;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TMTC";
pub const VERSION: u16 = 1;
pub const VIEW_COUNT: u32 = 3;
pub const HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// Dimensions of an encoded cube triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl CubeHeader {
    pub fn values_per_view(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + VIEW_COUNT as usize * self.values_per_view() * 4
    }
}

fn format_err(offset: usize, reason: impl Into<alloc::string::String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(alloc::format!("{what} = {v} does not fit in 32 bits")))
}

pub fn encode_cubes(cubes: &[FeatureCube; 3]) -> Result<Vec<u8>> {
    let c0 = &cubes[0];
    let dims = [c0.frames(), c0.height(), c0.width(), c0.channels()];
    for c in &cubes[1..] {
        let d = [c.frames(), c.height(), c.width(), c.channels()];
        if d != dims {
            return Err(crate::error::dim_err("encode_cubes", &dims, &d));
        }
    }
    let header = CubeHeader {
        frames: dims[0],
        height: dims[1],
        width: dims[2],
        channels: dims[3],
    };
    let mut out = Vec::with_capacity(header.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in dims.iter().zip(["T", "H", "W", "C"]) {
        out.extend_from_slice(&u32_field(*v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&VIEW_COUNT.to_le_bytes());
    for c in cubes {
        for &v in c.values().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates the fixed-size header.
pub fn decode_header(bytes: &[u8]) -> Result<CubeHeader> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated before end of magic"));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"TMTC\""));
    }
    if bytes.len() < 6 {
        return Err(format_err(bytes.len(), "truncated before end of version"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(4, alloc::format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut fields = [0u32; 5];
    for (k, f) in fields.iter_mut().enumerate() {
        let at = 6 + 4 * k;
        let Some(b) = bytes.get(at..at + 4) else {
            return Err(format_err(bytes.len(), "truncated inside header"));
        };
        *f = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if k < 4 && *f == 0 {
            return Err(format_err(at, "zero extent in header"));
        }
    }
    if fields[4] != VIEW_COUNT {
        return Err(format_err(22, alloc::format!("view count {} != {VIEW_COUNT}", fields[4])));
    }
    Ok(CubeHeader {
        frames: fields[0] as usize,
        height: fields[1] as usize,
        width: fields[2] as usize,
        channels: fields[3] as usize,
    })
}

/// Decodes a complete buffer; truncated or over-long input is rejected
/// before any cube is built.
pub fn decode_cubes(bytes: &[u8]) -> Result<[FeatureCube; 3]> {
    let h = decode_header(bytes)?;
    let n = h.values_per_view();
    let want = n
        .checked_mul(4 * VIEW_COUNT as usize)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(6, "header extents overflow"))?;
    if bytes.len() < want {
        let full = HEADER_LEN + (bytes.len() - HEADER_LEN) / 4 * 4;
        return Err(format_err(
            full,
            alloc::format!("truncated payload: {} of {want} bytes", bytes.len()),
        ));
    }
    if bytes.len() > want {
        return Err(format_err(want, alloc::format!("{} trailing bytes", bytes.len() - want)));
    }
    let mut views = Vec::with_capacity(3);
    for v in 0..VIEW_COUNT as usize {
        let base = HEADER_LEN + v * n * 4;
        let data: Vec<f64> = bytes[base..base + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(&[h.frames, h.height * h.width, h.channels], data)?;
        views.push(FeatureCube::new(t, h.height, h.width)?);
    }
    let [a, b, c]: [FeatureCube; 3] = views.try_into().map_err(|_| format_err(0, "view count"))?;
    Ok([a, b, c])
}

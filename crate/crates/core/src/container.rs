//! JSON-headed raw array container (`.ncf`).
//!
//! Byte layout:
//!
//! ```text
//! 0..8        magic  b"NEATRCF1"
//! 8..16       header length H, u64 little-endian
//! 16..16+H    header, UTF-8 JSON
//! 16+H..      payload, little-endian, row-major over
//!             [frames, shots, coils, n1_ext, n2] (frames outermost);
//!             complex values interleave (re, im)
//! ```
//!
//! The payload must be exactly `product(dims) * dtype_size` bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::C64;

pub const MAGIC: &[u8; 8] = b"NEATRCF1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "c64")]
    C64,
    #[serde(rename = "c128")]
    C128,
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::C64 => 8,
            Dtype::C128 => 16,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Dtype::C64 | Dtype::C128)
    }
}

/// What the array holds, so consumers can validate channel semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    ComplexShots,
    MagnitudeShots,
    Phase,
    Magnitude,
    Kspace,
    CoilMaps,
    Support,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GeometryInfo {
    pub mb: usize,
    pub r_inplane: usize,
    pub delta_ky: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    /// `[frames, shots, coils, n1_ext, n2]`
    pub dims: [usize; 5],
    pub dtype: Dtype,
    pub layout: Layout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryInfo>,
    #[serde(default)]
    pub provenance: Provenance,
    /// free-form metadata (names, units, TEs, ...)
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Complex(Vec<C64>),
    Real(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payload: Payload,
}

fn count(dims: &[usize; 5]) -> usize {
    dims.iter().product()
}

impl Container {
    pub fn complex(layout: Layout, dims: [usize; 5], dtype: Dtype, data: Vec<C64>) -> Result<Self> {
        if !dtype.is_complex() {
            return Err(Error::Format(format!("{dtype:?} is not a complex dtype")));
        }
        Self::build(layout, dims, dtype, Payload::Complex(data))
    }

    pub fn real(layout: Layout, dims: [usize; 5], dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        if dtype.is_complex() {
            return Err(Error::Format(format!("{dtype:?} is not a real dtype")));
        }
        Self::build(layout, dims, dtype, Payload::Real(data))
    }

    fn build(layout: Layout, dims: [usize; 5], dtype: Dtype, payload: Payload) -> Result<Self> {
        let len = match &payload {
            Payload::Complex(v) => v.len(),
            Payload::Real(v) => v.len(),
        };
        if len != count(&dims) {
            return Err(Error::Format(format!(
                "payload has {len} elements but dims {dims:?} need {}",
                count(&dims)
            )));
        }
        Ok(Container {
            header: Header {
                schema_version: SCHEMA_VERSION,
                dims,
                dtype,
                layout,
                geometry: None,
                provenance: Provenance::default(),
                extra: serde_json::Map::new(),
            },
            payload,
        })
    }

    /// Frames of complex images, `[frames, shots, 1, n1, n2]`.
    pub fn from_shot_frames(layout: Layout, dtype: Dtype, frames: &[Array3<C64>]) -> Result<Self> {
        let (s, n1, n2) = frames.first().map(|f| f.dim()).unwrap_or((0, 0, 0));
        let mut data = Vec::with_capacity(frames.len() * s * n1 * n2);
        for f in frames {
            if f.dim() != (s, n1, n2) {
                return Err(Error::Format("frames differ in shape".into()));
            }
            data.extend(f.iter().cloned());
        }
        Self::complex(layout, [frames.len(), s, 1, n1, n2], dtype, data)
    }

    /// Frames of real images, `[frames, shots, 1, n1, n2]`.
    pub fn from_real_frames(layout: Layout, dtype: Dtype, frames: &[Array3<f64>]) -> Result<Self> {
        let (s, n1, n2) = frames.first().map(|f| f.dim()).unwrap_or((0, 0, 0));
        let mut data = Vec::with_capacity(frames.len() * s * n1 * n2);
        for f in frames {
            if f.dim() != (s, n1, n2) {
                return Err(Error::Format("frames differ in shape".into()));
            }
            data.extend(f.iter().cloned());
        }
        Self::real(layout, [frames.len(), s, 1, n1, n2], dtype, data)
    }

    /// One real image per frame, `[frames, 1, 1, n1, n2]`.
    pub fn from_images(layout: Layout, dtype: Dtype, images: &[Array2<f64>]) -> Result<Self> {
        let frames: Vec<Array3<f64>> = images.iter().map(|m| m.clone().insert_axis(ndarray::Axis(0))).collect();
        Self::from_real_frames(layout, dtype, &frames)
    }

    pub fn dims(&self) -> [usize; 5] {
        self.header.dims
    }

    pub fn with_geometry(mut self, geometry: GeometryInfo) -> Self {
        self.header.geometry = Some(geometry);
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.header.provenance = provenance;
        self
    }

    pub fn with_extra(mut self, key: &str, value: serde_json::Value) -> Self {
        self.header.extra.insert(key.to_string(), value);
        self
    }

    pub fn complex_data(&self) -> Result<&[C64]> {
        match &self.payload {
            Payload::Complex(v) => Ok(v),
            Payload::Real(_) => Err(Error::Format("expected complex payload".into())),
        }
    }

    pub fn real_data(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::Real(v) => Ok(v),
            Payload::Complex(_) => Err(Error::Format("expected real payload".into())),
        }
    }

    pub fn expect_layout(&self, layout: Layout) -> Result<()> {
        if self.header.layout != layout {
            return Err(Error::Format(format!(
                "expected layout {layout:?}, found {:?}",
                self.header.layout
            )));
        }
        Ok(())
    }

    /// Complex block of one frame as `[shots, coils, n1, n2]`.
    pub fn complex_frame(&self, frame: usize) -> Result<Array4<C64>> {
        let [f, s, c, n1, n2] = self.header.dims;
        if frame >= f {
            return Err(Error::Format(format!("frame {frame} out of range ({f})")));
        }
        let per = s * c * n1 * n2;
        let data = self.complex_data()?[frame * per..(frame + 1) * per].to_vec();
        Ok(Array4::from_shape_vec((s, c, n1, n2), data).expect("dims checked"))
    }

    pub fn real_frame(&self, frame: usize) -> Result<Array4<f64>> {
        let [f, s, c, n1, n2] = self.header.dims;
        if frame >= f {
            return Err(Error::Format(format!("frame {frame} out of range ({f})")));
        }
        let per = s * c * n1 * n2;
        let data = self.real_data()?[frame * per..(frame + 1) * per].to_vec();
        Ok(Array4::from_shape_vec((s, c, n1, n2), data).expect("dims checked"))
    }

    /// Complex shot stack of one frame, `[shots, n1, n2]`, for the
    /// single-coil layouts.
    pub fn shot_stack(&self, frame: usize) -> Result<Array3<C64>> {
        let a = self.complex_frame(frame)?;
        let (s, c, n1, n2) = a.dim();
        if c != 1 {
            return Err(Error::Format(format!("expected one coil channel, found {c}")));
        }
        Ok(a.into_shape_with_order((s, n1, n2)).expect("contiguous"))
    }

    pub fn real_stack(&self, frame: usize) -> Result<Array3<f64>> {
        let a = self.real_frame(frame)?;
        let (s, c, n1, n2) = a.dim();
        if c != 1 {
            return Err(Error::Format(format!("expected one coil channel, found {c}")));
        }
        Ok(a.into_shape_with_order((s, n1, n2)).expect("contiguous"))
    }

    /// The single real image of a frame.
    pub fn real_image(&self, frame: usize) -> Result<Array2<f64>> {
        let a = self.real_stack(frame)?;
        let (s, n1, n2) = a.dim();
        if s != 1 {
            return Err(Error::Format(format!("expected one image per frame, found {s}")));
        }
        Ok(a.into_shape_with_order((n1, n2)).expect("contiguous"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = count(&self.header.dims);
        let mut out = Vec::with_capacity(16 + header.len() + n * self.header.dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        match (&self.payload, self.header.dtype) {
            (Payload::Complex(v), Dtype::C64) => {
                for z in v {
                    out.extend_from_slice(&(z.re as f32).to_le_bytes());
                    out.extend_from_slice(&(z.im as f32).to_le_bytes());
                }
            }
            (Payload::Complex(v), Dtype::C128) => {
                for z in v {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }
            }
            (Payload::Real(v), Dtype::F32) => {
                for x in v {
                    out.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
            (Payload::Real(v), Dtype::F64) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            _ => return Err(Error::Format("payload kind does not match dtype".into())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema version {}", header.schema_version)));
        }
        let n = count(&header.dims);
        let body = &bytes[hend..];
        if body.len() != n * header.dtype.size() {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {:?} x {:?} need {}",
                body.len(),
                header.dims,
                header.dtype,
                n * header.dtype.size()
            )));
        }
        let f32_at = |i: usize| f32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes")) as f64;
        let f64_at = |i: usize| f64::from_le_bytes(body[i..i + 8].try_into().expect("8 bytes"));
        let payload = match header.dtype {
            Dtype::C64 => Payload::Complex((0..n).map(|k| C64::new(f32_at(8 * k), f32_at(8 * k + 4))).collect()),
            Dtype::C128 => Payload::Complex((0..n).map(|k| C64::new(f64_at(16 * k), f64_at(16 * k + 8))).collect()),
            Dtype::F32 => Payload::Real((0..n).map(|k| f32_at(4 * k)).collect()),
            Dtype::F64 => Payload::Real((0..n).map(|k| f64_at(8 * k)).collect()),
        };
        Ok(Container { header, payload })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(reason) => Error::Container {
                path: path.to_path_buf(),
                reason,
            },
            Error::Json(j) => Error::Container {
                path: path.to_path_buf(),
                reason: format!("header: {j}"),
            },
            other => other,
        })
    }
}

/// Header-only read, without touching the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = [0u8; 16];
    f.read_exact(&mut pre).map_err(|e| Error::io(path, e))?;
    if &pre[..8] != MAGIC {
        return Err(Error::Container {
            path: path.to_path_buf(),
            reason: "missing container magic".into(),
        });
    }
    let hlen = u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes")) as usize;
    let mut h = vec![0u8; hlen];
    f.read_exact(&mut h).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&h)?)
}

pub fn image_view_to_vec(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.iter().cloned().collect()
}

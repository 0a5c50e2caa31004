//! The `FPT1` binary container.
//!
//! Every file is little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `FPT1`                           |
//! | 4      | 1    | kind tag                               |
//! | 5      | 1    | dtype tag (1 = f64, 2 = u32)           |
//! | 6      | 2    | reserved, must be 0                    |
//! | 8      | 32   | four u64 dims (unused trailing dims 0) |
//! | 40     | ...  | raw payload                            |
//!
//! Kind-specific dims and payloads:
//!
//! * point cloud (1, f64): `[N, L]`; payload is the timestamp followed by
//!   `N` rows of `x y z attr_0 .. attr_{L-1}`.
//! * label map (2, u32): `[height, width]`; row-major labels.
//! * feature map (3, f64): `[height, width, channels]`; row-major cells.
//! * semantic scores (4, f64): `[rows, classes, is_probability]`.
//! * label vector (5, u32): `[N]`.
//! * dense matrix (6, f64): `[rows, cols]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::maps::{FeatureMap, LabelMap, SemanticScores};

pub const MAGIC: [u8; 4] = *b"FPT1";
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    PointCloud = 1,
    LabelMap = 2,
    FeatureMap = 3,
    SemanticScores = 4,
    LabelVector = 5,
    DenseMatrix = 6,
}

impl Kind {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => Kind::PointCloud,
            2 => Kind::LabelMap,
            3 => Kind::FeatureMap,
            4 => Kind::SemanticScores,
            5 => Kind::LabelVector,
            6 => Kind::DenseMatrix,
            other => return Err(Error::Format(format!("unknown kind tag {other}"))),
        })
    }

    fn rank(self) -> usize {
        match self {
            Kind::PointCloud | Kind::LabelMap | Kind::DenseMatrix => 2,
            Kind::FeatureMap | Kind::SemanticScores => 3,
            Kind::LabelVector => 1,
        }
    }

    fn dtype(self) -> DType {
        match self {
            Kind::LabelMap | Kind::LabelVector => DType::U32,
            _ => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    U32 = 2,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: Kind,
    pub dtype: DType,
    pub dims: [u64; 4],
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(self.kind as u8);
        out.push(self.dtype as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let kind = Kind::from_tag(bytes[4])?;
        let dtype = match bytes[5] {
            1 => DType::F64,
            2 => DType::U32,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        if dtype != kind.dtype() {
            return Err(Error::Format(format!(
                "{kind:?} requires dtype {:?}, found {dtype:?}",
                kind.dtype()
            )));
        }
        let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
        if reserved != 0 {
            return Err(Error::Format(format!(
                "reserved field is {reserved}, expected 0 (unsupported version)"
            )));
        }
        let mut dims = [0u64; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            let at = 8 + 8 * k;
            *d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        }
        if let Some(k) = (kind.rank()..4).find(|&k| dims[k] != 0) {
            return Err(Error::Format(format!(
                "{kind:?} uses {} dims but dim {k} is {}",
                kind.rank(),
                dims[k]
            )));
        }
        Ok(Header { kind, dtype, dims })
    }
}

fn dim(d: u64) -> Result<usize> {
    usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} overflows usize")))
}

fn checked_product(factors: &[usize]) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Format(format!("dimensions {factors:?} overflow")))
}

/// Validates the header against `kind` and returns `(dims, payload)`, checking
/// that the payload holds exactly `elements(dims)` values.
fn open(bytes: &[u8], kind: Kind, elements: impl Fn(&[usize; 4]) -> Result<usize>) -> Result<([usize; 4], &[u8])> {
    let header = Header::parse(bytes)?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind:?} container, found {:?}",
            header.kind
        )));
    }
    let dims = [
        dim(header.dims[0])?,
        dim(header.dims[1])?,
        dim(header.dims[2])?,
        dim(header.dims[3])?,
    ];
    let count = elements(&dims)?;
    let expected = count
        .checked_mul(header.dtype.size())
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    Ok((dims, &bytes[HEADER_LEN..]))
}

fn read_f64s(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect()
}

fn read_u32s(payload: &[u8]) -> Vec<u32> {
    payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn push_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

/// A value stored as a single `FPT1` file.
pub trait Container: Sized {
    fn encode(&self) -> Vec<u8>;
    fn decode(bytes: &[u8]) -> Result<Self>;

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

impl Container for PointCloud {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 + self.len() * (3 + self.attr_width()) * 8);
        Header {
            kind: Kind::PointCloud,
            dtype: DType::F64,
            dims: [self.len() as u64, self.attr_width() as u64, 0, 0],
        }
        .write(&mut out);
        push_f64s(&mut out, [self.timestamp()]);
        for (i, p) in self.coords().iter().enumerate() {
            push_f64s(&mut out, p.iter().copied());
            push_f64s(&mut out, self.attr_row(i).iter().copied());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = open(bytes, Kind::PointCloud, |d| {
            let row = d[1]
                .checked_add(3)
                .ok_or_else(|| Error::Format("attribute width overflows".into()))?;
            checked_product(&[d[0], row])?
                .checked_add(1)
                .ok_or_else(|| Error::Format("payload size overflows".into()))
        })?;
        let (n, width) = (dims[0], dims[1]);
        let values = read_f64s(payload);
        let timestamp = values[0];
        let mut coords = Vec::with_capacity(n);
        let mut attrs = Vec::with_capacity(n * width);
        for row in values[1..].chunks_exact(3 + width) {
            coords.push([row[0], row[1], row[2]]);
            attrs.extend_from_slice(&row[3..]);
        }
        PointCloud::new(coords, attrs, width, timestamp)
    }
}

impl Container for LabelMap {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels().len() * 4);
        Header {
            kind: Kind::LabelMap,
            dtype: DType::U32,
            dims: [u64::from(self.height()), u64::from(self.width()), 0, 0],
        }
        .write(&mut out);
        for l in self.labels() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = open(bytes, Kind::LabelMap, |d| checked_product(&d[..2]))?;
        let (h, w) = (to_u32(dims[0])?, to_u32(dims[1])?);
        LabelMap::new(w, h, read_u32s(payload))
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("image dimension {v} exceeds u32")))
}

impl Container for FeatureMap {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data().len() * 8);
        Header {
            kind: Kind::FeatureMap,
            dtype: DType::F64,
            dims: [
                u64::from(self.height()),
                u64::from(self.width()),
                self.channels() as u64,
                0,
            ],
        }
        .write(&mut out);
        push_f64s(&mut out, self.data().iter().copied());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = open(bytes, Kind::FeatureMap, |d| checked_product(&d[..3]))?;
        FeatureMap::new(to_u32(dims[1])?, to_u32(dims[0])?, dims[2], read_f64s(payload))
    }
}

impl Container for SemanticScores {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data().len() * 8);
        Header {
            kind: Kind::SemanticScores,
            dtype: DType::F64,
            dims: [
                self.rows() as u64,
                self.classes() as u64,
                u64::from(self.is_probabilities()),
                0,
            ],
        }
        .write(&mut out);
        push_f64s(&mut out, self.data().iter().copied());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = open(bytes, Kind::SemanticScores, |d| checked_product(&d[..2]))?;
        if dims[2] > 1 {
            return Err(Error::Format(format!(
                "probability flag must be 0 or 1, got {}",
                dims[2]
            )));
        }
        SemanticScores::new(dims[0], dims[1], read_f64s(payload), dims[2] == 1)
    }
}

/// One `u32` per point (class ids, instance ids, region ids, ...).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelVector(pub Vec<u32>);

impl Container for LabelVector {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.0.len() * 4);
        Header {
            kind: Kind::LabelVector,
            dtype: DType::U32,
            dims: [self.0.len() as u64, 0, 0, 0],
        }
        .write(&mut out);
        for l in &self.0 {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (_, payload) = open(bytes, Kind::LabelVector, |d| Ok(d[0]))?;
        Ok(LabelVector(read_u32s(payload)))
    }
}

/// Row-major `rows x cols` reals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }
}

impl Container for DenseMatrix {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 8);
        Header {
            kind: Kind::DenseMatrix,
            dtype: DType::F64,
            dims: [self.rows as u64, self.cols as u64, 0, 0],
        }
        .write(&mut out);
        push_f64s(&mut out, self.data.iter().copied());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = open(bytes, Kind::DenseMatrix, |d| checked_product(&d[..2]))?;
        DenseMatrix::new(dims[0], dims[1], read_f64s(payload))
    }
}

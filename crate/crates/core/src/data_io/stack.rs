//! `PWST` plane-wave stack files.
//!
//! Layout (little-endian, version 1):
//!
//! | field | type |
//! |---|---|
//! | magic `"PWST"` | 4 bytes |
//! | version | u32 |
//! | height, width, angle count | 3 x u32 |
//! | dyn_min_db, dyn_max_db | 2 x f32 |
//! | axial pitch, lateral pitch (mm/px) | 2 x f32 |
//! | provenance tag length `n` | u32 |
//! | provenance tag | `n` bytes UTF-8 |
//! | angles (degrees, strictly ascending) | `A` x f32 |
//! | images, angle-major then row-major, dB | `A*H*W` x f32 |
//! | CRC32 of every preceding byte | u32 |

use std::fs;
use std::path::Path;

use crate::data_io::binio::{ByteReader, ByteWriter};
use crate::data_io::normalize_db;
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Real};

pub const STACK_MAGIC: &[u8; 4] = b"PWST";
pub const STACK_VERSION: u32 = 1;

/// `A` beamformed images of `H x W` pixels in dB, one per steering angle.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWaveStack {
    height: usize,
    width: usize,
    angles_deg: Vec<f32>,
    pitch_axial_mm: f32,
    pitch_lateral_mm: f32,
    dyn_min_db: f32,
    dyn_max_db: f32,
    images: Vec<f32>,
    provenance: String,
}

impl PlaneWaveStack {
    /// Validates the geometry and clamps every pixel into the dynamic range.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        height: usize,
        width: usize,
        angles_deg: Vec<f32>,
        pitch_mm: (f32, f32),
        dyn_range_db: (f32, f32),
        mut images: Vec<f32>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || angles_deg.is_empty() {
            return Err(Error::contract("stack needs non-zero height, width and angle count"));
        }
        if angles_deg.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::contract("angles must be strictly ascending"));
        }
        if !(dyn_range_db.1 > dyn_range_db.0) {
            return Err(Error::contract("dynamic range max must exceed min"));
        }
        if !(pitch_mm.0 > 0.0 && pitch_mm.1 > 0.0) {
            return Err(Error::contract("pixel pitch must be positive"));
        }
        if images.len() != angles_deg.len() * height * width {
            return Err(Error::dim(
                "PlaneWaveStack::new",
                format!(
                    "{} pixels for {}x{}x{}",
                    images.len(),
                    angles_deg.len(),
                    height,
                    width
                ),
            ));
        }
        if images.iter().any(|v| v.is_nan()) {
            return Err(Error::contract("stack contains NaN pixels"));
        }
        for v in &mut images {
            *v = v.clamp(dyn_range_db.0, dyn_range_db.1);
        }
        Ok(Self {
            height,
            width,
            angles_deg,
            pitch_axial_mm: pitch_mm.0,
            pitch_lateral_mm: pitch_mm.1,
            dyn_min_db: dyn_range_db.0,
            dyn_max_db: dyn_range_db.1,
            images,
            provenance: provenance.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn angle_count(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn angles_deg(&self) -> &[f32] {
        &self.angles_deg
    }

    pub fn angle_span(&self) -> (f32, f32) {
        (self.angles_deg[0], *self.angles_deg.last().expect("non-empty"))
    }

    pub fn pitch_axial_mm(&self) -> f32 {
        self.pitch_axial_mm
    }

    pub fn pitch_lateral_mm(&self) -> f32 {
        self.pitch_lateral_mm
    }

    pub fn dyn_range_db(&self) -> (f32, f32) {
        (self.dyn_min_db, self.dyn_max_db)
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Index of the angle with the smallest magnitude (first on ties).
    pub fn orthogonal_index(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.angles_deg.iter().enumerate() {
            if a.abs() < self.angles_deg[best].abs() {
                best = i;
            }
        }
        best
    }

    /// Raw dB pixels of image `angle`.
    pub fn image_raw(&self, angle: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.images[angle * n..(angle + 1) * n]
    }

    pub fn image_db<T: Real>(&self, angle: usize) -> DenseArray<T> {
        let data = self.image_raw(angle).iter().map(|&v| T::lit(v as f64)).collect();
        DenseArray::new([self.height, self.width], data).expect("stack image shape")
    }

    /// Image `angle` mapped from the dynamic range onto `[0, 1]`.
    pub fn image_normalized<T: Real>(&self, angle: usize) -> DenseArray<T> {
        let (lo, hi) = (self.dyn_min_db as f64, self.dyn_max_db as f64);
        let data = self
            .image_raw(angle)
            .iter()
            .map(|&v| T::lit(normalize_db(v as f64, lo, hi)))
            .collect();
        DenseArray::new([self.height, self.width], data).expect("stack image shape")
    }

    /// Keeps only the listed angle indices (ascending).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut angles = Vec::with_capacity(indices.len());
        let mut images = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            if i >= self.angle_count() {
                return Err(Error::contract(format!("angle index {i} out of range")));
            }
            angles.push(self.angles_deg[i]);
            images.extend_from_slice(self.image_raw(i));
        }
        Self::new(
            self.height,
            self.width,
            angles,
            (self.pitch_axial_mm, self.pitch_lateral_mm),
            (self.dyn_min_db, self.dyn_max_db),
            images,
            self.provenance.clone(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(STACK_MAGIC);
        w.u32(STACK_VERSION);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(self.angles_deg.len() as u32);
        w.f32(self.dyn_min_db);
        w.f32(self.dyn_max_db);
        w.f32(self.pitch_axial_mm);
        w.f32(self.pitch_lateral_mm);
        w.u32(self.provenance.len() as u32);
        w.bytes(self.provenance.as_bytes());
        w.f32_slice(self.angles_deg.iter().copied());
        w.f32_slice(self.images.iter().copied());
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STACK_MAGIC)?;
        r.version(STACK_VERSION)?;
        let mut r = ByteReader::with_crc(bytes)?;
        r.take(8)?;
        let dims_at = r.offset();
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let count = r.u32()? as usize;
        if height == 0 || width == 0 || count == 0 {
            return Err(Error::format(dims_at, format!("empty dimensions {height}x{width}x{count}")));
        }
        let range_at = r.offset();
        let dyn_min = r.f32()?;
        let dyn_max = r.f32()?;
        if !(dyn_max > dyn_min) {
            return Err(Error::format(range_at, format!("dynamic range [{dyn_min}, {dyn_max}]")));
        }
        let pitch_at = r.offset();
        let pitch = (r.f32()?, r.f32()?);
        if !(pitch.0 > 0.0 && pitch.1 > 0.0) {
            return Err(Error::format(pitch_at, "non-positive pixel pitch"));
        }
        let tag_len = r.u32()? as usize;
        let tag_at = r.offset();
        let provenance = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::format(tag_at, "provenance tag is not UTF-8"))?;
        let angles_at = r.offset();
        let angles = r.f32_vec(count)?;
        if let Some(i) = angles.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::format(
                angles_at + 4 * (i + 1),
                format!("angles not strictly ascending at index {}", i + 1),
            ));
        }
        let pixels = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(count))
            .ok_or_else(|| Error::format(dims_at, "dimension overflow"))?;
        let images = r.f32_vec(pixels)?;
        r.expect_end()?;
        Self::new(height, width, angles, pitch, (dyn_min, dyn_max), images, provenance)
            .map_err(|e| Error::format(angles_at, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<usize> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

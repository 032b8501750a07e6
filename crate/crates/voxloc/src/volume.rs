//! 3D scalar volumes: intensity normalization, trilinear box crops for the
//! network input, and the `.vol1` on-disk format.
//!
//! Voxels are stored x-fastest (`idx = x + dx * (y + dy * z)`). Voxel `i`
//! sits at continuous coordinate `i` along its axis, so a volume of
//! dimension `d` supports interpolation on `[0, d-1]`; samples outside that
//! domain read as 0. Box coordinates cover `[0, d]`, i.e. voxel centers of
//! the first and last voxel lie half a cell inside the box domain ends.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{Box3, SpacingMm};

pub const VOL1_MAGIC: [u8; 4] = *b"VOL1";
/// Refuse volumes above 2^31 voxels; also bounds allocation when decoding.
pub const MAX_VOXELS: u64 = 1 << 31;
const HEADER_LEN: usize = 4 + 12 + 12;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic bytes, expected \"VOL1\"")]
    MagicMismatch,
    #[error("file truncated: need {need} bytes, have {have}")]
    TruncatedFile { need: u64, have: u64 },
    #[error("{extra} trailing bytes after voxel payload")]
    TrailingBytes { extra: u64 },
    #[error("volume dimensions must all be non-zero")]
    ZeroDim,
    #[error("voxel count {count} exceeds the 2^31 limit")]
    DimOverflow { count: u128 },
    #[error("voxel spacing must be positive and finite")]
    SpacingInvalid,
    #[error("voxel payload has {got} values but dims imply {want}")]
    CountMismatch { got: usize, want: usize },
    #[error("volume intensities have (near-)zero variance, cannot normalize")]
    ZeroVariance,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validated voxel count. Widened to u128 because the raw dim product can
/// exceed u64 on three u32 dims.
fn voxel_count_checked(dims: [u32; 3]) -> Result<u64, VolumeError> {
    let count = dims.iter().map(|&d| d as u128).product::<u128>();
    if count > MAX_VOXELS as u128 {
        return Err(VolumeError::DimOverflow { count });
    }
    Ok(count as u64)
}

#[derive(Clone, Debug)]
pub struct Volume {
    dims: [u32; 3],
    spacing: SpacingMm,
    voxels: Vec<f32>,
    normalized: bool,
}

impl Volume {
    pub fn new(dims: [u32; 3], spacing: SpacingMm, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim);
        }
        let count = voxel_count_checked(dims)?;
        if voxels.len() as u64 != count {
            return Err(VolumeError::CountMismatch { got: voxels.len(), want: count as usize });
        }
        Ok(Volume { dims, spacing, voxels, normalized: false })
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn spacing(&self) -> SpacingMm {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    /// Whether intensities are (statistically) zero-mean unit-variance. Set
    /// by [`Volume::normalize`]; restored on load by measuring the payload.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32, z: u32) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        (x as usize) + (self.dims[0] as usize) * ((y as usize) + (self.dims[1] as usize) * z as usize)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Mean and population standard deviation of the intensities.
    pub fn stats(&self) -> (f64, f64) {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .voxels
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    /// Returns a copy shifted and scaled to zero mean and unit (population)
    /// standard deviation.
    pub fn normalize(&self) -> Result<Volume, VolumeError> {
        let (mean, std) = self.stats();
        // Constant volumes produce std on the order of accumulated rounding
        // noise; intensities here are O(1), so 1e-12 cleanly separates them.
        if std < 1e-12 {
            return Err(VolumeError::ZeroVariance);
        }
        let inv = 1.0 / std;
        let voxels = self
            .voxels
            .iter()
            .map(|&v| ((v as f64 - mean) * inv) as f32)
            .collect();
        Ok(Volume { dims: self.dims, spacing: self.spacing, voxels, normalized: true })
    }

    /// Trilinear sample at a continuous coordinate; 0 outside the
    /// interpolation domain `[0, d-1]^3`.
    pub fn sample_trilinear(&self, x: f64, y: f64, z: f64) -> f32 {
        let mx = (self.dims[0] - 1) as f64;
        let my = (self.dims[1] - 1) as f64;
        let mz = (self.dims[2] - 1) as f64;
        if !(0.0..=mx).contains(&x) || !(0.0..=my).contains(&y) || !(0.0..=mz).contains(&z) {
            return 0.0;
        }
        let cell = |v: f64, dim: u32| -> (u32, f64) {
            // Clamp the base index so v == dim-1 lands in the last cell with
            // fraction 1 rather than indexing past the end.
            let i0 = (v.floor() as u32).min(dim.saturating_sub(2));
            (i0, v - i0 as f64)
        };
        let (ix, fx) = cell(x, self.dims[0]);
        let (iy, fy) = cell(y, self.dims[1]);
        let (iz, fz) = cell(z, self.dims[2]);
        let ix1 = (ix + 1).min(self.dims[0] - 1);
        let iy1 = (iy + 1).min(self.dims[1] - 1);
        let iz1 = (iz + 1).min(self.dims[2] - 1);

        let at = |x, y, z| self.get(x, y, z) as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(ix, iy, iz), at(ix1, iy, iz), fx);
        let c10 = lerp(at(ix, iy1, iz), at(ix1, iy1, iz), fx);
        let c01 = lerp(at(ix, iy, iz1), at(ix1, iy, iz1), fx);
        let c11 = lerp(at(ix, iy1, iz1), at(ix1, iy1, iz1), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        lerp(c0, c1, fz) as f32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.voxels.len() * 4);
        out.extend_from_slice(&VOL1_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in [self.spacing.x, self.spacing.y, self.spacing.z] {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a `.vol1` payload. All header fields are validated before the
    /// voxel buffer is allocated, and the allocation is additionally bounded
    /// by the input length, so arbitrary bytes cannot cause outsized
    /// allocations.
    pub fn from_bytes(data: &[u8]) -> Result<Volume, VolumeError> {
        if data.len() < 4 {
            return Err(VolumeError::TruncatedFile { need: HEADER_LEN as u64, have: data.len() as u64 });
        }
        if data[..4] != VOL1_MAGIC {
            return Err(VolumeError::MagicMismatch);
        }
        if data.len() < HEADER_LEN {
            return Err(VolumeError::TruncatedFile { need: HEADER_LEN as u64, have: data.len() as u64 });
        }
        let u32_at = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
        let f32_at = |off: usize| f32::from_le_bytes(data[off..off + 4].try_into().unwrap());
        let dims = [u32_at(4), u32_at(8), u32_at(12)];
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim);
        }
        let count = voxel_count_checked(dims)?;
        let spacing = [f32_at(16), f32_at(20), f32_at(24)];
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::SpacingInvalid);
        }
        let need = HEADER_LEN as u64 + count * 4;
        let have = data.len() as u64;
        if have < need {
            return Err(VolumeError::TruncatedFile { need, have });
        }
        if have > need {
            return Err(VolumeError::TrailingBytes { extra: have - need });
        }
        let voxels: Vec<f32> = data[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut vol = Volume {
            dims,
            spacing: SpacingMm::new(spacing[0] as f64, spacing[1] as f64, spacing[2] as f64),
            voxels,
            normalized: false,
        };
        // The format does not carry the normalization flag; recover it from
        // the payload statistics (the flag's defining property).
        let (mean, std) = vol.stats();
        vol.normalized = mean.abs() <= 1e-3 && (std - 1.0).abs() <= 1e-2;
        Ok(vol)
    }

    pub fn write_vol<P: AsRef<Path>>(&self, path: P) -> Result<(), VolumeError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_vol<P: AsRef<Path>>(path: P) -> Result<Volume, VolumeError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Volume::from_bytes(&data)
    }
}

/// Resamples the box interior to a `g^3` grid, x-fastest.
///
/// The box is split into `g` equal cells per axis and the volume is sampled
/// trilinearly at each cell center. Output length is always exactly `g^3`.
pub fn crop_resample(vol: &Volume, b: &Box3, g: u32) -> Vec<f32> {
    assert!(g >= 1, "crop grid must be non-empty");
    let gf = g as f64;
    let cell = [b.extent(0) / gf, b.extent(1) / gf, b.extent(2) / gf];
    let mut out = Vec::with_capacity((g as usize).pow(3));
    for k in 0..g {
        let pz = b.z0() + (k as f64 + 0.5) * cell[2];
        for j in 0..g {
            let py = b.y0() + (j as f64 + 0.5) * cell[1];
            for i in 0..g {
                let px = b.x0() + (i as f64 + 0.5) * cell[0];
                out.push(vol.sample_trilinear(px, py, pz));
            }
        }
    }
    out
}

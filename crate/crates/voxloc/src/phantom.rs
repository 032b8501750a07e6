//! Synthetic phantom volumes with ground-truth boxes.
//!
//! Each phantom places 1-3 non-overlapping ellipsoid "organs" in a noisy
//! background. Organ edges fall off logistically so the half-intensity
//! surface coincides exactly with the ellipsoid boundary, which makes the
//! ground-truth boxes recoverable from the voxel data by thresholding — a
//! property the tests lean on as an independent oracle.
//!
//! Generation is a pure function of the spec: every random draw comes from
//! one seeded stream in a fixed, documented order (per organ: semi-axes,
//! center, peak intensity; then crop margins; then one noise deviate per
//! voxel, x-fastest).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{Box3, SpacingMm};
use crate::rng::Rng;
use crate::volume::{Volume, VolumeError};

/// Width of the logistic intensity falloff in normalized ellipsoid radius.
pub const EDGE_WIDTH: f64 = 0.02;
/// Falloff support cutoff: contributions beyond `1 + 8w` are dropped.
const EDGE_SUPPORT: f64 = 1.0 + 8.0 * EDGE_WIDTH;
/// Keep organ surfaces at least this many voxels away from the volume edge.
const BORDER_MARGIN: f64 = 2.0;
const PLACEMENT_ATTEMPTS: u32 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FovMode {
    /// Organs occupy a modest fraction of a full field of view.
    Full,
    /// The volume is cut down to a margin around the organs, as if acquired
    /// with a tight field of view.
    Cropped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [u32; 3],
    pub spacing: SpacingMm,
    pub organ_count: u32,
    /// Peak intensity range, sampled uniformly per organ.
    pub organ_intensity: (f64, f64),
    pub background: f64,
    pub noise_std: f64,
    pub fov: FovMode,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [64, 64, 64],
            spacing: SpacingMm::isotropic(3.0),
            organ_count: 1,
            organ_intensity: (0.7, 1.0),
            background: 0.05,
            noise_std: 0.05,
            fov: FovMode::Full,
        }
    }
}

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place organ {organ} without overlap after {PLACEMENT_ATTEMPTS} attempts")]
    PlacementFailed { organ: u32 },
    #[error("sidecar line {line}: {msg}")]
    SidecarParse { line: usize, msg: String },
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A volume paired with its ground-truth boxes (`organ_id`, box). Organ ids
/// are 1-based and unique.
#[derive(Clone, Debug)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub truth: Vec<(u32, Box3)>,
}

impl LabeledVolume {
    pub fn truth_box(&self, organ_id: u32) -> Option<&Box3> {
        self.truth.iter().find(|(id, _)| *id == organ_id).map(|(_, b)| b)
    }
}

struct Organ {
    center: [f64; 3],
    semi: [f64; 3],
    peak: f64,
}

impl Organ {
    fn truth_box(&self) -> Box3 {
        Box3::new(
            self.center[0] - self.semi[0],
            self.center[1] - self.semi[1],
            self.center[2] - self.semi[2],
            self.center[0] + self.semi[0],
            self.center[1] + self.semi[1],
            self.center[2] + self.semi[2],
        )
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        validate(self)
    }
}

fn validate(spec: &PhantomSpec) -> Result<(), PhantomError> {
    let err = |msg: &str| Err(PhantomError::InvalidSpec(msg.to_string()));
    if !(1..=3).contains(&spec.organ_count) {
        return err("organ_count must be 1..=3");
    }
    if spec.dims.iter().any(|&d| d < 24) {
        return err("dims must be at least 24 voxels per axis");
    }
    if spec.dims.iter().map(|&d| d as u64).product::<u64>() > crate::volume::MAX_VOXELS {
        return err("dims exceed the voxel-count limit");
    }
    let (lo, hi) = spec.organ_intensity;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo <= spec.background {
        return err("organ_intensity must be a finite range above background");
    }
    if !spec.background.is_finite() || spec.background < 0.0 {
        return err("background must be finite and non-negative");
    }
    if !spec.noise_std.is_finite() || spec.noise_std < 0.0 {
        return err("noise_std must be finite and non-negative");
    }
    Ok(())
}

fn boxes_overlap_with_margin(a: &Box3, b: &Box3, margin: f64) -> bool {
    (0..3).all(|axis| a.lo(axis) - margin < b.hi(axis) && b.lo(axis) - margin < a.hi(axis))
}

/// Generates one phantom. Deterministic in the spec: identical specs give
/// bit-identical volumes and truth boxes.
pub fn generate(spec: &PhantomSpec) -> Result<LabeledVolume, PhantomError> {
    validate(spec)?;
    let mut rng = Rng::new(spec.seed);
    let dims = spec.dims;

    // Pass 1: place organs, rejecting overlaps (with a one-voxel margin).
    let mut organs: Vec<Organ> = Vec::new();
    for organ_idx in 0..spec.organ_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut semi = [0.0; 3];
            let mut center = [0.0; 3];
            for axis in 0..3 {
                // Semi-axes span [max(4, dim/8), max(4, dim/4)]. The lower
                // bound scales with the volume because organs near the
                // 4-voxel floor in a large volume are smaller than one
                // action step of the default start box, leaving no
                // single-action path that improves the overlap; such
                // targets are unlocalizable even for an oracle policy.
                let max_semi = (dims[axis] as f64 / 4.0).max(4.0);
                let min_semi = (dims[axis] as f64 / 8.0).clamp(4.0, max_semi);
                semi[axis] = rng.range_f64(min_semi, max_semi);
            }
            for axis in 0..3 {
                let lo = semi[axis] + BORDER_MARGIN;
                let hi = dims[axis] as f64 - BORDER_MARGIN - semi[axis];
                center[axis] = rng.range_f64(lo, hi);
            }
            let peak = rng.range_f64(spec.organ_intensity.0, spec.organ_intensity.1);
            let candidate = Organ { center, semi, peak };
            let cbox = candidate.truth_box();
            if organs.iter().all(|o| !boxes_overlap_with_margin(&o.truth_box(), &cbox, 1.0)) {
                organs.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PhantomError::PlacementFailed { organ: organ_idx + 1 });
        }
    }

    // Crop margins are drawn even though they are only used in Cropped mode
    // so that both modes see the same organ layout for a given seed.
    let pads: [u32; 6] = std::array::from_fn(|_| 3 + rng.below(6) as u32);

    // Pass 2: background noise over the full grid, one deviate per voxel.
    let n = dims.iter().map(|&d| d as usize).product();
    let mut voxels = vec![0f32; n];
    for v in voxels.iter_mut() {
        *v = (spec.background + spec.noise_std * rng.normal()) as f32;
    }

    // Pass 3: add each organ's logistic profile inside its support box.
    let idx = |x: u32, y: u32, z: u32| {
        (x as usize) + (dims[0] as usize) * ((y as usize) + (dims[1] as usize) * z as usize)
    };
    for organ in &organs {
        let mut lo = [0u32; 3];
        let mut hi = [0u32; 3];
        for axis in 0..3 {
            let reach = organ.semi[axis] * EDGE_SUPPORT + 1.0;
            lo[axis] = (organ.center[axis] - reach).floor().max(0.0) as u32;
            hi[axis] = ((organ.center[axis] + reach).ceil() as u32).min(dims[axis] - 1);
        }
        let gain = organ.peak - spec.background;
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let dx = (x as f64 - organ.center[0]) / organ.semi[0];
                    let dy = (y as f64 - organ.center[1]) / organ.semi[1];
                    let dz = (z as f64 - organ.center[2]) / organ.semi[2];
                    let d = (dx * dx + dy * dy + dz * dz).sqrt();
                    if d > EDGE_SUPPORT {
                        continue;
                    }
                    // Logistic edge: exactly half intensity on the ellipsoid
                    // surface (d == 1), saturating inward.
                    let s = 1.0 / (1.0 + ((d - 1.0) / EDGE_WIDTH).exp());
                    voxels[idx(x, y, z)] += (gain * s) as f32;
                }
            }
        }
    }

    let mut truth: Vec<(u32, Box3)> =
        organs.iter().enumerate().map(|(i, o)| (i as u32 + 1, o.truth_box())).collect();

    let volume = match spec.fov {
        FovMode::Full => Volume::new(dims, spec.spacing, voxels)?,
        FovMode::Cropped => {
            let mut lo = [u32::MAX; 3];
            let mut hi = [0u32; 3];
            for (_, b) in &truth {
                for axis in 0..3 {
                    lo[axis] = lo[axis].min(b.lo(axis).floor().max(0.0) as u32);
                    hi[axis] = hi[axis].max(b.hi(axis).ceil() as u32);
                }
            }
            let mut new_dims = [0u32; 3];
            for axis in 0..3 {
                lo[axis] = lo[axis].saturating_sub(pads[axis * 2]);
                hi[axis] = (hi[axis] + pads[axis * 2 + 1]).min(dims[axis]);
                new_dims[axis] = hi[axis] - lo[axis];
            }
            let mut cropped = Vec::with_capacity(new_dims.iter().map(|&d| d as usize).product());
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        cropped.push(voxels[idx(x, y, z)]);
                    }
                }
            }
            for (_, b) in truth.iter_mut() {
                *b = Box3::new(
                    b.x0() - lo[0] as f64,
                    b.y0() - lo[1] as f64,
                    b.z0() - lo[2] as f64,
                    b.x1() - lo[0] as f64,
                    b.y1() - lo[1] as f64,
                    b.z1() - lo[2] as f64,
                );
            }
            Volume::new(new_dims, spec.spacing, cropped)?
        }
    };

    Ok(LabeledVolume { volume, truth })
}

/// Spec for element `idx` of the dataset rooted at `template.seed`.
pub fn spec_for_index(template: &PhantomSpec, idx: u64) -> PhantomSpec {
    PhantomSpec { seed: Rng::derive_stream(template.seed, idx), ..template.clone() }
}

/// Generates the train/test split in memory. Test volumes use dataset
/// indices after the training ones, so the two sets never share a seed.
pub fn generate_split(
    template: &PhantomSpec,
    n_train: u32,
    n_test: u32,
) -> Result<(Vec<LabeledVolume>, Vec<LabeledVolume>), PhantomError> {
    let mut train = Vec::with_capacity(n_train as usize);
    for i in 0..n_train {
        train.push(generate(&spec_for_index(template, i as u64))?);
    }
    let mut test = Vec::with_capacity(n_test as usize);
    for j in 0..n_test {
        test.push(generate(&spec_for_index(template, (n_train + j) as u64))?);
    }
    Ok((train, test))
}

/// Serializes truth boxes: one `organ_id x0 y0 z0 x1 y1 z1` line each.
pub fn write_sidecar(truth: &[(u32, Box3)]) -> String {
    let mut out = String::from("# organ_id x0 y0 z0 x1 y1 z1\n");
    for (id, b) in truth {
        let c = b.corners();
        writeln!(out, "{} {} {} {} {} {} {}", id, c[0], c[1], c[2], c[3], c[4], c[5]).unwrap();
    }
    out
}

/// Parses a truth sidecar. Blank lines and `#` comments are ignored; every
/// other line must carry an organ id and six finite corner coordinates
/// forming a valid box, with no duplicate ids.
pub fn parse_sidecar(text: &str) -> Result<Vec<(u32, Box3)>, PhantomError> {
    let mut out: Vec<(u32, Box3)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(PhantomError::SidecarParse {
                line: line_no,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let id: u32 = fields[0].parse().map_err(|_| PhantomError::SidecarParse {
            line: line_no,
            msg: format!("bad organ id {:?}", fields[0]),
        })?;
        let mut c = [0f64; 6];
        for (k, f) in fields[1..].iter().enumerate() {
            c[k] = f.parse().map_err(|_| PhantomError::SidecarParse {
                line: line_no,
                msg: format!("bad coordinate {f:?}"),
            })?;
        }
        let b = Box3::try_new(c[0], c[1], c[2], c[3], c[4], c[5]).map_err(|e| {
            PhantomError::SidecarParse { line: line_no, msg: e.to_string() }
        })?;
        if out.iter().any(|(seen, _)| *seen == id) {
            return Err(PhantomError::SidecarParse {
                line: line_no,
                msg: format!("duplicate organ id {id}"),
            });
        }
        out.push((id, b));
    }
    Ok(out)
}

/// One dataset entry: volume path and sidecar path, as written (relative to
/// the manifest's directory).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume: String,
    pub sidecar: String,
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("# volume sidecar\n");
    for e in entries {
        writeln!(out, "{} {}", e.volume, e.sidecar).unwrap();
    }
    out
}

/// Parses a manifest: `<volume-path> <sidecar-path>` per line, `#` comments
/// allowed. Paths are whitespace-delimited and may not contain spaces.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, PhantomError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(PhantomError::ManifestParse {
                line: i + 1,
                msg: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        out.push(ManifestEntry { volume: fields[0].to_string(), sidecar: fields[1].to_string() });
    }
    Ok(out)
}

/// Loads a volume + sidecar pair and normalizes the intensities, ready for
/// the environment.
pub fn load_labeled<P: AsRef<Path>, Q: AsRef<Path>>(
    vol_path: P,
    sidecar_path: Q,
) -> Result<LabeledVolume, PhantomError> {
    let volume = Volume::read_vol(vol_path)?.normalize()?;
    let truth = parse_sidecar(&std::fs::read_to_string(sidecar_path)?)?;
    Ok(LabeledVolume { volume, truth })
}

/// Loads every entry of a manifest, resolving paths against the manifest's
/// directory.
pub fn load_manifest_volumes<P: AsRef<Path>>(
    manifest_path: P,
) -> Result<Vec<LabeledVolume>, PhantomError> {
    let manifest_path = manifest_path.as_ref();
    let entries = parse_manifest(&std::fs::read_to_string(manifest_path)?)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    entries
        .iter()
        .map(|e| load_labeled(root.join(&e.volume), root.join(&e.sidecar)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Generates and writes a full dataset: `train/` and `test/` volume +
/// sidecar files plus one manifest per split at the root.
pub fn generate_dataset<P: AsRef<Path>>(
    out_dir: P,
    template: &PhantomSpec,
    n_train: u32,
    n_test: u32,
) -> Result<DatasetPaths, PhantomError> {
    let root = out_dir.as_ref().to_path_buf();
    let mut manifests = Vec::new();
    for (split, count, offset) in [("train", n_train, 0u64), ("test", n_test, n_train as u64)] {
        std::fs::create_dir_all(root.join(split))?;
        let mut entries = Vec::new();
        for i in 0..count {
            let labeled = generate(&spec_for_index(template, offset + i as u64))?;
            let vol_rel = format!("{split}/vol_{i:03}.vol1");
            let truth_rel = format!("{split}/vol_{i:03}.truth.txt");
            labeled.volume.write_vol(root.join(&vol_rel))?;
            std::fs::write(root.join(&truth_rel), write_sidecar(&labeled.truth))?;
            entries.push(ManifestEntry { volume: vol_rel, sidecar: truth_rel });
        }
        let manifest_path = root.join(format!("{split}_manifest.txt"));
        std::fs::write(&manifest_path, write_manifest(&entries))?;
        manifests.push(manifest_path);
    }
    let test_manifest = manifests.pop().unwrap();
    let train_manifest = manifests.pop().unwrap();
    Ok(DatasetPaths { root, train_manifest, test_manifest })
}

//! Continuous axis-aligned boxes, the eleven deformation actions, and the
//! overlap / distance metrics that drive reward and evaluation.
//!
//! Boxes live in continuous voxel-index coordinates. A box is presented as a
//! corner pair `(x0, y0, z0)-(x1, y1, z1)` but stored as origin + extent:
//! translating then only touches the origin, so extents survive any chain of
//! translations bit-exactly, which the action algebra relies on.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box extent along {axis} must be strictly positive")]
    EmptyExtent { axis: char },
}

/// Physical voxel spacing in millimetres per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpacingMm {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SpacingMm {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        assert!(
            x > 0.0 && y > 0.0 && z > 0.0 && x.is_finite() && y.is_finite() && z.is_finite(),
            "spacing must be positive and finite"
        );
        SpacingMm { x, y, z }
    }

    pub fn isotropic(s: f64) -> Self {
        SpacingMm::new(s, s, s)
    }

    pub fn axis(&self, axis: usize) -> f64 {
        [self.x, self.y, self.z][axis]
    }
}

/// Axis-aligned box in continuous voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3 {
    org: [f64; 3],
    ext: [f64; 3],
}

impl Box3 {
    /// Builds a box from its corner pair, rejecting non-finite or
    /// empty/inverted inputs.
    pub fn try_new(x0: f64, y0: f64, z0: f64, x1: f64, y1: f64, z1: f64) -> Result<Self, GeomError> {
        let c = [x0, y0, z0, x1, y1, z1];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        for (axis, (lo, hi)) in [(x0, x1), (y0, y1), (z0, z1)].into_iter().enumerate() {
            if hi - lo <= 0.0 {
                return Err(GeomError::EmptyExtent { axis: ['x', 'y', 'z'][axis] });
            }
        }
        Ok(Box3 {
            org: [x0, y0, z0],
            ext: [x1 - x0, y1 - y0, z1 - z0],
        })
    }

    /// Corner-pair constructor that panics on invalid input; for trusted
    /// literals and internal call sites.
    pub fn new(x0: f64, y0: f64, z0: f64, x1: f64, y1: f64, z1: f64) -> Self {
        Box3::try_new(x0, y0, z0, x1, y1, z1).expect("valid box")
    }

    pub fn from_origin_extent(org: [f64; 3], ext: [f64; 3]) -> Self {
        assert!(
            org.iter().chain(ext.iter()).all(|v| v.is_finite()) && ext.iter().all(|&e| e > 0.0),
            "origin must be finite and extents strictly positive"
        );
        Box3 { org, ext }
    }

    pub fn x0(&self) -> f64 {
        self.org[0]
    }
    pub fn y0(&self) -> f64 {
        self.org[1]
    }
    pub fn z0(&self) -> f64 {
        self.org[2]
    }
    pub fn x1(&self) -> f64 {
        self.org[0] + self.ext[0]
    }
    pub fn y1(&self) -> f64 {
        self.org[1] + self.ext[1]
    }
    pub fn z1(&self) -> f64 {
        self.org[2] + self.ext[2]
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.org[axis]
    }
    pub fn hi(&self, axis: usize) -> f64 {
        self.org[axis] + self.ext[axis]
    }

    /// Corners as `[x0, y0, z0, x1, y1, z1]`.
    pub fn corners(&self) -> [f64; 6] {
        [self.x0(), self.y0(), self.z0(), self.x1(), self.y1(), self.z1()]
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.ext[axis]
    }

    pub fn extents(&self) -> [f64; 3] {
        self.ext
    }

    pub fn center(&self) -> [f64; 3] {
        [
            self.org[0] + self.ext[0] * 0.5,
            self.org[1] + self.ext[1] * 0.5,
            self.org[2] + self.ext[2] * 0.5,
        ]
    }

    /// Volume from the corner pair; consistent with how `iou` measures
    /// overlap so that identical boxes score exactly 1.
    pub fn volume(&self) -> f64 {
        (self.hi(0) - self.lo(0)) * (self.hi(1) - self.lo(1)) * (self.hi(2) - self.lo(2))
    }
}

/// The eleven box deformations. The discriminant doubles as the Q-network
/// output index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Action {
    TxPos = 0,
    TxNeg = 1,
    TyPos = 2,
    TyNeg = 3,
    TzPos = 4,
    TzNeg = 5,
    ScaleUp = 6,
    ScaleDown = 7,
    Thinner = 8,
    Flatter = 9,
    Taller = 10,
}

pub const ACTION_COUNT: usize = 11;

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::TxPos,
        Action::TxNeg,
        Action::TyPos,
        Action::TyNeg,
        Action::TzPos,
        Action::TzNeg,
        Action::ScaleUp,
        Action::ScaleDown,
        Action::Thinner,
        Action::Flatter,
        Action::Taller,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ord: usize) -> Option<Action> {
        Action::ALL.get(ord).copied()
    }

    /// Stable lower-case token used in traces and logs.
    pub fn token(self) -> &'static str {
        match self {
            Action::TxPos => "tx_pos",
            Action::TxNeg => "tx_neg",
            Action::TyPos => "ty_pos",
            Action::TyNeg => "ty_neg",
            Action::TzPos => "tz_pos",
            Action::TzNeg => "tz_neg",
            Action::ScaleUp => "scale_up",
            Action::ScaleDown => "scale_down",
            Action::Thinner => "thinner",
            Action::Flatter => "flatter",
            Action::Taller => "taller",
        }
    }

    pub fn parse_token(s: &str) -> Option<Action> {
        Action::ALL.iter().copied().find(|a| a.token() == s)
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Applies `action` with step fraction `alpha`, growing the z axis for
/// `Taller`. See [`apply_action_configured`] for the sign choice.
pub fn apply_action(b: Box3, action: Action, alpha: f64) -> Box3 {
    apply_action_configured(b, action, alpha, true)
}

/// Applies one deformation.
///
/// Translations move the box by `alpha * extent` along one axis and leave
/// every extent untouched. Scaling grows or shrinks all three extents by the
/// factor `1 ± alpha` symmetrically about the center. The three reshaping
/// actions touch a single axis: `Thinner` shrinks x, `Flatter` shrinks y,
/// and `Taller` resizes z — growing when `taller_grows` is set (the default
/// reading of the action name), shrinking otherwise.
pub fn apply_action_configured(b: Box3, action: Action, alpha: f64, taller_grows: bool) -> Box3 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let mut org = b.org;
    let mut ext = b.ext;

    let translate = |org: &mut [f64; 3], axis: usize, sign: f64| {
        org[axis] += sign * alpha * ext[axis];
    };
    // Rescales one axis about its midpoint. `factor` is 1 ± alpha; the
    // origin shift is derived from the realized new extent so the center
    // moves by at most an ulp or two.
    let rescale = |org: &mut [f64; 3], ext: &mut [f64; 3], axis: usize, factor: f64| {
        let new_ext = ext[axis] * factor;
        org[axis] -= (new_ext - ext[axis]) * 0.5;
        ext[axis] = new_ext;
    };

    match action {
        Action::TxPos => translate(&mut org, 0, 1.0),
        Action::TxNeg => translate(&mut org, 0, -1.0),
        Action::TyPos => translate(&mut org, 1, 1.0),
        Action::TyNeg => translate(&mut org, 1, -1.0),
        Action::TzPos => translate(&mut org, 2, 1.0),
        Action::TzNeg => translate(&mut org, 2, -1.0),
        Action::ScaleUp => {
            for axis in 0..3 {
                rescale(&mut org, &mut ext, axis, 1.0 + alpha);
            }
        }
        Action::ScaleDown => {
            for axis in 0..3 {
                rescale(&mut org, &mut ext, axis, 1.0 - alpha);
            }
        }
        Action::Thinner => rescale(&mut org, &mut ext, 0, 1.0 - alpha),
        Action::Flatter => rescale(&mut org, &mut ext, 1, 1.0 - alpha),
        Action::Taller => {
            let factor = if taller_grows { 1.0 + alpha } else { 1.0 - alpha };
            rescale(&mut org, &mut ext, 2, factor);
        }
    }
    Box3 { org, ext }
}

/// Intersection-over-union of two boxes.
///
/// Computed entirely from the corner pairs so that identical boxes score
/// exactly 1.0 and disjoint boxes exactly 0.0.
pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let mut inter = 1.0f64;
    for axis in 0..3 {
        let lo = a.lo(axis).max(b.lo(axis));
        let hi = a.hi(axis).min(b.hi(axis));
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Mean absolute face-to-face distance in millimetres: the six corresponding
/// wall offsets, each weighted by its axis spacing, averaged.
pub fn wall_distance_mm(pred: &Box3, truth: &Box3, spacing: SpacingMm) -> f64 {
    let mut total = 0.0;
    for axis in 0..3 {
        let s = spacing.axis(axis);
        total += (pred.lo(axis) - truth.lo(axis)).abs() * s;
        total += (pred.hi(axis) - truth.hi(axis)).abs() * s;
    }
    total / 6.0
}

/// Euclidean distance between box centers in millimetres.
pub fn centroid_distance_mm(pred: &Box3, truth: &Box3, spacing: SpacingMm) -> f64 {
    let pc = pred.center();
    let tc = truth.center();
    let mut sq = 0.0;
    for axis in 0..3 {
        let d = (pc[axis] - tc[axis]) * spacing.axis(axis);
        sq += d * d;
    }
    sq.sqrt()
}

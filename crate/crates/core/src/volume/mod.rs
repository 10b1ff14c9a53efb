//! 3D CT volumes with physical geometry, and the preprocessing chain that
//! turns a scan into a fixed-size normalized patch: ROI localization,
//! physical crop, grid resampling, HU windowing, crops and augmentation.
//!
//! Voxel `(x, y, z)` lives at flat index `x + nx * (y + ny * z)` and its
//! center sits at `origin + index * spacing` in millimetres.

mod augment;
pub mod kvol;

pub use augment::{augment, AugConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default physical crop around the ROI, mm.
pub const CROP_EXTENT_MM: [f64; 3] = [140.0, 140.0, 160.0];
/// Default target spacing after resampling, mm/voxel.
pub const TARGET_SPACING_MM: [f64; 3] = [1.0, 1.0, 5.0];
/// Default network input grid.
pub const TARGET_DIMS: [usize; 3] = [140, 140, 32];
/// Training/inference patch.
pub const PATCH_DIMS: [usize; 3] = [128, 128, 32];
pub const WINDOW_LEVEL_HU: f64 = 50.0;
pub const WINDOW_WIDTH_HU: f64 = 500.0;

// Continuous indices this close to an integer are snapped so that grid-aligned
// sampling reproduces source voxels exactly.
const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        Ok(Self { dims, spacing, origin })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Physical position of a voxel center.
    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + idx[a] as f64 * self.spacing[a])
    }

    /// Physical center of the grid (midpoint between first and last voxel centers).
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    /// Physical extent covered by the voxels, edge to edge.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// True if `p` lies within the voxel-edge bounds of the grid.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let c = (p[a] - self.origin[a]) / self.spacing[a];
            c >= -0.5 - SNAP_TOL && c <= self.dims[a] as f64 - 0.5 + SNAP_TOL
        })
    }

    /// Grid of the given dims/spacing whose center coincides with `center`.
    fn centered_on(center: [f64; 3], dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let origin = std::array::from_fn(|a| center[a] - 0.5 * (dims[a] - 1) as f64 * spacing[a]);
        Self { dims, spacing, origin }
    }
}

/// Scalar CT volume. Intensities are HU before windowing and in `[0, 1]` after.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geom: Geometry,
    voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(geom: Geometry, voxels: Vec<f32>) -> Result<Self> {
        let geom = Geometry::new(geom.dims, geom.spacing, geom.origin)?;
        if voxels.len() != geom.len() {
            return Err(Error::invalid(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, voxels })
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        let n = Geometry::new(geom.dims, geom.spacing, geom.origin)?.len();
        Self::new(geom, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel index.
    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let geom = Geometry::new(geom.dims, geom.spacing, geom.origin)?;
        let [nx, ny, nz] = geom.dims;
        let mut voxels = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Ok(Self { geom, voxels })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.geom.index(x, y, z)]
    }

    pub fn min_value(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Same grid, shifted in physical space.
    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.geom.origin = origin;
        self
    }
}

/// Segmentation labels on the grid of a paired volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    geom: Geometry,
    labels: Vec<u8>,
}

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_KIDNEY: u8 = 1;
pub const LABEL_CYST: u8 = 2;
pub const LABEL_TUMOR: u8 = 3;

impl Mask3D {
    pub fn new(geom: Geometry, labels: Vec<u8>) -> Result<Self> {
        let geom = Geometry::new(geom.dims, geom.spacing, geom.origin)?;
        if labels.len() != geom.len() {
            return Err(Error::invalid("label count does not match dims"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > LABEL_TUMOR) {
            return Err(Error::invalid(format!("mask label {bad} outside {{0,1,2,3}}")));
        }
        Ok(Self { geom, labels })
    }

    pub fn empty(geom: Geometry) -> Result<Self> {
        let n = Geometry::new(geom.dims, geom.spacing, geom.origin)?.len();
        Self::new(geom, vec![0; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        assert!(label <= LABEL_TUMOR, "label {label} out of range");
        let i = self.geom.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geom.index(x, y, z)]
    }

    /// Errors unless the mask lies on exactly the same grid as `vol`.
    pub fn check_paired(&self, vol: &Volume3D) -> Result<()> {
        if self.geom != vol.geom {
            return Err(Error::invalid("mask geometry does not match volume geometry"));
        }
        Ok(())
    }

    fn indices(&self) -> impl Iterator<Item = ([usize; 3], u8)> + '_ {
        let [nx, ny, _] = self.geom.dims;
        self.labels.iter().enumerate().map(move |(i, &l)| ([i % nx, (i / nx) % ny, i / (nx * ny)], l))
    }
}

/// ROI center in physical coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiPoint {
    pub center: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiStrategy {
    /// Mean position of every nonzero voxel (pre-training inputs).
    ForegroundCentroid,
    /// Centroid of the primary lesion on its largest axial slice (downstream inputs).
    LargestAxialLesion,
}

impl std::str::FromStr for RoiStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground_centroid" => Ok(Self::ForegroundCentroid),
            "largest_axial_lesion" => Ok(Self::LargestAxialLesion),
            other => Err(Error::invalid(format!("unknown ROI strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

pub fn locate_roi_center(mask: &Mask3D, strategy: RoiStrategy) -> Result<RoiPoint> {
    let g = mask.geometry();
    match strategy {
        RoiStrategy::ForegroundCentroid => {
            let mut sum = [0.0f64; 3];
            let mut n = 0usize;
            for (idx, l) in mask.indices() {
                if l != LABEL_BACKGROUND {
                    let p = g.voxel_center(idx);
                    (0..3).for_each(|a| sum[a] += p[a]);
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::NoForeground);
            }
            Ok(RoiPoint { center: sum.map(|s| s / n as f64) })
        }
        RoiStrategy::LargestAxialLesion => {
            // tumor preferred over cyst
            let label = [LABEL_TUMOR, LABEL_CYST]
                .into_iter()
                .find(|l| mask.labels.contains(l))
                .ok_or(Error::NoForeground)?;
            let [nx, ny, nz] = g.dims;
            let mut best: Option<(usize, usize)> = None; // (z, area)
            for z in 0..nz {
                let slice = &mask.labels[z * nx * ny..(z + 1) * nx * ny];
                let area = slice.iter().filter(|&&l| l == label).count();
                // first slice wins ties
                if area > 0 && best.is_none_or(|(_, a)| area > a) {
                    best = Some((z, area));
                }
            }
            let (z, area) = best.ok_or(Error::NoForeground)?;
            let slice = &mask.labels[z * nx * ny..(z + 1) * nx * ny];
            let (mut sx, mut sy) = (0.0, 0.0);
            for (i, _) in slice.iter().enumerate().filter(|(_, &l)| l == label) {
                let p = g.voxel_center([i % nx, i / nx, z]);
                sx += p[0];
                sy += p[1];
            }
            let zc = g.voxel_center([0, 0, z])[2];
            Ok(RoiPoint { center: [sx / area as f64, sy / area as f64, zc] })
        }
    }
}

/// Samples `vol` on `target` by mapping each target voxel center back to a
/// continuous source index. Positions outside the source voxel extent take
/// `pad`.
fn sample_onto(vol: &Volume3D, target: Geometry, interp: Interp, pad: f32) -> Volume3D {
    let src = &vol.geom;
    let [tx, ty, tz] = target.dims;
    // per-axis continuous source coordinates
    let coords: [Vec<Option<f64>>; 3] = std::array::from_fn(|a| {
        (0..target.dims[a])
            .map(|i| {
                let p = target.origin[a] + i as f64 * target.spacing[a];
                let mut c = (p - src.origin[a]) / src.spacing[a];
                let r = c.round();
                if (c - r).abs() < SNAP_TOL {
                    c = r;
                }
                let n = src.dims[a] as f64;
                if c < -0.5 - SNAP_TOL || c > n - 0.5 + SNAP_TOL {
                    None
                } else {
                    Some(c.clamp(0.0, n - 1.0))
                }
            })
            .collect()
    });
    let mut out = Vec::with_capacity(target.len());
    for k in 0..tz {
        for j in 0..ty {
            for i in 0..tx {
                let v = match (coords[0][i], coords[1][j], coords[2][k]) {
                    (Some(cx), Some(cy), Some(cz)) => match interp {
                        Interp::Nearest => vol.get(
                            cx.round() as usize,
                            cy.round() as usize,
                            cz.round() as usize,
                        ),
                        Interp::Trilinear => trilinear(vol, [cx, cy, cz]),
                    },
                    _ => pad,
                };
                out.push(v);
            }
        }
    }
    Volume3D { geom: target, voxels: out }
}

/// Trilinear interpolation at an in-range continuous index.
fn trilinear(vol: &Volume3D, c: [f64; 3]) -> f32 {
    let dims = vol.geom.dims;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let f = c[a].floor();
        lo[a] = f as usize;
        w[a] = c[a] - f;
        hi[a] = if w[a] > 0.0 { (lo[a] + 1).min(dims[a] - 1) } else { lo[a] };
    }
    let mut acc = 0.0f64;
    for (dz, wz) in [(lo[2], 1.0 - w[2]), (hi[2], w[2])] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(lo[1], 1.0 - w[1]), (hi[1], w[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(lo[0], 1.0 - w[0]), (hi[0], w[0])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * vol.get(dx, dy, dz) as f64;
            }
        }
    }
    acc as f32
}

pub(crate) fn sample_point(vol: &Volume3D, c: [f64; 3], interp: Interp, pad: f32) -> f32 {
    let dims = vol.geom.dims;
    let mut cc = c;
    for a in 0..3 {
        let r = cc[a].round();
        if (cc[a] - r).abs() < SNAP_TOL {
            cc[a] = r;
        }
        let n = dims[a] as f64;
        if cc[a] < -0.5 - SNAP_TOL || cc[a] > n - 0.5 + SNAP_TOL {
            return pad;
        }
        cc[a] = cc[a].clamp(0.0, n - 1.0);
    }
    match interp {
        Interp::Nearest => vol.get(cc[0].round() as usize, cc[1].round() as usize, cc[2].round() as usize),
        Interp::Trilinear => trilinear(vol, cc),
    }
}

/// Resamples onto a grid of `target_dims` at `target_spacing`, centered on
/// the source grid center so both cover the same physical region.
pub fn resample_to_grid(
    vol: &Volume3D,
    target_spacing: [f64; 3],
    target_dims: [usize; 3],
    interp: Interp,
) -> Result<Volume3D> {
    if target_dims.contains(&0) {
        return Err(Error::invalid(format!("degenerate target dims {target_dims:?}")));
    }
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("target spacing must be > 0, got {target_spacing:?}")));
    }
    let target = Geometry::centered_on(vol.geom.center(), target_dims, target_spacing);
    Ok(sample_onto(vol, target, interp, vol.min_value()))
}

/// Resamples a label mask with nearest-neighbour lookup; background pads.
pub fn resample_mask(mask: &Mask3D, target_spacing: [f64; 3], target_dims: [usize; 3]) -> Result<Mask3D> {
    let as_vol = Volume3D { geom: mask.geom, voxels: mask.labels.iter().map(|&l| l as f32).collect() };
    if target_dims.contains(&0) || target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("degenerate mask resampling target"));
    }
    let target = Geometry::centered_on(mask.geom.center(), target_dims, target_spacing);
    let out = sample_onto(&as_vol, target, Interp::Nearest, 0.0);
    Mask3D::new(out.geom, out.voxels.iter().map(|&v| v as u8).collect())
}

/// Crops a box of `extent_mm` centered on `center` at the source spacing.
/// Output dims are `ceil(extent / spacing)` per axis; voxels outside the
/// source take the source minimum.
pub fn crop_physical(vol: &Volume3D, center: RoiPoint, extent_mm: [f64; 3]) -> Result<Volume3D> {
    if extent_mm.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::invalid(format!("crop extent must be > 0, got {extent_mm:?}")));
    }
    let spacing = vol.geom.spacing;
    let dims: [usize; 3] =
        std::array::from_fn(|a| ((extent_mm[a] / spacing[a]) - SNAP_TOL).ceil().max(1.0) as usize);
    let target = Geometry::centered_on(center.center, dims, spacing);
    Ok(sample_onto(vol, target, Interp::Trilinear, vol.min_value()))
}

/// Linear HU window: `clamp((hu - (level - width/2)) / width, 0, 1)`.
pub fn window_normalize(vol: &Volume3D, level: f64, width: f64) -> Result<Volume3D> {
    if !(width > 0.0) {
        return Err(Error::invalid(format!("window width must be > 0, got {width}")));
    }
    let lo = level - width / 2.0;
    let voxels = vol.voxels.iter().map(|&v| window_value(v as f64, lo, width) as f32).collect();
    Ok(Volume3D { geom: vol.geom, voxels })
}

#[inline]
fn window_value(hu: f64, lo: f64, width: f64) -> f64 {
    ((hu - lo) / width).clamp(0.0, 1.0)
}

/// Offset of a centered crop, flooring odd remainders.
pub fn center_crop_offset(input: [usize; 3], dims: [usize; 3]) -> Result<[usize; 3]> {
    if (0..3).any(|a| dims[a] > input[a] || dims[a] == 0) {
        return Err(Error::invalid(format!("crop dims {dims:?} do not fit in {input:?}")));
    }
    Ok(std::array::from_fn(|a| (input[a] - dims[a]) / 2))
}

/// Extracts the sub-grid starting at voxel `offset`.
pub fn crop_at(vol: &Volume3D, offset: [usize; 3], dims: [usize; 3]) -> Result<Volume3D> {
    let input = vol.dims();
    if (0..3).any(|a| dims[a] == 0 || offset[a] + dims[a] > input[a]) {
        return Err(Error::invalid(format!("crop {dims:?} at {offset:?} exceeds {input:?}")));
    }
    let origin = vol.geom.voxel_center(offset);
    let geom = Geometry { dims, spacing: vol.geom.spacing, origin };
    Volume3D::from_fn(geom, |x, y, z| vol.get(x + offset[0], y + offset[1], z + offset[2]))
}

pub fn center_crop(vol: &Volume3D, dims: [usize; 3]) -> Result<Volume3D> {
    let offset = center_crop_offset(vol.dims(), dims)?;
    crop_at(vol, offset, dims)
}

/// Physical crop, resample to the model grid, then window.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrepConfig {
    pub extent_mm: [f64; 3],
    pub spacing_mm: [f64; 3],
    pub dims: [usize; 3],
    pub level: f64,
    pub width: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            extent_mm: CROP_EXTENT_MM,
            spacing_mm: TARGET_SPACING_MM,
            dims: TARGET_DIMS,
            level: WINDOW_LEVEL_HU,
            width: WINDOW_WIDTH_HU,
        }
    }
}

pub fn preprocess(vol: &Volume3D, roi: RoiPoint, cfg: &PrepConfig) -> Result<Volume3D> {
    let cropped = crop_physical(vol, roi, cfg.extent_mm)?;
    let resampled = resample_to_grid(&cropped, cfg.spacing_mm, cfg.dims, Interp::Trilinear)?;
    window_normalize(&resampled, cfg.level, cfg.width)
}

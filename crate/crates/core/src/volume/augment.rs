use serde::{Deserialize, Serialize};

use super::{center_crop_offset, crop_at, sample_point, Interp, Volume3D, PATCH_DIMS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Random augmentation ranges for windowed volumes.
///
/// Defaults reproduce the training-time augmentation table: random
/// 128×128×32 sub-crop, ±10 px in-plane translation, ±π/10 rotation about
/// each axis, in-plane scaling in [0.9, 1.1], x-flip with probability 0.5,
/// intensity scale [0.9, 1.1] and shift [-0.1, 0.1], gamma in (0.5, 2.0)
/// with probability 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub translate_px: (i64, i64),
    pub rotate_rad: (f64, f64),
    pub scale: (f64, f64),
    pub flip_prob: f64,
    pub intensity_scale: (f64, f64),
    pub intensity_shift: (f64, f64),
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    pub crop_dims: [usize; 3],
    /// Probability of a random (rather than centered) sub-crop.
    pub crop_prob: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        let r = std::f64::consts::PI / 10.0;
        Self {
            translate_px: (-10, 10),
            rotate_rad: (-r, r),
            scale: (0.9, 1.1),
            flip_prob: 0.5,
            intensity_scale: (0.9, 1.1),
            intensity_shift: (-0.1, 0.1),
            gamma_prob: 0.5,
            gamma_range: (0.5, 2.0),
            crop_dims: PATCH_DIMS,
            crop_prob: 1.0,
            seed: 0,
        }
    }
}

impl AugConfig {
    /// Pre-training variant: flipping would break left/right consistency
    /// between a kidney and its report, so it is disabled.
    pub fn pretraining() -> Self {
        Self { flip_prob: 0.0, ..Self::default() }
    }

    /// Every transform collapsed to the identity; only a center crop remains.
    pub fn identity(crop_dims: [usize; 3]) -> Self {
        Self {
            translate_px: (0, 0),
            rotate_rad: (0.0, 0.0),
            scale: (1.0, 1.0),
            flip_prob: 0.0,
            intensity_scale: (1.0, 1.0),
            intensity_shift: (0.0, 0.0),
            gamma_prob: 0.0,
            gamma_range: (1.0, 1.0),
            crop_dims,
            crop_prob: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = [
            ("translate_px", self.translate_px.0 as f64, self.translate_px.1 as f64),
            ("rotate_rad", self.rotate_rad.0, self.rotate_rad.1),
            ("scale", self.scale.0, self.scale.1),
            ("intensity_scale", self.intensity_scale.0, self.intensity_scale.1),
            ("intensity_shift", self.intensity_shift.0, self.intensity_shift.1),
            ("gamma_range", self.gamma_range.0, self.gamma_range.1),
        ];
        for (name, lo, hi) in ordered {
            if !(lo <= hi) {
                return Err(Error::invalid(format!("{name} range is not ordered: ({lo}, {hi})")));
            }
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("gamma_prob", self.gamma_prob), ("crop_prob", self.crop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::invalid("scale factors must be positive"));
        }
        if self.gamma_range.0 <= 0.0 {
            return Err(Error::invalid("gamma must be positive"));
        }
        Ok(())
    }
}

/// Parameters drawn for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Draw {
    crop_offset: [usize; 3],
    translate: [i64; 2],
    angles: [f64; 3],
    scale: [f64; 2],
    flip: bool,
    intensity_scale: f64,
    intensity_shift: f64,
    gamma: Option<f64>,
}

fn draw(rng: &mut Rng, cfg: &AugConfig, input: [usize; 3]) -> Result<Draw> {
    use rand::Rng as _;
    let centered = center_crop_offset(input, cfg.crop_dims)?;
    // all draws happen unconditionally so the stream layout never depends on outcomes
    let random_crop = rng.random::<f64>() < cfg.crop_prob;
    let random_offset: [usize; 3] =
        std::array::from_fn(|a| rng::uniform_int(rng, 0, (input[a] - cfg.crop_dims[a]) as i64) as usize);
    let translate = [
        rng::uniform_int(rng, cfg.translate_px.0, cfg.translate_px.1),
        rng::uniform_int(rng, cfg.translate_px.0, cfg.translate_px.1),
    ];
    let angles = std::array::from_fn(|_| rng::uniform(rng, cfg.rotate_rad.0, cfg.rotate_rad.1));
    let scale = std::array::from_fn(|_| rng::uniform(rng, cfg.scale.0, cfg.scale.1));
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let intensity_scale = rng::uniform(rng, cfg.intensity_scale.0, cfg.intensity_scale.1);
    let intensity_shift = rng::uniform(rng, cfg.intensity_shift.0, cfg.intensity_shift.1);
    let gamma_on = rng.random::<f64>() < cfg.gamma_prob;
    let gamma = rng::uniform(rng, cfg.gamma_range.0, cfg.gamma_range.1);
    Ok(Draw {
        crop_offset: if random_crop { random_offset } else { centered },
        translate,
        angles,
        scale,
        flip,
        intensity_scale,
        intensity_shift,
        gamma: gamma_on.then_some(gamma),
    })
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rz · Ry · Rx.
fn rotation(angles: [f64; 3]) -> Mat3 {
    let [ax, ay, az] = angles;
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// Translate, then rotate, then scale, all about the volume center and in
/// physical coordinates. Each output voxel samples the input at the inverse
/// image of its center.
fn apply_affine(vol: &Volume3D, d: &Draw) -> Volume3D {
    let identity = d.translate == [0, 0] && d.angles == [0.0; 3] && d.scale == [1.0, 1.0];
    if identity {
        return vol.clone();
    }
    let g = *vol.geometry();
    let c = g.center();
    let r = rotation(d.angles);
    let t = [d.translate[0] as f64 * g.spacing[0], d.translate[1] as f64 * g.spacing[1], 0.0];
    let s = [d.scale[0], d.scale[1], 1.0];
    let pad = vol.min_value();
    Volume3D::from_fn(g, |x, y, z| {
        let q = g.voxel_center([x, y, z]);
        let rel: [f64; 3] = std::array::from_fn(|a| (q[a] - c[a]) / s[a]);
        // Rᵀ · rel − t
        let src: [f64; 3] = std::array::from_fn(|a| (0..3).map(|k| r[k][a] * rel[k]).sum::<f64>() - t[a]);
        let idx: [f64; 3] = std::array::from_fn(|a| (c[a] + src[a] - g.origin[a]) / g.spacing[a]);
        sample_point(vol, idx, Interp::Trilinear, pad)
    })
    .expect("geometry already validated")
}

/// Applies the augmentation chain to a windowed volume. Deterministic in
/// `(vol, cfg)`; output clamped to `[0, 1]`.
pub fn augment(vol: &Volume3D, cfg: &AugConfig) -> Result<Volume3D> {
    cfg.validate()?;
    let dims = vol.dims();
    if (0..3).any(|a| cfg.crop_dims[a] > dims[a] || cfg.crop_dims[a] == 0) {
        return Err(Error::invalid(format!("crop dims {:?} exceed input {:?}", cfg.crop_dims, dims)));
    }
    let mut rng = rng::seeded(cfg.seed);
    let d = draw(&mut rng, cfg, dims)?;

    let cropped = crop_at(vol, d.crop_offset, cfg.crop_dims)?;
    let warped = apply_affine(&cropped, &d);
    let g = *warped.geometry();
    let [nx, ny, nz] = g.dims;
    let src = warped.voxels();
    let mut out = Vec::with_capacity(src.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let sx = if d.flip { nx - 1 - x } else { x };
                let mut v = src[g.index(sx, y, z)] as f64;
                v = v * d.intensity_scale + d.intensity_shift;
                if let Some(gamma) = d.gamma {
                    v = v.clamp(0.0, 1.0).powf(gamma);
                }
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume3D::new(g, out)
}

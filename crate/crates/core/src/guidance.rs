//! Eye-region-aware guidance weights: a trapezoidal schedule over denoising
//! progress, blended spatially by a Gaussian around the eye midpoint.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mapper::{KeypointFrame, Side};

pub const DEFAULT_GRID: (usize, usize) = (64, 64);

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct GuidanceParams {
    pub omega_hi: f64,
    pub omega_lo: f64,
    pub omega_bg: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub steps: usize,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            omega_hi: 8.0,
            omega_lo: 4.0,
            omega_bg: 1.0,
            alpha: 0.25,
            gamma: 0.55,
            kappa: 1.0,
            steps: 40,
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if !(self.omega_lo > 0.0 && self.omega_hi >= self.omega_lo) {
            return bad("require omega_hi >= omega_lo > 0");
        }
        if !(self.omega_bg > 0.0) {
            return bad("require omega_bg > 0");
        }
        if !(0.0 <= self.alpha && self.alpha < self.gamma && self.gamma <= 1.0) {
            return bad("require 0 <= alpha < gamma <= 1");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("require kappa > 0");
        }
        if self.steps == 0 {
            return bad("require at least one step");
        }
        Ok(())
    }

    /// Progress of step `i`, counting from zero.
    pub fn rho(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }
}

/// Trapezoidal schedule: `omega_hi` before `alpha`, linear down to
/// `omega_lo` at `gamma`, flat afterwards.
pub fn temporal_weight(rho: f64, p: &GuidanceParams) -> f64 {
    if rho < p.alpha {
        p.omega_hi
    } else if rho < p.gamma {
        let s = (rho - p.alpha) / (p.gamma - p.alpha);
        p.omega_hi - s * (p.omega_hi - p.omega_lo)
    } else {
        p.omega_lo
    }
}

/// Eye midpoint and inter-eye distance in latent-grid units.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EyeGeometry {
    pub center: [f64; 2],
    pub distance: f64,
}

impl EyeGeometry {
    pub fn new(center: [f64; 2], distance: f64) -> Result<Self> {
        if !(distance > 0.0 && distance.is_finite()) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "eye distance must be positive, got {distance}"
            )));
        }
        Ok(Self { center, distance })
    }

    /// Iris centres of a normalized frame scaled to a latent grid. `image`
    /// is the pixel size `[width, height]`; `compression` is pixels per
    /// latent cell.
    pub fn from_frame(frame: &KeypointFrame, image: [f64; 2], compression: f64) -> Result<Self> {
        if !(compression > 0.0) {
            return Err(Error::InvalidGeometry(
                "compression factor must be positive".into(),
            ));
        }
        let (l, r) = (
            frame.iris_center(Side::Left),
            frame.iris_center(Side::Right),
        );
        let to_grid = |p: [f64; 2]| [p[0] * image[0] / compression, p[1] * image[1] / compression];
        let (l, r) = (to_grid(l), to_grid(r));
        let center = [0.5 * (l[0] + r[0]), 0.5 * (l[1] + r[1])];
        Self::new(center, libm::hypot(l[0] - r[0], l[1] - r[1]))
    }
}

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Gaussian weight around the eye midpoint, sampled at integer cell coordinates.
pub fn spatial_field(dims: (usize, usize), geom: &EyeGeometry, kappa: f64) -> Result<Grid> {
    if !(geom.distance > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "eye distance must be positive, got {}",
            geom.distance
        )));
    }
    let (h, w) = dims;
    let s = kappa * geom.distance;
    let denom = 2.0 * s * s;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - geom.center[0];
            let dy = y as f64 - geom.center[1];
            values.push(libm::exp(-(dx * dx + dy * dy) / denom));
        }
    }
    Ok(Grid {
        height: h,
        width: w,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceField {
    pub rho: f64,
    pub grid: Grid,
}

pub fn guidance_field(
    rho: f64,
    dims: (usize, usize),
    geom: &EyeGeometry,
    p: &GuidanceParams,
) -> Result<GuidanceField> {
    let g = spatial_field(dims, geom, p.kappa)?;
    let wt = temporal_weight(rho, p);
    let values = g
        .values
        .iter()
        .map(|&g| wt * g + p.omega_bg * (1.0 - g))
        .collect();
    Ok(GuidanceField {
        rho,
        grid: Grid { values, ..g },
    })
}

/// One field per denoising step.
pub fn guidance_schedule(
    dims: (usize, usize),
    geom: &EyeGeometry,
    p: &GuidanceParams,
) -> Result<Vec<GuidanceField>> {
    p.validate()?;
    (0..p.steps)
        .map(|i| guidance_field(p.rho(i), dims, geom, p))
        .collect()
}

/// `uncond + Ω · (cond − uncond)` per cell, broadcasting the field over
/// channel-major planes.
pub fn apply_guidance(cond: &[f64], uncond: &[f64], field: &GuidanceField) -> Result<Vec<f64>> {
    let plane = field.grid.values.len();
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch {
            expected: cond.len(),
            found: uncond.len(),
        });
    }
    if plane == 0 || !cond.len().is_multiple_of(plane) {
        return Err(Error::ShapeMismatch {
            expected: plane,
            found: cond.len(),
        });
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .enumerate()
        .map(|(i, (&c, &u))| u + field.grid.values[i % plane] * (c - u))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn geom() -> EyeGeometry {
        EyeGeometry::new([31.0, 24.0], 10.0).unwrap()
    }

    #[test]
    fn schedule_plateaus_and_ramp() {
        let p = GuidanceParams::default();
        assert_eq!(temporal_weight(0.10, &p), 8.0);
        assert!((temporal_weight(0.40, &p) - 6.0).abs() < 1e-12);
        assert_eq!(temporal_weight(0.70, &p), 4.0);
        assert_eq!(temporal_weight(1.0, &p), 4.0);
        assert_eq!(temporal_weight(p.alpha, &p), 8.0);
        assert!((temporal_weight(p.gamma - 1e-12, &p) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_at_one_width() {
        let g = EyeGeometry::new([0.0, 0.0], 4.0).unwrap();
        let f = spatial_field((1, 9), &g, 1.0).unwrap();
        assert_eq!(f.get(0, 0), 1.0);
        assert!((f.get(4, 0) - libm::exp(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn symmetric_about_on_grid_centre() {
        let g = EyeGeometry::new([10.0, 10.0], 3.0).unwrap();
        let f = spatial_field((21, 21), &g, 1.0).unwrap();
        for y in 0..21 {
            for x in 0..21 {
                assert!((f.get(x, y) - f.get(20 - x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_limits() {
        let p = GuidanceParams::default();
        let f = guidance_field(0.1, (64, 64), &geom(), &p).unwrap();
        assert_eq!(f.grid.get(31, 24), 8.0);
        let far = EyeGeometry::new([1e4, 1e4], 1.0).unwrap();
        let f = guidance_field(0.1, (4, 4), &far, &p).unwrap();
        assert!(f.grid.values.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let flat = GuidanceParams {
            omega_lo: 1.0,
            omega_hi: 1.0,
            ..p
        };
        let f = guidance_field(0.9, (8, 8), &geom(), &flat).unwrap();
        assert!(f.grid.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_distance_rejected() {
        assert!(EyeGeometry::new([0.0, 0.0], 0.0).is_err());
        let g = EyeGeometry {
            center: [0.0, 0.0],
            distance: -1.0,
        };
        assert!(matches!(
            spatial_field((2, 2), &g, 1.0),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn fusion_arithmetic() {
        let p = GuidanceParams::default();
        let mut f =
            guidance_field(0.4, (1, 1), &EyeGeometry::new([0.0, 0.0], 1.0).unwrap(), &p).unwrap();
        assert!((apply_guidance(&[1.0], &[0.0], &f).unwrap()[0] - 6.0).abs() < 1e-12);
        f.grid.values[0] = 6.0;
        assert_eq!(apply_guidance(&[1.0], &[0.0], &f).unwrap()[0], 6.0);
        assert_eq!(
            apply_guidance(&[0.4, 0.4], &[0.4, 0.4], &f).unwrap(),
            vec![0.4, 0.4]
        );
        f.grid.values[0] = 1.0;
        let out = apply_guidance(&[0.3, 0.7], &[5.0, -1.0], &f).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-12 && (out[1] - 0.7).abs() < 1e-12);
        assert!(apply_guidance(&[1.0, 2.0, 3.0], &[0.0], &f).is_err());
        let g = guidance_field(0.0, (2, 2), &geom(), &p).unwrap();
        assert!(apply_guidance(&[1.0; 3], &[0.0; 3], &g).is_err());
    }

    #[test]
    fn schedule_length_and_first_rho() {
        let fields = guidance_schedule((8, 8), &geom(), &GuidanceParams::default()).unwrap();
        assert_eq!(fields.len(), 40);
        assert_eq!(fields[0].rho, 0.0);
        assert_eq!(fields[39].rho, 39.0 / 40.0);
    }

    #[test]
    fn geometry_from_frame_scales_to_grid() {
        use crate::mapper::{map_frame, DeformationModel};
        let (k, _) =
            map_frame(&crate::ControlState::zero(), &DeformationModel::canonical()).unwrap();
        let g = EyeGeometry::from_frame(&k, [512.0, 512.0], 8.0).unwrap();
        let l = k.iris_center(Side::Left);
        let r = k.iris_center(Side::Right);
        assert!((g.center[0] - 32.0 * (l[0] + r[0])).abs() < 1e-12);
        assert!((g.distance - 64.0 * libm::hypot(l[0] - r[0], l[1] - r[1])).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_non_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let p = GuidanceParams::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(temporal_weight(hi, &p) <= temporal_weight(lo, &p));
        }

        #[test]
        fn cells_within_bounds(rho in 0.0f64..=1.0, cx in -10.0f64..40.0, cy in -10.0f64..40.0, d in 0.5f64..20.0, bg in 0.1f64..10.0) {
            let p = GuidanceParams { omega_bg: bg, ..Default::default() };
            let f = guidance_field(rho, (32, 32), &EyeGeometry::new([cx, cy], d).unwrap(), &p).unwrap();
            let wt = temporal_weight(rho, &p);
            let (lo, hi) = (wt.min(bg), wt.max(bg));
            for &v in &f.grid.values {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn radially_non_increasing(rho in 0.0f64..0.5, d in 1.0f64..8.0) {
            let p = GuidanceParams::default();
            let g = EyeGeometry::new([16.0, 16.0], d).unwrap();
            let f = guidance_field(rho, (33, 33), &g, &p).unwrap();
            for y in 16..32 {
                prop_assert!(f.grid.get(16, y + 1) <= f.grid.get(16, y));
            }
            for x in 16..32 {
                prop_assert!(f.grid.get(x + 1, 20) <= f.grid.get(x, 20));
            }
        }

        #[test]
        fn fusion_linear_in_difference(u in -5.0f64..5.0, d1 in -5.0f64..5.0, d2 in -5.0f64..5.0, rho in 0.0f64..1.0) {
            let f = guidance_field(rho, (1, 1), &EyeGeometry::new([0.3, 0.2], 1.0).unwrap(), &GuidanceParams::default()).unwrap();
            let a = apply_guidance(&[u + d1], &[u], &f).unwrap()[0] - u;
            let b = apply_guidance(&[u + d2], &[u], &f).unwrap()[0] - u;
            let ab = apply_guidance(&[u + d1 + d2], &[u], &f).unwrap()[0] - u;
            prop_assert!((ab - (a + b)).abs() < 1e-9);
        }
    }
}

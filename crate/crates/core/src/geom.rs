//! SE(2) poses, pairwise-relative transforms, and the sinusoidal encodings
//! that make up the relative pose encoding (RPE).
//!
//! `rpe(r) = concat(pe(x), pe(y), ae(θ))`, where `pe` uses geometric
//! frequencies `ω^(2i/D)` and `ae` uses the integer harmonics `i + 1` so that
//! it is exactly 2π-periodic.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::numcore::{concat_last, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame, mapped to world.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    /// Maps a world point into this pose's local frame.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a local point of this pose into the world frame.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Pose of token `j` expressed in the frame of token `i`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RelativePose {
    pub x_ij: f64,
    pub y_ij: f64,
    pub theta_ij: f64,
}

pub fn relative_pose(pose_i: &Pose2D, pose_j: &Pose2D) -> Result<RelativePose, GeomError> {
    if !pose_i.is_finite() || !pose_j.is_finite() {
        return Err(GeomError::InvalidInput(format!("non-finite pose {pose_i:?} / {pose_j:?}")));
    }
    let (x_ij, y_ij) = pose_i.to_local(pose_j.x, pose_j.y);
    Ok(RelativePose {
        x_ij,
        y_ij,
        theta_ij: wrap_angle(pose_j.theta - pose_i.theta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpeConfig {
    /// Per-component width `D`; the full encoding is `3·D` wide.
    pub dim: usize,
    /// Base frequency `ω`.
    pub omega: f64,
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self { dim: 40, omega: 1e-3 }
    }
}

impl RpeConfig {
    pub fn new(dim: usize, omega: f64) -> Result<Self, GeomError> {
        let cfg = Self { dim, omega };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(GeomError::InvalidInput(format!("rpe dim must be even and positive, got {}", self.dim)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(GeomError::InvalidInput(format!("rpe omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        3 * self.dim
    }

    /// `ω^(2i/D)` for `i in 0..D/2`.
    pub fn pe_freqs(&self) -> Vec<f64> {
        (0..self.dim / 2)
            .map(|i| self.omega.powf(2.0 * i as f64 / self.dim as f64))
            .collect()
    }

    /// `i + 1` for `i in 0..D/2`.
    pub fn ae_freqs(&self) -> Vec<f64> {
        (0..self.dim / 2).map(|i| (i + 1) as f64).collect()
    }
}

fn interleave(x: f64, freqs: &[f64]) -> Vec<f64> {
    freqs
        .iter()
        .flat_map(|w| {
            let (s, c) = (x * w).sin_cos();
            [s, c]
        })
        .collect()
}

pub fn pe(value: f64, config: &RpeConfig) -> Result<Vec<f64>, GeomError> {
    if !value.is_finite() {
        return Err(GeomError::InvalidInput(format!("pe of non-finite value {value}")));
    }
    Ok(interleave(value, &config.pe_freqs()))
}

pub fn ae(theta: f64, config: &RpeConfig) -> Result<Vec<f64>, GeomError> {
    if !theta.is_finite() {
        return Err(GeomError::InvalidInput(format!("ae of non-finite angle {theta}")));
    }
    Ok(interleave(theta, &config.ae_freqs()))
}

pub fn rpe(r: &RelativePose, config: &RpeConfig) -> Result<Vec<f64>, GeomError> {
    let mut out = pe(r.x_ij, config)?;
    out.extend(pe(r.y_ij, config)?);
    out.extend(ae(r.theta_ij, config)?);
    Ok(out)
}

/// Pose columns living on a tape; each field is `[N]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseValues<'t> {
    pub x: Value<'t>,
    pub y: Value<'t>,
    pub theta: Value<'t>,
}

impl<'t> PoseValues<'t> {
    pub fn constant(tape: &'t crate::numcore::Tape, poses: &[Pose2D]) -> Self {
        Self {
            x: tape.vector(poses.iter().map(|p| p.x).collect()),
            y: tape.vector(poses.iter().map(|p| p.y).collect()),
            theta: tape.vector(poses.iter().map(|p| p.theta).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.x.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.gather_rows(idx),
            y: self.y.gather_rows(idx),
            theta: self.theta.gather_rows(idx),
        }
    }

    /// Current numeric poses.
    pub fn poses(&self) -> Vec<Pose2D> {
        let (x, y, t) = (self.x.data(), self.y.data(), self.theta.data());
        (0..x.len())
            .map(|i| Pose2D {
                x: x[i],
                y: y[i],
                theta: t[i],
            })
            .collect()
    }
}

/// Differentiable `relative_pose` for matching rows of `from` and `to`.
pub fn relative_pose_values<'t>(from: &PoseValues<'t>, to: &PoseValues<'t>) -> PoseValues<'t> {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    let (s, c) = (from.theta.sin(), from.theta.cos());
    PoseValues {
        x: c * dx + s * dy,
        y: c * dy - s * dx,
        theta: (to.theta - from.theta).wrap_angle(),
    }
}

/// Differentiable `rpe` of every row of `rel`, `[N, 3·D]`.
pub fn rpe_values<'t>(rel: &PoseValues<'t>, config: &RpeConfig) -> Value<'t> {
    let pe_f = config.pe_freqs();
    concat_last(&[rel.x.sinusoid(&pe_f), rel.y.sinusoid(&pe_f), rel.theta.sinusoid(&config.ae_freqs())])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Homogeneous 3×3 matrix of a pose.
    fn mat(p: &Pose2D) -> [[f64; 3]; 3] {
        let (s, c) = p.theta.sin_cos();
        [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
    }

    fn inv(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        // rigid inverse: [Rᵀ, -Rᵀ t]
        let (c, s) = (m[0][0], m[1][0]);
        let (tx, ty) = (m[0][2], m[1][2]);
        [[c, s, -(c * tx + s * ty)], [-s, c, -(-s * tx + c * ty)], [0.0, 0.0, 1.0]]
    }

    fn mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    }

    fn oracle(pi: &Pose2D, pj: &Pose2D) -> (f64, f64, f64) {
        let m = mul(inv(mat(pi)), mat(pj));
        (m[0][2], m[1][2], m[1][0].atan2(m[0][0]))
    }

    #[test]
    fn relative_pose_identity_is_exact_zero() {
        let p = Pose2D::new(3.0, -1.0, 0.7);
        let r = relative_pose(&p, &p).unwrap();
        assert_eq!(r, RelativePose::default());
    }

    #[test]
    fn relative_pose_matches_homogeneous_oracle() {
        let pi = Pose2D::new(0.0, 0.0, PI / 2.0);
        let pj = Pose2D::new(0.0, 1.0, PI / 2.0);
        let r = relative_pose(&pi, &pj).unwrap();
        let (ox, oy, ot) = oracle(&pi, &pj);
        assert!((r.x_ij - 1.0).abs() < 1e-12 && (r.x_ij - ox).abs() < 1e-12);
        assert!(r.y_ij.abs() < 1e-12 && (r.y_ij - oy).abs() < 1e-12);
        assert!(r.theta_ij.abs() < 1e-12 && (r.theta_ij - ot).abs() < 1e-12);
    }

    #[test]
    fn relative_pose_in_identity_frame() {
        let r = relative_pose(&Pose2D::new(0.0, 0.0, 0.0), &Pose2D::new(2.0, 3.0, PI)).unwrap();
        assert_eq!((r.x_ij, r.y_ij, r.theta_ij), (2.0, 3.0, PI));
    }

    #[test]
    fn relative_pose_rejects_non_finite() {
        let bad = Pose2D {
            x: f64::NAN,
            y: 0.0,
            theta: 0.0,
        };
        assert!(relative_pose(&bad, &Pose2D::default()).is_err());
        assert!(relative_pose(&Pose2D::default(), &Pose2D::new(f64::INFINITY, 0.0, 0.0)).is_err());
    }

    #[test]
    fn wrap_convention() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        let e = 1e-3;
        assert!((wrap_angle(PI + e) - (-PI + e)).abs() < 1e-12);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn pe_examples() {
        let cfg = RpeConfig::new(4, 1000.0).unwrap();
        assert_eq!(pe(0.0, &cfg).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe(0.37, &cfg).unwrap()[0], 0.37f64.sin());

        let cfg = RpeConfig::new(8, 1000.0).unwrap();
        let got = pe(1.5, &cfg).unwrap();
        for i in 0..4 {
            let w = 1000f64.powf(2.0 * i as f64 / 8.0);
            assert!((got[2 * i] - (1.5 * w).sin()).abs() < 1e-15);
            assert!((got[2 * i + 1] - (1.5 * w).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn ae_examples() {
        let cfg6 = RpeConfig::new(6, 1000.0).unwrap();
        assert_eq!(ae(0.0, &cfg6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let cfg4 = RpeConfig::new(4, 1000.0).unwrap();
        let got = ae(PI, &cfg4).unwrap();
        let want = [0.0, -1.0, 0.0, 1.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let a = ae(0.3, &cfg6).unwrap();
        let b = ae(0.3 + TAU, &cfg6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rpe_examples() {
        let cfg = RpeConfig::new(4, 1000.0).unwrap();
        let zero = rpe(&RelativePose::default(), &cfg).unwrap();
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let r = RelativePose {
            x_ij: 1.0,
            y_ij: -2.0,
            theta_ij: PI / 2.0,
        };
        let cfg = RpeConfig::default();
        let got = rpe(&r, &cfg).unwrap();
        assert_eq!(got.len(), 3 * cfg.dim);
        let d = cfg.dim;
        for i in 0..d / 2 {
            let w = cfg.omega.powf(2.0 * i as f64 / d as f64);
            let k = (i + 1) as f64;
            assert!((got[2 * i] - (1.0 * w).sin()).abs() < 1e-15);
            assert!((got[d + 2 * i + 1] - (-2.0 * w).cos()).abs() < 1e-15);
            assert!((got[2 * d + 2 * i] - (PI / 2.0 * k).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RpeConfig::new(3, 1.0).is_err());
        assert!(RpeConfig::new(0, 1.0).is_err());
        assert!(RpeConfig::new(4, 0.0).is_err());
    }

    #[test]
    fn tape_rpe_matches_scalar_rpe() {
        let tape = crate::numcore::Tape::new();
        let cfg = RpeConfig::default();
        let a = [Pose2D::new(1.0, 2.0, 0.3), Pose2D::new(-4.0, 0.5, 3.0)];
        let b = [Pose2D::new(-2.0, 7.0, -2.9), Pose2D::new(10.0, -3.0, -3.1)];
        let rel = relative_pose_values(&PoseValues::constant(&tape, &a), &PoseValues::constant(&tape, &b));
        let enc = rpe_values(&rel, &cfg).tensor();
        for i in 0..2 {
            let want = rpe(&relative_pose(&a[i], &b[i]).unwrap(), &cfg).unwrap();
            for (c, w) in want.iter().enumerate() {
                assert!((enc.get2(i, c) - w).abs() < 1e-12);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pose() -> impl Strategy<Value = Pose2D> {
        (-500.0..500.0f64, -500.0..500.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    proptest! {
        #[test]
        fn self_relative_pose_is_zero(a in pose()) {
            prop_assert_eq!(relative_pose(&a, &a).unwrap(), RelativePose::default());
        }

        #[test]
        fn relative_pose_is_rigid_invariant(a in pose(), b in pose(), g in pose()) {
            let r0 = relative_pose(&a, &b).unwrap();
            let r1 = relative_pose(&g.compose(&a), &g.compose(&b)).unwrap();
            prop_assert!((r0.x_ij - r1.x_ij).abs() < 1e-9);
            prop_assert!((r0.y_ij - r1.y_ij).abs() < 1e-9);
            prop_assert!(wrap_angle(r0.theta_ij - r1.theta_ij).abs() < 1e-9);
        }

        #[test]
        fn theta_stays_in_half_open_range(a in pose(), d in -1e-6..1e-6f64) {
            let b = Pose2D { theta: a.theta + PI + d, ..a };
            let r = relative_pose(&a, &b).unwrap();
            prop_assert!(r.theta_ij > -PI && r.theta_ij <= PI);
        }

        #[test]
        fn encodings_lie_on_unit_circle(x in -500.0..500.0f64) {
            let cfg = RpeConfig::default();
            for enc in [pe(x, &cfg).unwrap(), ae(x, &cfg).unwrap()] {
                for pair in enc.chunks(2) {
                    prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

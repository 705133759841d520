//! Transformation groups acting on latent states.
//!
//! Four groups are modelled: 3D rotation (unit quaternions), color
//! `(theta, phi)`, crop `(cx, cy, sw, sh)` and blur `sigma`. Every group
//! element is carried in a fixed 11-wide [`Action`] vector; slots that do
//! not belong to the active group are kept at exactly zero.

use core::f64::consts::{FRAC_PI_2, PI, TAU};
use core::fmt;
use core::ops::{Mul, Range};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Total width of the action encoding: `[rot 4 | color 2 | crop 4 | blur 1]`.
pub const ACTION_WIDTH: usize = 11;

/// Upper bound of the blur parameter.
pub const SIGMA_MAX: f64 = 2.0;

const COLOR_PHI_DELTA: f64 = 0.3;
const CROP_DELTA: f64 = 0.2;
const BLUR_DELTA: f64 = 0.3;
/// Largest angle (radians) of a sampled rotation delta and of an x-view pose.
/// Largest pose angle (radians) of a sampled view latent.
pub const POSE_SPREAD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroupError {
    #[error("views belong to different objects ({x} vs {y})")]
    ObjectMismatch { x: usize, y: usize },
    #[error("{field} = {value} is outside its domain")]
    OutOfDomain { field: &'static str, value: f64 },
    #[error("malformed action: {0}")]
    MalformedAction(&'static str),
}

/// The transformation groups, in action-layout order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupId {
    Rotation,
    Color,
    Crop,
    Blur,
}

impl GroupId {
    pub const ALL: [GroupId; 4] = [
        GroupId::Rotation,
        GroupId::Color,
        GroupId::Crop,
        GroupId::Blur,
    ];

    /// Slots this group owns inside an [`Action`].
    pub fn action_slots(self) -> Range<usize> {
        match self {
            GroupId::Rotation => 0..4,
            GroupId::Color => 4..6,
            GroupId::Crop => 6..10,
            GroupId::Blur => 10..11,
        }
    }

    /// Width of the per-view latent target for this group. Color uses
    /// `(cos theta, sin theta, phi)` so the target is continuous.
    pub fn target_width(self) -> usize {
        match self {
            GroupId::Rotation => 4,
            GroupId::Color => 3,
            GroupId::Crop => 4,
            GroupId::Blur => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupId::Rotation => "rotation",
            GroupId::Color => "color",
            GroupId::Crop => "crop",
            GroupId::Blur => "blur",
        }
    }

    pub fn parse(s: &str) -> Option<GroupId> {
        GroupId::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the rotation slot of a relative action is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationRelative {
    /// `q_y * q_x^-1`, a proper group element.
    #[default]
    Compose,
    /// Componentwise `q_y - q_x` of the canonical quaternions.
    Subtract,
}

/// Unit quaternion `(w, x, y, z)`, canonicalized to `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes. Returns `None` for a (near) zero input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Option<Quaternion> {
        let n = libm::sqrt(w * w + x * x + y * y + z * z);
        if !(n > 1e-12) || !n.is_finite() {
            return None;
        }
        Some(
            Quaternion {
                w: w / n,
                x: x / n,
                y: y / n,
                z: z / n,
            }
            .canonical(),
        )
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Option<Quaternion> {
        let n = libm::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
        if !(n > 1e-12) {
            return None;
        }
        let s = libm::sin(angle / 2.0) / n;
        Quaternion::new(
            libm::cos(angle / 2.0),
            axis[0] * s,
            axis[1] * s,
            axis[2] * s,
        )
    }

    /// Uniform sample from SO(3) (Shoemake's subgroup algorithm).
    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let a = libm::sqrt(1.0 - u1);
        let b = libm::sqrt(u1);
        let (s2, c2) = libm::sincos(TAU * u2);
        let (s3, c3) = libm::sincos(TAU * u3);
        // The construction is already unit norm; `new` only canonicalizes.
        Quaternion::new(b * c3, a * s2, a * c2, b * s3).unwrap_or(Quaternion::IDENTITY)
    }

    /// Rotation about a uniformly random axis by an angle uniform in `[0, max_angle]`.
    pub fn sample_within<R: Rng + ?Sized>(max_angle: f64, rng: &mut R) -> Quaternion {
        loop {
            let v: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            let angle = rng.gen_range(0.0..=max_angle);
            if let Some(q) = Quaternion::from_axis_angle([v[0] / n, v[1] / n, v[2] / n], angle) {
                return q;
            }
        }
    }

    pub fn canonical(self) -> Quaternion {
        if self.w < 0.0 || (self.w == 0.0 && self.first_nonzero_negative()) {
            Quaternion {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    fn first_nonzero_negative(&self) -> bool {
        for v in [self.x, self.y, self.z] {
            if v != 0.0 {
                return v < 0.0;
            }
        }
        false
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
    }

    /// Hamilton product, renormalized and canonicalized.
    pub fn compose(self, rhs: Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        Quaternion::new(w, x, y, z).unwrap_or(Quaternion::IDENTITY)
    }

    /// Conjugate; equals the inverse for unit quaternions.
    pub fn inverse(self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
        .canonical()
    }

    /// Rotate a 3-vector: `q v q*`.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.to_rotation_matrix();
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    /// Row-major 3x3 rotation matrix.
    pub fn to_rotation_matrix(&self) -> [f64; 9] {
        let Quaternion { w, x, y, z } = *self;
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ]
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * libm::acos(self.canonical().w.clamp(-1.0, 1.0))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.compose(rhs)
    }
}

/// Wrap an angle into `[0, 2pi)`.
pub fn wrap_tau(a: f64) -> f64 {
    let r = a - TAU * libm::floor(a / TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wrap an angle difference into `(-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let r = wrap_tau(a);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    theta: f64,
    phi: f64,
}

impl ColorParams {
    /// `theta` is wrapped; `phi` outside `[0, 1]` is rejected.
    pub fn new(theta: f64, phi: f64) -> Result<Self, GroupError> {
        if !(0.0..=1.0).contains(&phi) {
            return Err(GroupError::OutOfDomain {
                field: "color.phi",
                value: phi,
            });
        }
        if !theta.is_finite() {
            return Err(GroupError::OutOfDomain {
                field: "color.theta",
                value: theta,
            });
        }
        Ok(ColorParams {
            theta: wrap_tau(theta),
            phi,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    cx: f64,
    cy: f64,
    sw: f64,
    sh: f64,
}

impl CropParams {
    pub fn new(cx: f64, cy: f64, sw: f64, sh: f64) -> Result<Self, GroupError> {
        for (field, v) in [("crop.cx", cx), ("crop.cy", cy)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(GroupError::OutOfDomain { field, value: v });
            }
        }
        for (field, v) in [("crop.sw", sw), ("crop.sh", sh)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(GroupError::OutOfDomain { field, value: v });
            }
        }
        Ok(CropParams { cx, cy, sw, sh })
    }

    pub fn full() -> Self {
        CropParams {
            cx: 0.0,
            cy: 0.0,
            sw: 1.0,
            sh: 1.0,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.sw, self.sh]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    sigma: f64,
}

impl BlurParams {
    pub fn new(sigma: f64) -> Result<Self, GroupError> {
        if !(0.0..=SIGMA_MAX).contains(&sigma) {
            return Err(GroupError::OutOfDomain {
                field: "blur.sigma",
                value: sigma,
            });
        }
        Ok(BlurParams { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Generative latents of one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub object_id: usize,
    pub class_id: usize,
    pub pose: Quaternion,
    pub color: ColorParams,
    pub crop: CropParams,
    pub blur: BlurParams,
}

impl LatentState {
    /// Canonical view: identity pose, zero hue, mid saturation, full crop, no blur.
    pub fn canonical(object_id: usize, class_id: usize) -> Self {
        LatentState {
            object_id,
            class_id,
            pose: Quaternion::IDENTITY,
            color: ColorParams {
                theta: 0.0,
                phi: 0.5,
            },
            crop: CropParams::full(),
            blur: BlurParams { sigma: 0.0 },
        }
    }

    /// Per-group latent value used as a regression target.
    pub fn group_target(&self, g: GroupId, out: &mut [f64]) {
        match g {
            GroupId::Rotation => out[..4].copy_from_slice(&self.pose.canonical().to_array()),
            GroupId::Color => {
                let (s, c) = libm::sincos(self.color.theta);
                out[0] = c;
                out[1] = s;
                out[2] = self.color.phi;
            }
            GroupId::Crop => out[..4].copy_from_slice(&self.crop.to_array()),
            GroupId::Blur => out[0] = self.blur.sigma,
        }
    }
}

/// Group-tagged transformation parameters in the fixed 11-wide layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    values: [f64; ACTION_WIDTH],
    active: Option<GroupId>,
}

impl Action {
    /// The invariance action: all slots zero, no active group.
    pub const fn none() -> Action {
        Action {
            values: [0.0; ACTION_WIDTH],
            active: None,
        }
    }

    /// Builds an action from the slot values of `g` only.
    pub fn from_group(g: GroupId, slots: &[f64]) -> Result<Action, GroupError> {
        let range = g.action_slots();
        if slots.len() != range.len() {
            return Err(GroupError::MalformedAction(
                "slot count does not match group",
            ));
        }
        if slots.iter().any(|v| !v.is_finite()) {
            return Err(GroupError::MalformedAction("non-finite slot"));
        }
        let mut values = [0.0; ACTION_WIDTH];
        values[range].copy_from_slice(slots);
        Ok(Action {
            values,
            active: Some(g),
        })
    }

    pub fn rotation(q: Quaternion) -> Action {
        let mut values = [0.0; ACTION_WIDTH];
        values[0..4].copy_from_slice(&q.canonical().to_array());
        Action {
            values,
            active: Some(GroupId::Rotation),
        }
    }

    pub fn values(&self) -> &[f64; ACTION_WIDTH] {
        &self.values
    }

    pub fn active_group(&self) -> Option<GroupId> {
        self.active
    }

    /// Slots owned by the active group (empty for the invariance action).
    pub fn group_slots(&self) -> &[f64] {
        match self.active {
            Some(g) => &self.values[g.action_slots()],
            None => &[],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.to_bits() == 0)
    }
}

/// Relative transformation taking view `x` to view `y`, restricted to group `g`.
pub fn relative_action(
    x: &LatentState,
    y: &LatentState,
    g: GroupId,
    rotation: RotationRelative,
) -> Result<Action, GroupError> {
    if x.object_id != y.object_id {
        return Err(GroupError::ObjectMismatch {
            x: x.object_id,
            y: y.object_id,
        });
    }
    match g {
        GroupId::Rotation => match rotation {
            RotationRelative::Compose => Ok(Action::rotation(y.pose * x.pose.inverse())),
            RotationRelative::Subtract => {
                let (a, b) = (x.pose.canonical().to_array(), y.pose.canonical().to_array());
                Action::from_group(g, &[b[0] - a[0], b[1] - a[1], b[2] - a[2], b[3] - a[3]])
            }
        },
        GroupId::Color => Action::from_group(
            g,
            &[
                wrap_pi(y.color.theta - x.color.theta),
                y.color.phi - x.color.phi,
            ],
        ),
        GroupId::Crop => {
            let (a, b) = (x.crop.to_array(), y.crop.to_array());
            Action::from_group(g, &[b[0] - a[0], b[1] - a[1], b[2] - a[2], b[3] - a[3]])
        }
        GroupId::Blur => Action::from_group(g, &[y.blur.sigma - x.blur.sigma]),
    }
}

/// Applies `a` to `x`, interpreting rotation slots as a composed quaternion.
pub fn apply_action(x: &LatentState, a: &Action) -> Result<LatentState, GroupError> {
    apply_action_with(x, a, RotationRelative::Compose)
}

/// Applies `a` to `x`; only the fields of the active group change.
pub fn apply_action_with(
    x: &LatentState,
    a: &Action,
    rotation: RotationRelative,
) -> Result<LatentState, GroupError> {
    let mut out = *x;
    let Some(g) = a.active else {
        if !a.is_zero() {
            return Err(GroupError::MalformedAction(
                "inactive action with nonzero slots",
            ));
        }
        return Ok(out);
    };
    let outside = a
        .values
        .iter()
        .enumerate()
        .any(|(i, v)| !g.action_slots().contains(&i) && *v != 0.0);
    if outside {
        return Err(GroupError::MalformedAction(
            "nonzero slot outside the active group",
        ));
    }
    let s = a.group_slots();
    match g {
        GroupId::Rotation => {
            out.pose = match rotation {
                RotationRelative::Compose => {
                    let q = Quaternion::new(s[0], s[1], s[2], s[3])
                        .ok_or(GroupError::MalformedAction("zero rotation quaternion"))?;
                    q * x.pose
                }
                RotationRelative::Subtract => {
                    let p = x.pose.canonical();
                    Quaternion::new(p.w + s[0], p.x + s[1], p.y + s[2], p.z + s[3]).ok_or(
                        GroupError::MalformedAction("degenerate rotation difference"),
                    )?
                }
            };
        }
        GroupId::Color => {
            out.color = ColorParams::new(x.color.theta + s[0], x.color.phi + s[1])?;
        }
        GroupId::Crop => {
            let c = x.crop;
            out.crop = CropParams::new(c.cx + s[0], c.cy + s[1], c.sw + s[2], c.sh + s[3])?;
        }
        GroupId::Blur => out.blur = BlurParams::new(x.blur.sigma + s[0])?,
    }
    Ok(out)
}

/// Draws a random element of group `g` in action form.
pub fn sample_action<R: Rng + ?Sized>(g: GroupId, rng: &mut R) -> Action {
    let mut values = [0.0; ACTION_WIDTH];
    match g {
        GroupId::Rotation => {
            values[0..4].copy_from_slice(&Quaternion::sample_uniform(rng).to_array());
        }
        GroupId::Color => {
            values[4] = rng.gen_range(-PI..PI);
            values[5] = rng.gen_range(-COLOR_PHI_DELTA..COLOR_PHI_DELTA);
        }
        GroupId::Crop => {
            for v in &mut values[6..10] {
                *v = rng.gen_range(-CROP_DELTA..CROP_DELTA);
            }
        }
        GroupId::Blur => values[10] = rng.gen_range(-BLUR_DELTA..BLUR_DELTA),
    }
    Action {
        values,
        active: Some(g),
    }
}

/// Samples a view latent. Scalar fields leave room for any sampled delta, so
/// `apply_action(x, sample_action(..))` is always in-domain. Poses stay
/// within `POSE_SPREAD` of the identity and hues within a half circle, which
/// keeps relative transforms in a range a linear probe can read.
pub fn sample_interior_latent<R: Rng + ?Sized>(
    object_id: usize,
    class_id: usize,
    rng: &mut R,
) -> LatentState {
    LatentState {
        object_id,
        class_id,
        pose: Quaternion::sample_within(POSE_SPREAD, rng),
        color: ColorParams {
            theta: rng.gen_range(FRAC_PI_2..3.0 * FRAC_PI_2),
            phi: rng.gen_range(COLOR_PHI_DELTA..1.0 - COLOR_PHI_DELTA),
        },
        crop: CropParams {
            cx: rng.gen_range(-1.0 + CROP_DELTA..1.0 - CROP_DELTA),
            cy: rng.gen_range(-1.0 + CROP_DELTA..1.0 - CROP_DELTA),
            sw: rng.gen_range(0.3..1.0 - CROP_DELTA),
            sh: rng.gen_range(0.3..1.0 - CROP_DELTA),
        },
        blur: BlurParams {
            sigma: rng.gen_range(BLUR_DELTA..SIGMA_MAX - BLUR_DELTA),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        let (a, b) = (a.canonical().to_array(), b.canonical().to_array());
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity_and_inverse_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = Quaternion::sample_uniform(&mut rng);
            assert!(close(Quaternion::IDENTITY * q, q, 1e-12));
            assert!(close(q * q.inverse(), Quaternion::IDENTITY, 1e-12));
            assert!((q.norm() - 1.0).abs() < 1e-12);
            assert!(q.w >= 0.0);
        }
        assert_eq!(Quaternion::IDENTITY.inverse(), Quaternion::IDENTITY);
    }

    #[test]
    fn inverse_is_canonical_conjugate() {
        let q = Quaternion::new(0.5, 0.5, -0.5, 0.5).unwrap();
        let inv = q.inverse();
        assert_eq!(inv.to_array(), [0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn quaternion_new_rejects_zero() {
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_none());
    }

    #[test]
    fn relative_of_equal_views_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample_interior_latent(3, 1, &mut rng);
        let a = relative_action(&x, &x, GroupId::Rotation, RotationRelative::Compose).unwrap();
        assert_eq!(a.active_group(), Some(GroupId::Rotation));
        let s = a.group_slots();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn color_relative_is_subtraction() {
        let mut x = LatentState::canonical(0, 0);
        let mut y = x;
        x.color = ColorParams::new(0.3, 0.4).unwrap();
        y.color = ColorParams::new(0.9, 0.6).unwrap();
        y.pose = Quaternion::from_axis_angle([0.0, 0.0, 1.0], 1.0).unwrap();
        let a = relative_action(&x, &y, GroupId::Color, RotationRelative::Compose).unwrap();
        let v = a.values();
        assert!((v[4] - 0.6).abs() < 1e-12);
        assert!((v[5] - 0.2).abs() < 1e-12);
        for (i, val) in v.iter().enumerate() {
            if !(4..6).contains(&i) {
                assert_eq!(*val, 0.0);
            }
        }
    }

    #[test]
    fn theta_difference_wraps() {
        let mut x = LatentState::canonical(0, 0);
        let mut y = x;
        x.color = ColorParams::new(6.2, 0.5).unwrap();
        y.color = ColorParams::new(0.1, 0.5).unwrap();
        let a = relative_action(&x, &y, GroupId::Color, RotationRelative::Compose).unwrap();
        assert!((a.values()[4] - (0.1 + TAU - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_objects_rejected() {
        let x = LatentState::canonical(0, 0);
        let y = LatentState::canonical(1, 0);
        assert_eq!(
            relative_action(&x, &y, GroupId::Blur, RotationRelative::Compose),
            Err(GroupError::ObjectMismatch { x: 0, y: 1 })
        );
    }

    #[test]
    fn apply_zero_and_blur() {
        let mut x = LatentState::canonical(0, 0);
        assert_eq!(apply_action(&x, &Action::none()).unwrap(), x);
        x.blur = BlurParams::new(0.1).unwrap();
        let a = Action::from_group(GroupId::Blur, &[0.2]).unwrap();
        let y = apply_action(&x, &a).unwrap();
        assert!((y.blur.sigma() - 0.3).abs() < 1e-12);
        assert_eq!(y.pose, x.pose);
        assert_eq!(y.color, x.color);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let x = LatentState::canonical(0, 0);
        let a = Action::from_group(GroupId::Blur, &[-0.5]).unwrap();
        assert!(matches!(
            apply_action(&x, &a),
            Err(GroupError::OutOfDomain { .. })
        ));
        let a = Action::from_group(GroupId::Color, &[0.0, 0.7]).unwrap();
        assert!(matches!(
            apply_action(&x, &a),
            Err(GroupError::OutOfDomain { .. })
        ));
        assert!(ColorParams::new(0.0, 1.5).is_err());
        assert!(CropParams::new(0.0, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn sampled_actions_respect_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in GroupId::ALL {
            for _ in 0..200 {
                let a = sample_action(g, &mut rng);
                assert_eq!(a.active_group(), Some(g));
                let outside: f64 = a
                    .values()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !g.action_slots().contains(i))
                    .map(|(_, v)| v.abs())
                    .sum();
                assert_eq!(outside, 0.0);
            }
        }
    }

    #[test]
    fn interior_latents_accept_any_sampled_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let x = sample_interior_latent(0, 0, &mut rng);
            for g in GroupId::ALL {
                let a = sample_action(g, &mut rng);
                apply_action(&x, &a).unwrap();
            }
        }
    }

    #[test]
    fn subtract_mode_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = sample_interior_latent(0, 0, &mut rng);
            let y = apply_action(&x, &sample_action(GroupId::Rotation, &mut rng)).unwrap();
            let a = relative_action(&x, &y, GroupId::Rotation, RotationRelative::Subtract).unwrap();
            let back = apply_action_with(&x, &a, RotationRelative::Subtract).unwrap();
            assert!(close(back.pose, y.pose, 1e-9));
        }
    }

    #[test]
    fn invariance_action_is_bit_zero() {
        let a = Action::none();
        assert!(a.values().iter().all(|v| v.to_bits() == 0));
        assert_eq!(a.active_group(), None);
    }
}

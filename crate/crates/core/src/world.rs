//! Synthetic transformation world.
//!
//! Objects are prototype vectors grouped into classes. A view of an object is
//! a [`LatentState`]; [`World::render`] turns it into an observation through a
//! frozen two-layer `tanh` map seeded once at construction. Contexts are
//! sequences of `(x, a, y)` triples where `y` is `x` transformed by every
//! active group but `a` records only the context group.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{
    relative_action, sample_interior_latent, Action, GroupError, GroupId, LatentState,
    RotationRelative, ACTION_WIDTH,
};
use crate::real::{Mat, Real};

/// Width of the latent block fed to the render map:
/// rotation matrix 9, color 3, crop 4, blur 1.
pub const LATENT_RENDER_WIDTH: usize = 17;

const TARGET_STAT_SAMPLES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(&'static str),
    #[error("unknown object id {0}")]
    UnknownObject(usize),
    #[error("context of {requested} pairs exceeds the maximum of {max}")]
    ContextTooLong { requested: usize, max: usize },
    #[error("representation count mismatch: {pairs} pairs, {x} x-reps, {y} y-reps")]
    LengthMismatch { pairs: usize, x: usize, y: usize },
    #[error("group {0} is not active in this world")]
    InactiveGroup(GroupId),
    #[error("tensor `{name}` has {got} values, expected {expected}")]
    BadTensor {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Group(#[from] GroupError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub objects_per_class: usize,
    pub prototype_dim: usize,
    pub obs_dim: usize,
    pub render_hidden: usize,
    pub seed: u64,
    pub active_groups: Vec<GroupId>,
    /// Largest context (in pairs) that [`World::sample_context`] accepts.
    pub max_pairs: usize,
    pub rotation_relative: RotationRelative,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_classes: 10,
            objects_per_class: 5,
            prototype_dim: 32,
            obs_dim: 128,
            render_hidden: 128,
            seed: 0,
            active_groups: vec![GroupId::Rotation, GroupId::Color],
            max_pairs: 128,
            rotation_relative: RotationRelative::Compose,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.n_classes == 0 || self.objects_per_class == 0 {
            return Err(WorldError::InvalidConfig(
                "need at least one class and one object",
            ));
        }
        if self.prototype_dim == 0 || self.render_hidden == 0 {
            return Err(WorldError::InvalidConfig("dimensions must be positive"));
        }
        if self.obs_dim < self.prototype_dim + ACTION_WIDTH {
            return Err(WorldError::InvalidConfig(
                "obs_dim must be at least prototype_dim + 11",
            ));
        }
        if self.active_groups.is_empty() {
            return Err(WorldError::InvalidConfig("no active groups"));
        }
        let mut seen = [false; 4];
        for g in &self.active_groups {
            let i = *g as usize;
            if seen[i] {
                return Err(WorldError::InvalidConfig("duplicate active group"));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn n_objects(&self) -> usize {
        self.n_classes * self.objects_per_class
    }

    pub fn render_in(&self) -> usize {
        self.prototype_dim + LATENT_RENDER_WIDTH
    }

    /// Active groups in canonical layout order.
    pub fn groups_sorted(&self) -> Vec<GroupId> {
        let mut g = self.active_groups.clone();
        g.sort();
        g
    }
}

/// Whether a context carries group parameters or zero actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    Equivariant,
    Invariant,
}

impl ContextMode {
    pub fn name(self) -> &'static str {
        match self {
            ContextMode::Equivariant => "equivariant",
            ContextMode::Invariant => "invariant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextPair {
    pub x_obs: Vec<f64>,
    pub y_obs: Vec<f64>,
    pub action: Action,
    /// Latent target of `y` over the world's active groups (raw, not z-scored).
    pub t_y: Vec<f64>,
    pub latent_x: LatentState,
    pub latent_y: LatentState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSequence {
    pub pairs: Vec<ContextPair>,
    pub group: Option<GroupId>,
    pub mode: ContextMode,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `k` pairs.
    pub fn truncated(&self, k: usize) -> ContextSequence {
        ContextSequence {
            pairs: self.pairs[..k.min(self.pairs.len())].to_vec(),
            group: self.group,
            mode: self.mode,
        }
    }
}

/// Token `2i` is `[x_rep ‖ a_i]`, token `2i + 1` is `[y_rep ‖ 0]`.
pub type PairMap = Vec<(usize, usize)>;

/// Per-dimension mean and standard deviation of the latent targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    config: WorldConfig,
    prototypes: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    target_stats: TargetStats,
}

impl World {
    /// Builds the world deterministically from `cfg.seed`.
    pub fn new(cfg: WorldConfig) -> Result<World, WorldError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pd = cfg.prototype_dim;
        let spread = 0.6f64;
        let norm = libm::sqrt(1.0 + spread * spread);

        let mut prototypes = Vec::with_capacity(cfg.n_objects() * pd);
        for _ in 0..cfg.n_classes {
            let class_mean: Vec<f64> = (0..pd).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..cfg.objects_per_class {
                for m in &class_mean {
                    let off: f64 = rng.sample(StandardNormal);
                    prototypes.push(((m + spread * off) / norm) as f32);
                }
            }
        }

        let din = cfg.render_in();
        let gain1 = 2.0 / libm::sqrt(din as f64);
        let w1: Vec<f32> = (0..din * cfg.render_hidden)
            .map(|_| (gain1 * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let b1: Vec<f32> = (0..cfg.render_hidden)
            .map(|_| (0.1 * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let gain2 = 1.0 / libm::sqrt(cfg.render_hidden as f64);
        let w2: Vec<f32> = (0..cfg.render_hidden * cfg.obs_dim)
            .map(|_| (gain2 * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();

        World::assemble(cfg, prototypes, w1, b1, w2)
    }

    /// Rebuilds a world from stored tensors (used by file import).
    pub fn from_parts(
        cfg: WorldConfig,
        prototypes: Vec<f32>,
        w1: Vec<f32>,
        b1: Vec<f32>,
        w2: Vec<f32>,
    ) -> Result<World, WorldError> {
        cfg.validate()?;
        World::assemble(cfg, prototypes, w1, b1, w2)
    }

    fn assemble(
        cfg: WorldConfig,
        prototypes: Vec<f32>,
        w1: Vec<f32>,
        b1: Vec<f32>,
        w2: Vec<f32>,
    ) -> Result<World, WorldError> {
        let checks: [(&'static str, usize, usize); 4] = [
            (
                "prototypes",
                prototypes.len(),
                cfg.n_objects() * cfg.prototype_dim,
            ),
            ("render.w1", w1.len(), cfg.render_in() * cfg.render_hidden),
            ("render.b1", b1.len(), cfg.render_hidden),
            ("render.w2", w2.len(), cfg.render_hidden * cfg.obs_dim),
        ];
        for (name, got, expected) in checks {
            if got != expected {
                return Err(WorldError::BadTensor {
                    name,
                    got,
                    expected,
                });
            }
        }
        let mut world = World {
            config: cfg,
            prototypes,
            w1,
            b1,
            w2,
            target_stats: TargetStats {
                mean: Vec::new(),
                std: Vec::new(),
            },
        };
        world.target_stats = world.estimate_target_stats();
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &[f32] {
        &self.prototypes
    }

    /// Frozen render tensors `(w1, b1, w2)`.
    pub fn render_weights(&self) -> (&[f32], &[f32], &[f32]) {
        (&self.w1, &self.b1, &self.w2)
    }

    pub fn target_stats(&self) -> &TargetStats {
        &self.target_stats
    }

    pub fn n_objects(&self) -> usize {
        self.config.n_objects()
    }

    pub fn class_of(&self, object_id: usize) -> usize {
        object_id / self.config.objects_per_class
    }

    /// Width of `t_y`: sum of target widths over active groups.
    pub fn target_dim(&self) -> usize {
        self.config
            .active_groups
            .iter()
            .map(|g| g.target_width())
            .sum()
    }

    /// Where each active group's target lives inside `t_y`.
    pub fn target_range(&self, g: GroupId) -> Option<Range<usize>> {
        let mut start = 0;
        for h in self.config.groups_sorted() {
            let w = h.target_width();
            if h == g {
                return Some(start..start + w);
            }
            start += w;
        }
        None
    }

    /// Latent target of a view over all active groups.
    pub fn latent_target(&self, s: &LatentState) -> Vec<f64> {
        let mut out = vec![0.0; self.target_dim()];
        let mut start = 0;
        for g in self.config.groups_sorted() {
            let w = g.target_width();
            s.group_target(g, &mut out[start..start + w]);
            start += w;
        }
        out
    }

    /// Observation of a latent state.
    pub fn render(&self, s: &LatentState) -> Result<Vec<f64>, WorldError> {
        let mut obs = vec![0.0; self.config.obs_dim];
        self.render_into(s, &mut obs)?;
        Ok(obs)
    }

    pub fn render_into(&self, s: &LatentState, obs: &mut [f64]) -> Result<(), WorldError> {
        let cfg = &self.config;
        if s.object_id >= cfg.n_objects() {
            return Err(WorldError::UnknownObject(s.object_id));
        }
        let pd = cfg.prototype_dim;
        let mut input = vec![0.0f64; cfg.render_in()];
        let proto = &self.prototypes[s.object_id * pd..(s.object_id + 1) * pd];
        let pscale = 2.0 / libm::sqrt(pd as f64);
        for (dst, p) in input[..pd].iter_mut().zip(proto) {
            *dst = *p as f64 * pscale;
        }
        let lat = &mut input[pd..];
        lat[..9].copy_from_slice(&s.pose.to_rotation_matrix());
        let (sin, cos) = libm::sincos(s.color.theta());
        lat[9] = 1.5 * cos;
        lat[10] = 1.5 * sin;
        lat[11] = 4.0 * (s.color.phi() - 0.5);
        let crop = s.crop.to_array();
        lat[12] = 2.0 * crop[0];
        lat[13] = 2.0 * crop[1];
        lat[14] = 4.0 * (crop[2] - 0.6);
        lat[15] = 4.0 * (crop[3] - 0.6);
        lat[16] = 2.0 * (s.blur.sigma() - 1.0);

        let h = cfg.render_hidden;
        let mut hidden: Vec<f64> = self.b1.iter().map(|b| *b as f64).collect();
        for (i, x) in input.iter().enumerate() {
            let row = &self.w1[i * h..(i + 1) * h];
            for (acc, w) in hidden.iter_mut().zip(row) {
                *acc += x * *w as f64;
            }
        }
        hidden.iter_mut().for_each(|v| *v = libm::tanh(*v));
        obs.iter_mut().for_each(|v| *v = 0.0);
        let od = cfg.obs_dim;
        for (j, hv) in hidden.iter().enumerate() {
            let row = &self.w2[j * od..(j + 1) * od];
            for (o, w) in obs.iter_mut().zip(row) {
                *o += hv * *w as f64;
            }
        }
        Ok(())
    }

    /// A random x-view of `object_id`: interior latents for active groups,
    /// canonical values for the rest.
    pub fn sample_base_view<R: Rng + ?Sized>(&self, object_id: usize, rng: &mut R) -> LatentState {
        let class_id = self.class_of(object_id);
        let drawn = sample_interior_latent(object_id, class_id, rng);
        let mut s = LatentState::canonical(object_id, class_id);
        for g in &self.config.active_groups {
            match g {
                GroupId::Rotation => s.pose = drawn.pose,
                GroupId::Color => s.color = drawn.color,
                GroupId::Crop => s.crop = drawn.crop,
                GroupId::Blur => s.blur = drawn.blur,
            }
        }
        s
    }

    /// A second view of the same object: every active group's latent is
    /// redrawn independently from the x-view range, so the relative group
    /// element between the views is the difference of two independent draws.
    /// Composing `x` with those relative elements reproduces the result.
    pub fn transform_all<R: Rng + ?Sized>(
        &self,
        x: &LatentState,
        rng: &mut R,
    ) -> Result<LatentState, WorldError> {
        if x.object_id >= self.n_objects() {
            return Err(WorldError::UnknownObject(x.object_id));
        }
        let fresh = self.sample_base_view(x.object_id, rng);
        let mut y = *x;
        for g in self.config.groups_sorted() {
            match g {
                GroupId::Rotation => y.pose = fresh.pose,
                GroupId::Color => y.color = fresh.color,
                GroupId::Crop => y.crop = fresh.crop,
                GroupId::Blur => y.blur = fresh.blur,
            }
        }
        Ok(y)
    }

    /// One `(x, a, y)` triple. Objects are drawn uniformly.
    pub fn sample_pair<R: Rng + ?Sized>(
        &self,
        group: Option<GroupId>,
        mode: ContextMode,
        rng: &mut R,
    ) -> Result<ContextPair, WorldError> {
        let object = rng.gen_range(0..self.n_objects());
        self.sample_pair_of(object, group, mode, rng)
    }

    /// Like [`World::sample_pair`] for a fixed object.
    pub fn sample_pair_of<R: Rng + ?Sized>(
        &self,
        object: usize,
        group: Option<GroupId>,
        mode: ContextMode,
        rng: &mut R,
    ) -> Result<ContextPair, WorldError> {
        let latent_x = self.sample_base_view(object, rng);
        let latent_y = self.transform_all(&latent_x, rng)?;
        self.make_pair(latent_x, latent_y, group, mode)
    }

    /// Wraps two views of one object into a context pair.
    pub fn make_pair(
        &self,
        latent_x: LatentState,
        latent_y: LatentState,
        group: Option<GroupId>,
        mode: ContextMode,
    ) -> Result<ContextPair, WorldError> {
        let action = match (group, mode) {
            (Some(g), ContextMode::Equivariant) => {
                if !self.config.active_groups.contains(&g) {
                    return Err(WorldError::InactiveGroup(g));
                }
                relative_action(&latent_x, &latent_y, g, self.config.rotation_relative)?
            }
            _ => Action::none(),
        };
        Ok(ContextPair {
            x_obs: self.render(&latent_x)?,
            y_obs: self.render(&latent_y)?,
            action,
            t_y: self.latent_target(&latent_y),
            latent_x,
            latent_y,
        })
    }

    /// Samples a context of `k` pairs for `group` in the given mode.
    pub fn sample_context<R: Rng + ?Sized>(
        &self,
        group: Option<GroupId>,
        k: usize,
        mode: ContextMode,
        rng: &mut R,
    ) -> Result<ContextSequence, WorldError> {
        if k > self.config.max_pairs {
            return Err(WorldError::ContextTooLong {
                requested: k,
                max: self.config.max_pairs,
            });
        }
        let mode = if group.is_none() {
            ContextMode::Invariant
        } else {
            mode
        };
        let pairs = (0..k)
            .map(|_| self.sample_pair(group, mode, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ContextSequence { pairs, group, mode })
    }

    fn estimate_target_stats(&self) -> TargetStats {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7a5c_e11a_0000_0001);
        let d = self.target_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for _ in 0..TARGET_STAT_SAMPLES {
            let object = rng.gen_range(0..self.n_objects());
            let x = self.sample_base_view(object, &mut rng);
            let y = self.transform_all(&x, &mut rng).unwrap_or(x);
            let t = self.latent_target(&y);
            for i in 0..d {
                sum[i] += t[i];
                sq[i] += t[i] * t[i];
            }
        }
        let n = TARGET_STAT_SAMPLES as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| libm::sqrt((s / n - m * m).max(0.0)).max(1e-6))
            .collect();
        TargetStats { mean, std }
    }

    /// Z-scored copy of a target vector.
    pub fn normalize_target(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .zip(self.target_stats.mean.iter().zip(&self.target_stats.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Lays out a context as `2K` tokens of width `rep_dim + 11`.
pub fn build_token_sequence<T: Real>(
    ctx: &ContextSequence,
    reps_x: &Mat<T>,
    reps_y: &Mat<T>,
) -> Result<(Mat<T>, PairMap), WorldError> {
    let k = ctx.pairs.len();
    if reps_x.rows != k || reps_y.rows != k || reps_x.cols != reps_y.cols {
        return Err(WorldError::LengthMismatch {
            pairs: k,
            x: reps_x.rows,
            y: reps_y.rows,
        });
    }
    let rep = reps_x.cols;
    let mut tokens = Mat::zeros(2 * k, rep + ACTION_WIDTH);
    let mut pairs = Vec::with_capacity(k);
    for (i, p) in ctx.pairs.iter().enumerate() {
        let row = tokens.row_mut(2 * i);
        row[..rep].copy_from_slice(reps_x.row(i));
        for (dst, a) in row[rep..].iter_mut().zip(p.action.values()) {
            *dst = T::cast(*a);
        }
        tokens.row_mut(2 * i + 1)[..rep].copy_from_slice(reps_y.row(i));
        pairs.push((2 * i, 2 * i + 1));
    }
    Ok((tokens, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{apply_action, Quaternion, RotationRelative};

    fn small() -> WorldConfig {
        WorldConfig {
            n_classes: 4,
            objects_per_class: 3,
            prototype_dim: 8,
            obs_dim: 32,
            render_hidden: 32,
            seed: 11,
            max_pairs: 16,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = World::new(small()).unwrap();
        let b = World::new(small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_prototypes() {
        let cfg = WorldConfig {
            n_classes: 10,
            objects_per_class: 5,
            ..small()
        };
        let w = World::new(cfg).unwrap();
        assert_eq!(w.n_objects(), 50);
        assert_eq!(w.prototypes().len(), 50 * 8);
    }

    #[test]
    fn rejects_bad_dims() {
        let cfg = WorldConfig {
            obs_dim: 10,
            ..small()
        };
        assert!(matches!(World::new(cfg), Err(WorldError::InvalidConfig(_))));
        let cfg = WorldConfig {
            active_groups: vec![],
            ..small()
        };
        assert!(World::new(cfg).is_err());
    }

    #[test]
    fn render_rejects_unknown_object() {
        let w = World::new(small()).unwrap();
        let s = LatentState::canonical(999, 0);
        assert_eq!(w.render(&s), Err(WorldError::UnknownObject(999)));
    }

    #[test]
    fn empty_and_invariant_contexts() {
        let w = World::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = w.sample_context(
            Some(GroupId::Rotation),
            0,
            ContextMode::Equivariant,
            &mut rng,
        );
        assert!(c.unwrap().is_empty());
        let c = w
            .sample_context(Some(GroupId::Color), 8, ContextMode::Invariant, &mut rng)
            .unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.pairs.iter().all(|p| p.action.is_zero()));
        let too_long = w.sample_context(None, 17, ContextMode::Invariant, &mut rng);
        assert!(matches!(too_long, Err(WorldError::ContextTooLong { .. })));
    }

    #[test]
    fn recorded_action_reproduces_group_latents() {
        let w = World::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in [GroupId::Rotation, GroupId::Color] {
            let c = w
                .sample_context(Some(g), 16, ContextMode::Equivariant, &mut rng)
                .unwrap();
            for p in &c.pairs {
                let moved = apply_action(&p.latent_x, &p.action).unwrap();
                match g {
                    GroupId::Rotation => {
                        let d = moved.pose * p.latent_y.pose.inverse();
                        assert!((d.w - 1.0).abs() < 1e-9);
                    }
                    _ => {
                        assert!((moved.color.theta() - p.latent_y.color.theta()).abs() < 1e-9);
                        assert!((moved.color.phi() - p.latent_y.color.phi()).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn tokens_layout() {
        let w = World::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = w
            .sample_context(
                Some(GroupId::Rotation),
                3,
                ContextMode::Equivariant,
                &mut rng,
            )
            .unwrap();
        let rx = Mat::<f64>::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        let ry = Mat::<f64>::from_fn(3, 5, |i, j| -((i * 5 + j) as f64));
        let (tok, map) = build_token_sequence(&c, &rx, &ry).unwrap();
        assert_eq!(tok.shape(), (6, 16));
        assert_eq!(map, vec![(0, 1), (2, 3), (4, 5)]);
        for i in 0..3 {
            assert!(tok.row(2 * i + 1)[5..].iter().all(|v| *v == 0.0));
            assert_eq!(tok.row(2 * i)[5], c.pairs[i].action.values()[0]);
        }
        let one = Mat::<f64>::zeros(1, 5);
        assert!(build_token_sequence(&c, &one, &ry).is_err());
    }

    #[test]
    fn single_pair_map() {
        let w = World::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = w
            .sample_context(None, 1, ContextMode::Invariant, &mut rng)
            .unwrap();
        let r = Mat::<f32>::zeros(1, 4);
        let (_, map) = build_token_sequence(&c, &r, &r).unwrap();
        assert_eq!(map, vec![(0, 1)]);
    }

    #[test]
    fn inactive_groups_stay_canonical() {
        let w = World::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = w
            .sample_pair(Some(GroupId::Rotation), ContextMode::Equivariant, &mut rng)
            .unwrap();
        let canon = LatentState::canonical(0, 0);
        assert_eq!(p.latent_y.crop, canon.crop);
        assert_eq!(p.latent_y.blur, canon.blur);
        assert_ne!(p.latent_y.pose, Quaternion::IDENTITY);
    }

    #[test]
    fn target_layout_matches_groups() {
        let w = World::new(small()).unwrap();
        assert_eq!(w.target_dim(), 7);
        assert_eq!(w.target_range(GroupId::Rotation), Some(0..4));
        assert_eq!(w.target_range(GroupId::Color), Some(4..7));
        assert_eq!(w.target_range(GroupId::Blur), None);
        let s = w.target_stats();
        assert!(s.std.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn subtract_rotation_mode_is_respected() {
        let cfg = WorldConfig {
            rotation_relative: RotationRelative::Subtract,
            ..small()
        };
        let w = World::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = w
            .sample_pair(Some(GroupId::Rotation), ContextMode::Equivariant, &mut rng)
            .unwrap();
        let a = p.latent_x.pose.to_array();
        let b = p.latent_y.pose.to_array();
        for i in 0..4 {
            assert!((p.action.values()[i] - (b[i] - a[i])).abs() < 1e-12);
        }
    }
}

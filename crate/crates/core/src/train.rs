//! Optimization loop: per-sequence environment sampling, fresh masks every
//! forward pass, Adam updates, and the invariant-baseline and supervised modes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::GroupId;
use crate::loss::{self, LossBreakdown, LossConfig, LossError};
use crate::mask::{self, MaskConfig, MaskError, MaskMatrix};
use crate::model::{Model, ModelConfig, ModelError, OutputGrads, Params, SequenceTrace};
use crate::optim::{Adam, AdamConfig};
use crate::real::{Mat, Real};
use crate::world::{ContextMode, ContextSequence, World, WorldError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Loss(LossError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Contextssl,
    InvariantBaseline,
    Supervised,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Contextssl => "contextssl",
            TrainMode::InvariantBaseline => "invariant_baseline",
            TrainMode::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_sequences: usize,
    /// Pairs per training sequence; every training context has exactly this many.
    pub k_max: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub coupled_wd: bool,
    pub lambda: f64,
    pub tau: f64,
    pub symmetric: bool,
    pub seed: u64,
    pub mode: TrainMode,
    /// Groups to sample contexts from; empty means every active group of the world.
    pub groups: Vec<GroupId>,
    pub single_group_invariance_env: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_sequences: 16,
            k_max: 32,
            lr: 5e-5,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            coupled_wd: false,
            lambda: 1.0,
            tau: 0.5,
            symmetric: true,
            seed: 0,
            mode: TrainMode::Contextssl,
            groups: Vec::new(),
            single_group_invariance_env: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.steps == 0 || self.batch_sequences == 0 || self.k_max == 0 {
            return bad("steps, batch_sequences and k_max must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        self.loss().validate().map_err(TrainError::Loss)?;
        Ok(())
    }

    /// Loss settings with the mode's overrides applied.
    pub fn loss(&self) -> LossConfig {
        let lambda = if self.mode == TrainMode::InvariantBaseline {
            0.0
        } else {
            self.lambda
        };
        LossConfig {
            tau: self.tau,
            lambda,
            symmetric: self.symmetric,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            coupled_wd: self.coupled_wd,
        }
    }

    /// The group set actually sampled from, sorted.
    pub fn resolved_groups(&self, world: &World) -> Result<Vec<GroupId>, TrainError> {
        let active = world.config().groups_sorted();
        if self.groups.is_empty() {
            return Ok(active);
        }
        let mut gs = self.groups.clone();
        gs.sort();
        gs.dedup();
        if let Some(g) = gs.iter().find(|g| !active.contains(g)) {
            return Err(TrainError::InvalidConfig(alloc::format!(
                "group {g} is not active in the world"
            )));
        }
        Ok(gs)
    }

    /// Fills in the world- and mode-dependent model dimensions.
    pub fn model_config(&self, world: &World, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.obs_dim = world.config().obs_dim;
        cfg.target_dim = world.target_dim();
        cfg.max_tokens = cfg.max_tokens.max(2 * self.k_max + 2);
        if self.mode == TrainMode::Supervised {
            cfg.out_dim = 2 * world.config().n_classes;
        }
        cfg
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> RngSnapshot {
        RngSnapshot {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: alloc::format!("{}", rng.get_word_pos()),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

pub const STREAM_DATA: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_INIT: u64 = 3;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub rng_data: ChaCha8Rng,
    pub rng_mask: ChaCha8Rng,
    pub rng_init: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    /// Fresh model initialized from the config seed's init stream.
    pub fn new(model_cfg: ModelConfig, seed: u64) -> Result<TrainState<T>, TrainError> {
        let mut rng_init = seeded_stream(seed, STREAM_INIT);
        let model = Model::new(model_cfg, &mut rng_init)?;
        let adam = Adam::new(model.params());
        Ok(TrainState {
            model,
            adam,
            step: 0,
            rng_data: seeded_stream(seed, STREAM_DATA),
            rng_mask: seeded_stream(seed, STREAM_MASK),
            rng_init,
        })
    }
}

/// Environment drawn for one training sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Environment {
    pub group: GroupId,
    pub mode: ContextMode,
}

impl Environment {
    pub fn label(&self) -> &'static str {
        match self.mode {
            ContextMode::Invariant => "none",
            ContextMode::Equivariant => self.group.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub envs: Vec<Environment>,
}

pub fn sample_environment<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    groups: &[GroupId],
    rng: &mut R,
) -> Environment {
    let group = groups[rng.gen_range(0..groups.len())];
    let mode = match cfg.mode {
        TrainMode::InvariantBaseline => ContextMode::Invariant,
        TrainMode::Supervised => ContextMode::Equivariant,
        TrainMode::Contextssl => {
            if cfg.single_group_invariance_env && rng.gen_bool(0.5) {
                ContextMode::Invariant
            } else {
                ContextMode::Equivariant
            }
        }
    };
    Environment { group, mode }
}

/// Label for supervised mode: the class, shifted by `n_classes` in rotation contexts.
pub fn supervised_label(class_id: usize, group: GroupId, n_classes: usize) -> usize {
    if group == GroupId::Rotation {
        class_id + n_classes
    } else {
        class_id
    }
}

/// Z-scored targets of `group` for every pair, as a `K x width` matrix.
pub fn group_targets<T: Real>(
    world: &World,
    ctx: &ContextSequence,
    group: GroupId,
) -> Option<Mat<T>> {
    let range = world.target_range(group)?;
    let width = range.len();
    let mut m = Mat::zeros(ctx.len(), width);
    for (i, p) in ctx.pairs.iter().enumerate() {
        let z = world.normalize_target(&p.t_y);
        for (dst, v) in m.row_mut(i).iter_mut().zip(&z[range.clone()]) {
            *dst = T::cast(*v);
        }
    }
    Some(m)
}

/// Forward and backward of one sequence under the configured objective.
pub fn sequence_objective<T: Real>(
    model: &Model<T>,
    world: &World,
    ctx: &ContextSequence,
    env: Environment,
    mask: &MaskMatrix,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, SequenceTrace<T>, OutputGrads<T>), TrainError> {
    let trace = model.forward_context(ctx, mask)?;
    if cfg.mode == TrainMode::Supervised {
        let n_classes = world.config().n_classes;
        // Both views of a pair are anchors; the y rows carry no action and
        // can only learn the label shift from earlier pairs.
        let rows: Vec<usize> = (0..2 * ctx.len()).collect();
        let labels: Vec<usize> = ctx
            .pairs
            .iter()
            .flat_map(|p| {
                [
                    supervised_label(p.latent_x.class_id, env.group, n_classes),
                    supervised_label(p.latent_y.class_id, env.group, n_classes),
                ]
            })
            .collect();
        let (ce, grad) =
            loss::cross_entropy(&trace.forward.raw, &rows, &labels).map_err(TrainError::Loss)?;
        let mut b = loss::total_loss(ce.as_f64(), 0.0, 0.0);
        b.per_index = Vec::new();
        return Ok((
            b,
            trace,
            OutputGrads {
                raw: grad,
                pred: None,
            },
        ));
    }
    let lcfg = cfg.loss();
    let targets = match env.mode {
        ContextMode::Equivariant if lcfg.lambda > 0.0 => group_targets::<T>(world, ctx, env.group)
            .map(|t| (t, world.target_range(env.group).unwrap())),
        _ => None,
    };
    let (b, grads) =
        loss::sequence_loss(&trace, targets.as_ref().map(|(t, r)| (t, r.clone())), &lcfg)
            .map_err(TrainError::Loss)?;
    Ok((b, trace, grads))
}

/// Draws the context and mask for one sequence from the state's streams.
pub fn sample_sequence<T: Real>(
    state: &mut TrainState<T>,
    world: &World,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
    groups: &[GroupId],
) -> Result<(Environment, ContextSequence, MaskMatrix), TrainError> {
    let env = sample_environment(cfg, groups, &mut state.rng_data);
    let ctx = world.sample_context(Some(env.group), cfg.k_max, env.mode, &mut state.rng_data)?;
    let mask = if cfg.mode == TrainMode::Supervised {
        mask::causal_mask(2 * cfg.k_max)
    } else {
        mask::compose(mask_cfg, cfg.k_max, &mut state.rng_mask)?
    };
    Ok((env, ctx, mask))
}

/// One optimizer step over `batch_sequences` freshly sampled sequences.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    world: &World,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
) -> Result<StepReport, TrainError> {
    let groups = cfg.resolved_groups(world)?;
    let step = state.step + 1;
    let mut grads: Params<T> = state.model.zero_grads();
    let mut envs = Vec::with_capacity(cfg.batch_sequences);
    let (mut c, mut p, mut t) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.batch_sequences {
        let (env, ctx, mask) = sample_sequence(state, world, cfg, mask_cfg, &groups)?;
        let (b, trace, out) = match sequence_objective(&state.model, world, &ctx, env, &mask, cfg) {
            Err(TrainError::Loss(LossError::NonFinite)) => {
                return Err(TrainError::NonFinite {
                    step,
                    what: "loss".into(),
                })
            }
            r => r?,
        };
        if !b.total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        grads.add_assign(&state.model.backward(&trace, &out)?);
        c += b.contrastive;
        p += b.predictor;
        t += b.total;
        envs.push(env);
    }
    let n = cfg.batch_sequences as f64;
    grads.scale(T::cast(1.0 / n));
    if !grads.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "gradient".into(),
        });
    }
    let adam_cfg = cfg.adam();
    state
        .adam
        .update(state.model.params_mut(), &grads, &adam_cfg);
    if !state.model.params().is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "parameters".into(),
        });
    }
    state.step = step;
    Ok(StepReport {
        step,
        loss: LossBreakdown {
            contrastive: c / n,
            predictor: p / n,
            total: t / n,
            per_index: vec![],
        },
        envs,
    })
}

/// Runs `train_step` until `cfg.steps`, calling `on_step` after every step.
/// `on_step` may stop the run early by returning `false`.
pub fn run<T: Real>(
    state: &mut TrainState<T>,
    world: &World,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
    mut on_step: impl FnMut(&TrainState<T>, &StepReport) -> bool,
) -> Result<(), TrainError> {
    cfg.validate()?;
    mask_cfg.validate()?;
    while state.step < cfg.steps {
        let report = train_step(state, world, cfg, mask_cfg)?;
        if !on_step(state, &report) {
            break;
        }
    }
    Ok(())
}

/// Trains the invariance reference: zero actions everywhere and `lambda = 0`.
pub fn train_invariant_baseline<T: Real>(
    state: &mut TrainState<T>,
    world: &World,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
) -> Result<(), TrainError> {
    if cfg.mode != TrainMode::InvariantBaseline {
        return Err(TrainError::InvalidConfig(
            "mode must be invariant_baseline".into(),
        ));
    }
    run(state, world, cfg, mask_cfg, |_, _| true)
}

/// Trains on context-dependent class labels with cross-entropy and a causal mask.
pub fn train_supervised<T: Real>(
    state: &mut TrainState<T>,
    world: &World,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if cfg.mode != TrainMode::Supervised {
        return Err(TrainError::InvalidConfig("mode must be supervised".into()));
    }
    let expected = 2 * world.config().n_classes;
    if state.model.config().out_dim != expected {
        return Err(TrainError::InvalidConfig(alloc::format!(
            "supervised mode needs out_dim {expected}"
        )));
    }
    run(state, world, cfg, &MaskConfig::default(), |_, _| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn setup(mode: TrainMode) -> (World, TrainConfig, TrainState<f32>) {
        let world = World::new(WorldConfig {
            n_classes: 4,
            objects_per_class: 2,
            prototype_dim: 8,
            obs_dim: 24,
            render_hidden: 16,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_sequences: 2,
            k_max: 3,
            lr: 1e-3,
            mode,
            ..TrainConfig::default()
        };
        let base = ModelConfig {
            enc_hidden: 16,
            rep_dim: 8,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
            out_dim: 8,
            pred_hidden: 8,
            ..ModelConfig::default()
        };
        let state = TrainState::new(cfg.model_config(&world, &base), 5).unwrap();
        (world, cfg, state)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (world, mut cfg, mut state) = setup(TrainMode::Contextssl);
        cfg.lr = 0.0;
        let before = state.model.params().clone();
        let r = train_step(&mut state, &world, &cfg, &MaskConfig::default()).unwrap();
        assert!(r.loss.total.is_finite());
        assert_eq!(state.model.params(), &before);
    }

    #[test]
    fn same_seed_same_losses() {
        let run_once = || {
            let (world, cfg, mut state) = setup(TrainMode::Contextssl);
            (0..4)
                .map(|_| {
                    train_step(&mut state, &world, &cfg, &MaskConfig::default())
                        .unwrap()
                        .loss
                        .total
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn supervised_label_rule() {
        assert_eq!(supervised_label(3, GroupId::Rotation, 10), 13);
        assert_eq!(supervised_label(3, GroupId::Color, 10), 3);
    }

    #[test]
    fn baseline_forces_lambda_zero_and_invariant_contexts() {
        let (world, cfg, mut state) = setup(TrainMode::InvariantBaseline);
        assert_eq!(cfg.loss().lambda, 0.0);
        let groups = cfg.resolved_groups(&world).unwrap();
        for _ in 0..20 {
            let (env, ctx, _) =
                sample_sequence(&mut state, &world, &cfg, &MaskConfig::default(), &groups).unwrap();
            assert_eq!(env.mode, ContextMode::Invariant);
            assert!(ctx.pairs.iter().all(|p| p.action.is_zero()));
        }
    }

    #[test]
    fn supervised_requires_wide_head() {
        let (world, cfg, mut state) = setup(TrainMode::Supervised);
        assert_eq!(state.model.config().out_dim, 8);
        train_supervised(&mut state, &world, &cfg).unwrap();
        assert_eq!(state.step, 3);
    }

    #[test]
    fn inactive_group_rejected() {
        let (world, mut cfg, _) = setup(TrainMode::Contextssl);
        cfg.groups = vec![GroupId::Blur];
        assert!(cfg.resolved_groups(&world).is_err());
    }

    #[test]
    fn rng_snapshot_round_trip() {
        let mut rng = seeded_stream(9, STREAM_MASK);
        let _: u64 = rng.gen();
        let snap = RngSnapshot::capture(&rng);
        let mut back = snap.restore().unwrap();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }
}

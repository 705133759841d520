use std::f64::consts::PI;

use ctxssl_core::eval::{linear_probe_classification, r2_probe};
use ctxssl_core::group::sample_action;
use ctxssl_core::train::{sample_environment, TrainConfig};
use ctxssl_core::{ContextMode, GroupId, Mat, Quaternion, World, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mean rotation angle of Haar-distributed SO(3) elements, `pi/2 + 2/pi`.
const HAAR_MEAN_ANGLE_DEG: f64 = 126.4756;

fn chi_square_uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let e = values.len() as f64 / bins as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn uniform_rotations_have_haar_mean_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 20_000;
    let q_mean = (0..n)
        .map(|_| Quaternion::sample_uniform(&mut rng).angle())
        .sum::<f64>()
        / n as f64;
    assert!(
        (q_mean.to_degrees() - HAAR_MEAN_ANGLE_DEG).abs() < 2.0,
        "{}",
        q_mean.to_degrees()
    );
    let a_mean = (0..n)
        .map(|_| {
            let v = sample_action(GroupId::Rotation, &mut rng).values()[0..4].to_vec();
            Quaternion::new(v[0], v[1], v[2], v[3]).unwrap().angle()
        })
        .sum::<f64>()
        / n as f64;
    assert!(
        (a_mean.to_degrees() - HAAR_MEAN_ANGLE_DEG).abs() < 2.0,
        "{}",
        a_mean.to_degrees()
    );
}

#[test]
fn hue_deltas_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let deltas: Vec<f64> = (0..20_000)
        .map(|_| sample_action(GroupId::Color, &mut rng).values()[4])
        .collect();
    assert!(deltas.iter().all(|d| (-PI..PI).contains(d)));
    // 19 degrees of freedom; 43.82 is the 0.999 quantile.
    let chi2 = chi_square_uniform(&deltas, -PI, PI, 20);
    assert!(chi2 < 43.82, "chi2 {chi2}");
}

#[test]
fn environments_are_balanced() {
    let groups = [GroupId::Rotation, GroupId::Color];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = TrainConfig {
        single_group_invariance_env: true,
        ..TrainConfig::default()
    };
    let n = 10_000;
    let envs: Vec<_> = (0..n)
        .map(|_| sample_environment(&cfg, &groups, &mut rng))
        .collect();
    let rot = envs.iter().filter(|e| e.group == GroupId::Rotation).count() as f64 / n as f64;
    let inv = envs
        .iter()
        .filter(|e| e.mode == ContextMode::Invariant)
        .count() as f64
        / n as f64;
    assert!(
        (rot - 0.5).abs() < 0.02 && (inv - 0.5).abs() < 0.02,
        "{rot} {inv}"
    );
    let plain = TrainConfig::default();
    assert!((0..200)
        .all(|_| sample_environment(&plain, &groups, &mut rng).mode == ContextMode::Equivariant));
}

#[test]
fn invariant_contexts_carry_no_actions() {
    let world = World::new(WorldConfig {
        obs_dim: 40,
        prototype_dim: 8,
        render_hidden: 16,
        ..WorldConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for g in [GroupId::Rotation, GroupId::Color] {
        let ctx = world
            .sample_context(Some(g), 8, ContextMode::Invariant, &mut rng)
            .unwrap();
        assert!(ctx.pairs.iter().all(|p| p.action.is_zero()));
        let ctx = world
            .sample_context(Some(g), 8, ContextMode::Equivariant, &mut rng)
            .unwrap();
        assert!(ctx
            .pairs
            .iter()
            .all(|p| p.action.active_group() == Some(g) && !p.action.is_zero()));
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

#[test]
fn null_probe_explains_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = gaussian(2000, 16, &mut rng);
    let y = gaussian(2000, 3, &mut rng);
    let r2 = r2_probe(&x, &y, 1e-3, 0.7, 1).unwrap();
    assert!(r2.iter().all(|&r| r <= 0.05), "{r2:?}");
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let n = 4000;
    let x = gaussian(n, 16, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let acc = linear_probe_classification(&x, &labels, 1e-3, 0.7, 2).unwrap();
    assert!((acc - 0.1).abs() <= 0.05, "{acc}");
}

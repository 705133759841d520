//! Probes and reports: transformation R² across context lengths, a linear
//! classification probe on encoder features, and nearest-view retrieval.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{relative_action, Action, GroupId, ACTION_WIDTH};
use crate::linalg::{r2_per_column, LinalgError, Ridge};
use crate::mask::query_mask;
use crate::model::{Model, ModelError};
use crate::real::{Mat, Real};
use crate::train::{seeded_stream, supervised_label, TrainMode};
use crate::world::{
    build_token_sequence, ContextMode, ContextPair, ContextSequence, World, WorldError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("context length {length} exceeds the trained maximum {max}")]
    TooLong { length: usize, max: usize },
    #[error("degenerate probe input: {0}")]
    Degenerate(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Group(#[from] crate::group::GroupError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub ridge_lambda: f64,
    /// Context lengths in tokens (twice the number of pairs).
    pub lengths: Vec<usize>,
    /// Query pairs per (group, mode, length) cell.
    pub n_eval_samples: usize,
    pub queries_per_context: usize,
    pub train_fraction: f64,
    pub eval_seed: u64,
    pub retrieval_queries: usize,
    pub retrieval_views: usize,
    pub classification_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            ridge_lambda: 1e-3,
            lengths: vec![0, 2, 6, 14, 30],
            n_eval_samples: 1000,
            queries_per_context: 50,
            train_fraction: 0.7,
            eval_seed: 0x5eed,
            retrieval_queries: 100,
            retrieval_views: 50,
            classification_samples: 1000,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.into()));
        if self.lengths.is_empty() || self.lengths.iter().any(|l| l % 2 != 0) {
            return bad("lengths must be a non-empty list of even token counts");
        }
        if !(self.ridge_lambda > 0.0) {
            return bad("ridge_lambda must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.n_eval_samples < 4 || self.queries_per_context == 0 {
            return bad("need at least 4 eval samples and a positive queries_per_context");
        }
        if self.retrieval_views < 2 {
            return bad("retrieval needs at least 2 views per object");
        }
        Ok(())
    }

    pub fn max_length(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Context of `length` tokens (`length / 2` pairs) drawn from the eval stream.
pub fn build_eval_context<R: Rng + ?Sized>(
    world: &World,
    group: Option<GroupId>,
    mode: ContextMode,
    length: usize,
    rng: &mut R,
) -> Result<ContextSequence, EvalError> {
    if !length.is_multiple_of(2) {
        return Err(EvalError::InvalidConfig(
            "context length must be even".into(),
        ));
    }
    let max = 2 * world.config().max_pairs;
    if length > max {
        return Err(EvalError::TooLong { length, max });
    }
    Ok(world.sample_context(group, length / 2, mode, rng)?)
}

/// Where a query token sits relative to the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySlot {
    /// Position `2K`, carrying an action like a context anchor.
    Anchor,
    /// Position `2K + 1`, zero action like a context target.
    Target,
}

#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub obs: &'a [f64],
    pub action: Action,
    pub slot: QuerySlot,
}

/// Queries per forward pass. Attention cost grows with the square of the
/// appended rows, so large query sets are split.
const QUERY_CHUNK: usize = 256;

/// Normalized transformer outputs for each query token appended after
/// `ctx`. Queries attend to the whole context and themselves only.
pub fn embed_queries<T: Real>(
    model: &Model<T>,
    ctx: &ContextSequence,
    queries: &[Query<'_>],
) -> Result<Mat<T>, EvalError> {
    if queries.len() <= QUERY_CHUNK {
        return embed_query_chunk(model, ctx, queries);
    }
    let mut data = Vec::new();
    let mut cols = 0;
    for chunk in queries.chunks(QUERY_CHUNK) {
        let m = embed_query_chunk(model, ctx, chunk)?;
        cols = m.cols;
        data.extend_from_slice(&m.data);
    }
    Ok(Mat::from_vec(queries.len(), cols, data))
}

fn embed_query_chunk<T: Real>(
    model: &Model<T>,
    ctx: &ContextSequence,
    queries: &[Query<'_>],
) -> Result<Mat<T>, EvalError> {
    let k = ctx.len();
    let max = model.config().max_tokens;
    if 2 * k + 2 > max {
        return Err(EvalError::TooLong {
            length: 2 * k,
            max: max.saturating_sub(2),
        });
    }
    let od = model.config().obs_dim;
    let q = queries.len();
    let mut obs = Mat::zeros(2 * k + q, od);
    for (i, p) in ctx.pairs.iter().enumerate() {
        copy_obs(obs.row_mut(i), &p.x_obs);
        copy_obs(obs.row_mut(k + i), &p.y_obs);
    }
    for (i, qu) in queries.iter().enumerate() {
        if qu.obs.len() != od {
            return Err(ModelError::Shape {
                what: "query obs".into(),
                expected: (1, od),
                got: (1, qu.obs.len()),
            }
            .into());
        }
        copy_obs(obs.row_mut(2 * k + i), qu.obs);
    }
    let reps = model.encode(&obs)?.reps;
    let rep = reps.cols;
    let xs: Vec<usize> = (0..k).collect();
    let ys: Vec<usize> = (k..2 * k).collect();
    let (ctx_tokens, _) =
        build_token_sequence(ctx, &reps.select_rows(&xs), &reps.select_rows(&ys))?;
    let mut tokens = Mat::zeros(2 * k + q, rep + ACTION_WIDTH);
    tokens.data[..ctx_tokens.data.len()].copy_from_slice(&ctx_tokens.data);
    let mut positions: Vec<usize> = (0..2 * k).collect();
    for (i, qu) in queries.iter().enumerate() {
        let row = tokens.row_mut(2 * k + i);
        row[..rep].copy_from_slice(reps.row(2 * k + i));
        for (dst, a) in row[rep..].iter_mut().zip(qu.action.values()) {
            *dst = T::cast(*a);
        }
        positions.push(match qu.slot {
            QuerySlot::Anchor => 2 * k,
            QuerySlot::Target => 2 * k + 1,
        });
    }
    let mask = query_mask(k, q, true);
    let fwd = model.transformer_forward(&tokens, &positions, &mask)?;
    let rows: Vec<usize> = (2 * k..2 * k + q).collect();
    Ok(fwd.normalized.select_rows(&rows))
}

fn copy_obs<T: Real>(dst: &mut [T], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = T::cast(*s);
    }
}

/// Embeds query pairs after a context: the anchor carries the pair's action
/// at the anchor slot, the target sits at the target slot with zero action.
pub fn embed_with_context<T: Real>(
    model: &Model<T>,
    ctx: &ContextSequence,
    pairs: &[ContextPair],
) -> Result<(Mat<T>, Mat<T>), EvalError> {
    let mut queries = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        queries.push(Query {
            obs: &p.x_obs,
            action: p.action,
            slot: QuerySlot::Anchor,
        });
    }
    for p in pairs {
        queries.push(Query {
            obs: &p.y_obs,
            action: Action::none(),
            slot: QuerySlot::Target,
        });
    }
    let out = embed_queries(model, ctx, &queries)?;
    let n = pairs.len();
    let a: Vec<usize> = (0..n).collect();
    let y: Vec<usize> = (n..2 * n).collect();
    Ok((out.select_rows(&a), out.select_rows(&y)))
}

/// Seeded split of `0..n` into `(train, test)` index lists.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_stream(seed, 0x5911);
    idx.shuffle(&mut rng);
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let test = idx.split_off(cut);
    (idx, test)
}

/// Ridge from `features` to `targets`, fit on the train split and scored on
/// the test split. Returns the per-dimension R².
pub fn r2_probe(
    features: &Mat<f64>,
    targets: &Mat<f64>,
    lambda: f64,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    if features.rows != targets.rows {
        return Err(LinalgError::Shape(features.shape(), targets.shape()).into());
    }
    if features.rows <= targets.cols + 1 {
        return Err(EvalError::Degenerate(
            "need more samples than target dimensions",
        ));
    }
    let (train, test) = split_indices(features.rows, train_fraction, seed);
    let fit = Ridge::fit(
        &features.select_rows(&train),
        &targets.select_rows(&train),
        lambda,
    )?;
    let pred = fit.predict(&features.select_rows(&test));
    Ok(r2_per_column(&targets.select_rows(&test), &pred))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Top-1 accuracy of a ridge regression onto one-hot labels.
pub fn linear_probe_classification(
    reps: &Mat<f64>,
    labels: &[usize],
    lambda: f64,
    train_fraction: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    if reps.rows != labels.len() {
        return Err(LinalgError::Shape(reps.shape(), (labels.len(), 1)).into());
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(EvalError::Degenerate(
            "classification needs at least two classes",
        ));
    }
    let onehot = Mat::from_fn(
        reps.rows,
        n_classes,
        |r, c| if labels[r] == c { 1.0 } else { 0.0 },
    );
    let (train, test) = split_indices(reps.rows, train_fraction, seed);
    let fit = Ridge::fit(
        &reps.select_rows(&train),
        &onehot.select_rows(&train),
        lambda,
    )?;
    let pred = fit.predict(&reps.select_rows(&test));
    let correct = test
        .iter()
        .enumerate()
        .filter(|(i, &r)| argmax(pred.row(*i)) == labels[r])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub mrr: f64,
    /// `(k, fraction of queries whose true view ranks within the top k)`.
    pub hits: Vec<(usize, f64)>,
}

impl RetrievalScores {
    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt_or_zero();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt_or_zero();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

trait SqrtOrZero {
    fn sqrt_or_zero(self) -> f64;
}

impl SqrtOrZero for f64 {
    fn sqrt_or_zero(self) -> f64 {
        if self > 0.0 {
            libm::sqrt(self)
        } else {
            0.0
        }
    }
}

/// For each query, ranks the candidates of the same object by cosine
/// similarity to its predicted embedding. The rank of the true view is one
/// plus the number of other same-object candidates that score strictly higher.
pub fn retrieval_metrics(
    predicted: &Mat<f64>,
    query_objects: &[usize],
    true_candidate: &[usize],
    candidates: &Mat<f64>,
    candidate_objects: &[usize],
    ks: &[usize],
) -> Result<RetrievalScores, EvalError> {
    let n = predicted.rows;
    if query_objects.len() != n
        || true_candidate.len() != n
        || candidate_objects.len() != candidates.rows
    {
        return Err(EvalError::Degenerate(
            "retrieval inputs have inconsistent lengths",
        ));
    }
    if n == 0 {
        return Err(EvalError::Degenerate("no retrieval queries"));
    }
    let mut rr = 0.0;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..n {
        let obj = query_objects[i];
        let t = true_candidate[i];
        if candidate_objects.get(t) != Some(&obj) {
            return Err(EvalError::Degenerate("true view belongs to another object"));
        }
        let p = predicted.row(i);
        let s_true = cosine(p, candidates.row(t));
        let mut same = 0;
        let mut rank = 1;
        for (c, &o) in candidate_objects.iter().enumerate() {
            if o != obj {
                continue;
            }
            same += 1;
            if c != t && cosine(p, candidates.row(c)) > s_true {
                rank += 1;
            }
        }
        if same < 2 {
            return Err(EvalError::Degenerate("object with a single candidate view"));
        }
        rr += 1.0 / rank as f64;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(RetrievalScores {
        mrr: rr / n as f64,
        hits: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, h as f64 / n as f64))
            .collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub eval_seed: u64,
    pub lengths: Vec<usize>,
    pub note: String,
}

/// Metrics for one (context group, context mode, context length) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub context: String,
    pub mode: ContextMode,
    pub length: usize,
    /// Relative-transformation R² per probed group.
    pub r2: BTreeMap<String, f64>,
    /// R² for the target view's own latent values, per group.
    pub latent_r2: BTreeMap<String, f64>,
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedCell {
    pub context: String,
    pub length: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    /// Linear-probe top-1 on encoder representations.
    pub classification_top1: f64,
    pub cells: Vec<CellReport>,
    pub supervised: Vec<SupervisedCell>,
}

/// One row of the flat export.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatRow {
    pub group: String,
    pub mode: String,
    pub length: usize,
    pub metric: String,
    pub value: f64,
}

impl EvalReport {
    pub fn cell(&self, context: &str, mode: ContextMode, length: usize) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.context == context && c.mode == mode && c.length == length)
    }

    /// R² of `target` under (`context`, `mode`) at every length, in length order.
    pub fn r2_series(&self, context: &str, mode: ContextMode, target: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .cells
            .iter()
            .filter(|c| c.context == context && c.mode == mode)
            .filter_map(|c| c.r2.get(target).map(|r| (c.length, *r)))
            .collect();
        v.sort_by_key(|x| x.0);
        v
    }

    pub fn flat_rows(&self) -> Vec<FlatRow> {
        let mut rows = Vec::new();
        let mut push = |group: &str, mode: &str, length: usize, metric: String, value: f64| {
            rows.push(FlatRow {
                group: group.into(),
                mode: mode.into(),
                length,
                metric,
                value,
            })
        };
        for c in &self.cells {
            let m = c.mode.name();
            for (g, v) in &c.r2 {
                push(&c.context, m, c.length, alloc::format!("r2_{g}"), *v);
            }
            for (g, v) in &c.latent_r2 {
                push(&c.context, m, c.length, alloc::format!("latent_r2_{g}"), *v);
            }
            push(&c.context, m, c.length, "mrr".into(), c.mrr);
            push(&c.context, m, c.length, "hits_at_1".into(), c.hits_at_1);
            push(&c.context, m, c.length, "hits_at_5".into(), c.hits_at_5);
        }
        for s in &self.supervised {
            push(
                &s.context,
                "equivariant",
                s.length,
                "supervised_top1".into(),
                s.accuracy,
            );
        }
        rows
    }
}

fn group_label(g: Option<GroupId>) -> String {
    g.map_or_else(|| "none".to_string(), |g| g.name().to_string())
}

/// Evaluates one (group, mode) cell at every configured length. The same
/// query pairs and the same max-length contexts (truncated) are used at
/// every length, so differences between lengths come from the context alone.
pub fn evaluate_cell<T: Real>(
    model: &Model<T>,
    world: &World,
    cfg: &ProbeConfig,
    group: Option<GroupId>,
    mode: ContextMode,
    stream: u64,
) -> Result<Vec<CellReport>, EvalError> {
    let mut rng = seeded_stream(cfg.eval_seed, stream);
    let n_ctx = cfg.n_eval_samples.div_ceil(cfg.queries_per_context);
    let max_k = cfg.max_length() / 2;
    let targets = world.config().groups_sorted();
    let retr_per_ctx = cfg.retrieval_queries.div_ceil(n_ctx);
    let v = cfg.retrieval_views;

    let n_len = cfg.lengths.len();
    let out_dim = model.config().out_dim;
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); n_len];
    let mut y_feats: Vec<Vec<f64>> = vec![Vec::new(); n_len];
    let mut rel_targets: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    let mut lat_targets: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); n_len];
    let mut cands: Vec<Vec<f64>> = vec![Vec::new(); n_len];
    let mut q_obj = Vec::new();
    let mut q_true = Vec::new();
    let mut c_obj = Vec::new();
    let mut set_id = 0;

    let mut remaining = cfg.n_eval_samples;
    for _ in 0..n_ctx {
        let full = build_eval_context(world, group, mode, 2 * max_k, &mut rng)?;
        let nq = remaining.min(cfg.queries_per_context);
        remaining -= nq;
        let probes: Vec<ContextPair> = (0..nq)
            .map(|_| world.sample_pair(group, mode, &mut rng))
            .collect::<Result<_, _>>()?;
        for s in &probes {
            for (ti, &tg) in targets.iter().enumerate() {
                let rel = relative_action(
                    &s.latent_x,
                    &s.latent_y,
                    tg,
                    world.config().rotation_relative,
                )?;
                rel_targets[ti].extend_from_slice(rel.group_slots());
                let z = world.normalize_target(&s.t_y);
                lat_targets[ti].extend_from_slice(&z[world.target_range(tg).unwrap()]);
            }
        }
        let mut retr: Vec<(ContextPair, Vec<Vec<f64>>)> = Vec::with_capacity(retr_per_ctx);
        for _ in 0..retr_per_ctx {
            let pair = world.sample_pair(group, mode, &mut rng)?;
            let true_slot = rng.gen_range(0..v);
            let mut views = Vec::with_capacity(v);
            for j in 0..v {
                if j == true_slot {
                    views.push(pair.y_obs.clone());
                } else {
                    let other = world.transform_all(&pair.latent_x, &mut rng)?;
                    views.push(world.render(&other)?);
                }
            }
            q_obj.push(set_id);
            q_true.push(c_obj.len() + true_slot);
            c_obj.extend(core::iter::repeat_n(set_id, v));
            set_id += 1;
            retr.push((pair, views));
        }

        let mut queries = Vec::with_capacity(2 * nq + retr.len() * (v + 1));
        for s in &probes {
            queries.push(Query {
                obs: &s.x_obs,
                action: Action::none(),
                slot: QuerySlot::Target,
            });
            queries.push(Query {
                obs: &s.y_obs,
                action: Action::none(),
                slot: QuerySlot::Target,
            });
        }
        for (pair, views) in &retr {
            queries.push(Query {
                obs: &pair.x_obs,
                action: pair.action,
                slot: QuerySlot::Anchor,
            });
            for view in views {
                queries.push(Query {
                    obs: view,
                    action: Action::none(),
                    slot: QuerySlot::Target,
                });
            }
        }
        for (li, &len) in cfg.lengths.iter().enumerate() {
            let ctx = full.truncated(len / 2);
            let out = embed_queries(model, &ctx, &queries)?;
            for i in 0..nq {
                let ex = out.row(2 * i);
                let ey = out.row(2 * i + 1);
                feats[li].extend(ex.iter().chain(ey).map(|v| v.as_f64()));
                y_feats[li].extend(ey.iter().map(|v| v.as_f64()));
            }
            let mut r = 2 * nq;
            for _ in &retr {
                pred[li].extend(out.row(r).iter().map(|v| v.as_f64()));
                for j in 0..v {
                    cands[li].extend(out.row(r + 1 + j).iter().map(|v| v.as_f64()));
                }
                r += v + 1;
            }
        }
    }

    let n = cfg.n_eval_samples;
    let mut reports = Vec::with_capacity(n_len);
    for (li, &len) in cfg.lengths.iter().enumerate() {
        let x = Mat::from_vec(n, 2 * out_dim, core::mem::take(&mut feats[li]));
        let xy = Mat::from_vec(n, out_dim, core::mem::take(&mut y_feats[li]));
        let mut r2 = BTreeMap::new();
        let mut latent_r2 = BTreeMap::new();
        for (ti, &tg) in targets.iter().enumerate() {
            let w = tg.action_slots().len();
            let t = Mat::from_vec(n, w, rel_targets[ti].clone());
            let split_seed = cfg.eval_seed ^ stream;
            r2.insert(
                tg.name().to_string(),
                mean(&r2_probe(
                    &x,
                    &t,
                    cfg.ridge_lambda,
                    cfg.train_fraction,
                    split_seed,
                )?),
            );
            let lw = tg.target_width();
            let lt = Mat::from_vec(n, lw, lat_targets[ti].clone());
            latent_r2.insert(
                tg.name().to_string(),
                mean(&r2_probe(
                    &xy,
                    &lt,
                    cfg.ridge_lambda,
                    cfg.train_fraction,
                    split_seed,
                )?),
            );
        }
        let nr = q_obj.len();
        let scores = retrieval_metrics(
            &Mat::from_vec(nr, out_dim, core::mem::take(&mut pred[li])),
            &q_obj,
            &q_true,
            &Mat::from_vec(c_obj.len(), out_dim, core::mem::take(&mut cands[li])),
            &c_obj,
            &[1, 5],
        )?;
        reports.push(CellReport {
            context: group_label(group),
            mode,
            length: len,
            r2,
            latent_r2,
            mrr: scores.mrr,
            hits_at_1: scores.hits_at(1).unwrap_or(0.0),
            hits_at_5: scores.hits_at(5).unwrap_or(0.0),
        });
    }
    Ok(reports)
}

/// Linear-probe classification accuracy on encoder representations of random views.
pub fn encoder_classification<T: Real>(
    model: &Model<T>,
    world: &World,
    cfg: &ProbeConfig,
) -> Result<f64, EvalError> {
    let mut rng = seeded_stream(cfg.eval_seed, 0xc1a5);
    let n = cfg.classification_samples;
    let od = world.config().obs_dim;
    let mut obs = Mat::zeros(n, od);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let object = rng.gen_range(0..world.n_objects());
        let x = world.sample_base_view(object, &mut rng);
        let y = world.transform_all(&x, &mut rng)?;
        copy_obs(obs.row_mut(i), &world.render(&y)?);
        labels.push(y.class_id);
    }
    let reps = model.encode(&obs)?.reps.cast::<f64>();
    linear_probe_classification(
        &reps,
        &labels,
        cfg.ridge_lambda,
        cfg.train_fraction,
        cfg.eval_seed,
    )
}

/// Accuracy on context-dependent labels, read from raw outputs of target-slot queries.
pub fn supervised_accuracy<T: Real>(
    model: &Model<T>,
    world: &World,
    cfg: &ProbeConfig,
    group: GroupId,
    stream: u64,
) -> Result<Vec<SupervisedCell>, EvalError> {
    let n_classes = world.config().n_classes;
    if model.config().out_dim != 2 * n_classes {
        return Err(EvalError::InvalidConfig(
            "model head is not a supervised head".into(),
        ));
    }
    let mut rng = seeded_stream(cfg.eval_seed, stream);
    let n_ctx = cfg.n_eval_samples.div_ceil(cfg.queries_per_context);
    let max_k = cfg.max_length() / 2;
    let mut correct = vec![0usize; cfg.lengths.len()];
    let mut total = 0usize;
    let mut remaining = cfg.n_eval_samples;
    for _ in 0..n_ctx {
        let full = build_eval_context(
            world,
            Some(group),
            ContextMode::Equivariant,
            2 * max_k,
            &mut rng,
        )?;
        let nq = remaining.min(cfg.queries_per_context);
        remaining -= nq;
        let pairs: Vec<ContextPair> = (0..nq)
            .map(|_| world.sample_pair(Some(group), ContextMode::Equivariant, &mut rng))
            .collect::<Result<_, _>>()?;
        let queries: Vec<Query<'_>> = pairs
            .iter()
            .map(|p| Query {
                obs: &p.y_obs,
                action: Action::none(),
                slot: QuerySlot::Target,
            })
            .collect();
        total += nq;
        for (li, &len) in cfg.lengths.iter().enumerate() {
            // Normalizing rows does not move the argmax.
            let logits = embed_queries(model, &full.truncated(len / 2), &queries)?;
            for (i, p) in pairs.iter().enumerate() {
                if argmax(logits.row(i)) == supervised_label(p.latent_y.class_id, group, n_classes)
                {
                    correct[li] += 1;
                }
            }
        }
    }
    Ok(cfg
        .lengths
        .iter()
        .zip(&correct)
        .map(|(&length, &c)| SupervisedCell {
            context: group.name().to_string(),
            length,
            accuracy: c as f64 / total as f64,
        })
        .collect())
}

/// Every metric at every length for each active group's equivariant contexts
/// and for invariant (zero-action) contexts, reported under `none`.
pub fn full_report<T: Real>(
    model: &Model<T>,
    world: &World,
    cfg: &ProbeConfig,
    mode: TrainMode,
    metadata: ReportMetadata,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let max = model.config().max_tokens.saturating_sub(2);
    if cfg.max_length() > max {
        return Err(EvalError::TooLong {
            length: cfg.max_length(),
            max,
        });
    }
    let classification_top1 = encoder_classification(model, world, cfg)?;
    let mut cells = Vec::new();
    let mut supervised = Vec::new();
    for (gi, g) in world.config().groups_sorted().into_iter().enumerate() {
        if mode == TrainMode::Supervised {
            supervised.extend(supervised_accuracy(
                model,
                world,
                cfg,
                g,
                0x300 + gi as u64,
            )?);
        } else {
            cells.extend(evaluate_cell(
                model,
                world,
                cfg,
                Some(g),
                ContextMode::Equivariant,
                0x100 + gi as u64,
            )?);
        }
    }
    if mode != TrainMode::Supervised {
        cells.extend(evaluate_cell(
            model,
            world,
            cfg,
            None,
            ContextMode::Invariant,
            0x200,
        )?);
    }
    Ok(EvalReport {
        metadata,
        classification_top1,
        cells,
        supervised,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::WorldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(10, 0.7, 3);
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(split_indices(10, 0.7, 3), (a.clone(), b.clone()));
        assert!(a.iter().all(|i| !b.contains(i)));
    }

    #[test]
    fn exact_retrieval() {
        let c = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.7, 0.7]);
        let p = Mat::from_vec(1, 2, vec![0.0, 1.0]);
        let s = retrieval_metrics(&p, &[4], &[1], &c, &[4, 4, 4], &[1, 5]).unwrap();
        assert_eq!(s.mrr, 1.0);
        assert_eq!(s.hits_at(1), Some(1.0));
    }

    #[test]
    fn single_view_object_rejected() {
        let c = Mat::from_vec(2, 1, vec![1.0, 1.0]);
        let p = Mat::from_vec(1, 1, vec![1.0]);
        assert!(retrieval_metrics(&p, &[0], &[0], &c, &[0, 1], &[1]).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let reps = Mat::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(linear_probe_classification(&reps, &[2, 2, 2, 2], 1e-3, 0.5, 0).is_err());
    }

    #[test]
    fn eval_context_rules() {
        let world = World::new(WorldConfig {
            obs_dim: 48,
            prototype_dim: 8,
            render_hidden: 16,
            ..WorldConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_eval_context(
            &world,
            Some(GroupId::Color),
            ContextMode::Equivariant,
            3,
            &mut rng
        )
        .is_err());
        let c = build_eval_context(
            &world,
            Some(GroupId::Color),
            ContextMode::Invariant,
            8,
            &mut rng,
        )
        .unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.pairs.iter().all(|p| p.action.is_zero()));
        assert!(
            build_eval_context(&world, None, ContextMode::Equivariant, 0, &mut rng)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn chunked_queries_match_single_queries() {
        let world = World::new(WorldConfig {
            obs_dim: 24,
            prototype_dim: 8,
            render_hidden: 16,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            obs_dim: 24,
            enc_hidden: 16,
            rep_dim: 8,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
            max_tokens: 8,
            out_dim: 8,
            pred_hidden: 8,
            target_dim: world.target_dim(),
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = build_eval_context(
            &world,
            Some(GroupId::Color),
            ContextMode::Equivariant,
            4,
            &mut rng,
        )
        .unwrap();
        let pairs: Vec<ContextPair> = (0..QUERY_CHUNK + 40)
            .map(|_| {
                world
                    .sample_pair(Some(GroupId::Color), ContextMode::Equivariant, &mut rng)
                    .unwrap()
            })
            .collect();
        let queries: Vec<Query<'_>> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| Query {
                obs: &p.x_obs,
                action: p.action,
                slot: if i % 2 == 0 {
                    QuerySlot::Anchor
                } else {
                    QuerySlot::Target
                },
            })
            .collect();
        let all = embed_queries(&model, &ctx, &queries).unwrap();
        assert_eq!(all.rows, queries.len());
        for i in [0, 1, QUERY_CHUNK - 1, QUERY_CHUNK, QUERY_CHUNK + 39] {
            let one = embed_queries(&model, &ctx, &queries[i..=i]).unwrap();
            for (a, b) in all.row(i).iter().zip(one.row(0)) {
                assert!((a - b).abs() < 1e-12, "query {i}");
            }
        }
    }

    #[test]
    fn empty_context_matches_two_token_forward() {
        let world = World::new(WorldConfig {
            obs_dim: 24,
            prototype_dim: 8,
            render_hidden: 16,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            obs_dim: 24,
            enc_hidden: 16,
            rep_dim: 8,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
            max_tokens: 8,
            out_dim: 8,
            pred_hidden: 8,
            target_dim: world.target_dim(),
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = world
            .sample_pair(Some(GroupId::Rotation), ContextMode::Equivariant, &mut rng)
            .unwrap();
        let empty = ContextSequence {
            pairs: vec![],
            group: Some(GroupId::Rotation),
            mode: ContextMode::Equivariant,
        };
        let (a, y) = embed_with_context(&model, &empty, core::slice::from_ref(&pair)).unwrap();
        let one = ContextSequence {
            pairs: vec![pair],
            ..empty
        };
        let mask = crate::mask::compose(
            &crate::mask::MaskConfig::default().evaluation(),
            1,
            &mut rng,
        )
        .unwrap();
        let trace = model.forward_context(&one, &mask).unwrap();
        for (u, v) in a.row(0).iter().zip(trace.forward.normalized.row(0)) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in y.row(0).iter().zip(trace.forward.normalized.row(1)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

//! Encoder, contextual transformer and auxiliary predictor.
//!
//! All parameters live in one flat [`Params`] list addressed through a
//! [`Layout`], so the optimizer, gradient buffers and checkpoints share a
//! single tensor ordering. Every forward pass returns a trace holding what
//! its backward pass needs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::ACTION_WIDTH;
use crate::mask::MaskMatrix;
use crate::real::{dot, matmul, matmul_nt, matmul_tn_acc, Mat, Real};
use crate::world::{build_token_sequence, ContextSequence, WorldError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("{count} tokens exceed the {max} learned positions")]
    TooManyTokens { count: usize, max: usize },
    #[error("mask covers {mask} tokens but the sequence has {tokens}")]
    MaskMismatch { mask: usize, tokens: usize },
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("trace was produced by parameter version {trace}, model is at {model}")]
    StaleTrace { trace: u64, model: u64 },
    #[error("parameter tensor count {got} does not match layout ({expected})")]
    TensorCount { expected: usize, got: usize },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Which features the auxiliary predictor reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInput {
    /// Final transformer hidden state at the token.
    #[default]
    TransformerOut,
    /// The raw `[rep ‖ action]` token.
    EncoderConcat,
    /// The L2-normalized output embedding that the contrastive loss compares.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub enc_hidden: usize,
    pub rep_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Number of learned positions (`2 * K_max`).
    pub max_tokens: usize,
    pub out_dim: usize,
    pub pred_hidden: usize,
    pub target_dim: usize,
    pub predictor_input: PredictorInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_dim: 128,
            enc_hidden: 256,
            rep_dim: 64,
            model_dim: 128,
            n_layers: 3,
            n_heads: 4,
            ff_mult: 4,
            max_tokens: 64,
            out_dim: 64,
            pred_hidden: 128,
            target_dim: 7,
            predictor_input: PredictorInput::TransformerOut,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.obs_dim,
            self.enc_hidden,
            self.rep_dim,
            self.model_dim,
            self.n_layers,
            self.n_heads,
            self.ff_mult,
            self.max_tokens,
            self.out_dim,
            self.pred_hidden,
            self.target_dim,
        ];
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig("all dimensions must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(
                "model_dim must be divisible by n_heads",
            ));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.rep_dim + ACTION_WIDTH
    }

    fn predictor_in(&self) -> usize {
        match self.predictor_input {
            PredictorInput::TransformerOut => self.model_dim,
            PredictorInput::EncoderConcat => self.token_dim(),
            PredictorInput::Embedding => self.out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

/// Names, shapes and indices of every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    enc_w1: usize,
    enc_b1: usize,
    enc_w2: usize,
    enc_b2: usize,
    in_w: usize,
    in_b: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    pred_w1: usize,
    pred_b1: usize,
    pred_w2: usize,
    pred_b2: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.names.len() - 1
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let d = cfg.model_dim;
        let fd = cfg.model_dim * cfg.ff_mult;
        let enc_w1 = b.push("encoder.w1".into(), cfg.obs_dim, cfg.enc_hidden);
        let enc_b1 = b.push("encoder.b1".into(), 1, cfg.enc_hidden);
        let enc_w2 = b.push("encoder.w2".into(), cfg.enc_hidden, cfg.rep_dim);
        let enc_b2 = b.push("encoder.b2".into(), 1, cfg.rep_dim);
        let in_w = b.push("transformer.input.w".into(), cfg.token_dim(), d);
        let in_b = b.push("transformer.input.b".into(), 1, d);
        let pos = b.push("transformer.pos".into(), cfg.max_tokens, d);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("transformer.block{l}.{s}");
            blocks.push(BlockIdx {
                ln1_g: b.push(p("ln1.g"), 1, d),
                ln1_b: b.push(p("ln1.b"), 1, d),
                wq: b.push(p("attn.wq"), d, d),
                bq: b.push(p("attn.bq"), 1, d),
                wk: b.push(p("attn.wk"), d, d),
                bk: b.push(p("attn.bk"), 1, d),
                wv: b.push(p("attn.wv"), d, d),
                bv: b.push(p("attn.bv"), 1, d),
                wo: b.push(p("attn.wo"), d, d),
                bo: b.push(p("attn.bo"), 1, d),
                ln2_g: b.push(p("ln2.g"), 1, d),
                ln2_b: b.push(p("ln2.b"), 1, d),
                ff_w1: b.push(p("ff.w1"), d, fd),
                ff_b1: b.push(p("ff.b1"), 1, fd),
                ff_w2: b.push(p("ff.w2"), fd, d),
                ff_b2: b.push(p("ff.b2"), 1, d),
            });
        }
        let lnf_g = b.push("transformer.lnf.g".into(), 1, d);
        let lnf_b = b.push("transformer.lnf.b".into(), 1, d);
        let head_w = b.push("transformer.head.w".into(), d, cfg.out_dim);
        let head_b = b.push("transformer.head.b".into(), 1, cfg.out_dim);
        let pred_w1 = b.push("predictor.w1".into(), cfg.predictor_in(), cfg.pred_hidden);
        let pred_b1 = b.push("predictor.b1".into(), 1, cfg.pred_hidden);
        let pred_w2 = b.push("predictor.w2".into(), cfg.pred_hidden, cfg.target_dim);
        let pred_b2 = b.push("predictor.b2".into(), 1, cfg.target_dim);
        Layout {
            names: b.names,
            shapes: b.shapes,
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            in_w,
            in_b,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            pred_w1,
            pred_b1,
            pred_w2,
            pred_b2,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices of the predictor tensors.
    pub fn predictor_indices(&self) -> [usize; 4] {
        [self.pred_w1, self.pred_b1, self.pred_w2, self.pred_b2]
    }

    /// Indices of the encoder tensors.
    pub fn encoder_indices(&self) -> [usize; 4] {
        [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2]
    }

    pub fn zeros<T: Real>(&self) -> Params<T> {
        Params {
            tensors: self.shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }
}

/// Flat list of parameter (or gradient, or moment) tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Mat<T>>,
}

impl<T: Real> Params<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn all_zero(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| *v == T::zero()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Intermediates of an encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    pub input: Mat<T>,
    pub hidden: Mat<T>,
    pub reps: Mat<T>,
}

#[derive(Clone, Debug)]
struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    attn_o: Mat<T>,
    ln2: LnCache<T>,
    b: Mat<T>,
    f1: Mat<T>,
    g: Mat<T>,
}

/// Output of [`Model::transformer_forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub tokens: Mat<T>,
    pub positions: Vec<usize>,
    pub mask: MaskMatrix,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    /// Final hidden state (after the last layer norm), `n x model_dim`.
    pub hidden: Mat<T>,
    /// Output head values, `n x out_dim`.
    pub raw: Mat<T>,
    /// Row-wise L2-normalized copy of `raw`.
    pub normalized: Mat<T>,
    pub norms: Vec<T>,
    version: u64,
}

impl<T: Real> ForwardTrace<T> {
    /// Attention weights of `layer`/`head`, `n x n`.
    pub fn attention(&self, layer: usize, head: usize) -> &Mat<T> {
        &self.blocks[layer].probs[head]
    }

    /// Maps a gradient on the normalized outputs to one on the raw outputs.
    pub fn raw_grad_from_normalized(&self, d_norm: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.raw.rows, self.raw.cols);
        for i in 0..self.raw.rows {
            let e = self.normalized.row(i);
            let g = d_norm.row(i);
            let proj = dot(e, g);
            let inv = T::one() / self.norms[i];
            for (o, (ei, gi)) in out.row_mut(i).iter_mut().zip(e.iter().zip(g)) {
                *o = (*gi - *ei * proj) * inv;
            }
        }
        out
    }
}

/// Output of [`Model::predictor_forward`].
#[derive(Clone, Debug)]
pub struct PredictorTrace<T> {
    pub rows: Vec<usize>,
    input: Mat<T>,
    z: Mat<T>,
    u: Mat<T>,
    pub pred: Mat<T>,
}

/// Full trace of one context sequence through encoder, transformer and predictor.
#[derive(Clone, Debug)]
pub struct SequenceTrace<T> {
    pub k: usize,
    pub encoder: EncoderTrace<T>,
    pub forward: ForwardTrace<T>,
    /// Predictor outputs at every token (anchors at even rows, targets at odd).
    pub predictor: PredictorTrace<T>,
}

/// Upstream gradients for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    /// Gradient on `ForwardTrace::raw`.
    pub raw: Mat<T>,
    /// Gradient on the predictor outputs, if any.
    pub pred: Option<Mat<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: Params<T>,
    version: u64,
}

fn gaussian<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| {
        T::cast(std * rng.sample::<f64, _>(StandardNormal))
    })
}

fn add_row<T: Real>(y: &mut Mat<T>, b: &Mat<T>) {
    for r in 0..y.rows {
        for (v, bb) in y.row_mut(r).iter_mut().zip(&b.data) {
            *v += *bb;
        }
    }
}

fn colsum_acc<T: Real>(acc: &mut Mat<T>, dy: &Mat<T>) {
    for r in 0..dy.rows {
        for (a, v) in acc.data.iter_mut().zip(dy.row(r)) {
            *a += *v;
        }
    }
}

fn linear<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut y = matmul(x, w);
    add_row(&mut y, b);
    y
}

fn layer_norm<T: Real>(x: &Mat<T>, g: &Mat<T>, b: &Mat<T>) -> (Mat<T>, LnCache<T>) {
    let d = x.cols;
    let inv_d = T::cast(1.0 / d as f64);
    let eps = T::cast(LN_EPS);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (*v - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xhat.data[r * d + c] * g.data[c] + b.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    cache: &LnCache<T>,
    g: &Mat<T>,
    dy: &Mat<T>,
    dg: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Mat<T> {
    let d = dy.cols;
    let inv_d = T::cast(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dg.data[c] += dyr[c] * xh[c];
            db.data[c] += dyr[c];
            dxhat[c] = dyr[c] * g.data[c];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dxhat_xhat = dot(&dxhat, xh) * inv_d;
        let rs = cache.rstd[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::cast(0.797_884_560_802_865_4);
    let a = T::cast(0.044_715);
    let half = T::cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::cast(0.797_884_560_802_865_4);
    let a = T::cast(0.044_715);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Real> Model<T> {
    /// Random initialization from the caller's init stream.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Model<T>, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = layout.zeros::<T>();
        let out_scale = 1.0 / libm::sqrt(2.0 * config.n_layers as f64);
        for (i, name) in layout.names.iter().enumerate() {
            let (rows, cols) = layout.shapes[i];
            let t = &mut params.tensors[i];
            if name.ends_with(".g") {
                t.data.iter_mut().for_each(|v| *v = T::one());
            } else if name == "transformer.pos" {
                *t = gaussian(rows, cols, 0.1, rng);
            } else if rows > 1 {
                let mut std = 1.0 / libm::sqrt(rows as f64);
                if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
                    std *= out_scale;
                }
                *t = gaussian(rows, cols, std, rng);
            }
        }
        Ok(Model {
            config,
            layout,
            params,
            version: 0,
        })
    }

    /// Wraps existing parameters after checking every shape against the layout.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Model<T>, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(ModelError::TensorCount {
                expected: layout.len(),
                got: params.len(),
            });
        }
        for (i, t) in params.tensors.iter().enumerate() {
            if t.shape() != layout.shapes[i] {
                return Err(ModelError::Shape {
                    what: layout.names[i].clone(),
                    expected: layout.shapes[i],
                    got: t.shape(),
                });
            }
        }
        Ok(Model {
            config,
            layout,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut Params<T> {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&self) -> Params<T> {
        self.layout.zeros()
    }

    fn t(&self, i: usize) -> &Mat<T> {
        &self.params.tensors[i]
    }

    /// Encoder MLP `obs -> tanh hidden -> rep`.
    pub fn encode(&self, obs: &Mat<T>) -> Result<EncoderTrace<T>, ModelError> {
        if obs.cols != self.config.obs_dim {
            return Err(ModelError::Shape {
                what: "encoder input".into(),
                expected: (obs.rows, self.config.obs_dim),
                got: obs.shape(),
            });
        }
        let l = &self.layout;
        let mut hidden = linear(obs, self.t(l.enc_w1), self.t(l.enc_b1));
        hidden.data.iter_mut().for_each(|v| *v = v.tanh());
        let reps = linear(&hidden, self.t(l.enc_w2), self.t(l.enc_b2));
        Ok(EncoderTrace {
            input: obs.clone(),
            hidden,
            reps,
        })
    }

    pub fn encoder_backward(
        &self,
        trace: &EncoderTrace<T>,
        d_reps: &Mat<T>,
        grads: &mut Params<T>,
    ) {
        let l = &self.layout;
        let mut dh = self.linear_backward(&trace.hidden, l.enc_w2, l.enc_b2, d_reps, grads);
        for (d, h) in dh.data.iter_mut().zip(&trace.hidden.data) {
            *d *= T::one() - *h * *h;
        }
        // Input gradient is not needed.
        matmul_tn_acc(&mut grads.tensors[l.enc_w1], &trace.input, &dh);
        colsum_acc(&mut grads.tensors[l.enc_b1], &dh);
    }

    fn linear_backward(
        &self,
        x: &Mat<T>,
        wi: usize,
        bi: usize,
        dy: &Mat<T>,
        grads: &mut Params<T>,
    ) -> Mat<T> {
        matmul_tn_acc(&mut grads.tensors[wi], x, dy);
        colsum_acc(&mut grads.tensors[bi], dy);
        matmul_nt(dy, self.t(wi))
    }

    /// Masked pre-norm transformer over `tokens` at the given positions.
    pub fn transformer_forward(
        &self,
        tokens: &Mat<T>,
        positions: &[usize],
        mask: &MaskMatrix,
    ) -> Result<ForwardTrace<T>, ModelError> {
        let cfg = &self.config;
        let n = tokens.rows;
        if tokens.cols != cfg.token_dim() {
            return Err(ModelError::Shape {
                what: "tokens".into(),
                expected: (n, cfg.token_dim()),
                got: tokens.shape(),
            });
        }
        if mask.size() != n {
            return Err(ModelError::MaskMismatch {
                mask: mask.size(),
                tokens: n,
            });
        }
        if positions.len() != n {
            return Err(ModelError::MaskMismatch {
                mask: positions.len(),
                tokens: n,
            });
        }
        if let Some(&p) = positions.iter().find(|p| **p >= cfg.max_tokens) {
            return Err(ModelError::TooManyTokens {
                count: p + 1,
                max: cfg.max_tokens,
            });
        }
        let l = &self.layout;
        let mut x = linear(tokens, self.t(l.in_w), self.t(l.in_b));
        let pos = self.t(l.pos);
        for (r, &p) in positions.iter().enumerate() {
            for (v, e) in x.row_mut(r).iter_mut().zip(pos.row(p)) {
                *v += *e;
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for bi in &l.blocks {
            let (a, ln1) = layer_norm(&x, self.t(bi.ln1_g), self.t(bi.ln1_b));
            let q = linear(&a, self.t(bi.wq), self.t(bi.bq));
            let k = linear(&a, self.t(bi.wk), self.t(bi.bk));
            let v = linear(&a, self.t(bi.wv), self.t(bi.bv));
            let (attn_o, probs) = attention_forward(&q, &k, &v, cfg.n_heads, mask);
            let att = linear(&attn_o, self.t(bi.wo), self.t(bi.bo));
            x.add_assign(&att);
            let (b, ln2) = layer_norm(&x, self.t(bi.ln2_g), self.t(bi.ln2_b));
            let f1 = linear(&b, self.t(bi.ff_w1), self.t(bi.ff_b1));
            let mut g = f1.clone();
            g.data.iter_mut().for_each(|v| *v = gelu(*v));
            let f2 = linear(&g, self.t(bi.ff_w2), self.t(bi.ff_b2));
            x.add_assign(&f2);
            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn_o,
                ln2,
                b,
                f1,
                g,
            });
        }
        let (hidden, lnf) = layer_norm(&x, self.t(l.lnf_g), self.t(l.lnf_b));
        let raw = linear(&hidden, self.t(l.head_w), self.t(l.head_b));
        let mut normalized = raw.clone();
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = normalized.row_mut(r);
            let nrm = dot(row, row).sqrt().max(T::cast(1e-12));
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        Ok(ForwardTrace {
            tokens: tokens.clone(),
            positions: positions.to_vec(),
            mask: mask.clone(),
            blocks,
            lnf,
            hidden,
            raw,
            normalized,
            norms,
            version: self.version,
        })
    }

    /// Backward pass of the transformer. `d_hidden` is an extra gradient on
    /// the final hidden state (from the predictor). Returns the token gradient.
    pub fn transformer_backward(
        &self,
        trace: &ForwardTrace<T>,
        d_raw: &Mat<T>,
        d_hidden: Option<&Mat<T>>,
        grads: &mut Params<T>,
    ) -> Result<Mat<T>, ModelError> {
        self.check_version(trace.version)?;
        let l = &self.layout;
        let cfg = &self.config;
        let mut dh = self.linear_backward(&trace.hidden, l.head_w, l.head_b, d_raw, grads);
        if let Some(extra) = d_hidden {
            dh.add_assign(extra);
        }
        let (g_i, b_i) = (l.lnf_g, l.lnf_b);
        let mut dx = {
            let (dg, db) = two_mut(&mut grads.tensors, g_i, b_i);
            layer_norm_backward(&trace.lnf, self.t(g_i), &dh, dg, db)
        };
        for (bi, cache) in l.blocks.iter().zip(&trace.blocks).rev() {
            // feed-forward branch
            let mut dg = self.linear_backward(&cache.g, bi.ff_w2, bi.ff_b2, &dx, grads);
            for (d, f) in dg.data.iter_mut().zip(&cache.f1.data) {
                *d *= gelu_grad(*f);
            }
            let db = self.linear_backward(&cache.b, bi.ff_w1, bi.ff_b1, &dg, grads);
            let dln2 = {
                let (gg, gb) = two_mut(&mut grads.tensors, bi.ln2_g, bi.ln2_b);
                layer_norm_backward(&cache.ln2, self.t(bi.ln2_g), &db, gg, gb)
            };
            dx.add_assign(&dln2);
            // attention branch
            let d_o = self.linear_backward(&cache.attn_o, bi.wo, bi.bo, &dx, grads);
            let (dq, dk, dv) = attention_backward(
                &cache.q,
                &cache.k,
                &cache.v,
                &cache.probs,
                &d_o,
                cfg.n_heads,
            );
            let mut da = self.linear_backward(&cache.a, bi.wq, bi.bq, &dq, grads);
            da.add_assign(&self.linear_backward(&cache.a, bi.wk, bi.bk, &dk, grads));
            da.add_assign(&self.linear_backward(&cache.a, bi.wv, bi.bv, &dv, grads));
            let dln1 = {
                let (gg, gb) = two_mut(&mut grads.tensors, bi.ln1_g, bi.ln1_b);
                layer_norm_backward(&cache.ln1, self.t(bi.ln1_g), &da, gg, gb)
            };
            dx.add_assign(&dln1);
        }
        {
            let dpos = &mut grads.tensors[l.pos];
            for (r, &p) in trace.positions.iter().enumerate() {
                for (g, v) in dpos.row_mut(p).iter_mut().zip(dx.row(r)) {
                    *g += *v;
                }
            }
        }
        Ok(self.linear_backward(&trace.tokens, l.in_w, l.in_b, &dx, grads))
    }

    /// Auxiliary predictor applied at `rows` of a forward trace.
    pub fn predictor_forward(
        &self,
        trace: &ForwardTrace<T>,
        rows: &[usize],
    ) -> Result<PredictorTrace<T>, ModelError> {
        let n = trace.tokens.rows;
        if let Some(&bad) = rows.iter().find(|r| **r >= n) {
            return Err(ModelError::IndexOutOfRange { index: bad, len: n });
        }
        let source = match self.config.predictor_input {
            PredictorInput::TransformerOut => &trace.hidden,
            PredictorInput::EncoderConcat => &trace.tokens,
            PredictorInput::Embedding => &trace.normalized,
        };
        let input = source.select_rows(rows);
        let l = &self.layout;
        let z = linear(&input, self.t(l.pred_w1), self.t(l.pred_b1));
        let mut u = z.clone();
        u.data.iter_mut().for_each(|v| *v = gelu(*v));
        let pred = linear(&u, self.t(l.pred_w2), self.t(l.pred_b2));
        Ok(PredictorTrace {
            rows: rows.to_vec(),
            input,
            z,
            u,
            pred,
        })
    }

    /// Returns the gradient on the predictor's input rows.
    pub fn predictor_backward(
        &self,
        trace: &PredictorTrace<T>,
        d_pred: &Mat<T>,
        grads: &mut Params<T>,
    ) -> Mat<T> {
        let l = &self.layout;
        let mut du = self.linear_backward(&trace.u, l.pred_w2, l.pred_b2, d_pred, grads);
        for (d, z) in du.data.iter_mut().zip(&trace.z.data) {
            *d *= gelu_grad(*z);
        }
        self.linear_backward(&trace.input, l.pred_w1, l.pred_b1, &du, grads)
    }

    /// Encodes both views of every pair, lays out the `2K` tokens and runs
    /// the transformer and predictor.
    pub fn forward_context(
        &self,
        ctx: &ContextSequence,
        mask: &MaskMatrix,
    ) -> Result<SequenceTrace<T>, ModelError> {
        let k = ctx.len();
        let od = self.config.obs_dim;
        let mut obs = Mat::zeros(2 * k, od);
        for (i, p) in ctx.pairs.iter().enumerate() {
            for (dst, v) in obs.row_mut(i).iter_mut().zip(&p.x_obs) {
                *dst = T::cast(*v);
            }
            for (dst, v) in obs.row_mut(k + i).iter_mut().zip(&p.y_obs) {
                *dst = T::cast(*v);
            }
        }
        let encoder = self.encode(&obs)?;
        let xs: Vec<usize> = (0..k).collect();
        let ys: Vec<usize> = (k..2 * k).collect();
        let rx = encoder.reps.select_rows(&xs);
        let ry = encoder.reps.select_rows(&ys);
        let (tokens, _) = build_token_sequence(ctx, &rx, &ry)?;
        let positions: Vec<usize> = (0..2 * k).collect();
        let forward = self.transformer_forward(&tokens, &positions, mask)?;
        let all: Vec<usize> = (0..2 * k).collect();
        let predictor = self.predictor_forward(&forward, &all)?;
        Ok(SequenceTrace {
            k,
            encoder,
            forward,
            predictor,
        })
    }

    /// Exact gradients of a scalar loss given its gradients on the outputs.
    pub fn backward(
        &self,
        trace: &SequenceTrace<T>,
        out: &OutputGrads<T>,
    ) -> Result<Params<T>, ModelError> {
        self.check_version(trace.forward.version)?;
        let mut grads = self.zero_grads();
        let n = trace.forward.tokens.rows;
        let mut d_hidden = None;
        let mut d_tokens_extra = None;
        let mut d_raw_extra = None;
        if let Some(dp) = &out.pred {
            let d_in = self.predictor_backward(&trace.predictor, dp, &mut grads);
            let width = d_in.cols;
            let mut full = Mat::zeros(n, width);
            for (i, &r) in trace.predictor.rows.iter().enumerate() {
                for (dst, v) in full.row_mut(r).iter_mut().zip(d_in.row(i)) {
                    *dst += *v;
                }
            }
            match self.config.predictor_input {
                PredictorInput::TransformerOut => d_hidden = Some(full),
                PredictorInput::EncoderConcat => d_tokens_extra = Some(full),
                PredictorInput::Embedding => {
                    d_raw_extra = Some(trace.forward.raw_grad_from_normalized(&full))
                }
            }
        }
        let d_raw = match d_raw_extra {
            Some(mut extra) => {
                extra.add_assign(&out.raw);
                extra
            }
            None => out.raw.clone(),
        };
        let mut d_tokens =
            self.transformer_backward(&trace.forward, &d_raw, d_hidden.as_ref(), &mut grads)?;
        if let Some(extra) = d_tokens_extra {
            d_tokens.add_assign(&extra);
        }
        let k = trace.k;
        let rep = self.config.rep_dim;
        let mut d_reps = Mat::zeros(2 * k, rep);
        for i in 0..k {
            d_reps
                .row_mut(i)
                .copy_from_slice(&d_tokens.row(2 * i)[..rep]);
            d_reps
                .row_mut(k + i)
                .copy_from_slice(&d_tokens.row(2 * i + 1)[..rep]);
        }
        self.encoder_backward(&trace.encoder, &d_reps, &mut grads);
        Ok(grads)
    }

    fn check_version(&self, v: u64) -> Result<(), ModelError> {
        if v != self.version {
            return Err(ModelError::StaleTrace {
                trace: v,
                model: self.version,
            });
        }
        Ok(())
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i], &mut b[0])
}

/// Multi-head scaled dot-product attention restricted to visible keys.
/// Hidden keys get exactly zero weight.
fn attention_forward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    heads: usize,
    mask: &MaskMatrix,
) -> (Mat<T>, Vec<Mat<T>>) {
    let n = q.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = T::cast(1.0 / libm::sqrt(dh as f64));
    let mut out = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Mat::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let vis = mask.row(i);
            let mut max = T::neg_infinity();
            for j in 0..n {
                if vis[j] {
                    let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            let prow = p.row_mut(i);
            for j in 0..n {
                if vis[j] {
                    let e = (scores[j] - max).exp();
                    prow[j] = e;
                    total += e;
                }
            }
            let inv = T::one() / total;
            prow.iter_mut().for_each(|w| *w *= inv);
            let orow = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                let w = p.data[i * n + j];
                if w != T::zero() {
                    for (o, vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += w * *vv;
                    }
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    probs: &[Mat<T>],
    d_out: &Mat<T>,
    heads: usize,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let n = q.rows;
    let d = q.cols;
    let dh = d / heads;
    let scale = T::cast(1.0 / libm::sqrt(dh as f64));
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut dp = vec![T::zero(); n];
    for (h, p) in probs.iter().enumerate() {
        let c0 = h * dh;
        for i in 0..n {
            let doi = &d_out.data[i * d + c0..i * d + c0 + dh];
            let prow = p.row(i);
            let mut weighted = T::zero();
            for j in 0..n {
                let w = prow[j];
                if w == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                dp[j] = dot(doi, &v.data[j * d + c0..j * d + c0 + dh]);
                weighted += w * dp[j];
                for (g, o) in dv.data[j * d + c0..j * d + c0 + dh].iter_mut().zip(doi) {
                    *g += w * *o;
                }
            }
            for j in 0..n {
                let w = prow[j];
                if w == T::zero() {
                    continue;
                }
                let ds = w * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq.data[i * d + c0 + c] += ds * k.data[j * d + c0 + c];
                    dk.data[j * d + c0 + c] += ds * q.data[i * d + c0 + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

//! Hyper-connection residual layers: per-layer read-in, write-out and
//! residual mixing maps, the stream update, and a depth sweep that tracks
//! doubly stochastic drift and input gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mixer::MixerSpec;
use crate::real::{sum, Dual, Real};

/// `n × C` residual streams.
pub type StreamState<S = f64> = Matrix<S>;

/// Largest depth, stream count and width accepted by [`depth_sweep`].
pub const MAX_SWEEP_DEPTH: usize = 64;
pub const MAX_SWEEP_STREAMS: usize = 8;
pub const MAX_SWEEP_WIDTH: usize = 16;

/// Normalization applied to the flattened stream state before the maps.
pub trait Normalizer {
    fn normalize<S: Real>(&self, x: &[S]) -> Vec<S>;
}

/// `x / sqrt(mean(x²) + eps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsNorm {
    pub eps: f64,
}

impl Default for RmsNorm {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

impl Normalizer for RmsNorm {
    fn normalize<S: Real>(&self, x: &[S]) -> Vec<S> {
        let ms = sum(x.iter().map(|v| v.clone() * v.clone())).scale(1.0 / x.len().max(1) as f64);
        let denom = (ms + S::constant(self.eps)).sqrt();
        x.iter().map(|v| v.clone() / denom.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IdentityNorm;

impl Normalizer for IdentityNorm {
    fn normalize<S: Real>(&self, x: &[S]) -> Vec<S> {
        x.to_vec()
    }
}

/// The per-layer function `F`, mapping a `1 × C` read-in to a `1 × C` output.
pub trait Sublayer {
    fn apply<S: Real>(&self, h: &[S]) -> Vec<S>;
}

/// `F ≡ 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZeroSublayer;

impl Sublayer for ZeroSublayer {
    fn apply<S: Real>(&self, h: &[S]) -> Vec<S> {
        vec![S::zero(); h.len()]
    }
}

/// `F(h) = tanh(h W + b)` with `W` of size `C × C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhAffine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Sublayer for TanhAffine {
    fn apply<S: Real>(&self, h: &[S]) -> Vec<S> {
        (0..self.weight.cols())
            .map(|j| {
                let z = sum(h
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v.scale(self.weight[(k, j)])));
                (z + S::constant(self.bias[j])).tanh()
            })
            .collect()
    }
}

/// Source of the residual mixer logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ResidualParams {
    /// Logits independent of the input.
    Static { logits: Vec<f64> },
    /// Logits `α·x′W + b`, with `W` of size `nC × q`.
    Dynamic {
        w_res: Matrix,
        b_res: Vec<f64>,
        alpha_res: f64,
    },
    /// A given `n × n` matrix, bypassing the mixer.
    Fixed { matrix: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub n: usize,
    pub c: usize,
    pub w_pre: Matrix,
    pub w_post: Matrix,
    pub b_pre: Vec<f64>,
    pub b_post: Vec<f64>,
    pub alpha_pre: f64,
    pub alpha_post: f64,
    pub residual: ResidualParams,
    pub mixer: MixerSpec,
}

/// Bias `−1` everywhere except `+1` on `designated`.
pub fn designated_bias(n: usize, designated: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i == designated { 1.0 } else { -1.0 })
        .collect()
}

impl LayerWeights {
    /// Zero projections, designated-stream biases, scales `0.01`, and the
    /// mixer's initial logits as a dynamic residual bias.
    pub fn init(c: usize, mixer: MixerSpec, designated: usize) -> Self {
        let n = mixer.n;
        let q = mixer.logit_count();
        Self {
            n,
            c,
            w_pre: Matrix::zeros(n * c, n),
            w_post: Matrix::zeros(n * c, n),
            b_pre: designated_bias(n, designated),
            b_post: designated_bias(n, designated),
            alpha_pre: 0.01,
            alpha_post: 0.01,
            residual: ResidualParams::Dynamic {
                w_res: Matrix::zeros(n * c, q),
                b_res: mixer.init_logits(),
                alpha_res: 1.0,
            },
            mixer,
        }
    }

    /// Like [`LayerWeights::init`] but with static residual logits.
    pub fn with_static_logits(c: usize, mixer: MixerSpec, logits: Vec<f64>) -> Self {
        Self {
            residual: ResidualParams::Static { logits },
            ..Self::init(c, mixer, 0)
        }
    }

    /// Like [`LayerWeights::init`] but with a fixed residual matrix.
    pub fn with_fixed_residual(c: usize, matrix: Matrix) -> Self {
        let mixer = MixerSpec::tbp(matrix.rows());
        Self {
            residual: ResidualParams::Fixed { matrix },
            ..Self::init(c, mixer, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, nc) = (self.n, self.n * self.c);
        if self.mixer.n != n {
            return Err(mismatch(
                format!("mixer of size {n}"),
                format!("{}", self.mixer.n),
            ));
        }
        for (name, w) in [("w_pre", &self.w_pre), ("w_post", &self.w_post)] {
            if (w.rows(), w.cols()) != (nc, n) {
                return Err(mismatch(
                    format!("{name} of shape {nc}×{n}"),
                    format!("{}×{}", w.rows(), w.cols()),
                ));
            }
        }
        if self.b_pre.len() != n || self.b_post.len() != n {
            return Err(mismatch(
                format!("biases of length {n}"),
                format!("{}, {}", self.b_pre.len(), self.b_post.len()),
            ));
        }
        let q = self.mixer.logit_count();
        match &self.residual {
            ResidualParams::Static { logits } if logits.len() != q => Err(mismatch(
                format!("{q} residual logits"),
                format!("{}", logits.len()),
            )),
            ResidualParams::Dynamic { w_res, b_res, .. }
                if (w_res.rows(), w_res.cols()) != (nc, q) || b_res.len() != q =>
            {
                Err(mismatch(
                    format!("w_res {nc}×{q} and b_res of length {q}"),
                    format!("{}×{} and {}", w_res.rows(), w_res.cols(), b_res.len()),
                ))
            }
            ResidualParams::Fixed { matrix } if (matrix.rows(), matrix.cols()) != (n, n) => {
                Err(mismatch(
                    format!("{n}×{n} residual"),
                    format!("{}×{}", matrix.rows(), matrix.cols()),
                ))
            }
            _ => self.mixer.validate(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }
}

fn mismatch(expected: String, found: String) -> Error {
    Error::DimensionMismatch { expected, found }
}

/// The three maps of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps<S = f64> {
    pub h_pre: Vec<S>,
    pub h_post: Vec<S>,
    pub h_res: Matrix<S>,
}

fn affine<S: Real>(x: &[S], w: &Matrix, alpha: f64, b: &[f64]) -> Vec<S> {
    (0..w.cols())
        .map(|j| {
            let z = sum(x.iter().enumerate().map(|(k, v)| v.scale(w[(k, j)])));
            z.scale(alpha) + S::constant(b[j])
        })
        .collect()
}

/// `H_pre = σ(α x′W + b)`, `H_post = 2σ(α x′W + b)` and `H_res` from the mixer,
/// with `x′` the normalized flattened state.
pub fn layer_maps<S: Real, N: Normalizer>(
    x_flat: &[S],
    weights: &LayerWeights,
    norm: &N,
) -> Result<LayerMaps<S>> {
    weights.validate()?;
    let nc = weights.n * weights.c;
    if x_flat.len() != nc {
        return Err(mismatch(
            format!("state of length {nc}"),
            format!("{}", x_flat.len()),
        ));
    }
    let x = norm.normalize(x_flat);
    let h_pre = affine(&x, &weights.w_pre, weights.alpha_pre, &weights.b_pre)
        .into_iter()
        .map(|v| v.sigmoid())
        .collect();
    let h_post = affine(&x, &weights.w_post, weights.alpha_post, &weights.b_post)
        .into_iter()
        .map(|v| v.sigmoid().scale(2.0))
        .collect();
    let h_res = match &weights.residual {
        ResidualParams::Static { logits } => {
            let l: Vec<S> = logits.iter().map(|&v| S::constant(v)).collect();
            weights.mixer.build_generic(&l)?
        }
        ResidualParams::Dynamic {
            w_res,
            b_res,
            alpha_res,
        } => weights
            .mixer
            .build_generic(&affine(&x, w_res, *alpha_res, b_res))?,
        ResidualParams::Fixed { matrix } => matrix.map(|&v| S::constant(v)),
    };
    Ok(LayerMaps {
        h_pre,
        h_post,
        h_res,
    })
}

/// `X′ = H_res X + H_postᵀ F(H_pre X)`.
pub fn apply_maps<S: Real, F: Sublayer>(
    x: &StreamState<S>,
    maps: &LayerMaps<S>,
    f: &F,
) -> Result<StreamState<S>> {
    let (n, c) = (x.rows(), x.cols());
    let mixed = maps.h_res.matmul(x)?;
    let read: Vec<S> = (0..c)
        .map(|j| sum((0..n).map(|i| maps.h_pre[i].clone() * x[(i, j)].clone())))
        .collect();
    let out = f.apply(&read);
    if out.len() != c {
        return Err(mismatch(
            format!("sublayer output of width {c}"),
            format!("{}", out.len()),
        ));
    }
    Ok(Matrix::from_fn(n, c, |i, j| {
        mixed[(i, j)].clone() + maps.h_post[i].clone() * out[j].clone()
    }))
}

pub fn layer_forward<S: Real, N: Normalizer, F: Sublayer>(
    x: &StreamState<S>,
    weights: &LayerWeights,
    norm: &N,
    f: &F,
) -> Result<StreamState<S>> {
    if (x.rows(), x.cols()) != (weights.n, weights.c) {
        return Err(mismatch(
            format!("{}×{} state", weights.n, weights.c),
            format!("{}×{}", x.rows(), x.cols()),
        ));
    }
    let maps = layer_maps(x.data(), weights, norm)?;
    apply_maps(x, &maps, f)
}

/// Maps of the original, unconstrained hyper-connection layer:
/// `α·tanh(θ x̃ᵀ) + b` for each of the three maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginalHcWeights {
    /// `n × nC`.
    pub theta_pre: Matrix,
    /// `n × nC`.
    pub theta_post: Matrix,
    /// `n² × nC`, rows in row-major cell order of `H_res`.
    pub theta_res: Matrix,
    pub alpha_pre: f64,
    pub alpha_post: f64,
    pub alpha_res: f64,
    pub b_pre: Vec<f64>,
    pub b_post: Vec<f64>,
    pub b_res: Matrix,
}

pub fn original_hc_maps<S: Real, N: Normalizer>(
    x_flat: &[S],
    weights: &OriginalHcWeights,
    norm: &N,
) -> Result<LayerMaps<S>> {
    let n = weights.b_pre.len();
    let nc = x_flat.len();
    let shapes = [
        (&weights.theta_pre, n),
        (&weights.theta_post, n),
        (&weights.theta_res, n * n),
    ];
    if shapes.iter().any(|(m, r)| m.rows() != *r || m.cols() != nc)
        || weights.b_post.len() != n
        || (weights.b_res.rows(), weights.b_res.cols()) != (n, n)
    {
        return Err(mismatch(
            format!("original maps for n = {n}, nC = {nc}"),
            "other shapes".into(),
        ));
    }
    let x = norm.normalize(x_flat);
    let map = |theta: &Matrix, alpha: f64, bias: &[f64]| -> Vec<S> {
        (0..theta.rows())
            .map(|r| {
                let z = sum(x.iter().enumerate().map(|(k, v)| v.scale(theta[(r, k)])));
                z.tanh().scale(alpha) + S::constant(bias[r])
            })
            .collect()
    };
    let res = map(&weights.theta_res, weights.alpha_res, weights.b_res.data());
    Ok(LayerMaps {
        h_pre: map(&weights.theta_pre, weights.alpha_pre, &weights.b_pre),
        h_post: map(&weights.theta_post, weights.alpha_post, &weights.b_post),
        h_res: Matrix::from_vec(n, n, res)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub layer: usize,
    /// Margin deviation of this layer's `H_res`.
    pub ds_deviation: f64,
    /// Margin deviation of `H_res` products up to this layer.
    pub product_deviation: f64,
    /// `‖∂(½‖X_l‖²)/∂X_0‖`.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthTrace {
    pub rows: Vec<DepthRow>,
    pub final_state: StreamState,
    /// Gradient of `½‖X_L‖²` with respect to `X_0`, row-major.
    pub final_gradient: Vec<f64>,
}

impl DepthTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,ds_deviation,product_deviation,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.layer, r.ds_deviation, r.product_deviation, r.grad_norm
            ));
        }
        out
    }
}

fn check_sweep_size(layers: &[LayerWeights], x0: &StreamState) -> Result<()> {
    let (n, c) = (x0.rows(), x0.cols());
    if layers.len() > MAX_SWEEP_DEPTH || n > MAX_SWEEP_STREAMS || c > MAX_SWEEP_WIDTH {
        return Err(Error::InvalidSpec(format!(
            "depth sweep is limited to L ≤ {MAX_SWEEP_DEPTH}, n ≤ {MAX_SWEEP_STREAMS}, C ≤ {MAX_SWEEP_WIDTH}; got L = {}, n = {n}, C = {c}",
            layers.len()
        )));
    }
    Ok(())
}

fn half_square_norm<S: Real>(x: &StreamState<S>) -> S {
    sum(x.data().iter().map(|v| v.clone() * v.clone())).scale(0.5)
}

/// Runs `X_0` through `layers`, reporting after each layer the residual
/// mixer's margin deviation, that of the running product, and the gradient
/// norm of `½‖X_l‖²` with respect to `X_0` (forward-mode, exact).
pub fn depth_sweep<N: Normalizer, F: Sublayer>(
    layers: &[LayerWeights],
    x0: &StreamState,
    norm: &N,
    f: &F,
) -> Result<DepthTrace> {
    check_sweep_size(layers, x0)?;
    let (n, c) = (x0.rows(), x0.cols());
    let mut x = Matrix::from_vec(n, c, Dual::variables(x0.data()))?;
    let mut product = Matrix::<f64>::identity(n);
    let ones = vec![1.0; n];
    let mut rows = Vec::with_capacity(layers.len());
    let mut gradient = vec![0.0; n * c];
    for (l, w) in layers.iter().enumerate() {
        if (w.n, w.c) != (n, c) {
            return Err(mismatch(
                format!("{n}×{c} layer"),
                format!("{}×{} at layer {}", w.n, w.c, l + 1),
            ));
        }
        let maps = layer_maps(x.data(), w, norm)?;
        let h = maps.h_res.values();
        let (r, cdev) = h.margin_deviation(&ones, &ones);
        product = product.matmul(&h)?;
        let (pr, pc) = product.margin_deviation(&ones, &ones);
        x = apply_maps(&x, &maps, f)?;
        let loss = half_square_norm(&x);
        gradient = (0..n * c).map(|k| loss.d(k)).collect();
        rows.push(DepthRow {
            layer: l + 1,
            ds_deviation: r.max(cdev),
            product_deviation: pr.max(pc),
            grad_norm: gradient.iter().map(|g| g * g).sum::<f64>().sqrt(),
        });
    }
    Ok(DepthTrace {
        rows,
        final_state: x.values(),
        final_gradient: gradient,
    })
}

/// `½‖X_L‖²` after running `X_0` through `layers`.
pub fn sweep_loss<N: Normalizer, F: Sublayer>(
    layers: &[LayerWeights],
    x0: &StreamState,
    norm: &N,
    f: &F,
) -> Result<f64> {
    let mut x = x0.clone();
    for w in layers {
        x = layer_forward(&x, w, norm, f)?;
    }
    Ok(half_square_norm(&x))
}

/// Settings for one optimizer parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSettings {
    pub lr_multiplier: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

/// Separate optimizer groups for residual chart logits, the residual scale
/// and the post-minorization weight. Recorded only; nothing here optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerGroups {
    pub chart: GroupSettings,
    pub scale: GroupSettings,
    pub delta: GroupSettings,
}

impl Default for OptimizerGroups {
    fn default() -> Self {
        Self {
            chart: GroupSettings {
                lr_multiplier: 1.0 / 6.0,
                grad_clip: 0.3,
                weight_decay: 0.0,
            },
            scale: GroupSettings {
                lr_multiplier: 0.187,
                grad_clip: 0.3,
                weight_decay: 0.0,
            },
            delta: GroupSettings {
                lr_multiplier: 0.05,
                grad_clip: 0.05,
                weight_decay: 0.0,
            },
        }
    }
}

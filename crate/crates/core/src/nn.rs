//! Minimal f64 neural-network layers with hand-written backward passes.
//!
//! Layers are plain parameter structs. A forward pass returns its output
//! plus a cache of intermediates; the matching backward pass consumes the
//! cache and accumulates parameter gradients into a second instance of the
//! same struct (`zeros_like`), so a shared `&Layer` can evaluate many scenes
//! concurrently while each worker owns its caches and gradient mirror.
//!
//! Parameter traversal (`visit_params`) yields every tensor as a named flat
//! slice in a fixed order; the optimizer and the checkpoint format are both
//! built on that ordering.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// One visited parameter tensor: dotted name, flat values, and whether
/// weight decay applies to it.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut [f64], bool) + 'a;

/// Truncated normal draw: std 0.02-style transformer init, resampled until
/// within two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| trunc_normal(rng, 0.02))
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out_dim, in_dim)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init_matrix(out_dim, in_dim, rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// x: (n, in) -> (n, out)
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates dW, db into `grad`; returns dx. `x` is the forward input.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().expect("contiguous"),
            true,
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().expect("contiguous"),
            false,
        );
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

#[derive(Debug)]
pub struct LayerNormCache {
    /// Normalized input before scale/shift, (n, d).
    xhat: Array2<f64>,
    /// Per-row 1/std, (n,).
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-6,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row -= m;
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        for (mut row, &is) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row *= is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));

        let dxhat = dy * &self.gamma;
        let mean_dxhat = dxhat.mean_axis(Axis(1)).expect("non-empty");
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        for ((mut row, xhat_row), ((&m1, &m2), &is)) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(mean_dxhat.iter().zip(mean_dxhat_xhat.iter()).zip(cache.inv_std.iter()))
        {
            for (v, &xh) in row.iter_mut().zip(xhat_row) {
                *v = (*v - m1 - xh * m2) * is;
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.as_slice_mut().expect("contiguous"),
            false,
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.as_slice_mut().expect("contiguous"),
            false,
        );
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU, elementwise.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

/// d(gelu)/dx evaluated at the forward input, multiplied by `dy`.
pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for (g, &v) in dx.iter_mut().zip(x.iter()) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }
    dx
}

/// Two-layer feed-forward with GELU between: in -> hidden -> out.
/// Serves as the transformer MLP, the positional maps, and the
/// projection heads.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug)]
pub struct MlpCache {
    x: Array2<f64>,
    /// fc1 output before the nonlinearity.
    pre: Array2<f64>,
    /// gelu(pre), the fc2 input.
    mid: Array2<f64>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(in_dim, hidden, rng),
            fc2: Linear::new(hidden, out_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let mid = gelu(&pre);
        let y = self.fc2.forward(&mid);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                mid,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dmid = self.fc2.backward(&cache.mid, dy, &mut grad.fc2);
        let dpre = gelu_backward(&cache.pre, &dmid);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
    }
}

pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub n_heads: usize,
}

#[derive(Debug)]
pub struct AttentionCache {
    x: Array2<f64>,
    qkv_out: Array2<f64>,
    /// Per-head attention probabilities, each (n, n).
    probs: Vec<Array2<f64>>,
    /// Concatenated head outputs, the proj input, (n, d).
    merged: Array2<f64>,
}

impl Attention {
    pub fn new(dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % n_heads == 0, "dim {dim} not divisible by {n_heads} heads");
        Attention {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            n_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            qkv: self.qkv.zeros_like(),
            proj: self.proj.zeros_like(),
            n_heads: self.n_heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let d = x.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv_out = self.qkv.forward(x);

        let mut merged = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q = qkv_out.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv_out.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv_out.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let out = scores.dot(&v);
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
            probs.push(scores);
        }
        let y = self.proj.forward(&merged);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv_out,
                probs,
                merged,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let n = cache.x.nrows();
        let d = cache.x.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dmerged = self.proj.backward(&cache.merged, dy, &mut grad.proj);
        let mut dqkv = Array2::zeros((n, 3 * d));
        for h in 0..self.n_heads {
            let q = cache.qkv_out.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv_out.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv_out.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &cache.probs[h];
            let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);

            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            let rowsum = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            for (mut row, (&rs, p_row)) in
                ds.rows_mut().into_iter().zip(rowsum.iter().zip(p.rows()))
            {
                for (v, &pv) in row.iter_mut().zip(p_row) {
                    *v = pv * (*v - rs);
                }
            }
            ds *= scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv
                .slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.qkv.visit_params(&format!("{prefix}.qkv"), f);
        self.proj.visit_params(&format!("{prefix}.proj"), f);
    }
}

/// Stochastic-depth decision for one block, decided by the caller so the
/// same seeds replay exactly. `scale` is the inverted-dropout factor applied
/// to kept branches during training (1.0 at evaluation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropDecision {
    pub keep_attn: bool,
    pub keep_mlp: bool,
    pub scale: f64,
}

impl DropDecision {
    pub fn keep_all() -> Self {
        DropDecision {
            keep_attn: true,
            keep_mlp: true,
            scale: 1.0,
        }
    }

    fn attn_factor(&self) -> f64 {
        if self.keep_attn {
            self.scale
        } else {
            0.0
        }
    }

    fn mlp_factor(&self) -> f64 {
        if self.keep_mlp {
            self.scale
        } else {
            0.0
        }
    }
}

/// Pre-norm transformer block: h = x + attn(ln(x)), y = h + mlp(ln(h)).
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
    drop: DropDecision,
}

impl Block {
    pub fn new(dim: usize, n_heads: usize, mlp_ratio: f64, rng: &mut impl Rng) -> Self {
        let hidden = (dim as f64 * mlp_ratio).round() as usize;
        Block {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, n_heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Block {
            norm1: self.norm1.zeros_like(),
            attn: self.attn.zeros_like(),
            norm2: self.norm2.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, drop: DropDecision) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&n1);
        let h = x + &(a * drop.attn_factor());
        let (n2, ln2) = self.norm2.forward(&h);
        let (m, mlp) = self.mlp.forward(&n2);
        let y = &h + &(m * drop.mlp_factor());
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                mlp,
                drop,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let dm = dy * cache.drop.mlp_factor();
        let dn2 = self.mlp.backward(&cache.mlp, &dm, &mut grad.mlp);
        let dh = dy + &self.norm2.backward(&cache.ln2, &dn2, &mut grad.norm2);
        let da = &dh * cache.drop.attn_factor();
        let dn1 = self.attn.backward(&cache.attn, &da, &mut grad.attn);
        &dh + &self.norm1.backward(&cache.ln1, &dn1, &mut grad.norm1)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.attn.visit_params(&format!("{prefix}.attn"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
        self.mlp.visit_params(&format!("{prefix}.mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    /// Scalar probe loss: fixed random weighting of all outputs, so every
    /// output element contributes to the gradient.
    fn probe_loss(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    fn probe_weights(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, "nn.test.probe", &[]);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, "nn.test.input", &[]);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
    }

    fn flatten_params<L, V>(target: &mut L, mut visit: V) -> Vec<f64>
    where
        V: FnMut(&mut L, &mut ParamVisitor),
    {
        let mut flat = Vec::new();
        visit(target, &mut |_, data, _| flat.extend_from_slice(data));
        flat
    }

    fn nudge_param<L, V>(target: &mut L, mut visit: V, flat_index: usize, delta: f64)
    where
        V: FnMut(&mut L, &mut ParamVisitor),
    {
        let mut k = 0usize;
        visit(target, &mut |_, data, _| {
            if flat_index >= k && flat_index < k + data.len() {
                data[flat_index - k] += delta;
            }
            k += data.len();
        });
    }

    /// Central-difference check of every parameter gradient against the
    /// analytic gradients flattened in the same visit order.
    fn check_param_grads<L, F, V>(layer: &mut L, analytic: &[f64], mut forward: F, mut visit: V, tol: f64)
    where
        F: FnMut(&L) -> f64,
        V: FnMut(&mut L, &mut ParamVisitor) + Copy,
    {
        let eps = 1e-6;
        let mut names = Vec::new();
        visit(layer, &mut |name, data, _| {
            for i in 0..data.len() {
                names.push(format!("{name}[{i}]"));
            }
        });
        assert_eq!(names.len(), analytic.len());
        for (flat_index, name) in names.iter().enumerate() {
            nudge_param(layer, visit, flat_index, eps);
            let plus = forward(layer);
            nudge_param(layer, visit, flat_index, -2.0 * eps);
            let minus = forward(layer);
            nudge_param(layer, visit, flat_index, eps);
            let fd = (plus - minus) / (2.0 * eps);
            let got = analytic[flat_index];
            assert!(rel_err(got, fd) < tol, "{name}: analytic {got} vs fd {fd}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = rng_for(1, "nn.test.linear", &[]);
        let mut layer = Linear::new(5, 4, &mut rng);
        let x = random_input(3, 5, 2);
        let w = probe_weights(3, 4, 3);

        let mut grad = layer.zeros_like();
        let dx = layer.backward(&x, &w, &mut grad);
        let analytic = flatten_params(&mut grad, |g, f| g.visit_params("linear", f));
        check_param_grads(
            &mut layer,
            &analytic,
            |l| probe_loss(&l.forward(&x), &w),
            |l, f| l.visit_params("linear", f),
            1e-6,
        );

        // dx against finite differences on the input.
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (probe_loss(&layer.forward(&xp), &w)
                    - probe_loss(&layer.forward(&xm), &w))
                    / (2.0 * eps);
                assert!(rel_err(dx[[i, j]], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut layer = LayerNorm::new(6);
        // Non-trivial gamma/beta so their gradients are exercised.
        let mut rng = rng_for(4, "nn.test.ln", &[]);
        layer.gamma.mapv_inplace(|_| 1.0 + trunc_normal(&mut rng, 0.1));
        layer.beta.mapv_inplace(|_| trunc_normal(&mut rng, 0.1));
        let x = random_input(4, 6, 5);
        let w = probe_weights(4, 6, 6);

        let mut grad = layer.zeros_like();
        let (_, cache) = layer.forward(&x);
        let dx = layer.backward(&cache, &w, &mut grad);
        let analytic = flatten_params(&mut grad, |g, f| g.visit_params("ln", f));
        check_param_grads(
            &mut layer,
            &analytic,
            |l| probe_loss(&l.forward(&x).0, &w),
            |l, f| l.visit_params("ln", f),
            1e-5,
        );

        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..6 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (probe_loss(&layer.forward(&xp).0, &w)
                    - probe_loss(&layer.forward(&xm).0, &w))
                    / (2.0 * eps);
                assert!(rel_err(dx[[i, j]], fd) < 1e-5, "dx[{i},{j}]");
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        let x = random_input(3, 7, 8);
        let w = probe_weights(3, 7, 9);
        let dx = gelu_backward(&x, &w);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..7 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd =
                    (probe_loss(&gelu(&xp), &w) - probe_loss(&gelu(&xm), &w)) / (2.0 * eps);
                assert!(rel_err(dx[[i, j]], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = rng_for(10, "nn.test.attn", &[]);
        let mut layer = Attention::new(8, 2, &mut rng);
        let x = random_input(5, 8, 11);
        let w = probe_weights(5, 8, 12);

        let mut grad = layer.zeros_like();
        let (_, cache) = layer.forward(&x);
        let dx = layer.backward(&cache, &w, &mut grad);
        let analytic = flatten_params(&mut grad, |g, f| g.visit_params("attn", f));
        check_param_grads(
            &mut layer,
            &analytic,
            |l| probe_loss(&l.forward(&x).0, &w),
            |l, f| l.visit_params("attn", f),
            1e-5,
        );

        let eps = 1e-6;
        for i in 0..5 {
            for j in 0..8 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (probe_loss(&layer.forward(&xp).0, &w)
                    - probe_loss(&layer.forward(&xm).0, &w))
                    / (2.0 * eps);
                assert!(rel_err(dx[[i, j]], fd) < 1e-5, "dx[{i},{j}]");
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = rng_for(13, "nn.test.block", &[]);
        let mut layer = Block::new(8, 2, 2.0, &mut rng);
        let x = random_input(4, 8, 14);
        let w = probe_weights(4, 8, 15);
        let drop = DropDecision::keep_all();

        let mut grad = layer.zeros_like();
        let (_, cache) = layer.forward(&x, drop);
        let dx = layer.backward(&cache, &w, &mut grad);
        let analytic = flatten_params(&mut grad, |g, f| g.visit_params("block", f));
        check_param_grads(
            &mut layer,
            &analytic,
            |l| probe_loss(&l.forward(&x, drop).0, &w),
            |l, f| l.visit_params("block", f),
            1e-4,
        );

        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..8 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (probe_loss(&layer.forward(&xp, drop).0, &w)
                    - probe_loss(&layer.forward(&xm, drop).0, &w))
                    / (2.0 * eps);
                assert!(rel_err(dx[[i, j]], fd) < 1e-4, "dx[{i},{j}]");
            }
        }
    }

    #[test]
    fn drop_decisions_gate_branches() {
        let mut rng = rng_for(20, "nn.test.drop", &[]);
        let layer = Block::new(8, 2, 2.0, &mut rng);
        let x = random_input(4, 8, 21);

        let (all, _) = layer.forward(&x, DropDecision::keep_all());
        let none = DropDecision {
            keep_attn: false,
            keep_mlp: false,
            scale: 1.0 / 0.9,
        };
        let (dropped, _) = layer.forward(&x, none);
        // With both branches dropped the block is the identity.
        assert_eq!(dropped, x);
        assert_ne!(all, dropped);

        let scaled = DropDecision {
            keep_attn: true,
            keep_mlp: true,
            scale: 2.0,
        };
        let (doubled, _) = layer.forward(&x, scaled);
        assert_ne!(doubled, all);
    }

    #[test]
    fn visit_order_is_stable_and_complete() {
        let mut rng = rng_for(30, "nn.test.visit", &[]);
        let mut block = Block::new(8, 2, 2.0, &mut rng);
        let mut names = Vec::new();
        let mut total = 0usize;
        block.visit_params("enc.0", &mut |name, data, decay| {
            names.push((name.to_string(), decay));
            total += data.len();
        });
        let expected = [
            ("enc.0.norm1.gamma", false),
            ("enc.0.norm1.beta", false),
            ("enc.0.attn.qkv.weight", true),
            ("enc.0.attn.qkv.bias", false),
            ("enc.0.attn.proj.weight", true),
            ("enc.0.attn.proj.bias", false),
            ("enc.0.norm2.gamma", false),
            ("enc.0.norm2.beta", false),
            ("enc.0.mlp.fc1.weight", true),
            ("enc.0.mlp.fc1.bias", false),
            ("enc.0.mlp.fc2.weight", true),
            ("enc.0.mlp.fc2.bias", false),
        ];
        assert_eq!(names.len(), expected.len());
        for ((got, decay), (want, want_decay)) in names.iter().zip(expected) {
            assert_eq!(got, want);
            assert_eq!(*decay, want_decay);
        }
        // 2 norms (2*8 each) + qkv (24*8+24) + proj (8*8+8) + mlp (16*8+16 + 8*16+8).
        assert_eq!(total, 16 + 16 + 216 + 72 + 144 + 136);
    }
}

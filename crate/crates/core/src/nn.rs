//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every layer refers to its weights through [`ParamId`]s so one
//! [`ParamStore`] holds the whole model and one [`Grads`] collects its
//! gradients. Backward functions accumulate into `Grads` (skipping tensors
//! whose slot is `None`) and return the gradient of the layer input.

use rand::Rng;

use crate::mat::{acc_xt_dy, dot, matmul, matmul_ab, matmul_abt, matmul_atb, matmul_wt, Mat};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::real::Real;

pub const LN_EPS: f64 = 1e-6;

/// Affine map `y = x W + b` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], init, rng);
        let b = store.add(format!("{name}.b"), &[d_out], Init::Zeros, rng);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<R: Real>(&self, p: &ParamStore<R>, x: &Mat<R>) -> Mat<R> {
        debug_assert_eq!(x.cols(), self.d_in);
        let mut y = matmul(x, p.get(self.w), self.d_out);
        let b = p.get(self.b);
        for r in 0..y.rows() {
            for (yv, &bv) in y.row_mut(r).iter_mut().zip(b) {
                *yv += bv;
            }
        }
        y
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward<R: Real>(
        &self,
        p: &ParamStore<R>,
        x: &Mat<R>,
        dy: &Mat<R>,
        g: &mut Grads<R>,
    ) -> Mat<R> {
        self.accumulate(x, dy, g);
        matmul_wt(dy, p.get(self.w), self.d_in)
    }

    /// Weight gradients only, for layers whose input is a constant.
    pub fn accumulate<R: Real>(&self, x: &Mat<R>, dy: &Mat<R>, g: &mut Grads<R>) {
        if let Some(gw) = g.slot(self.w) {
            acc_xt_dy(x, dy, gw);
        }
        if let Some(gb) = g.slot(self.b) {
            for r in 0..dy.rows() {
                for (a, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *a += d;
                }
            }
        }
    }
}

/// Cached normalized rows and reciprocal standard deviations.
#[derive(Clone, Debug)]
pub struct NormCache<R> {
    pub xhat: Mat<R>,
    pub rstd: Vec<R>,
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm<R: Real>(x: &Mat<R>) -> (Mat<R>, NormCache<R>) {
    let n = R::c(x.cols() as f64);
    let eps = R::c(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().copied().sum::<R>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let rs = R::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rs;
        }
        rstd.push(rs);
    }
    (xhat.clone(), NormCache { xhat, rstd })
}

pub fn layer_norm_backward<R: Real>(dy: &Mat<R>, cache: &NormCache<R>) -> Mat<R> {
    let n = R::c(dy.cols() as f64);
    let mut dx = Mat::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let (d, xh) = (dy.row(r), cache.xhat.row(r));
        let sum_d = d.iter().copied().sum::<R>();
        let sum_dx = dot(d, xh);
        let rs = cache.rstd[r];
        for ((o, &dv), &xv) in dx.row_mut(r).iter_mut().zip(d).zip(xh) {
            *o = rs * (dv - (sum_d + xv * sum_dx) / n);
        }
    }
    dx
}

/// Layer normalization followed by a learned per-channel gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct AffineNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl AffineNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), &[dim], Init::Ones, rng),
            bias: store.add(format!("{name}.b"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<R: Real>(&self, p: &ParamStore<R>, x: &Mat<R>) -> (Mat<R>, NormCache<R>) {
        let (mut y, cache) = layer_norm(x);
        let (g, b) = (p.get(self.gain), p.get(self.bias));
        for r in 0..y.rows() {
            for ((v, &gv), &bv) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        (y, cache)
    }

    pub fn backward<R: Real>(
        &self,
        p: &ParamStore<R>,
        dy: &Mat<R>,
        cache: &NormCache<R>,
        g: &mut Grads<R>,
    ) -> Mat<R> {
        if let Some(gg) = g.slot(self.gain) {
            for r in 0..dy.rows() {
                for ((a, &d), &x) in gg.iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                    *a += d * x;
                }
            }
        }
        if let Some(gb) = g.slot(self.bias) {
            for r in 0..dy.rows() {
                for (a, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *a += d;
                }
            }
        }
        let gain = p.get(self.gain);
        let mut dxhat = dy.clone();
        for r in 0..dxhat.rows() {
            for (v, &gv) in dxhat.row_mut(r).iter_mut().zip(gain) {
                *v *= gv;
            }
        }
        layer_norm_backward(&dxhat, cache)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<R: Real>(x: R) -> R {
    let (c, a, half) = (R::c(GELU_C), R::c(GELU_A), R::c(0.5));
    half * x * (R::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<R: Real>(x: R) -> R {
    let (c, a, half) = (R::c(GELU_C), R::c(GELU_A), R::c(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + R::c(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

#[inline]
pub fn silu<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<R: Real>(x: R) -> R {
    let s = sigmoid(x);
    s * (R::one() + x * (R::one() - s))
}

/// Multiplies `dy` elementwise by `f'(x)`.
pub fn pointwise_backward<R: Real>(x: &Mat<R>, dy: &Mat<R>, fprime: impl Fn(R) -> R) -> Mat<R> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= fprime(xv);
    }
    dx
}

/// In-place row-wise softmax.
pub fn softmax_rows<R: Real>(s: &mut Mat<R>) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
        let mut sum = R::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gradient through a row softmax given its output `p`.
pub fn softmax_backward<R: Real>(p: &Mat<R>, dp: &Mat<R>) -> Mat<R> {
    let mut ds = Mat::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, dr) = (p.row(r), dp.row(r));
        let inner = dot(pr, dr);
        for ((o, &pv), &dv) in ds.row_mut(r).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - inner);
        }
    }
    ds
}

/// Rotary position table: `cos/sin[pos][pair]` for head width `dh`.
#[derive(Clone, Debug)]
pub struct Rotary<R> {
    cos: Mat<R>,
    sin: Mat<R>,
}

impl<R: Real> Rotary<R> {
    pub fn new(len: usize, dh: usize) -> Self {
        let pairs = dh / 2;
        let mut cos = Mat::zeros(len, pairs);
        let mut sin = Mat::zeros(len, pairs);
        for pos in 0..len {
            for j in 0..pairs {
                let theta = pos as f64 * 10_000f64.powf(-2.0 * j as f64 / dh as f64);
                cos.set(pos, j, R::c(theta.cos()));
                sin.set(pos, j, R::c(theta.sin()));
            }
        }
        Self { cos, sin }
    }

    /// Rotates each head's consecutive column pairs; `inverse` undoes it.
    pub fn apply(&self, x: &mut Mat<R>, n_heads: usize, inverse: bool) {
        let dh = x.cols() / n_heads;
        for pos in 0..x.rows() {
            let (c, s) = (self.cos.row(pos), self.sin.row(pos));
            let row = x.row_mut(pos);
            for h in 0..n_heads {
                let head = &mut row[h * dh..(h + 1) * dh];
                for j in 0..dh / 2 {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let sn = if inverse { -s[j] } else { s[j] };
                    head[2 * j] = a * c[j] - b * sn;
                    head[2 * j + 1] = a * sn + b * c[j];
                }
            }
        }
    }
}

fn head_cols<R: Real>(m: &Mat<R>, h: usize, dh: usize) -> Mat<R> {
    let mut out = Mat::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn put_head_cols<R: Real>(dst: &mut Mat<R>, src: &Mat<R>, h: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row(r));
    }
}

/// Multi-head scaled dot-product attention with optional rotary positions.
///
/// Queries come from `q_in`; keys and values from `kv_in`, which may have a
/// different width (cross-attention onto the timbre sequence).
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub rotary: bool,
}

#[derive(Clone, Debug)]
pub struct AttnCache<R> {
    q_in: Mat<R>,
    kv_in: Mat<R>,
    q: Mat<R>,
    k: Mat<R>,
    v: Mat<R>,
    probs: Vec<Mat<R>>,
    ctx: Mat<R>,
}

impl Attention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_model: usize,
        d_kv: usize,
        n_heads: usize,
        rotary: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, Init::Xavier, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_model, Init::Xavier, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_model, Init::Xavier, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, Init::Xavier, rng),
            n_heads,
            rotary,
        }
    }

    fn d_head(&self) -> usize {
        self.q.d_out / self.n_heads
    }

    pub fn forward<R: Real>(
        &self,
        p: &ParamStore<R>,
        q_in: &Mat<R>,
        kv_in: &Mat<R>,
    ) -> (Mat<R>, AttnCache<R>) {
        let dh = self.d_head();
        let mut q = self.q.forward(p, q_in);
        let mut k = self.k.forward(p, kv_in);
        let v = self.v.forward(p, kv_in);
        if self.rotary {
            debug_assert_eq!(q.rows(), k.rows());
            let rot = Rotary::new(q.rows(), dh);
            rot.apply(&mut q, self.n_heads, false);
            rot.apply(&mut k, self.n_heads, false);
        }
        let scale = R::c(1.0 / (dh as f64).sqrt());
        let mut ctx = Mat::zeros(q.rows(), q.cols());
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = (head_cols(&q, h, dh), head_cols(&k, h, dh), head_cols(&v, h, dh));
            let mut s = matmul_abt(&qh, &kh);
            s.scale(scale);
            softmax_rows(&mut s);
            put_head_cols(&mut ctx, &matmul_ab(&s, &vh), h, dh);
            probs.push(s);
        }
        let out = self.o.forward(p, &ctx);
        let cache = AttnCache { q_in: q_in.clone(), kv_in: kv_in.clone(), q, k, v, probs, ctx };
        (out, cache)
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`.
    pub fn backward<R: Real>(
        &self,
        p: &ParamStore<R>,
        dout: &Mat<R>,
        c: &AttnCache<R>,
        g: &mut Grads<R>,
    ) -> (Mat<R>, Mat<R>) {
        let dh = self.d_head();
        let scale = R::c(1.0 / (dh as f64).sqrt());
        let dctx = self.o.backward(p, &c.ctx, dout, g);
        let mut dq = Mat::zeros(c.q.rows(), c.q.cols());
        let mut dk = Mat::zeros(c.k.rows(), c.k.cols());
        let mut dv = Mat::zeros(c.v.rows(), c.v.cols());
        for h in 0..self.n_heads {
            let (qh, kh, vh) = (head_cols(&c.q, h, dh), head_cols(&c.k, h, dh), head_cols(&c.v, h, dh));
            let dch = head_cols(&dctx, h, dh);
            let pr = &c.probs[h];
            let dp = matmul_abt(&dch, &vh);
            put_head_cols(&mut dv, &matmul_atb(pr, &dch), h, dh);
            let mut ds = softmax_backward(pr, &dp);
            ds.scale(scale);
            put_head_cols(&mut dq, &matmul_ab(&ds, &kh), h, dh);
            put_head_cols(&mut dk, &matmul_atb(&ds, &qh), h, dh);
        }
        if self.rotary {
            let rot = Rotary::new(dq.rows(), dh);
            rot.apply(&mut dq, self.n_heads, true);
            rot.apply(&mut dk, self.n_heads, true);
        }
        let dq_in = self.q.backward(p, &c.q_in, &dq, g);
        let mut dkv = self.k.backward(p, &c.kv_in, &dk, g);
        dkv.add_assign(&self.v.backward(p, &c.kv_in, &dv, g));
        (dq_in, dkv)
    }
}

/// `x * (1 + scale) + shift` with per-channel `scale`/`shift` broadcast over rows.
pub fn modulate<R: Real>(x: &Mat<R>, shift: &[R], scale: &[R]) -> Mat<R> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        for ((v, &sh), &sc) in y.row_mut(r).iter_mut().zip(shift).zip(scale) {
            *v = *v * (R::one() + sc) + sh;
        }
    }
    y
}

/// Backward of [`modulate`]: returns `dx` and accumulates into `dshift`/`dscale`.
pub fn modulate_backward<R: Real>(
    x: &Mat<R>,
    scale: &[R],
    dy: &Mat<R>,
    dshift: &mut [R],
    dscale: &mut [R],
) -> Mat<R> {
    let mut dx = dy.clone();
    for r in 0..dy.rows() {
        let (xr, dr) = (x.row(r), dy.row(r));
        for j in 0..dr.len() {
            dshift[j] += dr[j];
            dscale[j] += dr[j] * xr[j];
        }
        for (d, &sc) in dx.row_mut(r).iter_mut().zip(scale) {
            *d *= R::one() + sc;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Central-difference check of `dL/dx` for `L = <w, f(x)>`.
    fn check_input_grad(
        x: &Mat<f64>,
        w: &Mat<f64>,
        f: impl Fn(&Mat<f64>) -> Mat<f64>,
        analytic: &Mat<f64>,
    ) {
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp = dot(w.data(), f(&xp).data());
            let lm = dot(w.data(), f(&xm).data());
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() < 1e-7 * (1.0 + a.abs()), "elem {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(3, 5, &mut rng);
        let w = rand_mat(3, 5, &mut rng);
        let (_, cache) = layer_norm(&x);
        check_input_grad(&x, &w, |x| layer_norm(x).0, &layer_norm_backward(&w, &cache));
    }

    #[test]
    fn attention_gradient_wrt_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let self_attn = Attention::new(&mut store, "sa", 8, 8, 2, true, &mut rng);
        let cross = Attention::new(&mut store, "ca", 8, 4, 2, false, &mut rng);
        let x = rand_mat(4, 8, &mut rng);
        let t = rand_mat(3, 4, &mut rng);
        let w = rand_mat(4, 8, &mut rng);
        let mut g = Grads::all(&store);

        let (_, c) = self_attn.forward(&store, &x, &x);
        let (dq, dkv) = self_attn.backward(&store, &w, &c, &mut g);
        let mut dx = dq;
        dx.add_assign(&dkv);
        check_input_grad(&x, &w, |x| self_attn.forward(&store, x, x).0, &dx);

        let (_, c) = cross.forward(&store, &x, &t);
        let (dq, dt) = cross.backward(&store, &w, &c, &mut g);
        check_input_grad(&x, &w, |x| cross.forward(&store, x, &t).0, &dq);
        check_input_grad(&t, &w, |t| cross.forward(&store, &x, t).0, &dt);
    }

    #[test]
    fn rotary_inverse_restores_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(6, 8, &mut rng);
        let rot = Rotary::new(6, 4);
        let mut y = x.clone();
        rot.apply(&mut y, 2, false);
        assert_ne!(y, x);
        rot.apply(&mut y, 2, true);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_attention_ignores_key_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cross = Attention::new(&mut store, "ca", 8, 4, 2, false, &mut rng);
        let x = rand_mat(3, 8, &mut rng);
        let t = rand_mat(2, 4, &mut rng);
        let swapped = Mat::vcat(&t.slice_rows(1, 2), &t.slice_rows(0, 1)).unwrap();
        let (a, _) = cross.forward(&store, &x, &t);
        let (b, _) = cross.forward(&store, &x, &swapped);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }
}

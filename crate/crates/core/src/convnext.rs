//! Character encoder: learned embeddings padded with a filler token, then
//! ConvNeXt-V2 style residual blocks over the time axis.

use rand::Rng;

use crate::data::FILLER_ID;
use crate::error::{invalid, Result};
use crate::mat::Mat;
use crate::nn::{gelu, gelu_grad, pointwise_backward, AffineNorm, Linear, NormCache};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::real::Real;

pub const KERNEL: usize = 7;
pub const EXPANSION: usize = 4;
const GRN_EPS: f64 = 1e-6;

/// Looks up character embeddings and appends filler rows up to `target_frames`.
pub fn embed_and_pad<R: Real>(
    table: &[R],
    d: usize,
    vocab: usize,
    chars: &[u8],
    target_frames: usize,
) -> Result<Mat<R>> {
    if target_frames == 0 {
        return invalid("target frame count must be positive");
    }
    if chars.len() > target_frames {
        return invalid(format!(
            "transcription of {} characters does not fit in {target_frames} frames",
            chars.len()
        ));
    }
    let mut out = Mat::zeros(target_frames, d);
    for t in 0..target_frames {
        let id = chars.get(t).copied().unwrap_or(FILLER_ID) as usize;
        if id >= vocab {
            return invalid(format!("token id {id} outside vocabulary of {vocab}"));
        }
        out.row_mut(t).copy_from_slice(&table[id * d..(id + 1) * d]);
    }
    Ok(out)
}

/// Global response normalization over the time axis.
#[derive(Clone, Debug)]
pub struct GrnCache<R> {
    x: Mat<R>,
    norms: Vec<R>,
    nx: Vec<R>,
    denom: R,
}

/// `y = gamma * (x * N) + beta + x`, with `N_c = G_c / (mean(G) + eps)` and
/// `G_c` the L2 norm of channel `c` across time.
pub fn grn_forward<R: Real>(x: &Mat<R>, gamma: &[R], beta: &[R]) -> (Mat<R>, GrnCache<R>) {
    let c = x.cols();
    let mut norms = vec![R::zero(); c];
    for t in 0..x.rows() {
        for (n, &v) in norms.iter_mut().zip(x.row(t)) {
            *n += v * v;
        }
    }
    for n in &mut norms {
        *n = n.sqrt();
    }
    let denom = norms.iter().copied().sum::<R>() / R::c(c as f64) + R::c(GRN_EPS);
    let nx: Vec<R> = norms.iter().map(|&g| g / denom).collect();
    let mut y = x.clone();
    for t in 0..y.rows() {
        for (j, v) in y.row_mut(t).iter_mut().enumerate() {
            *v = gamma[j] * (*v * nx[j]) + beta[j] + *v;
        }
    }
    (y, GrnCache { x: x.clone(), norms, nx, denom })
}

/// Returns `dx` and accumulates `dgamma`/`dbeta` when requested.
pub fn grn_backward<R: Real>(
    dy: &Mat<R>,
    cache: &GrnCache<R>,
    gamma: &[R],
    mut dgamma: Option<&mut [R]>,
    mut dbeta: Option<&mut [R]>,
) -> Mat<R> {
    let c = dy.cols();
    let x = &cache.x;
    let mut dn = vec![R::zero(); c];
    let mut dx = Mat::zeros(dy.rows(), c);
    for t in 0..dy.rows() {
        let (dr, xr) = (dy.row(t), x.row(t));
        for j in 0..c {
            if let Some(g) = dgamma.as_deref_mut() {
                g[j] += dr[j] * xr[j] * cache.nx[j];
            }
            if let Some(b) = dbeta.as_deref_mut() {
                b[j] += dr[j];
            }
            dn[j] += dr[j] * gamma[j] * xr[j];
        }
        for (j, o) in dx.row_mut(t).iter_mut().enumerate() {
            *o = dr[j] * (gamma[j] * cache.nx[j] + R::one());
        }
    }
    // N_j = G_j / denom, denom = mean(G) + eps
    let inv = R::one() / cache.denom;
    let cross = dn.iter().zip(&cache.norms).map(|(&d, &g)| d * g).sum::<R>() * inv * inv
        / R::c(c as f64);
    let dg: Vec<R> = dn.iter().map(|&d| d * inv - cross).collect();
    for t in 0..dx.rows() {
        let xr = x.row(t).to_vec();
        for (j, o) in dx.row_mut(t).iter_mut().enumerate() {
            if cache.norms[j] > R::zero() {
                *o += dg[j] * xr[j] / cache.norms[j];
            }
        }
    }
    dx
}

/// One ConvNeXt-V2 block.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub norm: AffineNorm,
    pub pw1: Linear,
    pub grn_gamma: ParamId,
    pub grn_beta: ParamId,
    pub pw2: Linear,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct ConvBlockTape<R> {
    x: Mat<R>,
    norm: NormCache<R>,
    normed: Mat<R>,
    h1: Mat<R>,
    grn: GrnCache<R>,
    grn_out: Mat<R>,
}

impl ConvBlock {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / (KERNEL as f64).sqrt();
        let hidden = dim * EXPANSION;
        Self {
            dw_w: store.add(format!("{name}.dw.w"), &[dim, KERNEL], Init::Uniform(a), rng),
            dw_b: store.add(format!("{name}.dw.b"), &[dim], Init::Uniform(a), rng),
            norm: AffineNorm::new(store, &format!("{name}.norm"), dim, rng),
            pw1: Linear::new(store, &format!("{name}.pw1"), dim, hidden, Init::Xavier, rng),
            grn_gamma: store.add(format!("{name}.grn.g"), &[hidden], Init::Zeros, rng),
            grn_beta: store.add(format!("{name}.grn.b"), &[hidden], Init::Zeros, rng),
            pw2: Linear::new(store, &format!("{name}.pw2"), hidden, dim, Init::Xavier, rng),
            dim,
        }
    }

    /// Every tensor of the block, for tests that zero a block out.
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.dw_w, self.dw_b, self.norm.gain, self.norm.bias, self.pw1.w, self.pw1.b,
            self.grn_gamma, self.grn_beta, self.pw2.w, self.pw2.b,
        ]
    }

    fn depthwise<R: Real>(&self, p: &ParamStore<R>, x: &Mat<R>) -> Mat<R> {
        let (w, b) = (p.get(self.dw_w), p.get(self.dw_b));
        let half = KERNEL / 2;
        let len = x.rows() as isize;
        let mut y = Mat::zeros(x.rows(), self.dim);
        for t in 0..x.rows() {
            let yr = y.row_mut(t);
            yr.copy_from_slice(b);
            for k in 0..KERNEL {
                let src = t as isize + k as isize - half as isize;
                if src < 0 || src >= len {
                    continue;
                }
                let xr = x.row(src as usize);
                for c in 0..self.dim {
                    yr[c] += w[c * KERNEL + k] * xr[c];
                }
            }
        }
        y
    }

    pub fn forward<R: Real>(&self, p: &ParamStore<R>, x: &Mat<R>) -> (Mat<R>, ConvBlockTape<R>) {
        let conv = self.depthwise(p, x);
        let (normed, norm) = self.norm.forward(p, &conv);
        let h1 = self.pw1.forward(p, &normed);
        let act = h1.map(gelu);
        let (grn_out, grn) = grn_forward(&act, p.get(self.grn_gamma), p.get(self.grn_beta));
        let mut y = self.pw2.forward(p, &grn_out);
        y.add_assign(x);
        (y, ConvBlockTape { x: x.clone(), norm, normed, h1, grn, grn_out })
    }

    pub fn backward<R: Real>(
        &self,
        p: &ParamStore<R>,
        dy: &Mat<R>,
        tape: &ConvBlockTape<R>,
        g: &mut Grads<R>,
    ) -> Mat<R> {
        let dgrn = self.pw2.backward(p, &tape.grn_out, dy, g);
        let gamma = p.get(self.grn_gamma).to_vec();
        let mut dgamma = g.wants(self.grn_gamma).then(|| vec![R::zero(); gamma.len()]);
        let mut dbeta = g.wants(self.grn_beta).then(|| vec![R::zero(); gamma.len()]);
        let dact = grn_backward(&dgrn, &tape.grn, &gamma, dgamma.as_deref_mut(), dbeta.as_deref_mut());
        if let (Some(src), Some(dst)) = (dgamma, g.slot(self.grn_gamma)) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if let (Some(src), Some(dst)) = (dbeta, g.slot(self.grn_beta)) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        let dh1 = pointwise_backward(&tape.h1, &dact, gelu_grad);
        let dnormed = self.pw1.backward(p, &tape.normed, &dh1, g);
        let dconv = self.norm.backward(p, &dnormed, &tape.norm, g);

        let w = p.get(self.dw_w);
        let half = KERNEL / 2;
        let len = tape.x.rows() as isize;
        let mut dx = dy.clone();
        let mut dw = g.wants(self.dw_w).then(|| vec![R::zero(); w.len()]);
        let mut db = g.wants(self.dw_b).then(|| vec![R::zero(); self.dim]);
        for t in 0..dconv.rows() {
            let dr = dconv.row(t);
            if let Some(db) = db.as_mut() {
                db.iter_mut().zip(dr).for_each(|(a, &d)| *a += d);
            }
            for k in 0..KERNEL {
                let src = t as isize + k as isize - half as isize;
                if src < 0 || src >= len {
                    continue;
                }
                let src = src as usize;
                if let Some(dw) = dw.as_mut() {
                    let xr = tape.x.row(src);
                    for c in 0..self.dim {
                        dw[c * KERNEL + k] += dr[c] * xr[c];
                    }
                }
                let dxr = dx.row_mut(src);
                for c in 0..self.dim {
                    dxr[c] += w[c * KERNEL + k] * dr[c];
                }
            }
        }
        if let (Some(src), Some(dst)) = (dw, g.slot(self.dw_w)) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if let (Some(src), Some(dst)) = (db, g.slot(self.dw_b)) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        dx
    }
}

/// Character embedding table followed by a stack of [`ConvBlock`]s.
#[derive(Clone, Debug)]
pub struct CharEncoder {
    pub embed: ParamId,
    pub blocks: Vec<ConvBlock>,
    pub dim: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug)]
pub struct CharEncoderTape<R> {
    padded: Vec<u8>,
    blocks: Vec<ConvBlockTape<R>>,
}

impl CharEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        vocab: usize,
        dim: usize,
        n_blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embed = store.add("text.embed", &[vocab, dim], Init::Normal(1.0), rng);
        let blocks = (0..n_blocks).map(|i| ConvBlock::new(store, &format!("text.conv{i}"), dim, rng)).collect();
        Self { embed, blocks, dim, vocab }
    }

    pub fn embed_and_pad<R: Real>(&self, p: &ParamStore<R>, chars: &[u8], target_frames: usize) -> Result<Mat<R>> {
        embed_and_pad(p.get(self.embed), self.dim, self.vocab, chars, target_frames)
    }

    /// Runs the residual blocks over an embedded sequence.
    pub fn convnext_encode<R: Real>(&self, p: &ParamStore<R>, x: &Mat<R>) -> Result<Mat<R>> {
        if x.rows() == 0 {
            return invalid("cannot encode an empty sequence");
        }
        if x.cols() != self.dim {
            return invalid(format!("expected width {}, got {}", self.dim, x.cols()));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(p, &h).0;
        }
        Ok(h)
    }

    pub fn forward<R: Real>(
        &self,
        p: &ParamStore<R>,
        chars: &[u8],
        target_frames: usize,
    ) -> Result<(Mat<R>, CharEncoderTape<R>)> {
        let mut h = self.embed_and_pad(p, chars, target_frames)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, tape) = b.forward(p, &h);
            tapes.push(tape);
            h = next;
        }
        let mut padded = chars.to_vec();
        padded.resize(target_frames, FILLER_ID);
        Ok((h, CharEncoderTape { padded, blocks: tapes }))
    }

    pub fn backward<R: Real>(&self, p: &ParamStore<R>, dy: &Mat<R>, tape: &CharEncoderTape<R>, g: &mut Grads<R>) {
        let mut d = dy.clone();
        for (b, t) in self.blocks.iter().zip(&tape.blocks).rev() {
            d = b.backward(p, &d, t, g);
        }
        if let Some(ge) = g.slot(self.embed) {
            for (t, &id) in tape.padded.iter().enumerate() {
                let id = id as usize;
                for (a, &v) in ge[id * self.dim..(id + 1) * self.dim].iter_mut().zip(d.row(t)) {
                    *a += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore<f64>, CharEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = CharEncoder::new(&mut store, 10, 8, 2, &mut rng);
        (store, enc)
    }

    #[test]
    fn padding_examples() {
        let (store, enc) = encoder();
        let exact = enc.embed_and_pad(&store, &[2, 3], 2).unwrap();
        assert_eq!(exact.rows(), 2);
        let table = store.get(enc.embed);
        assert_eq!(exact.row(1), &table[3 * 8..4 * 8]);
        let padded = enc.embed_and_pad(&store, &[2, 3], 5).unwrap();
        for t in 2..5 {
            assert_eq!(padded.row(t), &table[..8]);
        }
        assert!(enc.embed_and_pad(&store, &[2, 3, 4], 2).is_err());
        assert!(enc.embed_and_pad(&store, &[42], 2).is_err());
    }

    #[test]
    fn zeroed_blocks_are_identity_and_length_is_preserved() {
        let (mut store, enc) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for len in [1, 7, 64] {
            let x = Mat::from_vec(len, 8, (0..len * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            assert_eq!(enc.convnext_encode(&store, &x).unwrap().rows(), len);
        }
        for b in &enc.blocks {
            for id in b.param_ids() {
                store.get_mut(id).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Mat::from_vec(5, 8, (0..40).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        assert_eq!(enc.convnext_encode(&store, &x).unwrap(), x);
    }

    /// Scalar-loop GRN reference.
    fn grn_reference(x: &[[f64; 3]], gamma: [f64; 3], beta: [f64; 3]) -> Vec<[f64; 3]> {
        let mut g = [0.0; 3];
        for row in x {
            for c in 0..3 {
                g[c] += row[c] * row[c];
            }
        }
        let g = g.map(f64::sqrt);
        let mean = (g[0] + g[1] + g[2]) / 3.0;
        x.iter()
            .map(|row| {
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let n = g[c] / (mean + 1e-6);
                    out[c] = gamma[c] * row[c] * n + beta[c] + row[c];
                }
                out
            })
            .collect()
    }

    #[test]
    fn grn_matches_scalar_reference() {
        // Every channel has the same norm (5), so N = 5 / (5 + eps) per channel.
        let x = [[3.0, 4.0, 0.0], [4.0, -3.0, 5.0]];
        let gamma = [0.5, -1.0, 2.0];
        let beta = [0.1, 0.0, -0.2];
        let m = Mat::from_rows(&x.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let (y, _) = grn_forward(&m, &gamma, &beta);
        let reference = grn_reference(&x, gamma, beta);
        for (t, row) in reference.iter().enumerate() {
            for c in 0..3 {
                assert!((y.get(t, c) - row[c]).abs() < 1e-6);
            }
        }
        // Scaling the input scales the normalized part by the same factor.
        let (y2, _) = grn_forward(&m.map(|v| 2.0 * v), &gamma, &[0.0; 3]);
        let (y1, _) = grn_forward(&m, &gamma, &[0.0; 3]);
        for (a, b) in y2.data().iter().zip(y1.data()) {
            assert!((a - 2.0 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn grn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Mat::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Mat::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let gamma = [0.7, -0.4, 1.3];
        let beta = [0.0; 3];
        let (_, cache) = grn_forward(&x, &gamma, &beta);
        let dx = grn_backward(&w, &cache, &gamma, None, None);
        let loss = |x: &Mat<f64>| -> f64 {
            let (y, _) = grn_forward(x, &gamma, &beta);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..12 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx.data()[i]);
        }
    }
}

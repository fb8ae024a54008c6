//! Minimal CHW tensor layers with hand-written backward passes.
//!
//! Parameters live in one flat `f32` buffer; each layer records its offsets
//! into it, and gradients use the same layout.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            c: self.c + other.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `c` channels, then the rest.
    pub fn split(self, c: usize) -> (Tensor, Tensor) {
        let at = c * self.plane();
        let rest = self.data[at..].to_vec();
        let mut first = self.data;
        first.truncate(at);
        (
            Tensor {
                c,
                h: self.h,
                w: self.w,
                data: first,
            },
            Tensor {
                c: self.c - c,
                h: self.h,
                w: self.w,
                data: rest,
            },
        )
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution, stride 1, "same" zero padding (`k` odd).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, k: usize, offset: &mut usize) -> Self {
        let w_off = *offset;
        let b_off = w_off + cout * cin * k * k;
        *offset = b_off + cout;
        Self {
            cin,
            cout,
            k,
            w_off,
            b_off,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (h, w, k) = (x.h, x.w, self.k);
        if k == 1 {
            return x.data.clone();
        }
        let r = (k / 2) as isize;
        let mut col = vec![0.0f32; self.cin * k * k * h * w];
        for ci in 0..self.cin {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * h * w..(row + 1) * h * w];
                    let dx = kx as isize - r;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - r;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s_row = sy as usize * w;
                        let d = &mut dst[y * w + x_lo..y * w + x_hi];
                        let s0 = (s_row as isize + x_lo as isize + dx) as usize;
                        d.copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize) -> Tensor {
        let k = self.k;
        if k == 1 {
            return Tensor {
                c: self.cin,
                h,
                w,
                data: col.to_vec(),
            };
        }
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * h * w..(row + 1) * h * w];
                    let dx = kx as isize - r;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - r;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let d0 = (sy as usize * w) as isize + x_lo as isize + dx;
                        let d = &mut dst[d0 as usize..d0 as usize + (x_hi - x_lo)];
                        let s = &src[y * w + x_lo..y * w + x_hi];
                        d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.plane();
        let col = self.im2col(x);
        let mut y = Tensor::zeros(self.cout, x.h, x.w);
        for (co, chunk) in y.data.chunks_exact_mut(hw).enumerate() {
            chunk.fill(params[self.b_off + co]);
        }
        let wts = &params[self.w_off..self.b_off];
        gemm(self.cout, self.fan_in(), hw, wts, false, &col, false, 1.0, &mut y.data);
        y
    }

    /// Accumulates parameter gradients into `grads`; returns `dx` when asked.
    pub fn backward(&self, params: &[f32], x: &Tensor, dy: &Tensor, grads: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let hw = x.plane();
        let col = self.im2col(x);
        {
            let (gw, gb) = grads[self.w_off..self.b_off + self.cout].split_at_mut(self.b_off - self.w_off);
            gemm(self.cout, hw, self.fan_in(), &dy.data, false, &col, true, 1.0, gw);
            for (co, chunk) in dy.data.chunks_exact(hw).enumerate() {
                gb[co] += chunk.iter().sum::<f32>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![0.0f32; self.fan_in() * hw];
        let wts = &params[self.w_off..self.b_off];
        gemm(self.fan_in(), self.cout, hw, wts, true, &dy.data, false, 0.0, &mut dcol);
        Some(self.col2im(&dcol, x.h, x.w))
    }
}

/// 2x2 stride-2 transposed convolution (doubles spatial size).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl UpConv {
    pub fn new(cin: usize, cout: usize, offset: &mut usize) -> Self {
        let w_off = *offset;
        let b_off = w_off + cout * 4 * cin;
        *offset = b_off + cout;
        Self {
            cin,
            cout,
            w_off,
            b_off,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin
    }

    // weights form a (cout*4) x cin matrix; row co*4 + a*2 + b
    pub fn forward(&self, params: &[f32], x: &Tensor) -> Tensor {
        let hw = x.plane();
        let mut z = vec![0.0f32; self.cout * 4 * hw];
        gemm(self.cout * 4, self.cin, hw, &params[self.w_off..self.b_off], false, &x.data, false, 0.0, &mut z);
        let (h2, w2) = (2 * x.h, 2 * x.w);
        let mut y = Tensor::zeros(self.cout, h2, w2);
        for co in 0..self.cout {
            let bias = params[self.b_off + co];
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let src = &z[(co * 4 + ab) * hw..(co * 4 + ab + 1) * hw];
                for i in 0..x.h {
                    for j in 0..x.w {
                        y.data[co * h2 * w2 + (2 * i + a) * w2 + 2 * j + b] = src[i * x.w + j] + bias;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, params: &[f32], x: &Tensor, dy: &Tensor, grads: &mut [f32]) -> Tensor {
        let hw = x.plane();
        let (h2, w2) = (dy.h, dy.w);
        let mut dz = vec![0.0f32; self.cout * 4 * hw];
        for co in 0..self.cout {
            let mut bsum = 0.0f32;
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let dst = &mut dz[(co * 4 + ab) * hw..(co * 4 + ab + 1) * hw];
                for i in 0..x.h {
                    for j in 0..x.w {
                        let v = dy.data[co * h2 * w2 + (2 * i + a) * w2 + 2 * j + b];
                        dst[i * x.w + j] = v;
                        bsum += v;
                    }
                }
            }
            grads[self.b_off + co] += bsum;
        }
        gemm(self.cout * 4, hw, self.cin, &dz, false, &x.data, true, 1.0, &mut grads[self.w_off..self.b_off]);
        let mut dx = Tensor::zeros(self.cin, x.h, x.w);
        gemm(self.cin, self.cout * 4, hw, &params[self.w_off..self.b_off], true, &dz, false, 0.0, &mut dx.data);
        dx
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    grad.data
        .iter_mut()
        .zip(&output.data)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

/// 2x2 max pooling; returns the pooled tensor and the flat argmax of each output.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, h2, w2);
    let mut idx = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut best = f32::NEG_INFINITY;
                let mut at = 0;
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = c * x.h * x.w + (2 * i + a) * x.w + 2 * j + b;
                    if x.data[p] > best {
                        best = x.data[p];
                        at = p;
                    }
                }
                let o = c * h2 * w2 + i * w2 + j;
                y.data[o] = best;
                idx[o] = at as u32;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &Tensor, idx: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(c, h, w);
    for (g, &i) in dy.data.iter().zip(idx) {
        dx.data[i as usize] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Naive direct convolution.
    fn conv_direct(conv: &Conv, params: &[f32], x: &Tensor) -> Tensor {
        let r = (conv.k / 2) as isize;
        let mut y = Tensor::zeros(conv.cout, x.h, x.w);
        for co in 0..conv.cout {
            for yy in 0..x.h {
                for xx in 0..x.w {
                    let mut s = params[conv.b_off + co];
                    for ci in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let sy = yy as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = conv.w_off + ((co * conv.cin + ci) * conv.k + ky) * conv.k + kx;
                                s += params[wi] * x.data[ci * x.h * x.w + sy as usize * x.w + sx as usize];
                            }
                        }
                    }
                    y.data[co * x.h * x.w + yy * x.w + xx] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut off = 0;
        let conv = Conv::new(3, 4, 3, &mut off);
        let params = random(&mut rng, off);
        let x = Tensor {
            c: 3,
            h: 5,
            w: 7,
            data: random(&mut rng, 105),
        };
        let a = conv.forward(&params, &x);
        let b = conv_direct(&conv, &params, &x);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    /// Finite-difference check of `sum(forward(x) * probe)`.
    fn check_grads<F, B>(n_params: usize, x: Tensor, fwd: F, bwd: B)
    where
        F: Fn(&[f32], &Tensor) -> Tensor,
        B: Fn(&[f32], &Tensor, &Tensor, &mut [f32]) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params: Vec<f32> = random(&mut rng, n_params);
        let y = fwd(&params, &x);
        let probe = Tensor {
            data: random(&mut rng, y.data.len()),
            ..y.clone()
        };
        let objective = |p: &[f32], x: &Tensor| -> f64 {
            fwd(p, x).data.iter().zip(&probe.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut grads = vec![0.0f32; n_params];
        let dx = bwd(&params, &x, &probe, &mut grads);
        let eps = 1e-2f32;
        for i in (0..n_params).step_by(3) {
            let mut p = params.clone();
            p[i] += eps;
            let up = objective(&p, &x);
            p[i] -= 2.0 * eps;
            let down = objective(&p, &x);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - grads[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for i in (0..x.data.len()).step_by(2) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let up = objective(&params, &xp);
            xp.data[i] -= 2.0 * eps;
            let down = objective(&params, &xp);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-2 * (1.0 + fd.abs()), "x {i}: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut off = 0;
        let conv = Conv::new(2, 3, 3, &mut off);
        let x = Tensor {
            c: 2,
            h: 4,
            w: 5,
            data: random(&mut rng, 40),
        };
        check_grads(off, x, |p, x| conv.forward(p, x), |p, x, dy, g| {
            conv.backward(p, x, dy, g, true).unwrap()
        });
    }

    #[test]
    fn upconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut off = 0;
        let up = UpConv::new(3, 2, &mut off);
        let x = Tensor {
            c: 3,
            h: 3,
            w: 2,
            data: random(&mut rng, 18),
        };
        check_grads(off, x, |p, x| up.forward(p, x), |p, x, dy, g| up.backward(p, x, dy, g));
    }

    #[test]
    fn pool_routes_gradient_to_max() {
        let x = Tensor {
            c: 1,
            h: 2,
            w: 4,
            data: vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 9.0, 0.0],
        };
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data, vec![5.0, 9.0]);
        let dx = maxpool2_backward(
            &Tensor {
                c: 1,
                h: 1,
                w: 2,
                data: vec![1.0, 2.0],
            },
            &idx,
            1,
            2,
            4,
        );
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}

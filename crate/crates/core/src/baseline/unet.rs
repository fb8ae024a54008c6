//! U-Net: an encoder of double 3x3 convolutions with 2x2 max pooling, a
//! mirrored decoder with transposed-convolution upsampling and skip
//! concatenation, and a 1x1 head producing one logit per pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{maxpool2, maxpool2_backward, relu_backward, relu_inplace, Conv, Tensor, UpConv};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Resolution levels including the bottleneck.
    pub levels: usize,
    /// Channels at the first level; doubled at every level below.
    pub width: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { levels: 4, width: 64 }
    }
}

impl UnetConfig {
    /// Spatial dims must be a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 || self.width == 0 {
            return Err(Error::invalid(format!(
                "U-Net needs 1..=8 levels and a positive width, got {} and {}",
                self.levels, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    a: Conv,
    b: Conv,
}

struct DoubleTape {
    input: Tensor,
    mid: Tensor,
    out: Tensor,
}

impl DoubleConv {
    fn new(cin: usize, cout: usize, offset: &mut usize) -> Self {
        Self {
            a: Conv::new(cin, cout, 3, offset),
            b: Conv::new(cout, cout, 3, offset),
        }
    }

    fn forward(&self, params: &[f32], input: Tensor) -> DoubleTape {
        let mut mid = self.a.forward(params, &input);
        relu_inplace(&mut mid);
        let mut out = self.b.forward(params, &mid);
        relu_inplace(&mut out);
        DoubleTape { input, mid, out }
    }

    fn backward(&self, params: &[f32], tape: &DoubleTape, mut d_out: Tensor, grads: &mut [f32], need_dx: bool) -> Option<Tensor> {
        relu_backward(&tape.out, &mut d_out);
        let mut d_mid = self.b.backward(params, &tape.mid, &d_out, grads, true).expect("dx requested");
        relu_backward(&tape.mid, &mut d_mid);
        self.a.backward(params, &tape.input, &d_mid, grads, need_dx)
    }
}

/// Network topology and parameter layout. Parameters are held separately.
#[derive(Debug, Clone)]
pub struct Unet {
    config: UnetConfig,
    enc: Vec<DoubleConv>,
    up: Vec<UpConv>,
    dec: Vec<DoubleConv>,
    head: Conv,
    n_params: usize,
}

/// Activations kept from a forward pass.
pub struct Tape {
    enc: Vec<DoubleTape>,
    pool_idx: Vec<Vec<u32>>,
    up_in: Vec<Tensor>,
    dec: Vec<Option<DoubleTape>>,
    head_in: Tensor,
}

impl Unet {
    pub fn new(config: UnetConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let l = config.levels;
        let mut off = 0;
        let mut enc = Vec::with_capacity(l);
        for level in 0..l {
            let cin = if level == 0 { 3 } else { w << (level - 1) };
            enc.push(DoubleConv::new(cin, w << level, &mut off));
        }
        let mut up = Vec::with_capacity(l - 1);
        let mut dec = Vec::with_capacity(l - 1);
        for level in 0..l - 1 {
            up.push(UpConv::new(w << (level + 1), w << level, &mut off));
            dec.push(DoubleConv::new(2 * (w << level), w << level, &mut off));
        }
        let head = Conv::new(w, 1, 1, &mut off);
        Ok(Self {
            config,
            enc,
            up,
            dec,
            head,
            n_params: off,
        })
    }

    pub fn config(&self) -> UnetConfig {
        self.config
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// He-normal weights and zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; self.n_params];
        let mut fill = |w_off: usize, b_off: usize, fan_in: usize| {
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            for p in &mut params[w_off..b_off] {
                *p = normal.sample(&mut rng);
            }
        };
        for d in self.enc.iter().chain(&self.dec) {
            fill(d.a.w_off, d.a.b_off, d.a.fan_in());
            fill(d.b.w_off, d.b.b_off, d.b.fan_in());
        }
        for u in &self.up {
            fill(u.w_off, u.b_off, u.fan_in());
        }
        fill(self.head.w_off, self.head.b_off, self.head.fan_in());
        params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = self.config.multiple();
        if x.c != 3 || x.h == 0 || x.w == 0 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "U-Net input must be 3 x H x W with H, W multiples of {m}, got {} x {} x {}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Per-pixel logits (`1 x H x W`) and the tape for [`Unet::backward`].
    pub fn forward(&self, params: &[f32], x: Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(&x)?;
        let l = self.config.levels;
        let mut enc = Vec::with_capacity(l);
        let mut pool_idx = Vec::with_capacity(l - 1);
        enc.push(self.enc[0].forward(params, x));
        for level in 1..l {
            let (pooled, idx) = maxpool2(&enc[level - 1].out);
            pool_idx.push(idx);
            enc.push(self.enc[level].forward(params, pooled));
        }
        let mut up_in: Vec<Tensor> = (0..l - 1).map(|_| Tensor::zeros(0, 0, 0)).collect();
        let mut dec: Vec<Option<DoubleTape>> = (0..l - 1).map(|_| None).collect();
        let mut d = enc[l - 1].out.clone();
        for level in (0..l - 1).rev() {
            let u = self.up[level].forward(params, &d);
            let cat = u.concat(&enc[level].out);
            up_in[level] = d;
            let tape = self.dec[level].forward(params, cat);
            d = tape.out.clone();
            dec[level] = Some(tape);
        }
        let logits = self.head.forward(params, &d);
        Ok((
            logits,
            Tape {
                enc,
                pool_idx,
                up_in,
                dec,
                head_in: d,
            },
        ))
    }

    /// Logits only, without keeping the tape.
    pub fn infer(&self, params: &[f32], x: Tensor) -> Result<Tensor> {
        Ok(self.forward(params, x)?.0)
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward(&self, params: &[f32], tape: &Tape, d_logits: &Tensor, grads: &mut [f32]) {
        debug_assert_eq!(grads.len(), self.n_params);
        let l = self.config.levels;
        let mut dd = self
            .head
            .backward(params, &tape.head_in, d_logits, grads, true)
            .expect("dx requested");
        let mut d_enc: Vec<Option<Tensor>> = (0..l).map(|_| None).collect();
        for level in 0..l - 1 {
            let dtape = tape.dec[level].as_ref().expect("decoder tape");
            let d_cat = self.dec[level].backward(params, dtape, dd, grads, true).expect("dx requested");
            let (d_up, d_skip) = d_cat.split(self.up[level].cout);
            accumulate(&mut d_enc[level], d_skip);
            dd = self.up[level].backward(params, &tape.up_in[level], &d_up, grads);
        }
        accumulate(&mut d_enc[l - 1], dd);
        for level in (0..l).rev() {
            let d_out = d_enc[level].take().expect("gradient reaches every level");
            let need_dx = level > 0;
            let dx = self.enc[level].backward(params, &tape.enc[level], d_out, grads, need_dx);
            if let Some(dx) = dx {
                let prev = &tape.enc[level - 1].out;
                let d_prev = maxpool2_backward(&dx, &tape.pool_idx[level - 1], prev.c, prev.h, prev.w);
                accumulate(&mut d_enc[level - 1], d_prev);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Sum of binary cross-entropy with logits over pixels where `weight` is
/// nonzero, and its gradient (`sigmoid(z) - t`, zero elsewhere).
pub fn bce_with_logits(logits: &Tensor, target: &[f32], valid: &[bool]) -> (f64, Tensor) {
    debug_assert_eq!(logits.data.len(), target.len());
    let mut grad = Tensor::zeros(logits.c, logits.h, logits.w);
    let mut loss = 0.0f64;
    for i in 0..target.len() {
        if !valid[i] {
            continue;
        }
        let z = logits.data[i] as f64;
        let t = target[i] as f64;
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.data[i] = (1.0 / (1.0 + (-z).exp()) - t) as f32;
    }
    (loss, grad)
}

//! Network layers built on the autodiff tape.
//!
//! Layers register their parameters under hierarchical names at
//! construction and hold only parameter ids; forward passes are methods
//! taking the tape and store. Weight layout conventions: conv kernels
//! [Cout, Cin, kh, kw], linear weights [Out, In], projection matrices for
//! token sequences [In, Out] (right-multiplied).

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::tensor::{ParamStore, Tape, Tensor};

pub const NORM_EPS: f64 = 1e-5;

fn normal_init(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// 2-D convolution, optionally with weight standardization.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight_standardized: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight_standardized: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = ps.add(
            format!("{name}.weight"),
            normal_init(&[cout, cin, kernel, kernel], std, rng),
        );
        let bias = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad,
            weight_standardized,
        }
    }

    /// Zero-initialized variant (used for the network's final projection).
    pub fn new_zeroed(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            ArrayD::zeros(IxDyn(&[cout, cin, kernel, kernel])),
        );
        let bias = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Self {
            weight,
            bias,
            stride: 1,
            pad: 0,
            weight_standardized: false,
        }
    }

    pub fn zero_weights(&self, ps: &mut ParamStore) {
        ps.value_mut(self.weight).fill(0.0);
        ps.value_mut(self.bias).fill(0.0);
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let mut w = tape.param(ps, self.weight);
        if self.weight_standardized {
            w = tape.weight_standardize(&w, NORM_EPS);
        }
        let b = tape.param(ps, self.bias);
        tape.conv2d(x, &w, &b, self.stride, self.pad)
    }
}

/// Fully connected layer on vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (1.0 / input as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), normal_init(&[output, input], std, rng));
        let bias = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[output])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.affine(x, &w, &b)
    }
}

/// Group normalization with learnable per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: usize,
    beta: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(
            channels % groups == 0,
            "{name}: channels {channels} not divisible by groups {groups}"
        );
        let gamma = ps.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0));
        let beta = ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.group_norm(x, &g, &b, self.groups, NORM_EPS)
    }
}

/// Layer normalization over the channel (last) axis of token sequences.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0));
        let beta = ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: &Tensor) -> Tensor {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.layer_norm_last(x, &g, &b, NORM_EPS)
    }
}

/// FiLM-conditioned ResNet block: two weight-standardized 3x3 convolutions
/// with group norm, a timestep-derived per-channel scale/shift after the
/// first normalization, SiLU activations, and a residual connection (1x1
/// projection when channel counts differ).
#[derive(Debug, Clone)]
pub struct FilmResnetBlock {
    pub conv1: Conv2d,
    norm1: GroupNorm,
    film: Linear,
    pub conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
    cout: usize,
}

impl FilmResnetBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        groups: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, true, rng);
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), cout, groups);
        let film = Linear::new(ps, &format!("{name}.film"), temb_dim, 2 * cout, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, true, rng);
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), cout, groups);
        let skip = if cin != cout {
            Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, false, rng))
        } else {
            None
        };
        Self {
            conv1,
            norm1,
            film,
            conv2,
            norm2,
            skip,
            cout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: &Tensor, temb: &Tensor) -> Tensor {
        let h = self.conv1.forward(tape, ps, x);
        let h = self.norm1.forward(tape, ps, &h);

        // FiLM: scale by (1 + gamma), shift by beta, both derived from temb.
        let cond = tape.silu(temb);
        let film = self.film.forward(tape, ps, &cond);
        let gamma = tape.slice1d(&film, 0, self.cout);
        let beta = tape.slice1d(&film, self.cout, self.cout);
        let scale = tape.add_scalar(&gamma, 1.0);
        let h = tape.mul_channel(&h, &scale);
        let h = tape.add_channel(&h, &beta);

        let h = tape.silu(&h);
        let h = self.conv2.forward(tape, ps, &h);
        let h = self.norm2.forward(tape, ps, &h);
        let h = tape.silu(&h);

        let res = match &self.skip {
            Some(proj) => proj.forward(tape, ps, x),
            None => x.clone(),
        };
        tape.add(&h, &res)
    }
}

/// Pre-LN multi-head self-attention over token sequences [R, S, C]:
/// R independent sequences of length S, no positional encoding inside.
/// Returns the attended tokens and the softmax weights [R*heads, S, S].
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    ln: LayerNorm,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    pub heads: usize,
    channels: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(
            channels % heads == 0,
            "{name}: channels {channels} not divisible by heads {heads}"
        );
        let std = (1.0 / channels as f64).sqrt();
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), channels);
        let wq = ps.add(format!("{name}.wq"), normal_init(&[channels, channels], std, rng));
        let wk = ps.add(format!("{name}.wk"), normal_init(&[channels, channels], std, rng));
        let wv = ps.add(format!("{name}.wv"), normal_init(&[channels, channels], std, rng));
        let wo = ps.add(format!("{name}.wo"), normal_init(&[channels, channels], std, rng));
        Self {
            ln,
            wq,
            wk,
            wv,
            wo,
            heads,
            channels,
        }
    }

    /// tokens: [R, S, C] -> ([R, S, C], attention weights [R*heads, S, S]).
    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, tokens: &Tensor) -> (Tensor, Tensor) {
        let shape = tokens.shape().to_vec();
        assert_eq!(shape.len(), 3, "attention expects [R, S, C]");
        let (r, s, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.channels);
        let h = self.heads;
        let dh = c / h;

        let flat = tape.reshape(tokens, &[r * s, c]);
        let normed = self.ln.forward(tape, ps, &flat);

        let to_heads = |tape: &mut Tape, ps: &ParamStore, x: &Tensor, w: usize| -> Tensor {
            let wt = tape.param(ps, w);
            let proj = tape.matmul(x, &wt); // [R*S, C]
            let x4 = tape.reshape(&proj, &[r, s, h, dh]);
            let x4 = tape.transpose(&x4, &[0, 2, 1, 3]); // [R, h, S, dh]
            tape.reshape(&x4, &[r * h, s, dh])
        };
        let q = to_heads(tape, ps, &normed, self.wq);
        let k = to_heads(tape, ps, &normed, self.wk);
        let v = to_heads(tape, ps, &normed, self.wv);

        let kt = tape.transpose(&k, &[0, 2, 1]); // [R*h, dh, S]
        let scores = tape.bmm(&q, &kt);
        let scores = tape.mul_scalar(&scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_last(&scores); // [R*h, S, S]

        let ctx = tape.bmm(&attn, &v); // [R*h, S, dh]
        let ctx = tape.reshape(&ctx, &[r, h, s, dh]);
        let ctx = tape.transpose(&ctx, &[0, 2, 1, 3]); // [R, S, h, dh]
        let ctx = tape.reshape(&ctx, &[r * s, c]);
        let wo = tape.param(ps, self.wo);
        let out = tape.matmul(&ctx, &wo);

        let out = tape.add(&out, &flat);
        (tape.reshape(&out, &[r, s, c]), attn)
    }
}

/// Attention along the time axis of a [C, F, T] feature map: each
/// frequency row attends over its time positions independently.
pub fn time_attention(
    attn: &MultiHeadAttention,
    tape: &mut Tape,
    ps: &ParamStore,
    x: &Tensor,
) -> (Tensor, Tensor) {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3, "time_attention expects [C, F, T]");
    let (c, f, t) = (shape[0], shape[1], shape[2]);
    let tokens = tape.transpose(x, &[1, 2, 0]); // [F, T, C]
    let (out, weights) = attn.forward(tape, ps, &tokens);
    let out = tape.transpose(&out, &[2, 0, 1]);
    debug_assert_eq!(out.shape(), &[c, f, t]);
    (out, weights)
}

/// Attention over all time-frequency positions of a [C, F, T] feature map
/// jointly (one sequence of F*T tokens).
pub fn joint_attention(
    attn: &MultiHeadAttention,
    tape: &mut Tape,
    ps: &ParamStore,
    x: &Tensor,
) -> (Tensor, Tensor) {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3, "joint_attention expects [C, F, T]");
    let (c, f, t) = (shape[0], shape[1], shape[2]);
    let tokens = tape.transpose(x, &[1, 2, 0]); // [F, T, C]
    let tokens = tape.reshape(&tokens, &[1, f * t, c]);
    let (out, weights) = attn.forward(tape, ps, &tokens);
    let out = tape.reshape(&out, &[f, t, c]);
    let out = tape.transpose(&out, &[2, 0, 1]);
    (out, weights)
}

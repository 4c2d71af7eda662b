//! A small pre-norm transformer used as the velocity network.
//!
//! Weights are seeded and untrained; the model exists to exercise the
//! compute shape of token-sparse inference. Tokens carry no positional
//! encoding, so attention is exactly invariant to key/value order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latents::TokenMatrix;

const LN_EPS: f32 = 1e-5;
const QUERY_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelConfig {
    pub fn new(layers: usize, d_model: usize, heads: usize, seed: u64) -> Self {
        Self {
            layers,
            d_model,
            heads,
            ffn_mult: default_ffn_mult(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(invalid("d_model must be even for the time embedding"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Dense affine map `y = x W + b` with `W` stored input-major.
#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let std = 1.0 / (inputs as f32).sqrt();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let weight = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        let bdist = Normal::new(0.0f32, 0.02).expect("positive std");
        let bias = (0..outputs).map(|_| bdist.sample(rng)).collect();
        Self { inputs, outputs, weight, bias }
    }

    fn apply_row(&self, x: &[f32], y: &mut [f32]) {
        y.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            let w = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (yj, wj) in y.iter_mut().zip(w) {
                *yj += xi * wj;
            }
        }
    }

    pub fn forward(&self, x: &TokenMatrix) -> TokenMatrix {
        debug_assert_eq!(x.cols, self.inputs);
        let mut out = TokenMatrix::zeros(x.rows, self.outputs);
        out.data
            .par_chunks_mut(self.outputs * QUERY_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (r, y) in chunk.chunks_exact_mut(self.outputs).enumerate() {
                    self.apply_row(x.row(c * QUERY_CHUNK + r), y);
                }
            });
        out
    }
}

/// Layer normalization with a learned per-feature gain.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Vec<f32>,
}

impl Norm {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let dist = Normal::new(1.0f32, 0.1).expect("positive std");
        Self { gain: (0..d).map(|_| dist.sample(rng)).collect() }
    }

    pub fn forward(&self, x: &TokenMatrix) -> TokenMatrix {
        let d = x.cols;
        let mut out = x.clone();
        for row in out.data.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (v, g) in row.iter_mut().zip(&self.gain) {
                *v = (*v - mean) * inv * g;
            }
        }
        out
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Query, key and value projections of one layer's normalized input.
pub struct Qkv {
    pub q: TokenMatrix,
    pub k: TokenMatrix,
    pub v: TokenMatrix,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub ln1: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Norm,
    pub w1: Linear,
    pub w2: Linear,
}

impl Layer {
    fn random(rng: &mut ChaCha8Rng, d: usize, ffn: usize) -> Self {
        Self {
            ln1: Norm::random(rng, d),
            wq: Linear::random(rng, d, d),
            wk: Linear::random(rng, d, d),
            wv: Linear::random(rng, d, d),
            wo: Linear::random(rng, d, d),
            ln2: Norm::random(rng, d),
            w1: Linear::random(rng, d, ffn),
            w2: Linear::random(rng, ffn, d),
        }
    }

    pub fn norm_qkv(&self, h: &TokenMatrix) -> Qkv {
        let x = self.ln1.forward(h);
        Qkv {
            q: self.wq.forward(&x),
            k: self.wk.forward(&x),
            v: self.wv.forward(&x),
        }
    }

    /// Residual attention output projection followed by the residual MLP.
    pub fn output(&self, h: &TokenMatrix, attn: &TokenMatrix) -> TokenMatrix {
        let mut h = h.clone();
        let proj = self.wo.forward(attn);
        for (a, b) in h.data.iter_mut().zip(&proj.data) {
            *a += b;
        }
        let x = self.ln2.forward(&h);
        let mut mid = self.w1.forward(&x);
        for v in &mut mid.data {
            *v = gelu(*v);
        }
        let ff = self.w2.forward(&mid);
        for (a, b) in h.data.iter_mut().zip(&ff.data) {
            *a += b;
        }
        h
    }
}

/// One contiguous run of keys and values, optionally restricted to a
/// subset of its rows.
#[derive(Debug, Clone, Copy)]
pub struct KvSegment<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub rows: Option<&'a [u32]>,
}

impl<'a> KvSegment<'a> {
    pub fn dense(keys: &'a [f32], values: &'a [f32]) -> Self {
        Self { keys, values, rows: None }
    }

    pub fn len(&self, d: usize) -> usize {
        self.rows.map_or(self.keys.len() / d, <[u32]>::len)
    }

    pub fn is_empty(&self, d: usize) -> bool {
        self.len(d) == 0
    }

    #[inline]
    fn row(&self, i: usize, d: usize) -> (&'a [f32], &'a [f32]) {
        let r = self.rows.map_or(i, |rows| rows[i] as usize);
        (&self.keys[r * d..(r + 1) * d], &self.values[r * d..(r + 1) * d])
    }
}

/// Multi-head softmax attention of `q` over the concatenation of
/// `segments`, normalized over the full concatenated length.
pub fn attention(q: &TokenMatrix, segments: &[KvSegment<'_>], heads: usize) -> TokenMatrix {
    let d = q.cols;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let total: usize = segments.iter().map(|s| s.len(d)).sum();
    let mut out = TokenMatrix::zeros(q.rows, d);
    if total == 0 {
        return out;
    }
    out.data
        .par_chunks_mut(d * QUERY_CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| {
            let mut scores = vec![0.0f32; heads * total];
            for (r, o) in chunk.chunks_exact_mut(d).enumerate() {
                let qi = q.row(c * QUERY_CHUNK + r);
                let mut j = 0;
                for seg in segments {
                    for i in 0..seg.len(d) {
                        let (k, _) = seg.row(i, d);
                        for h in 0..heads {
                            let qs = &qi[h * hd..(h + 1) * hd];
                            let ks = &k[h * hd..(h + 1) * hd];
                            let mut s = 0.0f32;
                            for (a, b) in qs.iter().zip(ks) {
                                s += a * b;
                            }
                            scores[h * total + j] = s * scale;
                        }
                        j += 1;
                    }
                }
                let mut sums = vec![0.0f32; heads];
                for h in 0..heads {
                    let row = &mut scores[h * total..(h + 1) * total];
                    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0f32;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    sums[h] = s;
                }
                let mut j = 0;
                for seg in segments {
                    for i in 0..seg.len(d) {
                        let (_, v) = seg.row(i, d);
                        for h in 0..heads {
                            let p = scores[h * total + j];
                            for (oo, vv) in o[h * hd..(h + 1) * hd].iter_mut().zip(&v[h * hd..(h + 1) * hd]) {
                                *oo += p * vv;
                            }
                        }
                        j += 1;
                    }
                }
                for h in 0..heads {
                    let inv = 1.0 / sums[h];
                    for oo in &mut o[h * hd..(h + 1) * hd] {
                        *oo *= inv;
                    }
                }
            }
        });
    out
}

/// Multiply-accumulate count of one attention call: scores plus weighted
/// values, `2 * queries * keys * d`.
pub fn attention_macs(queries: usize, keys: usize, d: usize) -> u64 {
    2 * queries as u64 * keys as u64 * d as u64
}

#[derive(Debug, Clone)]
pub struct ToyDiT {
    pub config: ModelConfig,
    pub channels: usize,
    pub in_proj: Linear,
    layers: Vec<Layer>,
    pub final_norm: Norm,
    pub out_proj: Linear,
}

impl ToyDiT {
    pub fn new(config: ModelConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(invalid("model needs at least one input channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let in_proj = Linear::random(&mut rng, channels, d);
        let layers = (0..config.layers)
            .map(|_| Layer::random(&mut rng, d, d * config.ffn_mult))
            .collect();
        let final_norm = Norm::random(&mut rng, d);
        let out_proj = Linear::random(&mut rng, d, channels);
        Ok(Self {
            config,
            channels,
            in_proj,
            layers,
            final_norm,
            out_proj,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    /// Sinusoidal embedding of the timestep, added to every token.
    pub fn time_embedding(&self, t: f64) -> Vec<f32> {
        let d = self.d_model();
        let half = d / 2;
        let mut e = vec![0.0f32; d];
        for i in 0..half {
            let freq = 10000f64.powf(-(i as f64) / half as f64);
            let a = 1000.0 * t * freq;
            e[2 * i] = a.sin() as f32;
            e[2 * i + 1] = a.cos() as f32;
        }
        e
    }

    pub fn check_input(&self, tokens: &TokenMatrix) -> Result<()> {
        if tokens.cols != self.channels {
            return Err(invalid(format!(
                "tokens have {} features, model expects {}",
                tokens.cols, self.channels
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::Numeric { step: 0, detail: "non-finite model input".into() });
        }
        Ok(())
    }

    /// Input projection plus time embedding.
    pub fn embed(&self, tokens: &TokenMatrix, t: f64) -> TokenMatrix {
        let mut h = self.in_proj.forward(tokens);
        let e = self.time_embedding(t);
        for row in h.data.chunks_exact_mut(self.d_model()) {
            for (a, b) in row.iter_mut().zip(&e) {
                *a += b;
            }
        }
        h
    }

    pub fn head(&self, h: &TokenMatrix) -> TokenMatrix {
        self.out_proj.forward(&self.final_norm.forward(h))
    }

    /// Dense forward pass over every token.
    pub fn full_forward(&self, tokens: &TokenMatrix, t: f64) -> Result<TokenMatrix> {
        if tokens.rows == 0 {
            return Err(invalid("full_forward needs at least one token"));
        }
        self.check_input(tokens)?;
        let mut h = self.embed(tokens, t);
        for layer in &self.layers {
            let qkv = layer.norm_qkv(&h);
            let a = attention(&qkv.q, &[KvSegment::dense(&qkv.k.data, &qkv.v.data)], self.heads());
            h = layer.output(&h, &a);
        }
        let out = self.head(&h);
        if !out.all_finite() {
            return Err(Error::Numeric { step: 0, detail: "non-finite model output".into() });
        }
        Ok(out)
    }
}

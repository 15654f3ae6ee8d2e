//! Distance-biased transformer over flattened query sequences.
//!
//! Row-vector convention throughout: a linear map is `x · W + b` with `W`
//! of shape `(in, out)`. Gradients are hand-derived; every forward pass keeps
//! the activations its backward pass needs.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{self, NamedArray};
use crate::encoding::{encode_graph, AugNode, EncodingConfig, EncodingMode, SequenceInput, Token};
use crate::error::{Error, Result};
use crate::kge::KgeModel;
use crate::query::DnfQuery;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d1: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub encoding: EncodingConfig,
    /// Sampled negatives per training query.
    pub k_neg: usize,
    /// α of the smoothed targets, in `[0, 1)`.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            d1: 768,
            num_heads: 12,
            dropout: 0.1,
            encoding: EncodingConfig::default(),
            k_neg: 512,
            label_smoothing: 0.6,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.num_heads == 0 || !self.d1.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "num_heads ({}) must divide d1 ({})",
                self.num_heads, self.d1
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn num_buckets(&self) -> usize {
        self.encoding.num_buckets()
    }

    fn head_dim(&self) -> usize {
        self.d1 / self.num_heads
    }

    /// Key/value pairs as written to checkpoint manifests.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("num_layers", self.num_layers.to_string()),
            ("d1", self.d1.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("dropout", self.dropout.to_string()),
            ("encoding", self.encoding.mode.to_string()),
            ("clamp", self.encoding.clamp.to_string()),
            ("signed", self.encoding.signed.to_string()),
            ("k_neg", self.k_neg.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_checkpoint(ck: &checkpoint::Checkpoint) -> Result<Self> {
        let cfg = EncoderConfig {
            num_layers: ck.meta_parse("num_layers")?,
            d1: ck.meta_parse("d1")?,
            num_heads: ck.meta_parse("num_heads")?,
            dropout: ck.meta_parse("dropout")?,
            encoding: EncodingConfig {
                mode: ck.meta("encoding")?.parse::<EncodingMode>()?,
                clamp: ck.meta_parse("clamp")?,
                signed: ck.meta_parse("signed")?,
            },
            k_neg: ck.meta_parse("k_neg")?,
            label_smoothing: ck.meta_parse("label_smoothing")?,
            seed: ck.meta_parse("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Named parameter slices with their shapes.
type TensorRefs<'a> = Vec<(String, Vec<usize>, &'a [f64])>;
type TensorMuts<'a> = Vec<(String, &'a mut [f64])>;

fn sl(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn sl1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("positive std");
        Linear {
            w: Array2::from_shape_simple_fn((input, output), || normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `g`; returns `∂L/∂x`.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    fn refs<'a>(&'a self, p: &str, out: &mut TensorRefs<'a>) {
        out.push((format!("{p}.w"), self.w.shape().to_vec(), sl(&self.w)));
        out.push((format!("{p}.b"), self.b.shape().to_vec(), sl1(&self.b)));
    }

    fn muts<'a>(&'a mut self, p: &str, out: &mut TensorMuts<'a>) {
        out.push((format!("{p}.w"), self.w.as_slice_mut().expect("standard layout")));
        out.push((format!("{p}.b"), self.b.as_slice_mut().expect("standard layout")));
    }
}

/// linear → GELU → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

struct MlpCache {
    x: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

impl Mlp {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            l1: Linear::zeros(input, hidden),
            l2: Linear::zeros(hidden, output),
        }
    }

    fn random(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            l1: Linear::random(input, hidden, rng),
            l2: Linear::random(hidden, output, rng),
        }
    }

    fn forward(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let u = self.l1.forward(&x);
        let a = u.mapv(gelu);
        let y = self.l2.forward(&a);
        (y, MlpCache { x, u, a })
    }

    fn backward(&self, c: &MlpCache, dy: &Array2<f64>, g: &mut Mlp) -> Array2<f64> {
        let da = self.l2.backward(&c.a, dy, &mut g.l2);
        let du = da * &c.u.mapv(gelu_grad);
        self.l1.backward(&c.x, &du, &mut g.l1)
    }

    fn refs<'a>(&'a self, p: &str, out: &mut TensorRefs<'a>) {
        self.l1.refs(&format!("{p}.l1"), out);
        self.l2.refs(&format!("{p}.l2"), out);
    }

    fn muts<'a>(&'a mut self, p: &str, out: &mut TensorMuts<'a>) {
        self.l1.muts(&format!("{p}.l1"), out);
        self.l2.muts(&format!("{p}.l2"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize, gamma: f64) -> Self {
        LayerNorm {
            gamma: Array1::from_elem(d, gamma),
            beta: Array1::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.mapv(|v| v * v).sum() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, c: &LnCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dh = dxhat.row(i);
            let xh = c.xhat.row(i);
            let m1 = dh.sum() / d;
            let m2 = (&dh * &xh).sum() / d;
            let row = (&dh - m1 - &(&xh * m2)) * c.inv_std[i];
            dx.row_mut(i).assign(&row);
        }
        dx
    }

    fn refs<'a>(&'a self, p: &str, out: &mut TensorRefs<'a>) {
        out.push((format!("{p}.gamma"), vec![self.gamma.len()], sl1(&self.gamma)));
        out.push((format!("{p}.beta"), vec![self.beta.len()], sl1(&self.beta)));
    }

    fn muts<'a>(&'a mut self, p: &str, out: &mut TensorMuts<'a>) {
        out.push((format!("{p}.gamma"), self.gamma.as_slice_mut().expect("standard layout")));
        out.push((format!("{p}.beta"), self.beta.as_slice_mut().expect("standard layout")));
    }
}

/// One post-LN transformer layer with per-head bucket biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
    /// `num_heads × num_buckets` attention biases.
    pub bias: Array2<f64>,
}

struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    mask1: Option<Array2<f64>>,
    ln1: LnCache,
    ffn: MlpCache,
    mask2: Option<Array2<f64>>,
    ln2: LnCache,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

impl Block {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d1;
        Block {
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln1: LayerNorm::new(d, 0.0),
            ffn: Mlp::zeros(d, d, d),
            ln2: LayerNorm::new(d, 0.0),
            bias: Array2::zeros((cfg.num_heads, cfg.num_buckets())),
        }
    }

    fn random(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d1;
        Block {
            wq: Linear::random(d, d, rng),
            wk: Linear::random(d, d, rng),
            wv: Linear::random(d, d, rng),
            wo: Linear::random(d, d, rng),
            ln1: LayerNorm::new(d, 1.0),
            ffn: Mlp::random(d, d, d, rng),
            ln2: LayerNorm::new(d, 1.0),
            bias: Array2::zeros((cfg.num_heads, cfg.num_buckets())),
        }
    }

    fn forward(
        &self,
        x: Array2<f64>,
        buckets: &Array2<usize>,
        cfg: &EncoderConfig,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, BlockCache) {
        let m = x.nrows();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let masked = cfg.encoding.masked_bucket();
        let q = self.wq.forward(&x);
        let k = self.wk.forward(&x);
        let v = self.wv.forward(&x);
        let mut o = Array2::zeros((m, cfg.d1));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for ((i, j), val) in sc.indexed_iter_mut() {
                let b = buckets[[i, j]];
                *val = if Some(b) == masked {
                    f64::NEG_INFINITY
                } else {
                    *val + self.bias[[h, b]]
                };
            }
            softmax_rows(&mut sc);
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let mut a = self.wo.forward(&o);
        let mask1 = match (cfg.dropout > 0.0, rng.as_deref_mut()) {
            (true, Some(r)) => Some(dropout_mask(a.dim(), cfg.dropout, r)),
            _ => None,
        };
        if let Some(mk) = &mask1 {
            a *= mk;
        }
        let (y, ln1) = self.ln1.forward(&(&x + &a));
        let (mut f, ffn) = self.ffn.forward(y.clone());
        let mask2 = match (cfg.dropout > 0.0, rng) {
            (true, Some(r)) => Some(dropout_mask(f.dim(), cfg.dropout, r)),
            _ => None,
        };
        if let Some(mk) = &mask2 {
            f *= mk;
        }
        let (z, ln2) = self.ln2.forward(&(&y + &f));
        let cache = BlockCache {
            x,
            q,
            k,
            v,
            probs,
            o,
            mask1,
            ln1,
            ffn,
            mask2,
            ln2,
        };
        (z, cache)
    }

    fn backward(
        &self,
        c: &BlockCache,
        dz: &Array2<f64>,
        buckets: &Array2<usize>,
        cfg: &EncoderConfig,
        g: &mut Block,
    ) -> Array2<f64> {
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let masked = cfg.encoding.masked_bucket();

        let dr2 = self.ln2.backward(&c.ln2, dz, &mut g.ln2);
        let mut df = dr2.clone();
        if let Some(mk) = &c.mask2 {
            df *= mk;
        }
        let mut dy = dr2;
        dy += &self.ffn.backward(&c.ffn, &df, &mut g.ffn);
        let dr1 = self.ln1.backward(&c.ln1, &dy, &mut g.ln1);
        let mut da = dr1.clone();
        if let Some(mk) = &c.mask1 {
            da *= mk;
        }
        let mut dx = dr1;
        let d_o = self.wo.backward(&c.o, &da, &mut g.wo);

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..cfg.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(&dp - &row_dot);
            for ((i, j), &val) in ds.indexed_iter() {
                let b = buckets[[i, j]];
                if Some(b) != masked {
                    g.bias[[h, b]] += val;
                }
            }
            dq.slice_mut(cols).assign(&(ds.dot(&c.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&c.q.slice(cols)) * scale));
        }
        dx += &self.wq.backward(&c.x, &dq, &mut g.wq);
        dx += &self.wk.backward(&c.x, &dk, &mut g.wk);
        dx += &self.wv.backward(&c.x, &dv, &mut g.wv);
        dx
    }

    fn refs<'a>(&'a self, p: &str, out: &mut TensorRefs<'a>) {
        self.wq.refs(&format!("{p}.wq"), out);
        self.wk.refs(&format!("{p}.wk"), out);
        self.wv.refs(&format!("{p}.wv"), out);
        self.wo.refs(&format!("{p}.wo"), out);
        self.ln1.refs(&format!("{p}.ln1"), out);
        self.ffn.refs(&format!("{p}.ffn"), out);
        self.ln2.refs(&format!("{p}.ln2"), out);
        out.push((format!("{p}.bias"), self.bias.shape().to_vec(), sl(&self.bias)));
    }

    fn muts<'a>(&'a mut self, p: &str, out: &mut TensorMuts<'a>) {
        self.wq.muts(&format!("{p}.wq"), out);
        self.wk.muts(&format!("{p}.wk"), out);
        self.wv.muts(&format!("{p}.wv"), out);
        self.wo.muts(&format!("{p}.wo"), out);
        self.ln1.muts(&format!("{p}.ln1"), out);
        self.ffn.muts(&format!("{p}.ffn"), out);
        self.ln2.muts(&format!("{p}.ln2"), out);
        out.push((format!("{p}.bias"), self.bias.as_slice_mut().expect("standard layout")));
    }
}

/// Trainable encoder weights. The link predictor's tables are not part of it.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// d0 → d1 projection of frozen entity and relation embeddings.
    pub proj: Mlp,
    /// Negation transform `A`, applied as `h ↦ A h`.
    pub neg: Array2<f64>,
    pub gh: Array1<f64>,
    pub gr: Array1<f64>,
    /// Shared by existential and free variables.
    pub var: Array1<f64>,
    pub blocks: Vec<Block>,
    /// d1 → d0 readout shared by `g_h` and `g_r`.
    pub rev: Mlp,
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig, d0: usize) -> Self {
        let d = cfg.d1;
        EncoderParams {
            proj: Mlp::zeros(d0, d, d),
            neg: Array2::zeros((d, d)),
            gh: Array1::zeros(d),
            gr: Array1::zeros(d),
            var: Array1::zeros(d),
            blocks: (0..cfg.num_layers).map(|_| Block::zeros(cfg)).collect(),
            rev: Mlp::zeros(d, d, d0),
        }
    }

    /// Gradient buffer with the same shapes (layer-norm gains zeroed too).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn init(cfg: &EncoderConfig, d0: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d1;
        let small = Normal::new(0.0, 0.01).expect("positive std");
        let emb = Normal::new(0.0, 1.0).expect("positive std");
        let proj = Mlp::random(d0, d, d, &mut rng);
        let neg = Array2::from_shape_fn((d, d), |(i, j)| {
            f64::from(u8::from(i == j)) + small.sample(&mut rng)
        });
        let gh = Array1::from_shape_simple_fn(d, || emb.sample(&mut rng));
        let gr = Array1::from_shape_simple_fn(d, || emb.sample(&mut rng));
        let var = Array1::from_shape_simple_fn(d, || emb.sample(&mut rng));
        let blocks = (0..cfg.num_layers).map(|_| Block::random(cfg, &mut rng)).collect();
        let rev = Mlp::random(d, d, d0, &mut rng);
        Ok(EncoderParams {
            proj,
            neg,
            gh,
            gr,
            var,
            blocks,
            rev,
        })
    }

    pub fn d0(&self) -> usize {
        self.proj.l1.w.nrows()
    }

    /// Every tensor with its name and shape, in a fixed order.
    pub fn tensors(&self) -> TensorRefs<'_> {
        let mut out = Vec::new();
        self.proj.refs("proj", &mut out);
        out.push(("neg".into(), self.neg.shape().to_vec(), sl(&self.neg)));
        out.push(("gh".into(), vec![self.gh.len()], sl1(&self.gh)));
        out.push(("gr".into(), vec![self.gr.len()], sl1(&self.gr)));
        out.push(("var".into(), vec![self.var.len()], sl1(&self.var)));
        for (l, b) in self.blocks.iter().enumerate() {
            b.refs(&format!("layer{l}"), &mut out);
        }
        self.rev.refs("rev", &mut out);
        out
    }

    /// Same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> TensorMuts<'_> {
        let mut out = Vec::new();
        self.proj.muts("proj", &mut out);
        out.push(("neg".into(), self.neg.as_slice_mut().expect("standard layout")));
        out.push(("gh".into(), self.gh.as_slice_mut().expect("standard layout")));
        out.push(("gr".into(), self.gr.as_slice_mut().expect("standard layout")));
        out.push(("var".into(), self.var.as_slice_mut().expect("standard layout")));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.muts(&format!("layer{l}"), &mut out);
        }
        self.rev.muts("rev", &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for ((_, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Writes a checkpoint bound to the link predictor with hash `kge_hash`.
    pub fn save(&self, dir: &Path, cfg: &EncoderConfig, kge_hash: &str) -> Result<String> {
        let mut meta = vec![
            ("kind".to_string(), "encoder".to_string()),
            ("kge_hash".to_string(), kge_hash.to_string()),
            ("d0".to_string(), self.d0().to_string()),
        ];
        meta.extend(cfg.to_pairs());
        let arrays = self
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedArray {
                name,
                shape,
                data: data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        checkpoint::write(dir, &meta, arrays)
    }

    /// Loads a checkpoint; refuses one trained against another link predictor.
    pub fn load(dir: &Path, kge_hash: &str) -> Result<(Self, EncoderConfig)> {
        let ck = checkpoint::read(dir)?;
        if ck.meta("kind")? != "encoder" {
            return Err(Error::Integrity(format!("{} is not an encoder checkpoint", dir.display())));
        }
        let bound = ck.meta("kge_hash")?;
        if bound != kge_hash {
            return Err(Error::Integrity(format!(
                "encoder was trained against link predictor {bound}, got {kge_hash}"
            )));
        }
        let cfg = EncoderConfig::from_checkpoint(&ck)?;
        let d0: usize = ck.meta_parse("d0")?;
        let mut params = EncoderParams::zeros(&cfg, d0);
        let shapes: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for ((name, dst), (_, shape)) in params.tensors_mut().into_iter().zip(shapes) {
            let a = ck.array(&name, &shape)?;
            for (d, &v) in dst.iter_mut().zip(&a.data) {
                *d = v as f64;
            }
        }
        if ck.arrays.len() != params.tensors().len() {
            return Err(Error::Integrity("checkpoint has unexpected arrays".into()));
        }
        Ok((params, cfg))
    }
}

/// Dense gradients for the link predictor tables (unfrozen ablation only).
#[derive(Clone, Debug, PartialEq)]
pub struct KgeGrad {
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
}

impl KgeGrad {
    pub fn zeros(kge: &KgeModel) -> Self {
        KgeGrad {
            entity: Array2::zeros(kge.entity.raw_dim()),
            relation: Array2::zeros(kge.relation.raw_dim()),
        }
    }
}

/// Feature source of a projected row.
#[derive(Clone, Copy)]
enum Feature {
    Entity(usize),
    Relation(usize),
}

struct EmbedCache {
    /// `(position, feature, negated)` of each projected row.
    rows: Vec<(usize, Feature, bool)>,
    proj: MlpCache,
    projected: Array2<f64>,
    special: Vec<(usize, Token)>,
}

/// Initial token representations `S¹` (m × d1).
pub fn embed_sequence(seq: &SequenceInput, kge: &KgeModel, params: &EncoderParams) -> Result<Array2<f64>> {
    Ok(embed(seq, kge, params)?.0)
}

fn embed(seq: &SequenceInput, kge: &KgeModel, params: &EncoderParams) -> Result<(Array2<f64>, EmbedCache)> {
    if kge.dim() != params.d0() {
        return Err(Error::Shape(format!(
            "link predictor width {} differs from encoder input width {}",
            kge.dim(),
            params.d0()
        )));
    }
    let d1 = params.gh.len();
    let mut rows = Vec::new();
    let mut special = Vec::new();
    for (pos, &tok) in seq.tokens.iter().enumerate() {
        match tok {
            Token::Node(AugNode::Anchor(e)) => {
                if e >= kge.num_entities() {
                    return Err(Error::OutOfRange {
                        what: "entity",
                        id: e,
                        count: kge.num_entities(),
                    });
                }
                rows.push((pos, Feature::Entity(e), false));
            }
            Token::Node(AugNode::Relation { id, negated }) => {
                if id >= kge.num_relations() {
                    return Err(Error::OutOfRange {
                        what: "relation",
                        id,
                        count: kge.num_relations(),
                    });
                }
                rows.push((pos, Feature::Relation(id), negated));
            }
            other => special.push((pos, other)),
        }
    }
    let mut input = Array2::zeros((rows.len(), kge.dim()));
    for (k, &(_, f, _)) in rows.iter().enumerate() {
        let src = match f {
            Feature::Entity(e) => kge.entity.row(e),
            Feature::Relation(r) => kge.relation.row(r),
        };
        input.row_mut(k).assign(&src);
    }
    let (projected, proj) = params.proj.forward(input);
    let mut x = Array2::zeros((seq.len(), d1));
    for (k, &(pos, _, negated)) in rows.iter().enumerate() {
        if negated {
            x.row_mut(pos).assign(&params.neg.dot(&projected.row(k)));
        } else {
            x.row_mut(pos).assign(&projected.row(k));
        }
    }
    for &(pos, tok) in &special {
        let src = match tok {
            Token::Gh => &params.gh,
            Token::Gr => &params.gr,
            _ => &params.var,
        };
        x.row_mut(pos).assign(src);
    }
    Ok((
        x,
        EmbedCache {
            rows,
            proj,
            projected,
            special,
        },
    ))
}

fn embed_backward(
    c: &EmbedCache,
    dx: &Array2<f64>,
    params: &EncoderParams,
    g: &mut EncoderParams,
    kge_grad: Option<&mut KgeGrad>,
) {
    let mut dproj = Array2::zeros(c.projected.raw_dim());
    for (k, &(pos, _, negated)) in c.rows.iter().enumerate() {
        let dy = dx.row(pos);
        if negated {
            // y = A p
            dproj.row_mut(k).assign(&params.neg.t().dot(&dy));
            let outer = dy
                .insert_axis(Axis(1))
                .dot(&c.projected.row(k).insert_axis(Axis(0)));
            g.neg += &outer;
        } else {
            dproj.row_mut(k).assign(&dy);
        }
    }
    let dinput = params.proj.backward(&c.proj, &dproj, &mut g.proj);
    if let Some(kg) = kge_grad {
        for (k, &(_, f, _)) in c.rows.iter().enumerate() {
            match f {
                Feature::Entity(e) => kg.entity.row_mut(e).scaled_add(1.0, &dinput.row(k)),
                Feature::Relation(r) => kg.relation.row_mut(r).scaled_add(1.0, &dinput.row(k)),
            }
        }
    }
    for &(pos, tok) in &c.special {
        let dst = match tok {
            Token::Gh => &mut g.gh,
            Token::Gr => &mut g.gr,
            _ => &mut g.var,
        };
        dst.scaled_add(1.0, &dx.row(pos));
    }
}

/// Everything one conjunct's backward pass needs.
struct ConjunctCache {
    embed: EmbedCache,
    blocks: Vec<BlockCache>,
    rev: MlpCache,
    /// `[g_h'; g_r']` after the readout, 2 × d0.
    out: Array2<f64>,
    q: Array1<f64>,
}

fn forward_conjunct(
    seq: &SequenceInput,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ConjunctCache> {
    if seq.len() < 2 || seq.tokens[0] != Token::Gh || seq.tokens[1] != Token::Gr {
        return Err(Error::Shape("sequence must start with g_h, g_r".into()));
    }
    let (mut x, embed) = embed(seq, kge, params)?;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (z, c) = b.forward(x, &seq.buckets, cfg, rng.as_deref_mut());
        blocks.push(c);
        x = z;
    }
    let (out, rev) = params.rev.forward(x.slice(s![0..2, ..]).to_owned());
    let q = kge.scorer.query_vector(out.row(0), out.row(1));
    Ok(ConjunctCache {
        embed,
        blocks,
        rev,
        out,
        q,
    })
}

#[allow(clippy::too_many_arguments)]
fn backward_conjunct(
    c: &ConjunctCache,
    seq: &SequenceInput,
    dq: ArrayView1<f64>,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    g: &mut EncoderParams,
    kge_grad: Option<&mut KgeGrad>,
) {
    let mut dout = Array2::zeros(c.out.raw_dim());
    {
        let (mut dh, mut dr) = dout.multi_slice_mut((s![0, ..], s![1, ..]));
        kge.scorer
            .query_vector_backward(c.out.row(0), c.out.row(1), dq, dh.view_mut(), dr.view_mut());
    }
    let dtop = params.rev.backward(&c.rev, &dout, &mut g.rev);
    let m = seq.len();
    let mut dx = Array2::zeros((m, cfg.d1));
    dx.slice_mut(s![0..2, ..]).assign(&dtop);
    for (l, b) in params.blocks.iter().enumerate().rev() {
        dx = b.backward(&c.blocks[l], &dx, &seq.buckets, cfg, &mut g.blocks[l]);
    }
    embed_backward(&c.embed, &dx, params, g, kge_grad);
}

/// Final representations of `g_h` and `g_r` (rows 0 and 1 after the last
/// layer), evaluation mode.
pub fn encode(
    seq: &SequenceInput,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (mut x, _) = embed(seq, kge, params)?;
    for b in &params.blocks {
        x = b.forward(x, &seq.buckets, cfg, None).0;
    }
    Ok((x.row(0).to_owned(), x.row(1).to_owned()))
}

/// Scores of every entity for a DNF query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredQuery {
    /// Elementwise maximum over conjuncts.
    pub scores: Array1<f64>,
    pub per_conjunct: Vec<Array1<f64>>,
}

/// The synthetic `(head, relation)` pair of a conjunct, in link predictor
/// space.
pub fn readout(
    seq: &SequenceInput,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let c = forward_conjunct(seq, kge, params, cfg, None)?;
    Ok((c.out.row(0).to_owned(), c.out.row(1).to_owned()))
}

/// Scores pre-encoded conjunct sequences.
pub fn score_sequences(
    seqs: &[SequenceInput],
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<ScoredQuery> {
    let mut per_conjunct = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let c = forward_conjunct(seq, kge, params, cfg, None)?;
        per_conjunct.push(kge.entity.dot(&c.q));
    }
    let mut scores = per_conjunct
        .first()
        .cloned()
        .ok_or_else(|| Error::InvalidGraph("query has no conjuncts".into()))?;
    for s in &per_conjunct[1..] {
        scores.zip_mut_with(s, |a, &b| *a = a.max(b));
    }
    Ok(ScoredQuery {
        scores,
        per_conjunct,
    })
}

/// Encodes each conjunct and scores every entity.
pub fn score_query(
    q: &DnfQuery,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<ScoredQuery> {
    score_sequences(&encode_query(q, cfg)?, kge, params, cfg)
}

/// One flattened sequence per conjunct.
pub fn encode_query(q: &DnfQuery, cfg: &EncoderConfig) -> Result<Vec<SequenceInput>> {
    q.conjuncts.iter().map(|g| encode_graph(g, &cfg.encoding)).collect()
}

/// Targets over `k` classes with the positive first:
/// `(1 − α) + α/k` for the positive, `α/k` for each negative.
pub fn smoothed_labels(k: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("label_smoothing {alpha} outside [0, 1)")));
    }
    let base = alpha / k as f64;
    let mut y = vec![base; k];
    y[0] += 1.0 - alpha;
    Ok(y)
}

/// Cross-entropy of softmax(`logits`) against smoothed labels (positive at
/// index 0). Returns the loss and `∂loss/∂logits`.
pub fn smoothed_cross_entropy(logits: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let y = smoothed_labels(logits.len(), alpha)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + z.ln();
    let loss = logits.iter().zip(&y).map(|(l, t)| t * (lse - l)).sum();
    let grad = logits
        .iter()
        .zip(&y)
        .map(|(l, t)| (l - lse).exp() - t)
        .collect();
    Ok((loss, grad))
}

/// One training example: conjunct sequences and candidate entities with the
/// positive first.
#[derive(Clone, Debug)]
pub struct TrainSample<'a> {
    pub seqs: &'a [SequenceInput],
    pub candidates: Vec<usize>,
    /// Seeds the dropout masks.
    pub dropout_seed: u64,
}

/// Loss of one sample; accumulates `weight ×` its gradients.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_and_grad(
    sample: &TrainSample<'_>,
    kge: &KgeModel,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    train: bool,
    weight: f64,
    g: &mut EncoderParams,
    mut kge_grad: Option<&mut KgeGrad>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample.dropout_seed);
    let caches = sample
        .seqs
        .iter()
        .map(|seq| forward_conjunct(seq, kge, params, cfg, train.then_some(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let k = sample.candidates.len();
    let mut logits = vec![f64::NEG_INFINITY; k];
    let mut owner = vec![0usize; k];
    for (i, &cand) in sample.candidates.iter().enumerate() {
        let e = kge.entity.row(cand);
        for (ci, c) in caches.iter().enumerate() {
            let v = c.q.dot(&e);
            if v > logits[i] {
                logits[i] = v;
                owner[i] = ci;
            }
        }
    }
    let (loss, dlogits) = smoothed_cross_entropy(&logits, cfg.label_smoothing)?;
    let d0 = kge.dim();
    let mut dq = vec![Array1::<f64>::zeros(d0); caches.len()];
    for (i, &cand) in sample.candidates.iter().enumerate() {
        let dz = weight * dlogits[i];
        dq[owner[i]].scaled_add(dz, &kge.entity.row(cand));
        if let Some(kg) = kge_grad.as_deref_mut() {
            kg.entity.row_mut(cand).scaled_add(dz, &caches[owner[i]].q);
        }
    }
    for ((c, seq), dq) in caches.iter().zip(sample.seqs).zip(&dq) {
        backward_conjunct(c, seq, dq.view(), kge, params, cfg, g, kge_grad.as_deref_mut());
    }
    Ok(loss)
}

/// Adam moments for a parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &EncoderParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grad: &EncoderParams) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, _, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Adam over raw tables, for the unfrozen link predictor.
#[derive(Clone, Debug)]
pub struct TableAdam {
    lr: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl TableAdam {
    pub fn new(kge: &KgeModel, lr: f64) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        TableAdam {
            lr,
            m: vec![z(&kge.entity), z(&kge.relation)],
            v: vec![z(&kge.entity), z(&kge.relation)],
            t: 0,
        }
    }

    pub fn step(&mut self, kge: &mut KgeModel, g: &KgeGrad) {
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t);
        let c2 = 1.0 - 0.999f64.powi(self.t);
        let lr = self.lr;
        for (k, (p, g)) in [(&mut kge.entity, &g.entity), (&mut kge.relation, &g.relation)]
            .into_iter()
            .enumerate()
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .for_each(|p, &g, m, v| {
                    *m = 0.9 * *m + 0.1 * g;
                    *v = 0.999 * *v + 0.001 * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                });
        }
    }
}

//! The base codec: a three-stage conv + window-attention autoencoder with a
//! wide bottleneck at latent resolution, a factorized entropy model, and its
//! rate-distortion pretraining loop.
//!
//! Every stage is `conv -> GELU -> attention block -> MLP block`; the stage
//! output is the tap where adaptors attach. Parameter paths are rooted at
//! `base.` so base and adaptor sets can be bound to one session.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionWindow, Session, Var};
use crate::entropy::{EntropyModel, QuantMode, DEFAULT_SUPPORT};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{uniform, variance_scaling, Checkpoint, ParameterSet};
use crate::tensor::{FeatureMap, Tensor};

pub const ENTROPY_PREFIX: &str = "base.entropy.";
const ATTN_INIT: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub num_stages: usize,
    pub channels_per_stage: Vec<usize>,
    pub window_size: usize,
    pub latent_channels: usize,
    /// Width of the residual conv stack around the latent.
    pub bottleneck_width: usize,
    /// Residual convs on each side of the latent.
    pub bottleneck_depth: usize,
    pub mlp_ratio: usize,
    /// Symbol support K of the entropy coder.
    pub support: i32,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            channels_per_stage: vec![8, 12, 16],
            window_size: 4,
            latent_channels: 32,
            bottleneck_width: 64,
            bottleneck_depth: 3,
            mlp_ratio: 2,
            support: DEFAULT_SUPPORT,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages != 3 {
            return Err(Error::config("num_stages", format!("must be 3, got {}", self.num_stages)));
        }
        if self.channels_per_stage.len() != self.num_stages {
            return Err(Error::config(
                "channels_per_stage",
                format!("needs {} entries, got {}", self.num_stages, self.channels_per_stage.len()),
            ));
        }
        if self.channels_per_stage.contains(&0) {
            return Err(Error::config("channels_per_stage", "every width must be > 0"));
        }
        for (field, v) in [
            ("window_size", self.window_size),
            ("latent_channels", self.latent_channels),
            ("bottleneck_width", self.bottleneck_width),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        if !(1..=i16::MAX as i32).contains(&self.support) {
            return Err(Error::config("support", "must be in [1, 32767]"));
        }
        Ok(())
    }

    /// Spatial divisor every input extent must be a multiple of.
    pub fn divisor(&self) -> usize {
        1 << self.num_stages
    }

    /// Channels of decoder stage `i` (stages run coarse to fine).
    pub fn dec_channels(&self, i: usize) -> usize {
        self.channels_per_stage[self.num_stages - 1 - i]
    }

    pub fn enc_channels(&self, i: usize) -> usize {
        self.channels_per_stage[i]
    }

    /// Attention window for an `h x w` stage: the configured size when it
    /// tiles the grid, otherwise the whole grid.
    pub fn window_for(&self, h: usize, w: usize) -> AttentionWindow {
        let win = AttentionWindow::Size(self.window_size);
        if win.geometry(h, w).is_some() {
            win
        } else {
            AttentionWindow::Global
        }
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "image {h}x{w}: height and width must be positive multiples of {d}"
            )));
        }
        Ok(())
    }

    /// `(h, w, c)` of every encoder tap, the latent, and every decoder tap
    /// for an `h x w` input.
    pub fn shape_schedule(&self, h: usize, w: usize) -> ShapeSchedule {
        let n = self.num_stages;
        let enc = (0..n).map(|i| (h >> (i + 1), w >> (i + 1), self.enc_channels(i))).collect();
        let dec = (0..n).map(|i| (h >> (n - i), w >> (n - i), self.dec_channels(i))).collect();
        ShapeSchedule {
            encoder: enc,
            latent: (h >> n, w >> n, self.latent_channels),
            decoder: dec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeSchedule {
    pub encoder: Vec<(usize, usize, usize)>,
    pub latent: (usize, usize, usize),
    pub decoder: Vec<(usize, usize, usize)>,
}

/// Frozen-or-trainable base codec parameters plus the config that shaped them.
#[derive(Clone, Debug)]
pub struct BaseCodec {
    pub config: StageConfig,
    pub params: ParameterSet,
}

fn add_conv(p: &mut ParameterSet, rng: &mut ChaCha8Rng, name: &str, k: usize, cin: usize, cout: usize) {
    p.insert(format!("{name}.w"), variance_scaling(rng, &[k, k, cin, cout], k * k * cin));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_linear(p: &mut ParameterSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, bound: Option<f64>) {
    let w = match bound {
        Some(b) => uniform(rng, &[cin, cout], b),
        None => variance_scaling(rng, &[cin, cout], cin),
    };
    p.insert(format!("{name}.w"), w);
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn add_block(p: &mut ParameterSet, rng: &mut ChaCha8Rng, prefix: &str, c: usize, ratio: usize) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(p, rng, &format!("{prefix}.attn.{proj}"), c, c, Some(ATTN_INIT));
    }
    add_linear(p, rng, &format!("{prefix}.mlp.fc1"), c, c * ratio, None);
    add_linear(p, rng, &format!("{prefix}.mlp.fc2"), c * ratio, c, None);
}

/// Deterministically initializes a base codec; every parameter starts
/// trainable.
pub fn build_base_codec(config: &StageConfig, seed: u64) -> Result<BaseCodec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    let (n, r, bw) = (config.num_stages, config.mlp_ratio, config.bottleneck_width);
    let mut cin = 3;
    for i in 0..n {
        let c = config.enc_channels(i);
        add_conv(&mut p, &mut rng, &format!("base.enc.{i}.down"), 3, cin, c);
        add_block(&mut p, &mut rng, &format!("base.enc.{i}"), c, r);
        cin = c;
    }
    add_conv(&mut p, &mut rng, "base.enc.neck.in", 3, cin, bw);
    for j in 0..config.bottleneck_depth {
        add_conv(&mut p, &mut rng, &format!("base.enc.neck.res{j}"), 3, bw, bw);
    }
    add_conv(&mut p, &mut rng, "base.enc.neck.out", 3, bw, config.latent_channels);

    add_conv(&mut p, &mut rng, "base.dec.neck.in", 3, config.latent_channels, bw);
    for j in 0..config.bottleneck_depth {
        add_conv(&mut p, &mut rng, &format!("base.dec.neck.res{j}"), 3, bw, bw);
    }
    add_conv(&mut p, &mut rng, "base.dec.neck.out", 3, bw, config.dec_channels(0));
    let mut cin = config.dec_channels(0);
    for i in 0..n {
        let c = config.dec_channels(i);
        add_conv(&mut p, &mut rng, &format!("base.dec.{i}.up"), 3, cin, c);
        add_block(&mut p, &mut rng, &format!("base.dec.{i}"), c, r);
        cin = c;
    }
    add_conv(&mut p, &mut rng, "base.dec.out", 3, cin, 3);
    p.insert("base.dec.out.b", Tensor::full(&[3], 0.5));

    let lc = config.latent_channels;
    EntropyModel::new(vec![0.0; lc], vec![0.0; lc], config.support)?.insert_into(&mut p, ENTROPY_PREFIX);
    Ok(BaseCodec { config: config.clone(), params: p })
}

fn conv(s: &mut Session, x: Var, name: &str, stride: usize) -> Var {
    let (w, b) = (s.p(&format!("{name}.w")), s.p(&format!("{name}.b")));
    s.conv2d(x, w, Some(b), stride, 1)
}

fn dense(s: &mut Session, x: Var, name: &str) -> Var {
    let (w, b) = (s.p(&format!("{name}.w")), s.p(&format!("{name}.b")));
    s.linear(x, w, Some(b))
}

/// Residual single-head window attention followed by a residual MLP.
pub fn transformer_block(s: &mut Session, x: Var, prefix: &str, window: AttentionWindow) -> Var {
    let q = dense(s, x, &format!("{prefix}.attn.q"));
    let k = dense(s, x, &format!("{prefix}.attn.k"));
    let v = dense(s, x, &format!("{prefix}.attn.v"));
    let a = s.attention(q, k, v, window);
    let o = dense(s, a, &format!("{prefix}.attn.o"));
    let x = s.add(x, o);
    let h = dense(s, x, &format!("{prefix}.mlp.fc1"));
    let h = s.gelu(h);
    let h = dense(s, h, &format!("{prefix}.mlp.fc2"));
    s.add(x, h)
}

fn residual_stack(s: &mut Session, x: Var, prefix: &str, depth: usize) -> Var {
    let mut h = conv(s, x, &format!("{prefix}.in"), 1);
    for j in 0..depth {
        let a = s.gelu(h);
        let r = conv(s, a, &format!("{prefix}.res{j}"), 1);
        h = s.add(h, r);
    }
    let a = s.gelu(h);
    conv(s, a, &format!("{prefix}.out"), 1)
}

fn window_of(s: &Session, cfg: &StageConfig, x: Var) -> AttentionWindow {
    let (_, h, w, _) = s.value(x).nhwc();
    cfg.window_for(h, w)
}

/// Encoder stage `i`: stride-2 conv, GELU, transformer block.
pub fn encode_stage(s: &mut Session, cfg: &StageConfig, x: Var, i: usize) -> Var {
    let h = conv(s, x, &format!("base.enc.{i}.down"), 2);
    let h = s.gelu(h);
    let win = window_of(s, cfg, h);
    transformer_block(s, h, &format!("base.enc.{i}"), win)
}

/// Last encoder tap to continuous latent `y`.
pub fn encode_latent(s: &mut Session, cfg: &StageConfig, tap: Var) -> Var {
    residual_stack(s, tap, "base.enc.neck", cfg.bottleneck_depth)
}

/// Quantized latent to the input of the first decoder stage.
pub fn decode_entry(s: &mut Session, cfg: &StageConfig, y: Var) -> Var {
    residual_stack(s, y, "base.dec.neck", cfg.bottleneck_depth)
}

/// Decoder stage `i`; stages after the first upsample by two.
pub fn decode_stage(s: &mut Session, cfg: &StageConfig, x: Var, i: usize) -> Var {
    let x = if i > 0 { s.upsample_nearest2(x) } else { x };
    let h = conv(s, x, &format!("base.dec.{i}.up"), 1);
    let h = s.gelu(h);
    let win = window_of(s, cfg, h);
    transformer_block(s, h, &format!("base.dec.{i}"), win)
}

/// Final 2x upsample to RGB, clamped to `[0, 1]`.
pub fn decode_output(s: &mut Session, x: Var) -> Var {
    let x = s.upsample_nearest2(x);
    let h = conv(s, x, "base.dec.out", 1);
    s.clamp01(h)
}

/// Rate in bits of `y` under the entropy parameters at `prefix`.
pub fn rate_bits_graph(s: &mut Session, y: Var, prefix: &str) -> Var {
    let mu = s.p(&format!("{prefix}means"));
    let ls = s.p(&format!("{prefix}log_scales"));
    s.rate_bits(y, mu, ls)
}

/// `y = g_a(x)` on a batch; returns the latent and encoder taps.
pub fn analysis_graph(s: &mut Session, cfg: &StageConfig, x: Var) -> (Var, Vec<Var>) {
    let mut taps = Vec::with_capacity(cfg.num_stages);
    let mut h = x;
    for i in 0..cfg.num_stages {
        h = encode_stage(s, cfg, h, i);
        taps.push(h);
    }
    (encode_latent(s, cfg, h), taps)
}

/// `x̂ = g_s(ŷ)` on a batch; returns the reconstruction and decoder taps.
pub fn synthesis_graph(s: &mut Session, cfg: &StageConfig, y: Var) -> (Var, Vec<Var>) {
    let mut taps = Vec::with_capacity(cfg.num_stages);
    let mut h = decode_entry(s, cfg, y);
    for i in 0..cfg.num_stages {
        h = decode_stage(s, cfg, h, i);
        taps.push(h);
    }
    (decode_output(s, h), taps)
}

fn unbatch(t: &Tensor, scale_index: usize) -> FeatureMap {
    let (_, h, w, c) = t.nhwc();
    FeatureMap::unchecked(t.clone().reshape(&[h, w, c]), scale_index)
}

impl BaseCodec {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn entropy_model(&self) -> Result<EntropyModel> {
        EntropyModel::from_params(&self.params, ENTROPY_PREFIX, self.config.support)
    }

    /// Encoder on one image. Taps carry `scale_index = stage + 1`.
    pub fn analysis(&self, x: &FeatureMap) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {} channels", x.channels())));
        }
        self.config.check_image(x.height(), x.width())?;
        let mut s = Session::new(&[&self.params], false);
        let xv = s.constant(x.to_batch());
        let (y, taps) = analysis_graph(&mut s, &self.config, xv);
        let taps = taps.iter().enumerate().map(|(i, &t)| unbatch(s.value(t), i + 1)).collect();
        Ok((unbatch(s.value(y), self.config.num_stages), taps))
    }

    /// Decoder on one latent. Decoder taps carry the scale index of the
    /// encoder stage at the same resolution.
    pub fn synthesis(&self, latent: &FeatureMap) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        if latent.channels() != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, codec expects {}",
                latent.channels(),
                self.config.latent_channels
            )));
        }
        let mut s = Session::new(&[&self.params], false);
        let yv = s.constant(latent.to_batch());
        let (x, taps) = synthesis_graph(&mut s, &self.config, yv);
        let n = self.config.num_stages;
        let taps = taps.iter().enumerate().map(|(i, &t)| unbatch(s.value(t), n - i)).collect();
        Ok((unbatch(s.value(x), 0), taps))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "base".into(),
            meta: serde_json::json!({ "config": self.config }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != "base" {
            return Err(Error::Checkpoint(format!("expected a base checkpoint, got `{}`", ck.kind)));
        }
        let config: StageConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad codec config: {e}")))?;
        config.validate()?;
        let expected = build_base_codec(&config, 0)?.params;
        for (name, t) in expected.iter() {
            match ck.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { config, params: ck.params })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    /// Distortion weight of the rate-distortion objective.
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    /// Whether the latent is quantized during training; off trains a plain
    /// autoencoder.
    pub quantize: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            decay_steps: Vec::new(),
            decay_factor: 0.1,
            seed: 0,
            quantize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

/// One rate-distortion evaluation on a batch: `(loss, bpp, mse)` vars.
///
/// The rate sees the latent plus uniform noise; the decoder sees the rounded
/// latent with a straight-through gradient.
pub fn rd_loss_graph(
    s: &mut Session,
    cfg: &StageConfig,
    x: Var,
    lambda: f64,
    quantize: bool,
    rng: &mut ChaCha8Rng,
) -> (Var, Var, Var) {
    let (b, h, w, _) = s.value(x).nhwc();
    let (y, _) = analysis_graph(s, cfg, x);
    let (y_rate, y_dec) = if quantize {
        (s.quantize(y, QuantMode::Train, rng), s.quantize(y, QuantMode::Eval, rng))
    } else {
        (y, y)
    };
    let bits = rate_bits_graph(s, y_rate, ENTROPY_PREFIX);
    let bpp = s.scale(bits, 1.0 / (b * h * w) as f64);
    let (xh, _) = synthesis_graph(s, cfg, y_dec);
    let mse = s.mse(xh, x);
    let d = s.scale(mse, lambda);
    let loss = s.add(bpp, d);
    (loss, bpp, mse)
}

/// Deterministic shuffled mini-batches over `n` items.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch.min(n).max(1),
            rng,
        }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Gathers items of an `[N, ...]` tensor into a new batch.
pub fn gather_batch(data: &Tensor, idx: &[usize]) -> Tensor {
    let per = data.len() / data.shape()[0];
    let mut out = Vec::with_capacity(per * idx.len());
    for &i in idx {
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, out)
}

/// Minimizes `bpp + λ·MSE` over `images` (`[N, H, W, 3]` in `[0, 1]`).
pub fn pretrain_base(codec: &mut BaseCodec, images: &Tensor, opts: &PretrainOptions) -> Result<Vec<PretrainRecord>> {
    if !(opts.lambda > 0.0 && opts.lambda.is_finite()) {
        return Err(Error::config("lambda", "must be > 0"));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::config("lr", "must be > 0"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size", "must be > 0"));
    }
    let (n, h, w, c) = images.nhwc();
    if c != 3 || n == 0 {
        return Err(Error::Shape(format!("expected [N, H, W, 3] images, got {:?}", images.shape())));
    }
    codec.config.check_image(h, w)?;
    let mut history = Vec::with_capacity(opts.steps);
    let mut batcher = Batcher::new(n, opts.batch_size, opts.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut adam = Adam::new(opts.lr);
    for step in 0..opts.steps {
        adam.lr = opts.lr * opts.decay_factor.powi(opts.decay_steps.iter().filter(|&&d| step >= d).count() as i32);
        let batch = gather_batch(images, &batcher.next_indices());
        let (grads, rec) = {
            let mut s = Session::new(&[&codec.params], true);
            let x = s.constant(batch);
            let (loss, bpp, mse) = rd_loss_graph(&mut s, &codec.config, x, opts.lambda, opts.quantize, &mut noise);
            let rec = PretrainRecord {
                step,
                lr: adam.lr,
                loss: s.value(loss).item(),
                bpp: s.value(bpp).item(),
                mse: s.value(mse).item(),
            };
            if !rec.loss.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("loss {} (bpp {}, mse {})", rec.loss, rec.bpp, rec.mse),
                });
            }
            (s.param_grads(loss), rec)
        };
        adam.step(&mut codec.params, &grads);
        log::debug!("pretrain step {step}: loss {:.5} bpp {:.4} mse {:.6}", rec.loss, rec.bpp, rec.mse);
        history.push(rec);
    }
    Ok(history)
}

/// Rate-distortion loss of the codec on `images` in evaluation mode
/// (rounded latent, no noise).
pub fn evaluate_rd(codec: &BaseCodec, images: &Tensor, lambda: f64) -> (f64, f64, f64) {
    let mut s = Session::new(&[&codec.params], false);
    let x = s.constant(images.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, h, w, _) = images.nhwc();
    let (y, _) = analysis_graph(&mut s, &codec.config, x);
    let yq = s.quantize(y, QuantMode::Eval, &mut rng);
    let bits = rate_bits_graph(&mut s, yq, ENTROPY_PREFIX);
    let bpp = s.value(bits).item() / (b * h * w) as f64;
    let (xh, _) = synthesis_graph(&mut s, &codec.config, yq);
    let mse = s.mse(xh, x);
    let mse = s.value(mse).item();
    (bpp + lambda * mse, bpp, mse)
}

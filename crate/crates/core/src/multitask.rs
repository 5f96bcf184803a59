//! The adapted multi-task codec: a frozen base codec with task-agnostic
//! adaptors on the encoder, per-task adaptors on every decoder stage joined
//! by task aggregation, per-task multi-scale fusion and decode heads, and
//! frozen downstream predictors consuming the per-task images.
//!
//! The main decoder path carries the aggregated shared feature from stage to
//! stage and ends in the human-perception reconstruction. Each task image is
//! that reconstruction plus a head residual computed from the task's fused
//! features.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{FeAdaptor, Msf, Tam};
use crate::autograd::{AttentionWindow, Session, Var};
use crate::codec::{
    decode_entry, decode_output, decode_stage, encode_latent, encode_stage, rate_bits_graph, BaseCodec,
    ENTROPY_PREFIX,
};
use crate::entropy::{decode_with_model, encode_with_model, Bitstream, EntropyModel, LatentCode, QuantMode};
use crate::error::{Error, Result};
use crate::params::{variance_scaling, Checkpoint, ParameterSet};
use crate::synth::PredictorBank;
use crate::task::{canonical_name, TaskSpec};
use crate::tensor::{FeatureMap, Tensor};

pub const ADAPT_PREFIX: &str = "adapt";
pub const ADAPT_ENTROPY_PREFIX: &str = "adapt.entropy.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Largest nominal grid side of the spectral masks.
    pub mask_size: usize,
    pub tam_min_hidden: usize,
    pub msf_dim: usize,
    /// Window side for multi-scale fusion; 0 attends globally.
    pub msf_window: usize,
    pub head_hidden: usize,
    /// Whether the entropy model is fine-tuned along with the adaptors.
    pub train_entropy: bool,
    /// Skips task aggregation; every path keeps its own features.
    pub tam_bypass: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mask_size: 8,
            tam_min_hidden: 8,
            msf_dim: 8,
            msf_window: 0,
            head_hidden: 8,
            train_entropy: true,
            tam_bypass: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("adapt.mask_size", self.mask_size),
            ("adapt.msf_dim", self.msf_dim),
            ("adapt.head_hidden", self.head_hidden),
            ("adapt.tam_min_hidden", self.tam_min_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
    pub base: usize,
    pub adaptor: usize,
}

/// Graph outputs of one decode.
pub struct DecodeVars {
    pub human: Var,
    /// `(task index, image)` for every requested task.
    pub task_images: Vec<(usize, Var)>,
    /// `(task index, predictor output)` for every requested task.
    pub predictions: Vec<(usize, Var)>,
}

/// Decoded batch for a task subset.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub human: Tensor,
    pub task_images: BTreeMap<String, Tensor>,
    pub predictions: BTreeMap<String, Tensor>,
}

/// Quantized latents of a batch and their estimated rate.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, h, w, C]` integer-valued.
    pub latent: Tensor,
    pub bits: f64,
    pub bpp: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptedCodec {
    pub base: BaseCodec,
    pub predictors: PredictorBank,
    pub tasks: Vec<TaskSpec>,
    pub config: AdaptConfig,
    /// Adaptor parameters under `adapt.`.
    pub params: ParameterSet,
    enc_fe: Vec<FeAdaptor>,
    /// `[task][stage]`
    dec_fe: Vec<Vec<FeAdaptor>>,
    tams: Vec<Tam>,
    msfs: Vec<Msf>,
}

#[derive(Serialize, Deserialize)]
struct AdaptMeta {
    base_hash: String,
    predictors_hash: String,
    tasks: Vec<TaskSpec>,
    config: AdaptConfig,
}

fn mask_dims(grid: usize, cap: usize) -> usize {
    grid.min(cap).max(1)
}

impl AdaptedCodec {
    /// Builds identity-initialized adaptors around a base codec. Base and
    /// predictor parameters are frozen.
    pub fn new(base: BaseCodec, predictors: PredictorBank, tasks: &[TaskSpec], config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::config("tasks", format!("task `{}` listed twice", t.name)));
            }
            let p = predictors.spec(&t.name)?;
            if p.out_channels != t.out_channels {
                return Err(Error::config(
                    format!("tasks.{}.out_channels", t.name),
                    format!("predictor emits {} channels", p.out_channels),
                ));
            }
        }
        let mut base = base;
        base.params.freeze_all();
        let mut predictors = predictors;
        predictors.params.freeze_all();

        let cfg = &base.config;
        let n = cfg.num_stages;
        // Nominal grids assume the smallest image the codec accepts scaled to 64.
        let grid = |stage_from_full: usize| 64usize >> stage_from_full;
        let fe = |prefix: String, c: usize, side: usize| {
            let m = mask_dims(side, config.mask_size);
            FeAdaptor::new(prefix, c, m, m)
        };
        let enc_fe: Vec<FeAdaptor> = (0..n)
            .map(|i| fe(format!("{ADAPT_PREFIX}.enc.{i}"), cfg.enc_channels(i), grid(i + 1)))
            .collect();
        let dec_fe: Vec<Vec<FeAdaptor>> = tasks
            .iter()
            .map(|t| {
                (0..n)
                    .map(|i| fe(format!("{ADAPT_PREFIX}.dec.{}.{i}", t.name), cfg.dec_channels(i), grid(n - i)))
                    .collect()
            })
            .collect();
        let tams: Vec<Tam> = (0..n)
            .map(|i| Tam::new(format!("{ADAPT_PREFIX}.tam.{i}"), tasks.len(), cfg.dec_channels(i), config.tam_min_hidden))
            .collect();
        let window = match config.msf_window {
            0 => AttentionWindow::Global,
            w => AttentionWindow::Size(w),
        };
        let dec_ch: Vec<usize> = (0..n).map(|i| cfg.dec_channels(i)).collect();
        let msfs = tasks
            .iter()
            .map(|t| Msf::new(format!("{ADAPT_PREFIX}.msf.{}", t.name), &dec_ch, config.msf_dim, window))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        for a in enc_fe.iter().chain(dec_fe.iter().flatten()) {
            a.init(&mut params, &mut rng);
        }
        for t in &tams {
            t.init(&mut params, &mut rng);
        }
        let fine = dec_ch[n - 1];
        for (t, m) in tasks.iter().zip(&msfs) {
            m.init(&mut params, &mut rng);
            let h = config.head_hidden;
            let p = |k: &str| format!("{ADAPT_PREFIX}.head.{}.{k}", t.name);
            params.insert(p("c1.w"), variance_scaling(&mut rng, &[3, 3, fine, h], 9 * fine));
            params.insert(p("c1.b"), Tensor::zeros(&[h]));
            params.insert(p("c2.w"), Tensor::zeros(&[3, 3, h, 3]));
            params.insert(p("c2.b"), Tensor::zeros(&[3]));
        }
        if config.train_entropy {
            base.entropy_model()?.insert_into(&mut params, ADAPT_ENTROPY_PREFIX);
        }
        Ok(Self {
            base,
            predictors,
            tasks: tasks.to_vec(),
            config,
            params,
            enc_fe,
            dec_fe,
            tams,
            msfs,
        })
    }

    pub fn entropy_prefix(&self) -> &'static str {
        if self.config.train_entropy {
            ADAPT_ENTROPY_PREFIX
        } else {
            ENTROPY_PREFIX
        }
    }

    pub fn entropy_model(&self) -> Result<EntropyModel> {
        let set = if self.config.train_entropy { &self.params } else { &self.base.params };
        EntropyModel::from_params(set, self.entropy_prefix(), self.base.config.support)
    }

    pub fn session(&self, train: bool) -> Session<'_> {
        Session::new(&[&self.base.params, &self.predictors.params, &self.params], train)
    }

    /// Task index by name or alias.
    pub fn task_index(&self, name: &str) -> Result<usize> {
        let canon = canonical_name(name).unwrap_or_else(|_| name.to_string());
        self.tasks
            .iter()
            .position(|t| t.name == canon)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    fn resolve(&self, names: &[&str]) -> Result<Vec<usize>> {
        if names.is_empty() {
            return Err(Error::config("tasks", "task subset must not be empty"));
        }
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            let i = self.task_index(n)?;
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        Ok(idx)
    }

    /// Continuous latent of `x` through the adapted encoder.
    pub fn encode_graph(&self, s: &mut Session, x: Var) -> Var {
        let cfg = &self.base.config;
        let mut h = x;
        for (i, fe) in self.enc_fe.iter().enumerate() {
            h = encode_stage(s, cfg, h, i);
            h = fe.forward(s, h);
        }
        encode_latent(s, cfg, h)
    }

    pub fn rate_graph(&self, s: &mut Session, y: Var) -> Var {
        rate_bits_graph(s, y, self.entropy_prefix())
    }

    /// Main path plus the requested task paths. Aggregation always runs over
    /// the full roster, so a subset never changes any computed output.
    pub fn decode_graph(&self, s: &mut Session, y: Var, tasks: &[usize]) -> DecodeVars {
        let cfg = &self.base.config;
        let mut h = decode_entry(s, cfg, y);
        let mut refined: Vec<Vec<Var>> = vec![Vec::with_capacity(cfg.num_stages); self.tasks.len()];
        for (i, tam) in self.tams.iter().enumerate() {
            let b = decode_stage(s, cfg, h, i);
            let feats: Vec<Var> = self.dec_fe.iter().map(|path| path[i].forward(s, b)).collect();
            let out = tam.forward(s, &feats, self.config.tam_bypass);
            h = out.shared.unwrap_or(b);
            for (k, r) in out.refined.into_iter().enumerate() {
                refined[k].push(r);
            }
        }
        let human = decode_output(s, h);
        let (_, ih, iw, _) = s.value(human).nhwc();
        let mut task_images = Vec::with_capacity(tasks.len());
        let mut predictions = Vec::with_capacity(tasks.len());
        for &k in tasks {
            let f = &refined[k];
            let fused = self.msfs[k].forward(s, f[0], f[1], f[2]);
            let name = &self.tasks[k].name;
            let p = |leaf: &str| format!("{ADAPT_PREFIX}.head.{name}.{leaf}");
            let (w1, b1) = (s.p(&p("c1.w")), s.p(&p("c1.b")));
            let r = s.conv2d(fused, w1, Some(b1), 1, 1);
            let r = s.gelu(r);
            let (w2, b2) = (s.p(&p("c2.w")), s.p(&p("c2.b")));
            let r = s.conv2d(r, w2, Some(b2), 1, 1);
            let r = s.resize_bilinear(r, ih, iw);
            let img = s.add(human, r);
            let pred = self.predictors.forward(s, name, img);
            task_images.push((k, img));
            predictions.push((k, pred));
        }
        DecodeVars {
            human,
            task_images,
            predictions,
        }
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        if images.shape().len() != 4 || images.channels() != 3 {
            return Err(Error::Shape(format!("expected [N, H, W, 3] images, got {:?}", images.shape())));
        }
        let (_, h, w, _) = images.nhwc();
        self.base.config.check_image(h, w)
    }

    /// Quantized latents of a batch and their estimated bits.
    pub fn encode(&self, images: &Tensor) -> Result<Encoded> {
        self.check_images(images)?;
        let (b, h, w, _) = images.nhwc();
        let mut s = self.session(false);
        let x = s.constant(images.clone());
        let y = self.encode_graph(&mut s, x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let yq = s.quantize(y, QuantMode::Eval, &mut rng);
        let bits = self.rate_graph(&mut s, yq);
        let bits = s.value(bits).item();
        Ok(Encoded {
            latent: s.value(yq).clone(),
            bits,
            bpp: bits / (b * h * w) as f64,
        })
    }

    /// Decodes quantized latents for a task subset.
    pub fn decode_multitask(&self, latent: &Tensor, tasks: &[&str]) -> Result<Decoded> {
        let idx = self.resolve(tasks)?;
        let lc = self.base.config.latent_channels;
        if latent.shape().len() != 4 || latent.channels() != lc {
            return Err(Error::Shape(format!("expected [N, h, w, {lc}] latents, got {:?}", latent.shape())));
        }
        let mut s = self.session(false);
        let y = s.constant(latent.clone());
        let out = self.decode_graph(&mut s, y, &idx);
        let name = |k: usize| self.tasks[k].name.clone();
        Ok(Decoded {
            human: s.value(out.human).clone(),
            task_images: out.task_images.iter().map(|&(k, v)| (name(k), s.value(v).clone())).collect(),
            predictions: out.predictions.iter().map(|&(k, v)| (name(k), s.value(v).clone())).collect(),
        })
    }

    /// Entropy-codes one image into a bitstream.
    pub fn compress(&self, image: &FeatureMap) -> Result<Bitstream> {
        let enc = self.encode(&image.to_batch())?;
        let (_, h, w, c) = enc.latent.nhwc();
        let model = self.entropy_model()?;
        let fm = FeatureMap::new(enc.latent.reshape(&[h, w, c]), self.base.config.num_stages)?;
        let (bs, clamped) = encode_with_model(&LatentCode::from_latent(&fm, &model), &model)?;
        if clamped > 0 {
            log::warn!("{clamped} latent symbols clamped to the coder support");
        }
        Ok(bs)
    }

    /// Decodes a bitstream for a task subset.
    pub fn decompress(&self, bs: &Bitstream, tasks: &[&str]) -> Result<Decoded> {
        let model = self.entropy_model()?;
        let code = decode_with_model(bs, &model)?;
        let latent = code.to_feature_map().to_batch();
        self.decode_multitask(&latent, tasks)
    }

    pub fn adaptor_count(&self) -> usize {
        self.params.count()
    }

    /// Parameter totals over base and adaptors. Downstream predictors are
    /// not part of the codec and are excluded.
    pub fn trainable_report(&self) -> TrainableReport {
        let base = self.base.params.count();
        let adaptor = self.params.count();
        let trainable = self.base.params.trainable_count() + self.params.trainable_count();
        let total = base + adaptor;
        TrainableReport {
            total,
            trainable,
            ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
            base,
            adaptor,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = AdaptMeta {
            base_hash: self.base.params.digest(),
            predictors_hash: self.predictors.params.digest(),
            tasks: self.tasks.clone(),
            config: self.config.clone(),
        };
        Checkpoint {
            kind: "adapted".into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            params: self.params.clone(),
        }
    }

    /// Rebuilds an adapted codec around `base` and `predictors`; refuses a
    /// base or predictor set other than the one it was trained against.
    pub fn from_checkpoint(ck: Checkpoint, base: BaseCodec, predictors: PredictorBank) -> Result<Self> {
        if ck.kind != "adapted" {
            return Err(Error::Checkpoint(format!("expected an adapted checkpoint, got `{}`", ck.kind)));
        }
        let meta: AdaptMeta =
            serde_json::from_value(ck.meta).map_err(|e| Error::Checkpoint(format!("bad adaptation metadata: {e}")))?;
        if meta.base_hash != base.params.digest() {
            return Err(Error::Checkpoint(format!(
                "base checkpoint hash {} does not match the adapted checkpoint's {}",
                base.params.digest(),
                meta.base_hash
            )));
        }
        if meta.predictors_hash != predictors.params.digest() {
            return Err(Error::Checkpoint("predictor checkpoint does not match the adapted checkpoint".into()));
        }
        let mut codec = Self::new(base, predictors, &meta.tasks, meta.config)?;
        for (name, t) in codec.params.iter() {
            match ck.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("adaptor parameter `{name}` missing or misshapen"))),
            }
        }
        if ck.params.len() != codec.params.len() {
            return Err(Error::Checkpoint("adapted checkpoint has unexpected parameters".into()));
        }
        codec.params = ck.params;
        Ok(codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_base_codec, StageConfig};
    use rand::Rng;

    pub(crate) fn roster() -> Vec<TaskSpec> {
        ["segmentation", "parsing", "saliency", "normals"]
            .iter()
            .map(|n| TaskSpec::named(n, 5, 3).unwrap())
            .collect()
    }

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, size, size, 3], (0..n * size * size * 3).map(|_| rng.gen::<f64>()).collect())
    }

    fn codec(cfg: AdaptConfig) -> AdaptedCodec {
        let base = build_base_codec(&StageConfig::default(), 1).unwrap();
        let bank = PredictorBank::new(&roster(), 8, 2).unwrap();
        AdaptedCodec::new(base, bank, &roster(), cfg).unwrap()
    }

    /// Perturbs every adaptor parameter so no block is the identity.
    fn perturb(c: &mut AdaptedCodec) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let names: Vec<String> = c.params.names().cloned().collect();
        for n in names {
            for v in c.params.get_mut(&n).unwrap().data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }

    #[test]
    fn identity_at_init() {
        let c = codec(AdaptConfig::default());
        let x = images(2, 32, 3);
        let enc = c.encode(&x).unwrap();
        let dec = c.decode_multitask(&enc.latent, &["segmentation", "normals"]).unwrap();

        let mut s = Session::new(&[&c.base.params], false);
        let xv = s.constant(x.clone());
        let (y, _) = crate::codec::analysis_graph(&mut s, &c.base.config, xv);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let yq = s.quantize(y, QuantMode::Eval, &mut rng);
        let bits = rate_bits_graph(&mut s, yq, ENTROPY_PREFIX);
        let (xh, _) = crate::codec::synthesis_graph(&mut s, &c.base.config, yq);
        assert_eq!(s.value(yq), &enc.latent);
        assert!((s.value(bits).item() - enc.bits).abs() <= 1e-6 * enc.bits);
        assert!(s.value(xh).max_abs_diff(&dec.human) < 1e-6);
        for img in dec.task_images.values() {
            assert!(img.max_abs_diff(&dec.human) < 1e-12);
        }
        assert_eq!(dec.predictions["segmentation"].shape(), &[2, 32, 32, 5]);
        assert!((enc.bpp - enc.bits / (2.0 * 32.0 * 32.0)).abs() < 1e-12);
    }

    #[test]
    fn subsets_do_not_change_outputs() {
        let mut c = codec(AdaptConfig::default());
        perturb(&mut c);
        let x = images(1, 32, 4);
        let enc = c.encode(&x).unwrap();
        let all = c.decode_multitask(&enc.latent, &["segmentation", "parsing", "saliency", "normals"]).unwrap();
        let one = c.decode_multitask(&enc.latent, &["normals"]).unwrap();
        assert_eq!(all.human, one.human);
        assert_eq!(all.predictions["normals"], one.predictions["normals"]);
        assert_eq!(one.predictions.len(), 1);
        assert!(matches!(c.decode_multitask(&enc.latent, &["depth"]), Err(Error::UnknownTask(_))));
        assert!(c.decode_multitask(&enc.latent, &[]).is_err());
    }

    #[test]
    fn single_bitstream_regardless_of_subset() {
        let mut c = codec(AdaptConfig::default());
        perturb(&mut c);
        let x = images(1, 32, 5);
        let img = crate::adaptation::unbatch(&x, 0);
        let a = c.compress(&img).unwrap().to_bytes();
        let b = c.compress(&img).unwrap().to_bytes();
        assert_eq!(a, b);
        let bs = Bitstream::from_bytes(&a).unwrap();
        let seg = c.decompress(&bs, &["seg"]).unwrap();
        let all = c.decompress(&bs, &["seg", "parsing", "sal", "normals"]).unwrap();
        assert_eq!(seg.predictions["segmentation"], all.predictions["segmentation"]);
        let enc = c.encode(&x).unwrap();
        let direct = c.decode_multitask(&enc.latent, &["seg"]).unwrap();
        assert_eq!(direct.human, seg.human);
    }

    #[test]
    fn default_trainable_ratio() {
        let c = codec(AdaptConfig::default());
        let r = c.trainable_report();
        assert_eq!(r.trainable, r.adaptor);
        assert!(r.ratio < 0.10, "{r:?}");
        assert!(r.ratio > 0.0);
        let mut frozen = c.clone();
        frozen.params.freeze_all();
        assert_eq!(frozen.trainable_report().ratio, 0.0);
        let mut open = c.clone();
        open.base.params.unfreeze_all();
        assert_eq!(open.trainable_report().ratio, 1.0);
    }

    #[test]
    fn adaptor_count_matches_blocks() {
        let c = codec(AdaptConfig::default());
        let counted: usize = c.enc_fe.iter().chain(c.dec_fe.iter().flatten()).map(|a| a.param_count()).sum::<usize>()
            + c.tams.iter().map(|t| t.param_count()).sum::<usize>()
            + c.msfs.iter().map(|m| m.param_count()).sum::<usize>()
            + 4 * (9 * 8 * 8 + 8 + 9 * 8 * 3 + 3)
            + 2 * c.base.config.latent_channels;
        assert_eq!(c.params.count(), counted);
    }

    #[test]
    fn gradients_reach_only_adaptors() {
        let mut c = codec(AdaptConfig::default());
        perturb(&mut c);
        let x = images(1, 32, 6);
        let mut s = c.session(true);
        let xv = s.constant(x);
        let y = c.encode_graph(&mut s, xv);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let yq = s.quantize(y, QuantMode::Eval, &mut rng);
        let out = c.decode_graph(&mut s, yq, &[0]);
        let loss = s.mean(out.predictions[0].1);
        let grads = s.param_grads(loss);
        assert!(!grads.is_empty());
        assert!(grads.keys().all(|k| k.starts_with("adapt.")));
        // The seg head is used; the untouched normals head is not.
        assert!(grads.contains_key("adapt.head.segmentation.c2.w"));
        assert!(!grads.keys().any(|k| k.starts_with("adapt.head.normals")));
    }

    #[test]
    fn checkpoint_guards_base_hash() {
        let mut c = codec(AdaptConfig::default());
        perturb(&mut c);
        let ck = Checkpoint::from_bytes(&c.to_checkpoint().to_bytes()).unwrap();
        let back = AdaptedCodec::from_checkpoint(ck.clone(), c.base.clone(), c.predictors.clone()).unwrap();
        assert_eq!(back.params.digest(), c.params.digest());
        let other = build_base_codec(&StageConfig::default(), 99).unwrap();
        let err = AdaptedCodec::from_checkpoint(ck, other, c.predictors.clone()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn single_task_roster() {
        let base = build_base_codec(&StageConfig::default(), 1).unwrap();
        let bank = PredictorBank::new(&roster(), 8, 2).unwrap();
        let multi = codec(AdaptConfig::default());
        let single = AdaptedCodec::new(base, bank, &roster()[..1], AdaptConfig::default()).unwrap();
        let per_task = multi.params.count() as f64 / 4.0;
        let ratio = single.params.count() as f64 / per_task;
        assert!((0.8..1.2).contains(&ratio), "single {} vs per-task {per_task}", single.params.count());
    }
}

//! Deterministic train/validation splits of synthetic scenes with an optional
//! on-disk cache.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, Scene};
use crate::error::{Error, Result};
use crate::task::LabelSource;
use crate::tensor::Tensor;

const CACHE_MAGIC: &[u8; 4] = b"MTSC";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_size: 512,
            val_size: 128,
            min_shapes: 1,
            max_shapes: 4,
            num_classes: 5,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config("data.image_size", "must be a positive multiple of 8"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("data.min_shapes", "must not exceed max_shapes"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be >= 2"));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        }
    }

    /// Seed and shape count of scene `index` in `split`.
    pub fn scene_params(&self, split: Split, index: usize) -> (u64, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split.tag());
        rng.set_word_pos(index as u128 * 4);
        let seed: u64 = rng.gen();
        let shapes = self.min_shapes + (seed as usize % (self.max_shapes - self.min_shapes + 1));
        (seed, shapes)
    }
}

/// Per-task labels for a batch of scenes.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Binary(Vec<f64>),
    Dense(Tensor),
}

/// A split stored as batch tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    /// `[N, H, W, 3]`
    pub images: Tensor,
    pub seg: Vec<u8>,
    pub parts: Vec<u8>,
    pub sal: Vec<u8>,
    /// `[N, H, W, 1]`
    pub depth: Tensor,
    /// `[N, H, W, 3]`
    pub normals: Tensor,
}

impl Dataset {
    pub fn from_scenes(scenes: &[Scene]) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::Shape("empty scene list".into()))?;
        let (h, w) = (first.height, first.width);
        if scenes.iter().any(|s| s.height != h || s.width != w) {
            return Err(Error::Shape("scenes differ in size".into()));
        }
        let n = scenes.len();
        let cat = |f: &dyn Fn(&Scene) -> &[f64]| scenes.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
        let cat8 = |f: &dyn Fn(&Scene) -> &[u8]| scenes.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
        Ok(Self {
            num_classes: first.num_classes,
            images: Tensor::from_vec(&[n, h, w, 3], cat(&|s| &s.image)),
            seg: cat8(&|s| &s.seg),
            parts: cat8(&|s| &s.parts),
            sal: cat8(&|s| &s.sal),
            depth: Tensor::from_vec(&[n, h, w, 1], cat(&|s| &s.depth)),
            normals: Tensor::from_vec(&[n, h, w, 3], cat(&|s| &s.normals)),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels_per_image(&self) -> usize {
        let (_, h, w, _) = self.images.nhwc();
        h * w
    }

    pub fn images_at(&self, idx: &[usize]) -> Tensor {
        crate::codec::gather_batch(&self.images, idx)
    }

    pub fn labels(&self, source: LabelSource, idx: &[usize]) -> Labels {
        let px = self.pixels_per_image();
        let gather8 = |v: &[u8]| -> Vec<u8> { idx.iter().flat_map(|&i| v[i * px..(i + 1) * px].iter().copied()).collect() };
        match source {
            LabelSource::Segmentation => Labels::Classes(gather8(&self.seg).into_iter().map(usize::from).collect()),
            LabelSource::Parts => Labels::Classes(gather8(&self.parts).into_iter().map(usize::from).collect()),
            LabelSource::Saliency => Labels::Binary(gather8(&self.sal).into_iter().map(f64::from).collect()),
            LabelSource::Depth => Labels::Dense(crate::codec::gather_batch(&self.depth, idx)),
            LabelSource::Normals => Labels::Dense(crate::codec::gather_batch(&self.normals, idx)),
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// The scenes at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let px = self.pixels_per_image();
        let gather8 = |v: &[u8]| -> Vec<u8> { idx.iter().flat_map(|&i| v[i * px..(i + 1) * px].iter().copied()).collect() };
        Self {
            num_classes: self.num_classes,
            images: self.images_at(idx),
            seg: gather8(&self.seg),
            parts: gather8(&self.parts),
            sal: gather8(&self.sal),
            depth: crate::codec::gather_batch(&self.depth, idx),
            normals: crate::codec::gather_batch(&self.normals, idx),
        }
    }
}

/// Builds a split, reading and writing per-scene cache files under `cache`.
pub fn build_split(cfg: &DatasetConfig, split: Split, cache: Option<&Path>) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.size(split);
    if n == 0 {
        return Err(Error::config(format!("data.{:?}_size", split).to_lowercase(), "must be > 0"));
    }
    if let Some(dir) = cache {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let scenes = (0..n)
        .map(|i| {
            let (seed, shapes) = cfg.scene_params(split, i);
            let make = || generate_scene(seed, cfg.image_size, cfg.image_size, shapes, cfg.num_classes);
            match cache {
                None => make(),
                Some(dir) => cached_scene(dir, seed, cfg.image_size, shapes, cfg.num_classes, make),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_scenes(&scenes)
}

fn cache_path(dir: &Path, seed: u64, size: usize, shapes: usize, classes: usize) -> PathBuf {
    dir.join(format!("scene-{seed:016x}-{size}-s{shapes}-c{classes}.bin"))
}

fn cached_scene(
    dir: &Path,
    seed: u64,
    size: usize,
    shapes: usize,
    classes: usize,
    make: impl Fn() -> Result<Scene>,
) -> Result<Scene> {
    let path = cache_path(dir, seed, size, shapes, classes);
    if let Ok(bytes) = std::fs::read(&path) {
        match decode_scene(&bytes) {
            Some(s) if s.height == size && s.width == size && s.num_classes == classes => return Ok(s),
            _ => log::info!("regenerating stale scene cache {}", path.display()),
        }
    }
    let scene = make()?;
    std::fs::write(&path, encode_scene(&scene)).map_err(|e| Error::io(&path, e))?;
    Ok(scene)
}

pub fn encode_scene(s: &Scene) -> Vec<u8> {
    let n = s.height * s.width;
    let mut out = Vec::with_capacity(20 + n * 33);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for v in [s.height, s.width, s.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(s.image.iter().map(|v| (v * 255.0).round() as u8));
    out.extend_from_slice(&s.seg);
    out.extend_from_slice(&s.parts);
    for &i in &s.instance {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for v in s.depth.iter().chain(&s.normals) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// `None` on any mismatch, including an older layout version.
pub fn decode_scene(bytes: &[u8]) -> Option<Scene> {
    if bytes.get(..4)? != CACHE_MAGIC {
        return None;
    }
    let u32_at = |o: usize| Some(u32::from_le_bytes(bytes.get(o..o + 4)?.try_into().ok()?));
    if u32_at(4)? != CACHE_VERSION {
        return None;
    }
    let (h, w, classes) = (u32_at(8)? as usize, u32_at(12)? as usize, u32_at(16)? as usize);
    let n = h * w;
    if bytes.len() != 20 + n * 3 + 2 * n + 2 * n + 16 * n {
        return None;
    }
    let mut off = 20;
    let mut take = |len: usize| {
        let s = &bytes[off..off + len];
        off += len;
        s
    };
    let image = take(n * 3).iter().map(|&b| b as f64 / 255.0).collect();
    let seg = take(n).to_vec();
    let parts = take(n).to_vec();
    let instance = take(2 * n).chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let floats: Vec<f64> = take(16 * n)
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let sal = seg.iter().map(|&c| u8::from(c != 0)).collect();
    Some(Scene {
        height: h,
        width: w,
        num_classes: classes,
        image,
        seg,
        parts,
        sal,
        depth: floats[..n].to_vec(),
        normals: floats[n..].to_vec(),
        instance,
    })
}

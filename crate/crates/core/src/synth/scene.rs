//! Procedural scenes: flat-coloured, striped shapes over a shaded background
//! plane, with depth, analytic normals and per-pixel labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// World units per pixel.
pub const PIXEL_SPACING: f64 = 1.0 / 32.0;
/// Part labels: background plus two stripe phases.
pub const NUM_PARTS: usize = 3;

const PALETTE: [[f64; 3]; 8] = [
    [0.88, 0.22, 0.18],
    [0.18, 0.72, 0.28],
    [0.22, 0.34, 0.92],
    [0.95, 0.82, 0.16],
    [0.72, 0.26, 0.82],
    [0.16, 0.82, 0.84],
    [0.96, 0.52, 0.12],
    [0.55, 0.85, 0.45],
];
const STRIPE_DARKEN: f64 = 0.55;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `(h, w, 3)` in `[0, 1]`, 8-bit quantized.
    pub image: Vec<f64>,
    pub seg: Vec<u8>,
    pub parts: Vec<u8>,
    pub sal: Vec<u8>,
    pub depth: Vec<f64>,
    /// `(h, w, 3)` unit vectors.
    pub normals: Vec<f64>,
    /// Shape index + 1 per pixel, 0 for background.
    pub instance: Vec<u16>,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Disc,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Debug)]
struct Shape {
    class: u8,
    kind: Kind,
    cx: f64,
    cy: f64,
    r: f64,
    cos: f64,
    sin: f64,
    stripe_dir: (f64, f64),
    stripe_period: f64,
    color: [f64; 3],
    zc: f64,
    slope: (f64, f64),
}

impl Shape {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.local(x, y);
        let r = self.r;
        match self.kind {
            Kind::Disc => lx * lx + ly * ly <= r * r,
            Kind::Square => lx.abs() <= 0.85 * r && ly.abs() <= 0.85 * r,
            Kind::Triangle => {
                // Equilateral, circumradius r, apex along -y.
                let s3 = 3f64.sqrt();
                ly <= 0.5 * r && s3 * lx - ly <= r && -s3 * lx - ly <= r
            }
            Kind::Cross => {
                let t = r / 3.0;
                (lx.abs() <= r && ly.abs() <= t) || (ly.abs() <= r && lx.abs() <= t)
            }
        }
    }

    fn stripe(&self, x: f64, y: f64) -> u8 {
        let s = (x - self.cx) * self.stripe_dir.0 + (y - self.cy) * self.stripe_dir.1;
        1 + ((s / self.stripe_period).floor().rem_euclid(2.0) as u8)
    }

    /// Depth and its gradient with respect to world coordinates.
    fn surface(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let du = (x - self.cx) * PIXEL_SPACING;
        let dv = (y - self.cy) * PIXEL_SPACING;
        match self.kind {
            Kind::Disc => {
                let ru = self.r * PIXEL_SPACING;
                let big = 1.5 * ru;
                let root = (big * big - du * du - dv * dv).max(1e-12).sqrt();
                let rim = (big * big - ru * ru).sqrt();
                (self.zc - (root - rim), du / root, dv / root)
            }
            _ => (self.zc + self.slope.0 * du + self.slope.1 * dv, self.slope.0, self.slope.1),
        }
    }
}

fn normal_from_gradient(zu: f64, zv: f64) -> [f64; 3] {
    let n = (zu * zu + zv * zv + 1.0).sqrt();
    [-zu / n, -zv / n, 1.0 / n]
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates one scene. `num_classes` counts the background class.
pub fn generate_scene(seed: u64, height: usize, width: usize, num_shapes: usize, num_classes: usize) -> Result<Scene> {
    if height == 0 || width == 0 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
        return Err(Error::Shape(format!("scene {height}x{width}: extents must be positive multiples of 8")));
    }
    if !(2..=PALETTE.len() + 1).contains(&num_classes) {
        return Err(Error::config("num_classes", format!("must be in [2, {}]", PALETTE.len() + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = height.min(width) as f64 / 64.0;
    let shapes: Vec<Shape> = (0..num_shapes)
        .map(|_| {
            let class = rng.gen_range(1..num_classes) as u8;
            let kind = match (class - 1) % 4 {
                0 => Kind::Disc,
                1 => Kind::Square,
                2 => Kind::Triangle,
                _ => Kind::Cross,
            };
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let phi = rng.gen_range(0.0..std::f64::consts::PI);
            let base = PALETTE[(class - 1) as usize];
            let color = base.map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
            Shape {
                class,
                kind,
                cx: rng.gen_range(0.15..0.85) * width as f64,
                cy: rng.gen_range(0.15..0.85) * height as f64,
                r: rng.gen_range(7.0..14.0) * scale,
                cos: theta.cos(),
                sin: theta.sin(),
                stripe_dir: (phi.cos(), phi.sin()),
                stripe_period: rng.gen_range(3.0..5.0) * scale,
                color,
                zc: rng.gen_range(2.5..5.0),
                slope: (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
            }
        })
        .collect();
    let bg0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.6));
    let bg1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.6));
    let bg_z = rng.gen_range(7.0..8.0);
    let bg_slope = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let light = {
        let l: [f64; 3] = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 0.85];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / n)
    };

    let n = height * width;
    let mut scene = Scene {
        height,
        width,
        num_classes,
        image: vec![0.0; n * 3],
        seg: vec![0; n],
        parts: vec![0; n],
        sal: vec![0; n],
        depth: vec![0.0; n],
        normals: vec![0.0; n * 3],
        instance: vec![0; n],
    };
    let (wc, hc) = (width as f64 / 2.0, height as f64 / 2.0);
    for py in 0..height {
        for px in 0..width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let i = py * width + px;
            let du = (x - wc) * PIXEL_SPACING;
            let dv = (y - hc) * PIXEL_SPACING;
            let mut z = bg_z + bg_slope.0 * du + bg_slope.1 * dv;
            let mut grad = bg_slope;
            let t = px as f64 / width as f64 * 0.7 + py as f64 / height as f64 * 0.3;
            let mut albedo: [f64; 3] = std::array::from_fn(|c| bg0[c] * (1.0 - t) + bg1[c] * t);
            for (k, s) in shapes.iter().enumerate() {
                if !s.contains(x, y) {
                    continue;
                }
                let (sz, zu, zv) = s.surface(x, y);
                if sz < z {
                    z = sz;
                    grad = (zu, zv);
                    let part = s.stripe(x, y);
                    let dark = if part == 2 { STRIPE_DARKEN } else { 1.0 };
                    albedo = s.color.map(|c| c * dark);
                    scene.seg[i] = s.class;
                    scene.parts[i] = part;
                    scene.instance[i] = k as u16 + 1;
                }
            }
            let nrm = normal_from_gradient(grad.0, grad.1);
            let shade = 0.35 + 0.65 * (nrm[0] * light[0] + nrm[1] * light[1] + nrm[2] * light[2]).max(0.0);
            for c in 0..3 {
                scene.image[i * 3 + c] = quantize8(albedo[c] * shade);
                scene.normals[i * 3 + c] = to_f32(nrm[c]);
            }
            scene.depth[i] = to_f32(z);
            scene.sal[i] = u8::from(scene.seg[i] != 0);
        }
    }
    Ok(scene)
}

/// Unit normals from central differences of the depth map; `None` at the
/// image border.
pub fn finite_difference_normals(scene: &Scene) -> Vec<Option<[f64; 3]>> {
    let (h, w) = (scene.height, scene.width);
    let z = |x: usize, y: usize| scene.depth[y * w + x];
    (0..h * w)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                return None;
            }
            let zu = (z(x + 1, y) - z(x - 1, y)) / (2.0 * PIXEL_SPACING);
            let zv = (z(x, y + 1) - z(x, y - 1)) / (2.0 * PIXEL_SPACING);
            Some(normal_from_gradient(zu, zv))
        })
        .collect()
}

//! Rate-accuracy evaluation: Bjøntegaard deltas, the multi-task gain Δm,
//! codec evaluation on a dataset, and RD curve artifacts (CSV and plots).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Session;
use crate::codec::{analysis_graph, rate_bits_graph, synthesis_graph, BaseCodec, ENTROPY_PREFIX};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::multitask::AdaptedCodec;
use crate::synth::{Dataset, MetricAccumulator, PredictorBank};
use crate::task::TaskSpec;
use crate::tensor::Tensor;

const TRAPEZOID_SAMPLES: usize = 1000;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    HigherBetter,
    LowerBetter,
}

impl MetricDirection {
    pub fn of(spec: &TaskSpec) -> Self {
        if spec.metric_kind.higher_is_better() {
            Self::HigherBetter
        } else {
            Self::LowerBetter
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::HigherBetter => "higher_better",
            Self::LowerBetter => "lower_better",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "higher_better" => Ok(Self::HigherBetter),
            "lower_better" => Ok(Self::LowerBetter),
            o => Err(Error::EvalInput(format!("unknown metric direction `{o}`"))),
        }
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Self::HigherBetter => a > b,
            Self::LowerBetter => a < b,
        }
    }
}

/// Rate-accuracy points of one method on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub task: String,
    /// `(bpp, metric)`
    pub points: Vec<(f64, f64)>,
    pub direction: MetricDirection,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, task: impl Into<String>, points: Vec<(f64, f64)>, direction: MetricDirection) -> Self {
        Self {
            label: label.into(),
            task: task.into(),
            points,
            direction,
        }
    }

    /// Points sorted by rate, after checking the curve invariants.
    pub fn sorted(&self) -> Result<Vec<(f64, f64)>> {
        let mut p = self.points.clone();
        if p.iter().any(|&(r, m)| !(r > 0.0 && r.is_finite() && m.is_finite())) {
            return Err(Error::EvalInput(format!("curve `{}` has a non-positive or non-finite point", self.label)));
        }
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        if p.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::EvalInput(format!("curve `{}` repeats a bpp value", self.label)));
        }
        Ok(p)
    }

    fn for_bd(&self) -> Result<Vec<(f64, f64)>> {
        if self.points.len() < 4 {
            return Err(Error::EvalInput(format!(
                "curve `{}` has {} points; BD metrics need at least 4",
                self.label,
                self.points.len()
            )));
        }
        self.sorted()
    }
}

/// Least-squares cubic `c0 + c1 t + c2 t² + c3 t³` in the normalized
/// variable `t = (x - shift) / scale`.
struct Cubic {
    c: [f64; 4],
    shift: f64,
    scale: f64,
}

impl Cubic {
    fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shift = 0.5 * (lo + hi);
        let scale = (0.5 * (hi - lo)).max(1e-12);
        let mut a = [[0.0; 5]; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let t = (x - shift) / scale;
            let pw = [1.0, t, t * t, t * t * t];
            for i in 0..4 {
                for j in 0..4 {
                    a[i][j] += pw[i] * pw[j];
                }
                a[i][4] += pw[i] * y;
            }
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..4 {
            let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            if a[piv][col].abs() < 1e-12 {
                return Err(Error::EvalInput("degenerate curve: cubic fit is singular".into()));
            }
            a.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..5 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let c = std::array::from_fn(|i| a[i][4] / a[i][i]);
        Ok(Self { c, shift, scale })
    }

    fn eval(&self, x: f64) -> f64 {
        let t = (x - self.shift) / self.scale;
        self.c[0] + t * (self.c[1] + t * (self.c[2] + t * self.c[3]))
    }
}

/// Mean of `f` over `[lo, hi]` by the composite trapezoid rule.
fn trapezoid_mean(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = TRAPEZOID_SAMPLES;
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for i in 1..n - 1 {
        acc += f(lo + i as f64 * h);
    }
    acc * h / (hi - lo)
}

fn overlap(a: &[f64], b: &[f64], what: &str) -> Result<(f64, f64)> {
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = min(a).max(min(b));
    let hi = max(a).min(max(b));
    if hi <= lo {
        return Err(Error::NoOverlap(format!("{what} ranges [{}, {}] and [{}, {}] do not overlap", min(a), max(a), min(b), max(b))));
    }
    Ok((lo, hi))
}

/// Average rate difference in percent at equal metric. Negative means the
/// test curve needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (a, t) = (anchor.for_bd()?, test.for_bd()?);
    let split = |p: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { p.iter().map(|&(r, m)| (m, r.log10())).unzip() };
    let (am, ar) = split(&a);
    let (tm, tr) = split(&t);
    let (lo, hi) = overlap(&am, &tm, "metric")?;
    let fa = Cubic::fit(&am, &ar)?;
    let ft = Cubic::fit(&tm, &tr)?;
    let delta = trapezoid_mean(lo, hi, |m| ft.eval(m) - fa.eval(m));
    Ok(100.0 * (10f64.powf(delta) - 1.0))
}

/// Average metric difference (test minus anchor) at equal rate, in metric
/// units.
pub fn bd_acc(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (a, t) = (anchor.for_bd()?, test.for_bd()?);
    let split = |p: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { p.iter().map(|&(r, m)| (r.log10(), m)).unzip() };
    let (ar, am) = split(&a);
    let (tr, tm) = split(&t);
    let (lo, hi) = overlap(&ar, &tr, "log-bpp")?;
    let fa = Cubic::fit(&ar, &am)?;
    let ft = Cubic::fit(&tr, &tm)?;
    Ok(trapezoid_mean(lo, hi, |r| ft.eval(r) - fa.eval(r)))
}

/// Average relative gain of `multi` over `single` in percent, signed so
/// that improvements are positive in either metric direction.
pub fn delta_m(
    multi: &BTreeMap<String, f64>,
    single: &BTreeMap<String, f64>,
    directions: &BTreeMap<String, MetricDirection>,
) -> Result<f64> {
    if multi.is_empty() {
        return Err(Error::EvalInput("no tasks to compare".into()));
    }
    if multi.len() != single.len() || multi.keys().any(|k| !single.contains_key(k)) {
        return Err(Error::EvalInput("multi-task and single-task results cover different tasks".into()));
    }
    let mut acc = 0.0;
    for (task, &m) in multi {
        let s = single[task];
        if s == 0.0 {
            return Err(Error::ZeroBaseline(task.clone()));
        }
        let dir = directions
            .get(task)
            .ok_or_else(|| Error::EvalInput(format!("no metric direction for `{task}`")))?;
        let sign = match dir {
            MetricDirection::HigherBetter => 1.0,
            MetricDirection::LowerBetter => -1.0,
        };
        acc += sign * (m - s) / s;
    }
    Ok(100.0 * acc / multi.len() as f64)
}

/// Whether `curve` beats a single `(bpp, metric)` operating point at the
/// same rate. Inside the curve's rate range the curve is interpolated
/// linearly in log-bpp; outside it, only a curve point that uses no more
/// bits and has a strictly better metric counts.
pub fn beats_at_matched_bpp(curve: &RdCurve, point: (f64, f64)) -> Result<bool> {
    let p = curve.sorted()?;
    if p.is_empty() {
        return Err(Error::EvalInput(format!("curve `{}` is empty", curve.label)));
    }
    let (rate, metric) = point;
    let (first, last) = (p[0], p[p.len() - 1]);
    if rate < first.0 {
        return Ok(false);
    }
    if rate > last.0 {
        return Ok(p.iter().any(|&(_, m)| curve.direction.better(m, metric)));
    }
    let x = rate.log10();
    let at = p
        .windows(2)
        .find(|w| w[0].0 <= rate && rate <= w[1].0)
        .map(|w| {
            let (x0, x1) = (w[0].0.log10(), w[1].0.log10());
            w[0].1 + (w[1].1 - w[0].1) * (x - x0) / (x1 - x0)
        })
        .unwrap_or(first.1);
    Ok(curve.direction.better(at, metric))
}

/// Rate, fidelity and task metrics of one codec on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub metrics: BTreeMap<String, f64>,
}

fn finish(bits: f64, sq: f64, pixels: usize, values: usize, accs: Vec<(String, MetricAccumulator)>) -> EvalPoint {
    let mse = sq / values as f64;
    EvalPoint {
        bpp: bits / pixels as f64,
        mse,
        psnr: -10.0 * mse.max(1e-12).log10(),
        metrics: accs.into_iter().map(|(k, a)| (k, a.value())).collect(),
    }
}

fn sq_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluates the adapted codec on every task of its roster.
pub fn evaluate_adapted(codec: &AdaptedCodec, data: &Dataset) -> Result<EvalPoint> {
    let names: Vec<&str> = codec.tasks.iter().map(|t| t.name.as_str()).collect();
    let mut accs: Vec<(String, MetricAccumulator)> =
        codec.tasks.iter().map(|t| (t.name.clone(), MetricAccumulator::new(t))).collect();
    let (mut bits, mut sq) = (0.0, 0.0);
    for idx in batches(data.len()) {
        let x = data.images_at(&idx);
        let enc = codec.encode(&x)?;
        bits += enc.bits;
        let dec = codec.decode_multitask(&enc.latent, &names)?;
        sq += sq_err(&dec.human, &x);
        for (spec, (_, acc)) in codec.tasks.iter().zip(accs.iter_mut()) {
            acc.update(&dec.predictions[&spec.name], &data.labels(spec.label, &idx))?;
        }
    }
    Ok(finish(bits, sq, data.len() * data.pixels_per_image(), data.images.len(), accs))
}

/// Evaluates the untuned base codec: each predictor sees the plain
/// reconstruction.
pub fn evaluate_base(base: &BaseCodec, predictors: &PredictorBank, specs: &[TaskSpec], data: &Dataset) -> Result<EvalPoint> {
    let mut accs: Vec<(String, MetricAccumulator)> = specs.iter().map(|t| (t.name.clone(), MetricAccumulator::new(t))).collect();
    let (mut bits, mut sq) = (0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for idx in batches(data.len()) {
        let x = data.images_at(&idx);
        let mut s = Session::new(&[&base.params, &predictors.params], false);
        let xv = s.constant(x.clone());
        let (y, _) = analysis_graph(&mut s, &base.config, xv);
        let yq = s.quantize(y, QuantMode::Eval, &mut rng);
        let b = rate_bits_graph(&mut s, yq, ENTROPY_PREFIX);
        bits += s.value(b).item();
        let (xh, _) = synthesis_graph(&mut s, &base.config, yq);
        sq += sq_err(s.value(xh), &x);
        for (spec, (_, acc)) in specs.iter().zip(accs.iter_mut()) {
            let p = predictors.forward(&mut s, &spec.name, xh);
            acc.update(s.value(p), &data.labels(spec.label, &idx))?;
        }
    }
    Ok(finish(bits, sq, data.len() * data.pixels_per_image(), data.images.len(), accs))
}

fn batches(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Predictor metrics on clean images, the upper reference of every curve.
pub fn evaluate_clean(predictors: &PredictorBank, specs: &[TaskSpec], data: &Dataset) -> Result<BTreeMap<String, f64>> {
    specs
        .iter()
        .map(|s| Ok((s.name.clone(), predictors.metric(&s.name, &data.images, data)?)))
        .collect()
}

/// Writes `rd_points.csv` plus one `rd_<task>.png` per task. Returns the
/// written paths.
pub fn emit_rd_artifacts(curves: &[RdCurve], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if curves.is_empty() {
        return Err(Error::EvalInput("no curves to emit".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("rd_points.csv");
    let io = |e: csv::Error| Error::io(&csv_path, e.into());
    let mut w = csv::Writer::from_path(&csv_path).map_err(io)?;
    w.write_record(["label", "task", "bpp", "metric", "metric_direction"]).map_err(io)?;
    for c in curves {
        for &(r, m) in &c.points {
            w.write_record([c.label.as_str(), &c.task, &r.to_string(), &m.to_string(), c.direction.as_str()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let mut written = vec![csv_path.clone()];
    let mut tasks: Vec<&str> = curves.iter().map(|c| c.task.as_str()).collect();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        let group: Vec<&RdCurve> = curves.iter().filter(|c| c.task == task).collect();
        let path = out_dir.join(format!("rd_{task}.png"));
        plot(&group, task)
            .save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a points CSV written by [`emit_rd_artifacts`].
pub fn read_rd_csv(path: &Path) -> Result<Vec<RdCurve>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut curves: Vec<RdCurve> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::EvalInput(format!("{}: {e}", path.display())))?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::EvalInput(format!("{}: bad number `{}`: {e}", path.display(), &rec[i])))
        };
        let (label, task) = (&rec[0], &rec[1]);
        let dir = MetricDirection::parse(&rec[4])?;
        let point = (num(2)?, num(3)?);
        match curves.iter_mut().find(|c| c.label == label && c.task == task) {
            Some(c) => c.points.push(point),
            None => curves.push(RdCurve::new(label, task, vec![point], dir)),
        }
    }
    Ok(curves)
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) != 0 {
                    put(img, x + i as i32 * 8 + col, y + row as i32, color);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i32, y: i32, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i32, i32), (x1, y1): (i32, i32), c: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 as f64 + t * (x1 - x0) as f64;
        let y = y0 as f64 + t * (y1 - y0) as f64;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            put(img, x.round() as i32 + dx, y.round() as i32 + dy, c);
        }
    }
}

fn plot(curves: &[&RdCurve], task: &str) -> RgbImage {
    let (w, h) = (560u32, 400u32);
    let (left, right, top, bottom) = (70i32, 20i32, 30i32, 50i32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().copied()).filter(|p| p.0 > 0.0).collect();
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&(f64, f64)) -> f64| pts.iter().map(g).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0.log10()), fold(f64::max, f64::NEG_INFINITY, |p| p.0.log10()));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if !(x1 > x0) {
        x0 -= 0.1;
        x1 += 0.1;
    }
    if !(y1 > y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.08 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |lx: f64| left + ((lx - x0) / (x1 - x0) * (w as i32 - left - right) as f64).round() as i32;
    let py = |v: f64| h as i32 - bottom - ((v - y0) / (y1 - y0) * (h as i32 - top - bottom) as f64).round() as i32;
    let axis = [0, 0, 0];
    line(&mut img, (left, top), (left, h as i32 - bottom), axis);
    line(&mut img, (left, h as i32 - bottom), (w as i32 - right, h as i32 - bottom), axis);
    for i in 0..=4 {
        let lx = x0 + (x1 - x0) * i as f64 / 4.0;
        let x = px(lx);
        line(&mut img, (x, h as i32 - bottom), (x, h as i32 - bottom + 4), axis);
        draw_text(&mut img, x - 16, h as i32 - bottom + 8, &format!("{:.3}", 10f64.powf(lx)), axis);
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        line(&mut img, (left - 4, y), (left, y), axis);
        draw_text(&mut img, 2, y - 4, &format!("{v:.3}"), axis);
    }
    draw_text(&mut img, w as i32 / 2 - 40, h as i32 - 18, "bpp (log)", axis);
    draw_text(&mut img, left, 8, &format!("{task}: metric vs bpp"), axis);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut p: Vec<(f64, f64)> = c.points.iter().copied().filter(|p| p.0 > 0.0).collect();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let screen: Vec<(i32, i32)> = p.iter().map(|&(r, m)| (px(r.log10()), py(m))).collect();
        for pair in screen.windows(2) {
            line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &screen {
            for dx in -3..=3 {
                for dy in -3..=3 {
                    put(&mut img, x + dx, y + dy, color);
                }
            }
        }
        let ly = top + 6 + 12 * i as i32;
        line(&mut img, (w as i32 - 190, ly + 3), (w as i32 - 170, ly + 3), color);
        draw_text(&mut img, w as i32 - 164, ly, &c.label, color);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new("c", "segmentation", points.to_vec(), MetricDirection::HigherBetter)
    }

    const ANCHOR: [(f64, f64); 4] = [(0.2, 60.0), (0.4, 66.0), (0.8, 71.0), (1.6, 74.0)];
    const TEST: [(f64, f64); 4] = [(0.2, 62.0), (0.4, 68.0), (0.8, 73.0), (1.6, 76.0)];

    #[test]
    fn identical_curves() {
        let a = curve(&ANCHOR);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        assert!(bd_acc(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn halved_rate() {
        let a = curve(&ANCHOR);
        let b = curve(&ANCHOR.map(|(r, m)| (r / 2.0, m)));
        assert!((bd_rate(&a, &b).unwrap() + 50.0).abs() < 0.01);
    }

    /// Lagrange interpolation through the four points, integrated with a
    /// 10⁴-sample trapezoid.
    fn oracle_bd_acc(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        let lagrange = |p: &[(f64, f64)], x: f64| {
            let xs: Vec<f64> = p.iter().map(|q| q.0.log10()).collect();
            (0..4)
                .map(|i| {
                    let mut l = p[i].1;
                    for j in 0..4 {
                        if j != i {
                            l *= (x - xs[j]) / (xs[i] - xs[j]);
                        }
                    }
                    l
                })
                .sum::<f64>()
        };
        let (lo, hi) = (0.2f64.log10(), 1.6f64.log10());
        let n = 10_000;
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += wgt * (lagrange(b, x) - lagrange(a, x));
        }
        s * h / (hi - lo)
    }

    #[test]
    fn four_point_bd_acc_matches_oracle() {
        let got = bd_acc(&curve(&ANCHOR), &curve(&TEST)).unwrap();
        let want = oracle_bd_acc(&ANCHOR, &TEST);
        assert!((got - want).abs() < 0.01, "{got} vs {want}");
        assert!((got - 2.0).abs() < 1e-6);
    }

    #[test]
    fn input_errors() {
        let three = curve(&ANCHOR[..3]);
        assert!(matches!(bd_rate(&three, &curve(&ANCHOR)), Err(Error::EvalInput(_))));
        let far = curve(&ANCHOR.map(|(r, m)| (r, m + 100.0)));
        assert!(matches!(bd_rate(&curve(&ANCHOR), &far), Err(Error::NoOverlap(_))));
        let far = curve(&ANCHOR.map(|(r, m)| (r * 100.0, m)));
        assert!(matches!(bd_acc(&curve(&ANCHOR), &far), Err(Error::NoOverlap(_))));
    }

    #[test]
    fn delta_m_examples() {
        let dirs = BTreeMap::from([
            ("seg".to_string(), MetricDirection::HigherBetter),
            ("depth".to_string(), MetricDirection::LowerBetter),
        ]);
        let multi = BTreeMap::from([("seg".to_string(), 52.0), ("depth".to_string(), 0.62)]);
        let single = BTreeMap::from([("seg".to_string(), 50.0), ("depth".to_string(), 0.60)]);
        let d = delta_m(&multi, &single, &dirs).unwrap();
        assert!((d - (0.04 - 0.02 / 0.6) / 2.0 * 100.0).abs() < 1e-9);
        assert!((d - 0.3333).abs() < 1e-3);
        assert_eq!(delta_m(&single, &single, &dirs).unwrap(), 0.0);
        let one = BTreeMap::from([("seg".to_string(), 55.0)]);
        let base = BTreeMap::from([("seg".to_string(), 50.0)]);
        assert!((delta_m(&one, &base, &dirs).unwrap() - 10.0).abs() < 1e-9);
        let zero = BTreeMap::from([("seg".to_string(), 0.0)]);
        assert!(matches!(delta_m(&one, &zero, &dirs), Err(Error::ZeroBaseline(t)) if t == "seg"));
    }

    #[test]
    fn matched_bpp_rule() {
        let c = curve(&[(0.1, 0.5), (0.2, 0.6), (0.4, 0.7)]);
        assert!(beats_at_matched_bpp(&c, (0.2, 0.55)).unwrap());
        assert!(!beats_at_matched_bpp(&c, (0.3, 0.7)).unwrap());
        // Cheaper than every point of the curve: cannot be matched.
        assert!(!beats_at_matched_bpp(&c, (0.05, 0.1)).unwrap());
        // Costlier than every point: a dominating point suffices.
        assert!(beats_at_matched_bpp(&c, (0.8, 0.65)).unwrap());
        assert!(!beats_at_matched_bpp(&c, (0.8, 0.75)).unwrap());
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let curves = vec![
            curve(&ANCHOR),
            RdCurve::new("test", "segmentation", TEST.to_vec(), MetricDirection::HigherBetter),
        ];
        let files = emit_rd_artifacts(&curves, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files.iter().all(|f| f.exists()));
        assert_eq!(read_rd_csv(&files[0]).unwrap(), curves);
        assert!(matches!(emit_rd_artifacts(&[], dir.path()), Err(Error::EvalInput(_))));
    }

    fn smooth_curve() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<(f64, f64)>)> {
        (0.05f64..0.5, 1.5f64..3.0, 0.5f64..2.0, 0.7f64..1.4, -0.2f64..0.2).prop_map(|(r0, ratio, slope, k, off)| {
            let mk = |scale: f64, shift: f64| {
                (0..5)
                    .map(|i| {
                        let r = r0 * ratio.powi(i) * scale;
                        (r, shift + slope * (r0 * ratio.powi(i)).ln())
                    })
                    .collect::<Vec<_>>()
            };
            (mk(1.0, 0.0), mk(k, off))
        })
    }

    proptest! {
        #[test]
        fn bd_rate_anti_symmetry((a, b) in smooth_curve()) {
            let (a, b) = (curve(&a), curve(&b));
            let ab = bd_rate(&a, &b).unwrap();
            let ba = bd_rate(&b, &a).unwrap();
            prop_assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn bd_rate_scale_equivariance((a, b) in smooth_curve(), s in 0.1f64..10.0) {
            let r = bd_rate(&curve(&a), &curve(&b)).unwrap();
            let scale = |p: &[(f64, f64)]| curve(&p.iter().map(|&(x, m)| (x * s, m)).collect::<Vec<_>>());
            let rs = bd_rate(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((r - rs).abs() < 1e-9);
        }
    }
}

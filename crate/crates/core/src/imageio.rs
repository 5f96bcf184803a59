//! PNG input/output for the command-line codec.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::task::{LossKind, TaskSpec};
use crate::tensor::{FeatureMap, Tensor};

/// Label colours for class maps; class 0 (background) is black.
const CLASS_COLOURS: [[u8; 3]; 10] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
    [170, 110, 40],
];

/// Reads an 8-bit RGB image as an `(H, W, 3)` map in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    FeatureMap::new(Tensor::from_vec(&[h as usize, w as usize, 3], data), 0)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes an `(H, W, 3)` or `(1, H, W, 3)` image in `[0, 1]`.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let (h, w) = match s {
        [h, w, 3] | [1, h, w, 3] => (*h, *w),
        _ => return Err(Error::Shape(format!("expected an RGB image, got {s:?}"))),
    };
    let raw = t.data().iter().map(|&v| to_u8(v)).collect();
    save(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"), path)
}

/// Renders one image's prediction (`(1, H, W, C)`) for viewing: class maps
/// as label colours, saliency as black/white, normals as RGB, depth as
/// grey scaled to its own range.
pub fn prediction_image(spec: &TaskSpec, pred: &Tensor) -> Result<RgbImage> {
    let (n, h, w, c) = pred.nhwc();
    if n != 1 || c != spec.out_channels {
        return Err(Error::Shape(format!(
            "`{}` prediction should be [1, H, W, {}], got {:?}",
            spec.name,
            spec.out_channels,
            pred.shape()
        )));
    }
    let d = pred.data();
    let px = |i: usize| &d[i * c..(i + 1) * c];
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let colour = |i: usize| -> [u8; 3] {
        let p = px(i);
        match spec.loss_kind {
            LossKind::CrossEntropy => {
                let k = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k);
                CLASS_COLOURS[k % CLASS_COLOURS.len()]
            }
            LossKind::BinaryCe => [if p[0] > 0.0 { 255 } else { 0 }; 3],
            LossKind::CosineNormals => {
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                [0, 1, 2].map(|j| to_u8(0.5 * (p[j] / norm + 1.0)))
            }
            LossKind::L1Depth => [to_u8((p[0] - lo) / span); 3],
        }
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(colour(y as usize * w + x as usize))))
}

pub fn write_prediction(path: &Path, spec: &TaskSpec, pred: &Tensor) -> Result<()> {
    save(prediction_image(spec, pred)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..8 * 16 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(&[8, 16, 3], data);
        write_image(&path, &t).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.data, t);
    }

    #[test]
    fn class_map_uses_argmax() {
        let spec = TaskSpec::named("segmentation", 3, 3).unwrap();
        let pred = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0, 5.0, 1.0, 9.0, 0.0, 0.0]);
        let img = prediction_image(&spec, &pred).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, CLASS_COLOURS[1]);
        assert_eq!(img.get_pixel(1, 0).0, CLASS_COLOURS[0]);
        let bad = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(prediction_image(&spec, &bad).is_err());
    }
}

//! Two-dimensional FFT helpers over per-channel planes.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2-D DFT of a row-major `h x w` grid. The inverse is normalized by
/// `1 / (h * w)`.
pub fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (row, col) = if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        };
        row.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        col.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y];
            }
        }
    });
    if inverse {
        let s = 1.0 / (h * w) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

/// Width of the real-input half spectrum for a row of length `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Index into a half-spectrum `[h, w/2+1]` mask for full-spectrum bin `(u, v)`.
///
/// Bins past the Nyquist column mirror through the origin, so the expanded
/// mask is symmetric under `(u, v) -> (-u, -v)`.
pub fn half_index(u: usize, v: usize, h: usize, w: usize) -> (usize, usize) {
    if v <= w / 2 {
        (u, v)
    } else {
        ((h - u) % h, w - v)
    }
}

/// Real part of `IFFT2(D ⊙ FFT2(plane))` with `D` expanded from a half-spectrum
/// mask channel. `mask(u, v)` reads the half-spectrum value.
pub fn filter_plane(plane: &[f64], h: usize, w: usize, mask: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for u in 0..h {
        for v in 0..w {
            let (hu, hv) = half_index(u, v, h, w);
            buf[u * w + v] *= mask(hu, hv);
        }
    }
    fft2(&mut buf, h, w, true);
    buf.iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let (h, w) = (4, 6);
        let plane: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = filter_plane(&plane, h, w, |_, _| 1.0);
        for (a, b) in plane.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn half_index_mirrors() {
        assert_eq!(half_index(1, 5, 4, 8), (3, 3));
        assert_eq!(half_index(0, 7, 4, 8), (0, 1));
        assert_eq!(half_index(2, 4, 4, 8), (2, 4));
    }
}

//! Bilinear resampling shared by hierarchy merging and score-map upsampling.
//!
//! Convention: output sample `k` of an axis resized from `m` to `n` reads the
//! continuous input coordinate `(k + 0.5) * m / n - 0.5`, clamped to `[0, m - 1]`
//! (the "align corners = false" convention).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Interpolation taps for one output sample: `(lo, hi, frac)` reads
/// `(1 - frac) * x[lo] + frac * x[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn axis_taps(m: usize, n: usize) -> Vec<Tap> {
    assert!(m > 0 && n > 0, "axis sizes must be positive");
    let scale = m as f64 / n as f64;
    (0..n)
        .map(|k| {
            let x = ((k as f64 + 0.5) * scale - 0.5).clamp(0.0, (m - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            Tap {
                lo,
                hi,
                frac: x - lo as f64,
            }
        })
        .collect()
}

/// Resizes a single-channel map to `(rows, cols)`.
pub fn bilinear_2d(src: ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (m_r, m_c) = src.dim();
    if (m_r, m_c) == (rows, cols) {
        return src.to_owned();
    }
    let rt = axis_taps(m_r, rows);
    let ct = axis_taps(m_c, cols);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (a, b) = (rt[r], ct[c]);
        let top = (1.0 - b.frac) * src[[a.lo, b.lo]] + b.frac * src[[a.lo, b.hi]];
        let bot = (1.0 - b.frac) * src[[a.hi, b.lo]] + b.frac * src[[a.hi, b.hi]];
        (1.0 - a.frac) * top + a.frac * bot
    })
}

/// Resizes a `(rows, cols, channels)` field spatially, channel by channel.
pub fn bilinear_field(src: ArrayView3<f64>, rows: usize, cols: usize) -> Array3<f64> {
    let (m_r, m_c, ch) = src.dim();
    if (m_r, m_c) == (rows, cols) {
        return src.to_owned();
    }
    let rt = axis_taps(m_r, rows);
    let ct = axis_taps(m_c, cols);
    let mut out = Array3::<f64>::zeros((rows, cols, ch));
    for r in 0..rows {
        let a = rt[r];
        for c in 0..cols {
            let b = ct[c];
            let w = [
                ((1.0 - a.frac) * (1.0 - b.frac), a.lo, b.lo),
                ((1.0 - a.frac) * b.frac, a.lo, b.hi),
                (a.frac * (1.0 - b.frac), a.hi, b.lo),
                (a.frac * b.frac, a.hi, b.hi),
            ];
            let mut dst = out.slice_mut(ndarray::s![r, c, ..]);
            for (wt, rr, cc) in w {
                if wt != 0.0 {
                    dst.scaled_add(wt, &src.slice(ndarray::s![rr, cc, ..]));
                }
            }
        }
    }
    out
}

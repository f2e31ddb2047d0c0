//! Image similarity: MSSIM and pixel-domain VIF.

use crate::error::{Error, Result};

/// Row-major grayscale image with pixels nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(Error::Parameter(format!(
                "image of {rows}x{cols} needs {} pixels, got {}",
                rows * cols,
                pixels.len()
            )));
        }
        Ok(GrayImage { rows, cols, pixels })
    }

    pub fn square(side: usize, pixels: Vec<f64>) -> Result<Self> {
        GrayImage::new(side, side, pixels)
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage { rows: self.rows, cols: self.cols, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &GrayImage, f: impl Fn(f64, f64) -> f64) -> GrayImage {
        GrayImage {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Every second row and column, starting at the first.
    fn downsample(&self) -> GrayImage {
        let rows = self.rows.div_ceil(2);
        let cols = self.cols.div_ceil(2);
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in (0..self.rows).step_by(2) {
            for c in (0..self.cols).step_by(2) {
                pixels.push(self.at(r, c));
            }
        }
        GrayImage { rows, cols, pixels }
    }
}

fn same_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Parameter(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Normalised `n × n` Gaussian centred on the window midpoint.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            w.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

const SSIM_WINDOW: usize = 8;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all 8×8 windows (stride 1, no padding), Gaussian
/// weights with σ = 1.5 and dynamic range 1.
pub fn mssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a, b)?;
    if a.rows < SSIM_WINDOW || a.cols < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "MSSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.rows, a.cols
        )));
    }
    let w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=a.rows - SSIM_WINDOW {
        for j in 0..=a.cols - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let k = w[u * SSIM_WINDOW + v];
                    let x = a.at(i + u, j + v);
                    let y = b.at(i + u, j + v);
                    mx += k * x;
                    my += k * y;
                    xx += k * x * x;
                    yy += k * y * y;
                    xy += k * x * y;
                }
            }
            let sxx = xx - mx * mx;
            let syy = yy - my * my;
            let sxy = xy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Half-sample symmetric extension: `d c b a | a b c d | d c b a`.
fn reflect(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Size-preserving correlation with an odd square window.
fn filter(img: &GrayImage, win: &[f64], n: usize) -> GrayImage {
    let half = (n / 2) as isize;
    let mut out = Vec::with_capacity(img.pixels.len());
    for r in 0..img.rows {
        for c in 0..img.cols {
            let mut acc = 0.0;
            for u in 0..n {
                let rr = reflect(r as isize + u as isize - half, img.rows);
                for v in 0..n {
                    let cc = reflect(c as isize + v as isize - half, img.cols);
                    acc += win[u * n + v] * img.at(rr, cc);
                }
            }
            out.push(acc);
        }
    }
    GrayImage { rows: img.rows, cols: img.cols, pixels: out }
}

const VIF_SIGMA_NSQ: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

/// Pixel-domain visual information fidelity over four scales, on images
/// mapped to `[0, 255]`. Filtering keeps image size (symmetric boundary),
/// so images as small as 8×8 still yield four scales.
pub fn vifp(reference: &GrayImage, distorted: &GrayImage) -> Result<f64> {
    same_dims(reference, distorted)?;
    let first = reference.pixels[0];
    if reference.pixels.iter().all(|&v| v == first) {
        return Err(Error::Parameter("VIFP is undefined for a constant reference image".into()));
    }
    if reference.pixels == distorted.pixels {
        // The regularising epsilon below keeps the ratio a hair under 1 for
        // identical inputs; the information ratio itself is exactly 1.
        return Ok(1.0);
    }
    let mut reference = reference.map(|v| v * 255.0);
    let mut distorted = distorted.map(|v| v * 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let win = gaussian_window(n, n as f64 / 5.0);
        if scale > 1 {
            reference = filter(&reference, &win, n).downsample();
            distorted = filter(&distorted, &win, n).downsample();
        }
        let mu1 = filter(&reference, &win, n);
        let mu2 = filter(&distorted, &win, n);
        let e11 = filter(&reference.zip(&reference, |a, b| a * b), &win, n);
        let e22 = filter(&distorted.zip(&distorted, |a, b| a * b), &win, n);
        let e12 = filter(&reference.zip(&distorted, |a, b| a * b), &win, n);
        for k in 0..reference.pixels.len() {
            let (m1, m2) = (mu1.pixels[k], mu2.pixels[k]);
            let mut s1 = (e11.pixels[k] - m1 * m1).max(0.0);
            let s2 = (e22.pixels[k] - m2 * m2).max(0.0);
            let s12 = e12.pixels[k] - m1 * m2;
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            if sv <= VIF_EPS {
                sv = VIF_EPS;
            }
            num += (1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + s1 / VIF_SIGMA_NSQ).log10();
        }
    }
    Ok(num / den)
}

//! Binary, boundary and attention targets derived from a label map.

use crate::error::{Error, Result};
use crate::instrument;

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "grid",
                format!("{height}×{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Grid {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Class index per pixel; class 0 is unlabeled background.
pub type LabelMap = Grid<u32>;
/// `{0, 1}` mask.
pub type Mask = Grid<u8>;

pub fn binary_target(labels: &LabelMap) -> Mask {
    labels.map(|l| (l != 0) as u8)
}

fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("morphology kernel must be odd, got {k}")));
    }
    Ok(())
}

/// Separable `k×k` max/min filter; out-of-range pixels read as 0.
fn morph(b: &Mask, k: usize, take_max: bool) -> Result<Mask> {
    check_odd(k)?;
    let r = (k / 2) as isize;
    let (h, w) = (b.height as isize, b.width as isize);
    let pass = |src: &[u8], horizontal: bool| -> Vec<u8> {
        let mut out = vec![0u8; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = if take_max { 0u8 } else { 1u8 };
                for d in -r..=r {
                    let (yy, xx) = if horizontal { (y, x + d) } else { (y + d, x) };
                    let v = if (0..h).contains(&yy) && (0..w).contains(&xx) {
                        src[(yy * w + xx) as usize]
                    } else {
                        0
                    };
                    acc = if take_max { acc.max(v) } else { acc.min(v) };
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    };
    let tmp = pass(&b.data, true);
    Ok(Grid {
        height: b.height,
        width: b.width,
        data: pass(&tmp, false),
    })
}

pub fn dilate(b: &Mask, k: usize) -> Result<Mask> {
    morph(b, k, true)
}

/// Zero padding: foreground touching the border erodes away.
pub fn erode(b: &Mask, k: usize) -> Result<Mask> {
    morph(b, k, false)
}

/// Inner boundary `b ∧ ¬erode(b, 3)`.
pub fn boundary_target(b: &Mask) -> Mask {
    let e = erode(b, 3).expect("odd kernel");
    Grid {
        height: b.height,
        width: b.width,
        data: b.data.iter().zip(&e.data).map(|(&x, &y)| x & (1 - y)).collect(),
    }
}

/// Normalized Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

/// Symmetric reflection (`dcb|abcd|cba`), iterated for radii past the edge.
fn reflect(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: &Grid<f64>, sigma: f64) -> Result<Grid<f64>> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let (h, w) = (x.height as isize, x.width as isize);
    let mut tmp = vec![0.0; x.data.len()];
    for y in 0..h {
        for xx in 0..w {
            tmp[(y * w + xx) as usize] = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * x.data[(y * w) as usize + reflect(xx + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; x.data.len()];
    for y in 0..h {
        for xx in 0..w {
            out[(y * w + xx) as usize] = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * tmp[reflect(y + j as isize - r, h) * w as usize + xx as usize])
                .sum();
        }
    }
    Grid::new(x.height, x.width, out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxConfig {
    pub dilation: usize,
    pub sigma: f64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            dilation: 5,
            sigma: 2.0,
        }
    }
}

/// `clamp(blur(dilate(b, k), σ), 0, 1)`.
pub fn attention_target(b: &Mask, cfg: &AuxConfig) -> Result<Grid<f64>> {
    let d = dilate(b, cfg.dilation)?;
    let blurred = gaussian_blur(&d.map(f64::from), cfg.sigma)?;
    Ok(blurred.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxTargets {
    pub binary: Mask,
    pub boundary: Mask,
    pub attention_q: Grid<f64>,
}

impl AuxTargets {
    pub fn from_labels(labels: &LabelMap, cfg: &AuxConfig) -> Result<Self> {
        instrument::count_aux_targets();
        let binary = binary_target(labels);
        let boundary = boundary_target(&binary);
        let attention_q = attention_target(&binary, cfg)?;
        Ok(AuxTargets {
            binary,
            boundary,
            attention_q,
        })
    }
}

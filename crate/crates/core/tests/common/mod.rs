//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use std::collections::HashSet;

use cainet::aux_targets::{Grid, Mask};
use cainet::losses::LovaszClasses;
use cainet::metrics::{MetricOptions, ZeroClass};
use cainet::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> (Vec<usize>, Vec<f64>) {
    let (c, h, wd) = x.dims3().unwrap();
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let per_group_out = co / groups;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let g = o / per_group_out;
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.map_or(0.0, |b| b[o]);
                for i in 0..ci {
                    let cin = g * ci + i;
                    assert!(cin < c);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.get(&[o, i, ky, kx]) * x.get(&[cin, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    (vec![co, oh, ow], out)
}

/// mAcc and mIoU from pixel-index sets, with no confusion matrix.
pub fn set_oracle(pred: &[u32], truth: &[u32], k: u32, opts: &MetricOptions) -> (f64, f64) {
    let set = |v: &[u32], c: u32| -> HashSet<usize> { (0..v.len()).filter(|&i| v[i] == c).collect() };
    let (mut acc, mut na, mut iou, mut ni) = (0.0, 0, 0.0, 0);
    let first = if opts.include_unlabeled { 0 } else { 1 };
    for c in first..k {
        let (t, p) = (set(truth, c), set(pred, c));
        let inter = t.intersection(&p).count();
        let union = t.union(&p).count();
        if !t.is_empty() {
            acc += inter as f64 / t.len() as f64;
            na += 1;
        } else if opts.zero_class == ZeroClass::Zero {
            na += 1;
        }
        if union > 0 {
            iou += inter as f64 / union as f64;
            ni += 1;
        } else if opts.zero_class == ZeroClass::Zero {
            ni += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(acc, na), mean(iou, ni))
}

/// Max (or min) over the full `k×k` neighbourhood, with 0 outside the image.
pub fn brute_morph(b: &Mask, k: usize, take_max: bool) -> Mask {
    let r = (k / 2) as isize;
    let (h, w) = (b.height as isize, b.width as isize);
    let mut out = Vec::with_capacity(b.data.len());
    for y in 0..h {
        for x in 0..w {
            let mut vals = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = (0..h).contains(&yy) && (0..w).contains(&xx);
                    vals.push(if inside { b.get(yy as usize, xx as usize) } else { 0 });
                }
            }
            out.push(if take_max { *vals.iter().max().unwrap() } else { *vals.iter().min().unwrap() });
        }
    }
    Grid::new(b.height, b.width, out).unwrap()
}

/// Jaccard loss of class `k` when the pixels in `mistakes` are mispredicted.
pub fn jaccard_loss(mistakes: &[bool], labels: &[u32], k: u32) -> f64 {
    let m = mistakes.iter().filter(|&&b| b).count();
    let union = labels
        .iter()
        .zip(mistakes)
        .filter(|&(&l, &b)| l == k || b)
        .count();
    if union == 0 {
        0.0
    } else {
        m as f64 / union as f64
    }
}

/// Lovász extension as an integral over thresholds: `∫₀¹ Δ({i : m_i ≥ t}) dt`,
/// evaluated exactly on the piecewise-constant level sets.
pub fn extension_by_level_sets(err: &[f64], labels: &[u32], k: u32) -> f64 {
    let mut levels: Vec<f64> = err.to_vec();
    levels.push(0.0);
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    let mut total = 0.0;
    for w in levels.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let set: Vec<bool> = err.iter().map(|&e| e >= hi).collect();
        total += (hi - lo) * jaccard_loss(&set, labels, k);
    }
    total
}

pub fn lovasz_oracle(probs: &[f64], labels: &[u32], c: usize, set: LovaszClasses) -> f64 {
    let n = labels.len();
    let mut sum = 0.0;
    let mut count = 0;
    for k in 0..c as u32 {
        if set == LovaszClasses::Present && !labels.contains(&k) {
            continue;
        }
        let err: Vec<f64> = (0..n)
            .map(|i| {
                let p = probs[k as usize * n + i];
                if labels[i] == k {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        sum += extension_by_level_sets(&err, labels, k);
        count += 1;
    }
    sum / count.max(1) as f64
}

/// All 3-class probability vectors on a 0.1 grid.
pub fn simplex_grid() -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for a in 0..=10 {
        for b in 0..=10 - a {
            let (p0, p1) = (a as f64 / 10.0, b as f64 / 10.0);
            out.push([p0, p1, 1.0 - p0 - p1]);
        }
    }
    out
}


/// Row-major `m×k · k×n` by the triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

//! Training objectives as fused tape ops with analytic adjoints.
//!
//! Every loss takes logits or probability maps of shape `C×H×W` and a target
//! of `H×W` pixels, and returns a rank-0 tensor. Inner arithmetic runs in
//! `f64` regardless of the tape's element type.

use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::{CustomOp, Float, Tape, Tensor, Var};

/// Probability floor (and `1 − floor` ceiling) inside every logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
/// Guard added to the product of standard deviations in the attention loss.
pub const CORR_EPS: f64 = 1e-8;

/// `w_c = 1 / ln(1.02 + p_c)`.
pub fn enet_class_weights(freqs: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = freqs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidArgument(format!("class frequency {p} is negative")));
    }
    let total: f64 = freqs.iter().sum();
    if total > 1.0 + 1e-6 {
        return Err(Error::InvalidArgument(format!("class frequencies sum to {total} > 1")));
    }
    Ok(freqs.iter().map(|p| 1.0 / (1.02 + p).ln()).collect())
}

/// Pixel proportions of each class over a set of label maps.
pub fn class_frequencies<'a>(labels: impl IntoIterator<Item = &'a [u32]>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for map in labels {
        for &l in map {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

fn check_labels(labels: &[u32], classes: usize, pixels: usize) -> Result<()> {
    if labels.len() != pixels {
        return Err(Error::dim("labels", &[labels.len()], &[pixels]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Per-pixel softmax over the leading axis, in `f64`.
fn softmax_pixels<T: Float>(logits: &Tensor<T>) -> Vec<f64> {
    let (c, h, w) = logits.dims3().expect("C×H×W logits");
    let hw = h * w;
    let x = logits.data();
    let mut p = vec![0f64; c * hw];
    for i in 0..hw {
        let max = (0..c).map(|k| x[k * hw + i].widen()).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for k in 0..c {
            let e = (x[k * hw + i].widen() - max).exp();
            p[k * hw + i] = e;
            s += e;
        }
        for k in 0..c {
            p[k * hw + i] /= s;
        }
    }
    p
}

/// Chains `dL/dp` through the per-pixel softmax.
fn softmax_pixels_backward<T: Float>(p: &[f64], dp: &[f64], c: usize, scale: f64) -> Vec<T> {
    let hw = p.len() / c;
    let mut dz = vec![T::zero(); p.len()];
    for i in 0..hw {
        let dot: f64 = (0..c).map(|k| p[k * hw + i] * dp[k * hw + i]).sum();
        for k in 0..c {
            dz[k * hw + i] = T::narrow(scale * p[k * hw + i] * (dp[k * hw + i] - dot));
        }
    }
    dz
}

/// Which classes the Lovász average runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LovaszClasses {
    /// Classes present in the ground truth.
    #[default]
    Present,
    All,
}

impl std::str::FromStr for LovaszClasses {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "present" => Ok(LovaszClasses::Present),
            "all" => Ok(LovaszClasses::All),
            _ => Err(Error::Config(format!("unknown lovasz class set `{s}`"))),
        }
    }
}

/// Gradient of the Lovász extension of the Jaccard loss at a sorted
/// foreground indicator.
pub fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = fg_sorted.iter().sum();
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        cum_fg += f;
        cum_bg += 1.0 - f;
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

struct LovaszPlan {
    /// `(class, order, grad)` per averaged class.
    classes: Vec<(usize, Vec<usize>, Vec<f64>)>,
    loss: f64,
}

fn lovasz_plan(p: &[f64], labels: &[u32], c: usize, set: LovaszClasses, ignore: Option<u32>) -> LovaszPlan {
    let hw = labels.len();
    let pixels: Vec<usize> = (0..hw).filter(|&i| Some(labels[i]) != ignore).collect();
    let mut classes = Vec::new();
    let mut total = 0.0;
    for k in 0..c {
        let fg: Vec<f64> = pixels.iter().map(|&i| (labels[i] as usize == k) as u8 as f64).collect();
        if set == LovaszClasses::Present && fg.iter().all(|&f| f == 0.0) {
            continue;
        }
        let err: Vec<f64> = pixels
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| (f - p[k * hw + i]).abs())
            .collect();
        let mut order: Vec<usize> = (0..pixels.len()).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let fg_sorted: Vec<f64> = order.iter().map(|&j| fg[j]).collect();
        let grad = lovasz_grad(&fg_sorted);
        total += order.iter().zip(&grad).map(|(&j, g)| err[j] * g).sum::<f64>();
        let order = order.into_iter().map(|j| pixels[j]).collect();
        classes.push((k, order, grad));
    }
    let n = classes.len().max(1) as f64;
    LovaszPlan {
        classes,
        loss: total / n,
    }
}

struct LovaszOp {
    labels: Vec<u32>,
    set: LovaszClasses,
    ignore: Option<u32>,
}

impl<T: Float> CustomOp<T> for LovaszOp {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let c = logits.shape()[0];
        let hw = self.labels.len();
        let p = softmax_pixels(logits);
        let plan = lovasz_plan(&p, &self.labels, c, self.set, self.ignore);
        let n = plan.classes.len().max(1) as f64;
        let mut dp = vec![0f64; p.len()];
        for (k, order, grad) in &plan.classes {
            for (&i, g) in order.iter().zip(grad) {
                // err = 1 − p on foreground, p elsewhere.
                let sign = if self.labels[i] as usize == *k { -1.0 } else { 1.0 };
                dp[k * hw + i] += sign * g / n;
            }
        }
        let dz = softmax_pixels_backward(&p, &dp, c, grad_out.item().widen());
        vec![Some(Tensor::new(logits.shape().to_vec(), dz).expect("shape"))]
    }
}

/// Lovász-softmax surrogate of the mean Jaccard loss.
pub fn lovasz_softmax<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u32],
    set: LovaszClasses,
    ignore: Option<u32>,
) -> Result<Var> {
    let (c, h, w) = tape.value(logits).dims3()?;
    check_labels(labels, c, h * w)?;
    instrument::count_loss();
    let p = softmax_pixels(tape.value(logits));
    let plan = lovasz_plan(&p, labels, c, set, ignore);
    if tape.branch_fingerprint().is_some() {
        for (_, order, _) in &plan.classes {
            tape.note_branches(order.iter().map(|&i| i as u32));
        }
    }
    let op = LovaszOp {
        labels: labels.to_vec(),
        set,
        ignore,
    };
    Ok(tape.custom(&[logits], Tensor::scalar(T::narrow(plan.loss)), Box::new(op)))
}

/// Lovász-softmax value on probabilities, without a tape.
pub fn lovasz_softmax_value(probs: &[f64], labels: &[u32], num_classes: usize, set: LovaszClasses) -> f64 {
    lovasz_plan(probs, labels, num_classes, set, None).loss
}

struct CrossEntropyOp {
    labels: Vec<u32>,
    weights: Vec<f64>,
    ignore: Option<u32>,
}

impl CrossEntropyOp {
    fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| Some(l) != self.ignore).count()
    }

    fn value(&self, p: &[f64], notes: &mut Vec<u32>) -> f64 {
        let hw = self.labels.len();
        let mut s = 0.0;
        for (i, &l) in self.labels.iter().enumerate() {
            if Some(l) == self.ignore {
                continue;
            }
            let py = p[l as usize * hw + i];
            notes.push((py < PROB_CLAMP) as u32);
            s -= self.weights[l as usize] * py.max(PROB_CLAMP).ln();
        }
        s / self.count().max(1) as f64
    }
}

impl<T: Float> CustomOp<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "weighted_cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let c = logits.shape()[0];
        let hw = self.labels.len();
        let p = softmax_pixels(logits);
        let scale = grad_out.item().widen() / self.count().max(1) as f64;
        let mut dz = vec![T::zero(); p.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            let y = l as usize;
            if Some(l) == self.ignore || p[y * hw + i] < PROB_CLAMP {
                continue;
            }
            let w = self.weights[y] * scale;
            for k in 0..c {
                let onehot = (k == y) as u8 as f64;
                dz[k * hw + i] = T::narrow(w * (p[k * hw + i] - onehot));
            }
        }
        vec![Some(Tensor::new(logits.shape().to_vec(), dz).expect("shape"))]
    }
}

/// `−(1/N) Σ w_y log softmax(z)_y`. `weights = None` is plain cross-entropy.
pub fn weighted_cross_entropy<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u32],
    weights: Option<&[f64]>,
    ignore: Option<u32>,
) -> Result<Var> {
    let (c, h, w) = tape.value(logits).dims3()?;
    check_labels(labels, c, h * w)?;
    let weights = match weights {
        Some(ws) if ws.len() != c => return Err(Error::dim("class weights", &[ws.len()], &[c])),
        Some(ws) => ws.to_vec(),
        None => vec![1.0; c],
    };
    instrument::count_loss();
    let op = CrossEntropyOp {
        labels: labels.to_vec(),
        weights,
        ignore,
    };
    let p = softmax_pixels(tape.value(logits));
    let mut notes = Vec::new();
    let v = op.value(&p, &mut notes);
    tape.note_branches(notes);
    Ok(tape.custom(&[logits], Tensor::scalar(T::narrow(v)), Box::new(op)))
}

struct BceOp {
    target: Vec<u8>,
    weights: [f64; 2],
}

impl<T: Float> CustomOp<T> for BceOp {
    fn name(&self) -> &'static str {
        "weighted_binary_cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let pred = inputs[0];
        let scale = grad_out.item().widen() / self.target.len() as f64;
        let g = pred
            .data()
            .iter()
            .zip(&self.target)
            .map(|(&p, &t)| {
                let p = p.widen();
                if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                    return T::zero();
                }
                let d = if t != 0 {
                    -self.weights[1] / p
                } else {
                    self.weights[0] / (1.0 - p)
                };
                T::narrow(scale * d)
            })
            .collect();
        vec![Some(Tensor::new(pred.shape().to_vec(), g).expect("shape"))]
    }
}

/// Binary cross-entropy with weight `weights[1]` on positives and
/// `weights[0]` on negatives. `pred` holds probabilities.
pub fn weighted_binary_cross_entropy<T: Float>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &[u8],
    weights: [f64; 2],
) -> Result<Var> {
    if tape.value(pred).numel() != target.len() {
        return Err(Error::dim("binary cross-entropy", tape.shape(pred), &[target.len()]));
    }
    instrument::count_loss();
    let mut notes = Vec::with_capacity(target.len());
    let mut s = 0.0;
    for (&p, &t) in tape.value(pred).data().iter().zip(target) {
        let raw = p.widen();
        notes.push((raw < PROB_CLAMP) as u32 + 2 * (raw > 1.0 - PROB_CLAMP) as u32);
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        s -= if t != 0 {
            weights[1] * p.ln()
        } else {
            weights[0] * (1.0 - p).ln()
        };
    }
    tape.note_branches(notes);
    let v = s / target.len().max(1) as f64;
    let op = BceOp {
        target: target.to_vec(),
        weights,
    };
    Ok(tape.custom(&[pred], Tensor::scalar(T::narrow(v)), Box::new(op)))
}

struct AttentionOp {
    q: Vec<f64>,
}

struct Moments {
    mean_p: f64,
    mean_q: f64,
    sd_p: f64,
    sd_q: f64,
    cov: f64,
    mse: f64,
}

fn moments(p: &[f64], q: &[f64]) -> Moments {
    let n = p.len() as f64;
    let mean_p = p.iter().sum::<f64>() / n;
    let mean_q = q.iter().sum::<f64>() / n;
    let (mut vp, mut vq, mut cov, mut mse) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        vp += (a - mean_p) * (a - mean_p);
        vq += (b - mean_q) * (b - mean_q);
        cov += (a - mean_p) * (b - mean_q);
        mse += (a - b) * (a - b);
    }
    Moments {
        mean_p,
        mean_q,
        sd_p: (vp / n).sqrt(),
        sd_q: (vq / n).sqrt(),
        cov: cov / n,
        mse: mse / n,
    }
}

/// `mse − cov / (sd_p·sd_q + ε)` with population moments.
pub fn attention_loss_value(pred: &[f64], q: &[f64]) -> f64 {
    let m = moments(pred, q);
    m.mse - m.cov / (m.sd_p * m.sd_q + CORR_EPS)
}

impl<T: Float> CustomOp<T> for AttentionOp {
    fn name(&self) -> &'static str {
        "attention_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let pred = inputs[0];
        let p = pred.to_f64_vec();
        let m = moments(&p, &self.q);
        let n = p.len() as f64;
        let denom = m.sd_p * m.sd_q + CORR_EPS;
        let go = grad_out.item().widen();
        let g = p
            .iter()
            .zip(&self.q)
            .map(|(&a, &b)| {
                let d_mse = 2.0 * (a - b) / n;
                let d_cov = (b - m.mean_q) / n;
                let d_sd = if m.sd_p > 0.0 { (a - m.mean_p) / (n * m.sd_p) } else { 0.0 };
                let d_corr = (d_cov * denom - m.cov * m.sd_q * d_sd) / (denom * denom);
                T::narrow(go * (d_mse - d_corr))
            })
            .collect();
        vec![Some(Tensor::new(pred.shape().to_vec(), g).expect("shape"))]
    }
}

pub fn attention_loss<T: Float>(tape: &mut Tape<T>, pred: Var, q: &[f64]) -> Result<Var> {
    if tape.value(pred).numel() != q.len() {
        return Err(Error::dim("attention_loss", tape.shape(pred), &[q.len()]));
    }
    instrument::count_loss();
    let v = attention_loss_value(&tape.value(pred).to_f64_vec(), q);
    let op = AttentionOp { q: q.to_vec() };
    Ok(tape.custom(&[pred], Tensor::scalar(T::narrow(v)), Box::new(op)))
}

/// Scalar loss components of one sample (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_target: f64,
    pub l_att1: f64,
    pub l_att2: f64,
    pub l_binary: f64,
    pub l_boundary: f64,
    pub l_decoder: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn accumulate(&mut self, other: &LossReport, scale: f64) {
        self.l_target += scale * other.l_target;
        self.l_att1 += scale * other.l_att1;
        self.l_att2 += scale * other.l_att2;
        self.l_binary += scale * other.l_binary;
        self.l_boundary += scale * other.l_boundary;
        self.l_decoder += scale * other.l_decoder;
        self.l_total += scale * other.l_total;
    }

    /// Fixed-order `key=value` fields for the training log.
    pub fn log_fields(&self) -> String {
        format!(
            "l_total={:.6} l_target={:.6} l_att1={:.6} l_att2={:.6} l_binary={:.6} l_boundary={:.6} l_decoder={:.6}",
            self.l_total, self.l_target, self.l_att1, self.l_att2, self.l_binary, self.l_boundary, self.l_decoder
        )
    }
}

/// Which terms of the total objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub target: bool,
    pub attention: bool,
    pub binary: bool,
    pub boundary: bool,
    pub decoder: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            target: true,
            attention: true,
            binary: true,
            boundary: true,
            decoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub class: Vec<f64>,
    pub binary: [f64; 2],
    pub boundary: [f64; 2],
}

impl LossWeights {
    pub fn uniform(num_classes: usize) -> Self {
        LossWeights {
            class: vec![1.0; num_classes],
            binary: [1.0; 2],
            boundary: [1.0; 2],
        }
    }

    /// ENet weights from label, binary and boundary pixel frequencies.
    pub fn from_frequencies(class_freqs: &[f64], binary_pos: f64, boundary_pos: f64) -> Result<Self> {
        let b = enet_class_weights(&[1.0 - binary_pos, binary_pos])?;
        let e = enet_class_weights(&[1.0 - boundary_pos, boundary_pos])?;
        Ok(LossWeights {
            class: enet_class_weights(class_freqs)?,
            binary: [b[0], b[1]],
            boundary: [e[0], e[1]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enet_reference_values() {
        let w = enet_class_weights(&[0.0, 1.0]).unwrap();
        assert!((w[0] - 1.0 / 1.02f64.ln()).abs() < 1e-12);
        assert!((w[0] - 50.4983).abs() < 1e-3);
        assert!((w[1] - 1.0 / 2.02f64.ln()).abs() < 1e-12);
        assert!((w[1] - 1.4224).abs() < 5e-4);
        assert!(enet_class_weights(&[-0.1]).is_err());
    }

    #[test]
    fn lovasz_grad_length_one() {
        assert_eq!(lovasz_grad(&[1.0]), vec![1.0]);
        assert_eq!(lovasz_grad(&[0.0]), vec![1.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([2, 1, 3]), true);
        let l = weighted_cross_entropy(&mut tape, z, &[0, 1, 1], Some(&[1.0, 1.0]), None).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }
}

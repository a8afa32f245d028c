//! Finite-difference checks over every module's composite forward.
//!
//! Each registered case builds small random `f64` inputs and parameters from
//! a seed, registers the inputs as parameters too (so their adjoints are
//! checked), and reduces the module output to `Σ out ⊙ R` with a fixed random
//! `R`. Loss cases differentiate the loss itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arlm::{ArlmStage, ArlmStream, StreamInputs};
use crate::backbone::{CoarseDecoder, InvertedResidual};
use crate::cacr::{Cacr, ModalityOrder};
use crate::detail::DetailAggregation;
use crate::error::Result;
use crate::gcm::Gcm;
use crate::losses::{attention_loss, lovasz_softmax, weighted_binary_cross_entropy, weighted_cross_entropy, LovaszClasses};
use crate::tensor::{GradCheck, GradCheckReport, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};

/// Forward closure of one case: builds the scalar on `tape`.
pub type Forward = Box<dyn FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>;

/// Parameters and forward of one seeded instance.
pub struct Case {
    pub store: ParamStore<f64>,
    pub forward: Forward,
}

type Builder = Box<dyn Fn(u64) -> Result<Case>>;

pub struct GradSuite {
    pub check: GradCheck,
    /// Seeded instances per module.
    pub instances: usize,
    entries: Vec<(String, Builder)>,
}

impl GradSuite {
    pub fn empty(instances: usize) -> Self {
        GradSuite {
            check: GradCheck::default(),
            instances,
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, build: impl Fn(u64) -> Result<Case> + 'static) {
        self.entries.push((name.into(), Box::new(build)));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// One merged report per registered module, in registration order.
    pub fn run(&self) -> Result<Vec<GradCheckReport>> {
        let mut reports = Vec::with_capacity(self.entries.len());
        for (name, build) in &self.entries {
            let mut merged: Option<GradCheckReport> = None;
            for seed in 0..self.instances as u64 {
                let mut case = build(seed)?;
                let r = self.check.check(name, &mut case.store, &mut case.forward)?;
                match &mut merged {
                    Some(m) => m.merge(&r),
                    None => merged = Some(r),
                }
            }
            if let Some(m) = merged {
                reports.push(m);
            }
        }
        Ok(reports)
    }
}

impl Default for GradSuite {
    /// Every model module and loss, five instances each.
    fn default() -> Self {
        let mut s = GradSuite::empty(5);
        s.register("cacr", cacr_case);
        s.register("gcm", gcm_case);
        s.register("detail_aggregation", da_case);
        s.register("arlm_stage", arlm_stage_case);
        s.register("arlm_stream", arlm_stream_case);
        s.register("inverted_residual", inverted_residual_case);
        s.register("decoder_ce", decoder_case);
        s.register("lovasz_softmax", lovasz_case);
        s.register("weighted_ce", ce_case);
        s.register("weighted_bce", bce_case);
        s.register("attention_loss", attention_case);
        s
    }
}

fn seed_for(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt
}

/// Uniform `[-1, 1)` tensor registered as parameter `name`.
pub fn random_input(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<ParamId> {
    let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    store.add(name, t)
}

/// Random projection weights for every output, paired with the output vars by position.
fn projections(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .map(|s| Tensor::from_fn(s.clone(), |_| rng.random_range(-1.0..1.0)))
        .collect()
}

/// `Σ_k Σ outputs[k] ⊙ r[k]`.
pub fn project(tape: &mut Tape<f64>, outputs: &[Var], r: &[Tensor<f64>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&o, r) in outputs.iter().zip(r) {
        let rv = tape.constant(r.clone());
        let m = tape.mul(o, rv)?;
        let s = tape.sum(m);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one output"))
}

/// Wraps a module forward returning several outputs into a projected scalar case.
fn projected(
    store: ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    mut outputs: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Vec<Var>> + 'static,
) -> Result<Case> {
    let mut probe = Tape::no_grad();
    let outs = outputs(&mut probe, &store)?;
    let shapes: Vec<Vec<usize>> = outs.iter().map(|&v| probe.shape(v).to_vec()).collect();
    let r = projections(rng, &shapes);
    Ok(Case {
        store,
        forward: Box::new(move |tape, store| {
            let outs = outputs(tape, store)?;
            project(tape, &outs, &r)
        }),
    })
}

fn cacr_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 1));
    let mut store = ParamStore::new();
    let order = if seed % 2 == 0 { ModalityOrder::RgbFirst } else { ModalityOrder::ThermalFirst };
    let m = Cacr::new(&mut ParamBuilder::new(&mut store, seed), "cacr", 6, order)?;
    let a = random_input(&mut store, &mut rng, "input.rgb", &[6, 3, 4])?;
    let b = random_input(&mut store, &mut rng, "input.thermal", &[6, 3, 4])?;
    projected(store, &mut rng, move |tape, store| {
        let (a, b) = (tape.param(store, a), tape.param(store, b));
        Ok(vec![m.forward(tape, store, a, b)?])
    })
}

fn gcm_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 2));
    let mut store = ParamStore::new();
    let m = Gcm::new(&mut ParamBuilder::new(&mut store, seed), "gcm", 10, 4)?;
    let x = random_input(&mut store, &mut rng, "input.crc", &[10, 3, 3])?;
    projected(store, &mut rng, move |tape, store| {
        let x = tape.param(store, x);
        Ok(vec![m.forward(tape, store, x)?])
    })
}

fn da_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 3));
    let mut store = ParamStore::new();
    let m = DetailAggregation::new(&mut ParamBuilder::new(&mut store, seed), "da", 4, 2)?;
    let a = random_input(&mut store, &mut rng, "input.rgb", &[4, 5, 5])?;
    let b = random_input(&mut store, &mut rng, "input.thermal", &[4, 5, 5])?;
    projected(store, &mut rng, move |tape, store| {
        let (a, b) = (tape.param(store, a), tape.param(store, b));
        Ok(vec![m.forward(tape, store, a, b)?])
    })
}

fn arlm_stage_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 4));
    let mut store = ParamStore::new();
    let m = ArlmStage::new(&mut ParamBuilder::new(&mut store, seed), "arlm.stage", 4, 3, 3, true)?;
    let g = random_input(&mut store, &mut rng, "input.guide", &[4, 2, 2])?;
    let l = random_input(&mut store, &mut rng, "input.level", &[3, 4, 4])?;
    let p = random_input(&mut store, &mut rng, "input.prior", &[3, 2, 2])?;
    projected(store, &mut rng, move |tape, store| {
        let (g, l, p) = (tape.param(store, g), tape.param(store, l), tape.param(store, p));
        let o = m.forward(tape, store, g, l, Some(p), (8, 8))?;
        Ok([Some(o.refined), Some(o.logits), o.aux].into_iter().flatten().collect())
    })
}

fn arlm_stream_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 5));
    let mut store = ParamStore::new();
    let inputs = StreamInputs {
        global: 3,
        cr5: 4,
        cr4: 2,
        cr3: 2,
        d2: 2,
        d1: 2,
    };
    let m = ArlmStream::new(&mut ParamBuilder::new(&mut store, seed), "arlm", inputs, 4, 2, true)?;
    let g = random_input(&mut store, &mut rng, "input.g", &[3, 2, 2])?;
    let c5 = random_input(&mut store, &mut rng, "input.cr5", &[4, 2, 2])?;
    let c4 = random_input(&mut store, &mut rng, "input.cr4", &[2, 2, 2])?;
    let c3 = random_input(&mut store, &mut rng, "input.cr3", &[2, 2, 2])?;
    let d2 = random_input(&mut store, &mut rng, "input.d2", &[2, 4, 4])?;
    let d1 = random_input(&mut store, &mut rng, "input.d1", &[2, 8, 8])?;
    projected(store, &mut rng, move |tape, store| {
        let v: Vec<Var> = [g, c5, c4, c3, d2, d1].iter().map(|&id| tape.param(store, id)).collect();
        let o = m.forward(tape, store, v[0], v[1], v[2], v[3], v[4], v[5], (8, 8))?;
        let mut outs = o.p.to_vec();
        outs.extend(o.att.into_iter().flatten());
        outs.extend(o.binary);
        outs.extend(o.boundary);
        Ok(outs)
    })
}

fn inverted_residual_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 6));
    let mut store = ParamStore::new();
    let stride = 1 + (seed as usize % 2);
    let (c_in, c_out) = if stride == 1 { (3, 3) } else { (3, 4) };
    let m = InvertedResidual::new(&mut ParamBuilder::new(&mut store, seed), "block", c_in, c_out, 3, stride)?;
    // Inputs are scaled into ReLU6's linear band so few elements sit at a clip.
    let x = store.add("input.x", Tensor::from_fn([c_in, 4, 4], |_| rng.random_range(0.1..0.9)))?;
    projected(store, &mut rng, move |tape, store| {
        let x = tape.param(store, x);
        Ok(vec![m.forward(tape, store, x)?])
    })
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..k as u32)).collect()
}

fn decoder_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 7));
    let mut store = ParamStore::new();
    let m = CoarseDecoder::new(&mut ParamBuilder::new(&mut store, seed), "decoder", 3, 4, 3)?;
    let x = random_input(&mut store, &mut rng, "input.feature", &[3, 2, 2])?;
    let labels = random_labels(&mut rng, 36, 3);
    Ok(Case {
        store,
        forward: Box::new(move |tape, store| {
            let x = tape.param(store, x);
            let logits = m.forward(tape, store, x, 6, 6)?;
            weighted_cross_entropy(tape, logits, &labels, None, None)
        }),
    })
}

fn logits_case(
    seed: u64,
    salt: u64,
    shape: [usize; 3],
    loss: impl Fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, salt));
    let mut store = ParamStore::new();
    let x = store.add("logits", Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0)))?;
    let fixed = rng.random::<u64>();
    Ok(Case {
        store,
        forward: Box::new(move |tape, store| {
            let x = tape.param(store, x);
            // The same per-case targets on every evaluation.
            let mut r = ChaCha8Rng::seed_from_u64(fixed);
            loss(tape, x, &mut r)
        }),
    })
}

fn lovasz_case(seed: u64) -> Result<Case> {
    let set = if seed % 2 == 0 { LovaszClasses::Present } else { LovaszClasses::All };
    logits_case(seed, 8, [3, 3, 3], move |tape, x, r| {
        let labels = random_labels(r, 9, 3);
        lovasz_softmax(tape, x, &labels, set, None)
    })
}

fn ce_case(seed: u64) -> Result<Case> {
    logits_case(seed, 9, [4, 3, 3], |tape, x, r| {
        let labels = random_labels(r, 9, 4);
        let w: Vec<f64> = (0..4).map(|_| r.random_range(0.5..3.0)).collect();
        weighted_cross_entropy(tape, x, &labels, Some(&w), None)
    })
}

fn bce_case(seed: u64) -> Result<Case> {
    logits_case(seed, 10, [1, 4, 4], |tape, x, r| {
        let t: Vec<u8> = (0..16).map(|_| r.random_range(0..2u8)).collect();
        let w = [r.random_range(0.5..3.0), r.random_range(0.5..3.0)];
        let p = tape.sigmoid(x);
        weighted_binary_cross_entropy(tape, p, &t, w)
    })
}

fn attention_case(seed: u64) -> Result<Case> {
    logits_case(seed, 11, [1, 4, 4], |tape, x, r| {
        let q: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
        let p = tape.sigmoid(x);
        attention_loss(tape, p, &q)
    })
}

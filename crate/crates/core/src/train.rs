//! Staged training, evaluation and inference.
//!
//! Stages run in the order `rgb → thermal → gcm → full`. Each stage rebuilds
//! the whole model from the run seed, loads the checkpoints of the stages it
//! depends on and trains whatever parameters its forward pass reaches.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aux_targets::{AuxTargets, LabelMap};
use crate::config::{ClassWeighting, Stage, TrainConfig};
use crate::dataset::{self, DatasetManifest, SegSample, Split};
use crate::error::{Error, Result};
use crate::losses::{class_frequencies, LossReport, LossWeights};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_labels, objective, CaiNet, LossSetup, ModelConfig, Pass};
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, ParamStore, Tape, Tensor};

/// Suffix of the coarse-head classifiers every checkpoint carries; their
/// leading extent is the class count.
pub const CLASS_PROBE: &str = ".classify.weight";

impl Stage {
    pub fn pass(self) -> Pass {
        match self {
            Stage::Rgb => Pass::Rgb,
            Stage::Thermal => Pass::Thermal,
            Stage::Gcm => Pass::Gcm,
            Stage::Full | Stage::All => Pass::Full,
        }
    }

    /// Pass whose prediction is validated while this stage trains.
    pub fn eval_pass(self) -> Pass {
        match self {
            Stage::Full | Stage::All => Pass::Inference,
            s => s.pass(),
        }
    }

    pub fn checkpoint_name(self) -> String {
        format!("{}.ckpt", self.as_str())
    }

    /// Whether this stage's checkpoint keeps parameter `name`.
    fn keeps(self, name: &str) -> bool {
        match self {
            Stage::Rgb => name.starts_with("encoder.rgb.") || name.starts_with("decoder.rgb."),
            Stage::Thermal => name.starts_with("encoder.thermal.") || name.starts_with("decoder.thermal."),
            _ => true,
        }
    }

    /// Stages whose checkpoints must exist before this one starts.
    pub fn prerequisites(self, thermal: bool) -> Vec<Stage> {
        match self {
            Stage::Rgb | Stage::Thermal | Stage::All => vec![],
            Stage::Gcm if thermal => vec![Stage::Rgb, Stage::Thermal],
            Stage::Gcm => vec![Stage::Rgb],
            Stage::Full => vec![Stage::Gcm],
        }
    }
}

/// Stages `stage` expands to, given whether the thermal stream exists.
pub fn stage_plan(stage: Stage, thermal: bool) -> Vec<Stage> {
    match stage {
        Stage::All if thermal => vec![Stage::Rgb, Stage::Thermal, Stage::Gcm, Stage::Full],
        Stage::All => vec![Stage::Rgb, Stage::Gcm, Stage::Full],
        Stage::Thermal if !thermal => vec![],
        s => vec![s],
    }
}

/// One normalized training or validation example.
#[derive(Clone, Debug)]
pub struct Example {
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub labels: LabelMap,
    pub aux: Option<AuxTargets>,
}

fn normalize(t: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Tensor<f32> {
    let c = t.shape()[0];
    let plane = t.numel() / c.max(1);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i / plane;
        *v = (*v - mean[ch]) / std[ch];
    }
    out
}

impl Example {
    pub fn from_sample(s: &SegSample, cfg: &TrainConfig, with_aux: bool) -> Result<Self> {
        Ok(Example {
            rgb: normalize(&s.rgb, &cfg.norm_mean[..3], &cfg.norm_std[..3]),
            thermal: normalize(&s.thermal, &cfg.norm_mean[3..], &cfg.norm_std[3..]),
            labels: s.labels.clone(),
            aux: if with_aux {
                Some(AuxTargets::from_labels(&s.labels, &cfg.aux)?)
            } else {
                None
            },
        })
    }
}

/// Training examples with their mirrored copies, and validation examples.
pub struct PreparedData {
    pub manifest: DatasetManifest,
    /// `train[i][0]` is the sample as stored, `train[i][1]` its mirror (if augmenting).
    pub train: Vec<Vec<Example>>,
    pub val: Vec<Example>,
    pub weights: LossWeights,
}

impl PreparedData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let manifest = DatasetManifest::load(&cfg.data_root)?;
        let train = dataset::load_split(&cfg.data_root, &manifest, Split::Train)?;
        let val = dataset::load_split(&cfg.data_root, &manifest, Split::Val)?;
        Self::from_samples(cfg, manifest, &train, &val)
    }

    pub fn from_samples(
        cfg: &TrainConfig,
        manifest: DatasetManifest,
        train: &[SegSample],
        val: &[SegSample],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let with_aux =
            cfg.modules.arlm && (cfg.losses.attention || cfg.losses.binary || cfg.losses.boundary);
        let mut prepared = Vec::with_capacity(train.len());
        for s in train {
            let mut variants = vec![Example::from_sample(s, cfg, with_aux)?];
            if cfg.augment_flip {
                variants.push(Example::from_sample(&s.flipped(), cfg, with_aux)?);
            }
            prepared.push(variants);
        }
        let val = val
            .iter()
            .map(|s| Example::from_sample(s, cfg, false))
            .collect::<Result<Vec<_>>>()?;
        let weights = match cfg.class_weights {
            ClassWeighting::Uniform => LossWeights::uniform(manifest.num_classes),
            ClassWeighting::Enet => {
                let freqs = class_frequencies(train.iter().map(|s| s.labels.data.as_slice()), manifest.num_classes);
                let aux: Vec<AuxTargets> = if with_aux {
                    prepared.iter().filter_map(|v| v[0].aux.clone()).collect()
                } else {
                    train
                        .iter()
                        .map(|s| AuxTargets::from_labels(&s.labels, &cfg.aux))
                        .collect::<Result<_>>()?
                };
                let frac = |f: &dyn Fn(&AuxTargets) -> &[u8]| {
                    let (on, all) = aux.iter().fold((0usize, 0usize), |(on, all), a| {
                        let m = f(a);
                        (on + m.iter().filter(|&&v| v > 0).count(), all + m.len())
                    });
                    on as f64 / all.max(1) as f64
                };
                let binary = frac(&|a| &a.binary.data);
                let boundary = frac(&|a| &a.boundary.data);
                LossWeights::from_frequencies(&freqs, binary, boundary)?
            }
        };
        Ok(PreparedData {
            manifest,
            train: prepared,
            val,
            weights,
        })
    }

    /// Validation examples, or the unmirrored training examples when there is no validation split.
    pub fn validation(&self) -> Vec<&Example> {
        if self.val.is_empty() {
            self.train.iter().map(|v| &v[0]).collect()
        } else {
            self.val.iter().collect()
        }
    }
}

/// Label map predicted by `pass` for one example.
pub fn predict(model: &CaiNet, store: &ParamStore<f32>, rgb: &Tensor<f32>, thermal: &Tensor<f32>, pass: Pass) -> Result<LabelMap> {
    let mut tape = Tape::no_grad();
    let out = model.forward(&mut tape, store, rgb, thermal, pass)?;
    let logits = out
        .prediction(pass)
        .ok_or_else(|| Error::InvalidArgument(format!("pass {pass:?} produces no prediction")))?;
    argmax_labels(tape.value(logits))
}

/// Confusion matrix of `pass` predictions over `examples`.
pub fn confusion<'a>(
    model: &CaiNet,
    store: &ParamStore<f32>,
    examples: impl IntoIterator<Item = &'a Example>,
    pass: Pass,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for ex in examples {
        let pred = predict(model, store, &ex.rgb, &ex.thermal, pass)?;
        cm.accumulate(&pred.data, &ex.labels.data)?;
    }
    Ok(cm)
}

/// Outcome of one training stage.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub stopped_early: bool,
    /// `(step, validation mIoU)` at every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub best_miou: f64,
    pub best_step: usize,
    pub checkpoint: PathBuf,
    /// Per-step loss means, in step order.
    pub losses: Vec<LossReport>,
}

/// Outcome of a whole invocation.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&StageReport> {
        self.stages.last()
    }
}

pub fn loss_setup(cfg: &TrainConfig, weights: &LossWeights) -> LossSetup {
    LossSetup {
        weights: weights.clone(),
        toggles: cfg.losses,
        lovasz: cfg.lovasz_classes,
        ignore: None,
    }
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let k = match stage {
        Stage::Rgb => 1,
        Stage::Thermal => 2,
        Stage::Gcm => 3,
        Stage::Full | Stage::All => 4,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

/// Model plus parameters for `stage`, with prerequisite checkpoints loaded from `dir`.
pub fn build_for_stage(cfg: &TrainConfig, model_cfg: &ModelConfig, stage: Stage, dir: &Path) -> Result<(CaiNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = CaiNet::new(model_cfg, &mut store, cfg.seed)?;
    for pre in stage.prerequisites(cfg.modules.thermal) {
        let path = dir.join(pre.checkpoint_name());
        if !path.is_file() {
            return Err(Error::MissingPrerequisite {
                stage: stage.as_str().to_string(),
                missing: pre.as_str().to_string(),
                path,
            });
        }
        let ckpt = read_checkpoint(&path)?;
        check_classes(&ckpt, model.num_classes())?;
        store.load_matching(&ckpt)?;
    }
    Ok((model, store))
}

fn check_classes(ckpt: &ParamStore<f32>, corpus: usize) -> Result<()> {
    let p = ckpt
        .iter()
        .find(|p| p.name.ends_with(CLASS_PROBE))
        .ok_or_else(|| Error::Checkpoint("no classifier weights in checkpoint".into()))?;
    let k = p.value.shape()[0];
    if k != corpus {
        return Err(Error::ClassCountMismatch { checkpoint: k, corpus });
    }
    Ok(())
}

fn train_stage(
    cfg: &TrainConfig,
    data: &PreparedData,
    stage: Stage,
    budget: usize,
    progress: &mut dyn FnMut(&str),
) -> Result<StageReport> {
    let model_cfg = cfg.model_config(data.manifest.num_classes);
    let (model, mut store) = build_for_stage(cfg, &model_cfg, stage, &cfg.out_dir)?;
    let pass = stage.pass();
    let eval_pass = stage.eval_pass();
    let setup = loss_setup(cfg, &data.weights);
    let adam = Adam::new(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));

    let n = data.train.len();
    let batch = cfg.batch_size.min(n);
    let epoch_steps = n.div_ceil(batch);
    let eval_every = if cfg.eval_every == 0 { epoch_steps } else { cfg.eval_every };
    let steps = cfg.stage_steps(stage).min(budget);
    let validation = data.validation();

    let log_path = cfg.out_dir.join(format!("{}.log", stage.as_str()));
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut report = StageReport {
        stage,
        steps: 0,
        stopped_early: false,
        evals: Vec::new(),
        best_miou: f64::NEG_INFINITY,
        best_step: 0,
        checkpoint: cfg.out_dir.join(stage.checkpoint_name()),
        losses: Vec::with_capacity(steps),
    };
    let mut best: Option<ParamStore<f32>> = None;
    let mut stale = 0;

    for step in 1..=steps {
        let mut mean = LossReport::default();
        let scale = 1.0 / batch as f64;
        for _ in 0..batch {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let variants = &data.train[order[cursor]];
            cursor += 1;
            let ex = &variants[if variants.len() > 1 { rng.random_range(0..variants.len()) } else { 0 }];
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &ex.rgb, &ex.thermal, pass)?;
            let (loss, r) = objective(&mut tape, &out, pass, &ex.labels, ex.aux.as_ref(), &setup)?;
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled, &mut store)?;
            mean.accumulate(&r, scale);
        }
        adam.step(&mut store);
        writeln!(log, "step={step} {}", mean.log_fields())?;
        report.losses.push(mean);
        report.steps = step;

        if step % eval_every == 0 || step == steps {
            let miou = confusion(&model, &store, validation.iter().copied(), eval_pass)?.miou(&cfg.metrics);
            report.evals.push((step, miou));
            progress(&format!(
                "stage={} step={step} l_total={:.5} val_miou={miou:.4}",
                stage.as_str(),
                mean.l_total
            ));
            if miou >= report.best_miou + cfg.min_delta || best.is_none() {
                report.best_miou = miou;
                report.best_step = step;
                best = Some(store.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience && step < steps {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    log.flush()?;
    let final_store = best.unwrap_or(store);
    write_checkpoint(&report.checkpoint, &final_store.subset(|name| stage.keeps(name)))?;
    Ok(report)
}

/// Runs the stages `cfg.stage` names, writing checkpoints, per-stage logs and
/// a `run.cfg` sidecar into `cfg.out_dir`.
pub fn staged_train(cfg: &TrainConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    let data = PreparedData::load(cfg)?;
    staged_train_with(cfg, &data, progress)
}

/// [`staged_train`] over already prepared data.
pub fn staged_train_with(cfg: &TrainConfig, data: &PreparedData, progress: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("run.cfg"), cfg.to_text())?;
    let plan = stage_plan(cfg.stage, cfg.modules.thermal);
    if plan.is_empty() {
        return Err(Error::Config(format!(
            "stage `{}` has nothing to train with the thermal stream disabled",
            cfg.stage.as_str()
        )));
    }
    let mut remaining = cfg.max_steps;
    let mut stages = Vec::with_capacity(plan.len());
    for stage in plan {
        let r = train_stage(cfg, data, stage, remaining, progress)?;
        remaining -= r.steps;
        stages.push(r);
    }
    Ok(TrainReport { stages })
}

/// Metrics of one split.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub macc: f64,
    pub miou: f64,
    pub table: String,
}

/// Loads a model for inference: every parameter the model declares must be in the checkpoint.
pub fn load_model(cfg: &TrainConfig, checkpoint: &Path, num_classes: usize) -> Result<(CaiNet, ParamStore<f32>)> {
    let ckpt = read_checkpoint(checkpoint)?;
    check_classes(&ckpt, num_classes)?;
    let model_cfg = cfg.model_config(num_classes);
    let mut store = ParamStore::new();
    let model = CaiNet::new(&model_cfg, &mut store, cfg.seed)?;
    if let Some(p) = store.iter().find(|p| ckpt.id(&p.name).is_err()) {
        return Err(Error::Checkpoint(format!(
            "{} lacks `{}`; it does not hold a complete model for this configuration",
            checkpoint.display(),
            p.name
        )));
    }
    store.load_matching(&ckpt)?;
    Ok((model, store))
}

/// Per-class and mean metrics of the inference path over `split`.
pub fn evaluate(cfg: &TrainConfig, checkpoint: &Path, split: Split) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(&cfg.data_root)?;
    let (model, store) = load_model(cfg, checkpoint, manifest.num_classes)?;
    let samples = dataset::load_split(&cfg.data_root, &manifest, split)?;
    let examples = samples
        .iter()
        .map(|s| Example::from_sample(s, cfg, false))
        .collect::<Result<Vec<_>>>()?;
    let cm = confusion(&model, &store, &examples, Pass::Inference)?;
    Ok(EvalReport {
        macc: cm.macc(&cfg.metrics),
        miou: cm.miou(&cfg.metrics),
        table: cm.report(&manifest.class_names(), &cfg.metrics),
        confusion: cm,
    })
}

/// Argmax of the final prediction for one sample.
pub fn infer(cfg: &TrainConfig, model: &CaiNet, store: &ParamStore<f32>, sample: &SegSample) -> Result<LabelMap> {
    let ex = Example::from_sample(sample, cfg, false)?;
    predict(model, store, &ex.rgb, &ex.thermal, Pass::Inference)
}

/// Writes `{stem}_labels.png` and `{stem}_color.png` into `dir`.
pub fn write_prediction(pred: &LabelMap, palette: &[[u8; 3]], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let labels = dir.join(format!("{stem}_labels.png"));
    let color = dir.join(format!("{stem}_color.png"));
    dataset::save_label_png(pred, &labels)?;
    dataset::colorize(pred, palette)?.save(&color)?;
    Ok((labels, color))
}

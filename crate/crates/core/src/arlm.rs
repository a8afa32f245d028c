//! Attention-residual upsampling stream.
//!
//! The published design of this block lives in an external reference; the
//! variant here is self-contained. Each stage fuses the running guide with one
//! encoder-side feature, predicts a one-channel attention map from the fused
//! residual, adds the gated residual to the guide, and emits class logits that
//! also carry the previous stage's upsampled logits.

use crate::error::{Error, Result};
use crate::nn::{channels, hw, Conv};
use crate::tensor::{Float, ParamBuilder, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct ArlmStage {
    pub fuse: Conv,
    /// Absent when attention gating is ablated.
    pub gate: Option<Conv>,
    pub head: Conv,
    pub guide_channels: usize,
    pub level_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// Refined features resized for the next stage.
    pub refined: Var,
    pub logits: Var,
    pub aux: Option<Var>,
}

impl ArlmStage {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        guide_channels: usize,
        level_channels: usize,
        num_classes: usize,
        gated: bool,
    ) -> Result<Self> {
        let fuse = Conv::new(pb, &format!("{name}.fuse"), guide_channels + level_channels, guide_channels, 3, 1, true)?;
        let gate = if gated {
            Some(Conv::new(pb, &format!("{name}.gate"), guide_channels, 1, 1, 1, true)?)
        } else {
            None
        };
        Ok(ArlmStage {
            fuse,
            gate,
            head: Conv::new(pb, &format!("{name}.head"), guide_channels, num_classes, 1, 1, true)?,
            guide_channels,
            level_channels,
        })
    }

    /// Runs one stage. `next` is the extent the refined features are resized
    /// to on return.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        guide: Var,
        level: Var,
        prior: Option<Var>,
        next: (usize, usize),
    ) -> Result<StageOutput> {
        if channels(tape, guide) != self.guide_channels || channels(tape, level) != self.level_channels {
            return Err(Error::Config(format!(
                "stage expects {}+{} channels, got {}+{}",
                self.guide_channels,
                self.level_channels,
                channels(tape, guide),
                channels(tape, level)
            )));
        }
        let (gh, gw) = hw(tape, guide);
        let (lh, lw) = hw(tape, level);
        let (h, w) = if gh * gw >= lh * lw { (gh, gw) } else { (lh, lw) };
        let guide = tape.resize_bilinear(guide, h, w)?;
        let level = tape.resize_bilinear(level, h, w)?;
        let cat = tape.concat(&[guide, level])?;
        let res = self.fuse.forward(tape, store, cat)?;
        let (refined, aux) = match &self.gate {
            Some(gate) => {
                let a = gate.forward(tape, store, res)?;
                let a = tape.sigmoid(a);
                let gated = tape.mul_spatial(res, a)?;
                (tape.add(guide, gated)?, Some(a))
            }
            None => (tape.add(guide, res)?, None),
        };
        let mut logits = self.head.forward(tape, store, refined)?;
        if let Some(p) = prior {
            let p = tape.resize_bilinear(p, h, w)?;
            logits = tape.add(logits, p)?;
        }
        let refined = tape.resize_bilinear(refined, next.0, next.1)?;
        Ok(StageOutput { refined, logits, aux })
    }
}

/// Four-stage stream. Stage 1 consumes the global context and the merged
/// deepest levels; stages 2-4 consume level 3, then the two detail features.
#[derive(Clone, Debug)]
pub struct ArlmStream {
    pub guide_proj: Option<Conv>,
    pub merge_proj: Option<Conv>,
    pub stages: [ArlmStage; 4],
}

#[derive(Clone, Copy, Debug)]
pub struct StreamOutputs {
    pub p: [Var; 4],
    /// Stage-1 and stage-2 attention maps.
    pub att: Option<[Var; 2]>,
    pub binary: Option<Var>,
    pub boundary: Option<Var>,
}

/// Channel counts entering the stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamInputs {
    pub global: usize,
    pub cr5: usize,
    pub cr4: usize,
    pub cr3: usize,
    pub d2: usize,
    pub d1: usize,
}

impl ArlmStream {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        inputs: StreamInputs,
        width: usize,
        num_classes: usize,
        gated: bool,
    ) -> Result<Self> {
        let guide_proj = if inputs.global != width {
            Some(Conv::new(pb, &format!("{name}.guide_proj"), inputs.global, width, 1, 1, true)?)
        } else {
            None
        };
        let merge_proj = if inputs.cr5 != inputs.cr4 {
            Some(Conv::new(pb, &format!("{name}.merge_proj"), inputs.cr4, inputs.cr5, 1, 1, true)?)
        } else {
            None
        };
        let levels = [inputs.cr5, inputs.cr3, inputs.d2, inputs.d1];
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in levels.iter().enumerate() {
            stages.push(ArlmStage::new(pb, &format!("{name}.stage{}", i + 1), width, c, num_classes, gated)?);
        }
        Ok(ArlmStream {
            guide_proj,
            merge_proj,
            stages: stages.try_into().expect("four stages"),
        })
    }

    /// `cr5 + cr4`, aligned to `cr4`'s extents.
    pub fn merge_deep<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cr5: Var, cr4: Var) -> Result<Var> {
        let (h, w) = hw(tape, cr4);
        let a = tape.resize_bilinear(cr5, h, w)?;
        let b = match &self.merge_proj {
            Some(p) => p.forward(tape, store, cr4)?,
            None => cr4,
        };
        tape.add(a, b)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: Var,
        cr5: Var,
        cr4: Var,
        cr3: Var,
        d2: Var,
        d1: Var,
        label_hw: (usize, usize),
    ) -> Result<StreamOutputs> {
        let mut guide = match &self.guide_proj {
            Some(p) => p.forward(tape, store, g)?,
            None => g,
        };
        let deep = self.merge_deep(tape, store, cr5, cr4)?;
        let levels = [deep, cr3, d2, d1];
        let mut prior = None;
        let mut p = Vec::with_capacity(4);
        let mut aux = Vec::with_capacity(4);
        for (i, (stage, &level)) in self.stages.iter().zip(&levels).enumerate() {
            let (gh, gw) = hw(tape, guide);
            let (lh, lw) = hw(tape, level);
            let (h, w) = if gh * gw >= lh * lw { (gh, gw) } else { (lh, lw) };
            let next = if i == 3 { label_hw } else { (2 * h, 2 * w) };
            let out = stage.forward(tape, store, guide, level, prior, next)?;
            guide = out.refined;
            prior = Some(out.logits);
            p.push(out.logits);
            aux.push(out.aux);
        }
        let p4 = tape.resize_bilinear(p[3], label_hw.0, label_hw.1)?;
        p[3] = p4;
        let att = match (aux[0], aux[1]) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        };
        Ok(StreamOutputs {
            p: p.try_into().expect("four outputs"),
            att,
            binary: aux[2],
            boundary: aux[3],
        })
    }
}

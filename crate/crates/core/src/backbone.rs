//! MobileNet-V2 style encoder producing a five-level feature pyramid, plus
//! the coarse segmentation head used for the per-stream and global outputs.
//!
//! The network has no batch normalization: at desk scale with per-sample
//! batches it only adds state that the checkpoint format would have to carry.

use crate::error::{Error, Result};
use crate::nn::{Conv, Depthwise};
use crate::tensor::{Float, ParamBuilder, ParamStore, Tape, Var};

/// `repeats` inverted-residual blocks; the first uses `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGroup {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

const fn group(expansion: usize, out_channels: usize, repeats: usize, stride: usize) -> BlockGroup {
    BlockGroup {
        expansion,
        out_channels,
        repeats,
        stride,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Block groups per pyramid level; level `i` ends at output `f_{i+1}`.
    pub stages: [Vec<BlockGroup>; 5],
    pub width_multiplier: f64,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Two-stream MobileNet-V2 plan cut at the stride boundaries, with the
    /// final downsample removed (output stride 16).
    pub fn paper(num_classes: usize) -> Self {
        BackboneConfig {
            stem_channels: 32,
            stem_stride: 2,
            stages: [
                vec![group(1, 16, 1, 1)],
                vec![group(6, 24, 2, 2)],
                vec![group(6, 32, 3, 2)],
                vec![group(6, 64, 4, 2), group(6, 96, 3, 1)],
                vec![group(6, 160, 3, 1), group(6, 320, 1, 1)],
            ],
            width_multiplier: 1.0,
            num_classes,
        }
    }

    /// Small plan for 32×32 inputs: channels 8..32, output stride 8.
    pub fn toy(num_classes: usize) -> Self {
        BackboneConfig {
            stem_channels: 8,
            stem_stride: 1,
            stages: [
                vec![group(1, 8, 1, 1)],
                vec![group(3, 16, 1, 2)],
                vec![group(3, 24, 1, 2)],
                vec![group(3, 32, 1, 2)],
                vec![group(2, 32, 1, 1)],
            ],
            width_multiplier: 1.0,
            num_classes,
        }
    }

    fn scaled(&self, c: usize) -> usize {
        // Even counts keep the CACR half-width exact.
        let s = (c as f64 * self.width_multiplier / 2.0).round() as usize * 2;
        s.max(2)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(self.stem_channels)
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.scaled(self.stages[i].last().expect("non-empty stage").out_channels))
    }

    /// Cumulative output stride after each level.
    pub fn stage_strides(&self) -> [usize; 5] {
        let mut s = self.stem_stride;
        std::array::from_fn(|i| {
            s *= self.stages[i].iter().map(|g| g.stride).product::<usize>();
            s
        })
    }

    pub fn blocks_per_stage(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.stages[i].iter().map(|g| g.repeats).sum())
    }

    pub fn max_stride(&self) -> usize {
        self.stage_strides()[4].max(self.stage_strides()[3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.stages.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("every stage needs at least one block group".into()));
        }
        for g in self.stages.iter().flatten() {
            if g.expansion == 0 || g.repeats == 0 || g.stride == 0 || g.out_channels == 0 {
                return Err(Error::Config(format!("invalid block group {g:?}")));
            }
        }
        let s = self.stage_strides();
        if s[4] != s[3] {
            return Err(Error::Config(format!(
                "stage 5 stride {} must equal stage 4 stride {}",
                s[4], s[3]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn input_channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Thermal => 1,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
        }
    }
}

/// 1×1 expand → 3×3 depthwise → 1×1 project, ReLU6 after the first two.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Option<Conv>,
    pub depthwise: Depthwise,
    pub project: Conv,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("expansion ratio must be at least 1".into()));
        }
        let hidden = c_in * expansion;
        let expand = if expansion == 1 {
            None
        } else {
            Some(Conv::new(pb, &format!("{name}.expand"), c_in, hidden, 1, 1, true)?)
        };
        Ok(InvertedResidual {
            expand,
            depthwise: Depthwise::new(pb, &format!("{name}.dw"), hidden, 3, stride, true)?,
            project: Conv::new(pb, &format!("{name}.project"), hidden, c_out, 1, 1, true)?,
            residual: stride == 1 && c_in == c_out,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(e) = &self.expand {
            let v = e.forward(tape, store, h)?;
            h = tape.relu6(v);
        }
        let d = self.depthwise.forward(tape, store, h)?;
        let d = tape.relu6(d);
        let p = self.project.forward(tape, store, d)?;
        if self.residual {
            tape.add(p, x)
        } else {
            Ok(p)
        }
    }
}

/// Features `f1..f5` of one stream.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
    pub modality: Modality,
}

impl FeaturePyramid {
    pub fn f(&self, i: usize) -> Var {
        self.levels[i - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub modality: Modality,
    pub stem: Conv,
    pub stages: [Vec<InvertedResidual>; 5],
    max_stride: usize,
}

impl Encoder {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, config: &BackboneConfig, modality: Modality) -> Result<Self> {
        config.validate()?;
        let prefix = format!("encoder.{}", modality.prefix());
        let stem_c = config.stem_width();
        let stem = Conv::new(
            pb,
            &format!("{prefix}.stem"),
            modality.input_channels(),
            stem_c,
            3,
            config.stem_stride,
            true,
        )?;
        let mut c_in = stem_c;
        let mut stages: [Vec<InvertedResidual>; 5] = Default::default();
        for (i, groups) in config.stages.iter().enumerate() {
            let mut idx = 0;
            for g in groups {
                let c_out = config.scaled(g.out_channels);
                for r in 0..g.repeats {
                    let stride = if r == 0 { g.stride } else { 1 };
                    let name = format!("{prefix}.stage{}.block{idx}", i + 1);
                    stages[i].push(InvertedResidual::new(pb, &name, c_in, c_out, g.expansion, stride)?);
                    c_in = c_out;
                    idx += 1;
                }
            }
        }
        Ok(Encoder {
            modality,
            stem,
            stages,
            max_stride: config.max_stride(),
        })
    }

    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = tape.value(image).dims3()?;
        if c != self.modality.input_channels() {
            return Err(Error::Config(format!(
                "{} stream expects {} input channels, got {c}",
                self.modality.prefix(),
                self.modality.input_channels()
            )));
        }
        if h % self.max_stride != 0 || w % self.max_stride != 0 {
            return Err(Error::Config(format!(
                "input {h}×{w} is not divisible by the output stride {}",
                self.max_stride
            )));
        }
        let s = self.stem.forward(tape, store, image)?;
        let mut x = tape.relu6(s);
        let mut levels = [x; 5];
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(tape, store, x)?;
            }
            levels[i] = x;
        }
        Ok(FeaturePyramid {
            levels,
            modality: self.modality,
        })
    }
}

/// 3×3 conv + ReLU → 1×1 class conv → bilinear resize. Emits raw logits.
#[derive(Clone, Debug)]
pub struct CoarseDecoder {
    pub hidden: Conv,
    pub classify: Conv,
}

impl CoarseDecoder {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(CoarseDecoder {
            hidden: Conv::new(pb, &format!("{name}.hidden"), c_in, hidden, 3, 1, true)?,
            classify: Conv::new(pb, &format!("{name}.classify"), hidden, num_classes, 1, 1, true)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feature: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let h = self.hidden.forward(tape, store, feature)?;
        let h = tape.relu(h);
        let logits = self.classify.forward(tape, store, h)?;
        tape.resize_bilinear(logits, out_h, out_w)
    }
}

//! Full two-stream network: encoders, fusion modules, global context, the
//! attention-residual stream and the three coarse heads.

use crate::arlm::{ArlmStream, StreamInputs, StreamOutputs};
use crate::aux_targets::{AuxTargets, LabelMap};
use crate::backbone::{BackboneConfig, CoarseDecoder, Encoder, FeaturePyramid, Modality};
use crate::cacr::{Cacr, ModalityOrder};
use crate::detail::DetailAggregation;
use crate::error::{Error, Result};
use crate::gcm::{aggregate_complementary, Gcm};
use crate::losses::{
    attention_loss, lovasz_softmax, weighted_binary_cross_entropy, weighted_cross_entropy, LossReport,
    LossToggles, LossWeights, LovaszClasses,
};
use crate::nn::{hw, Conv};
use crate::tensor::{Float, ParamBuilder, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

/// Which modules are present. Disabled fusion modules are replaced by a
/// 1×1 conv over the concatenated inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modules {
    pub cacr: bool,
    pub gcm: bool,
    pub da: bool,
    pub arlm: bool,
    pub thermal: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Modules {
            cacr: true,
            gcm: true,
            da: true,
            arlm: true,
            thermal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gcm_channels: usize,
    pub da_reduction: usize,
    pub decoder_hidden: usize,
    pub arlm_width: usize,
    pub modules: Modules,
    pub modality_order: ModalityOrder,
    /// Encoders start from random weights here; ImageNet initialization is
    /// not available.
    pub imagenet_pretrained: bool,
}

impl ModelConfig {
    pub fn preset(preset: Preset, num_classes: usize) -> Self {
        match preset {
            Preset::Toy => ModelConfig {
                backbone: BackboneConfig::toy(num_classes),
                gcm_channels: 16,
                da_reduction: 4,
                decoder_hidden: 16,
                arlm_width: 16,
                modules: Modules::default(),
                modality_order: ModalityOrder::RgbFirst,
                imagenet_pretrained: false,
            },
            Preset::Paper => ModelConfig {
                backbone: BackboneConfig::paper(num_classes),
                gcm_channels: 64,
                da_reduction: 16,
                decoder_hidden: 320,
                arlm_width: 368,
                modules: Modules::default(),
                modality_order: ModalityOrder::RgbFirst,
                imagenet_pretrained: false,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Cacr(Cacr),
    Bridge(Conv),
}

#[derive(Clone, Debug)]
pub enum Detail {
    Da(DetailAggregation),
    Bridge(Conv),
}

#[derive(Clone, Debug)]
pub enum GlobalContext {
    Gcm(Gcm),
    Bridge(Conv),
}

#[derive(Clone, Debug)]
pub struct CaiNet {
    pub config: ModelConfig,
    pub rgb: Encoder,
    pub thermal: Option<Encoder>,
    /// Levels 3, 4, 5.
    pub fusion: [Fusion; 3],
    pub global: GlobalContext,
    /// Levels 1, 2.
    pub detail: [Detail; 2],
    pub stream: ArlmStream,
    pub dec_rgb: CoarseDecoder,
    pub dec_thermal: Option<CoarseDecoder>,
    pub dec_global: CoarseDecoder,
}

/// Which sub-network a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// RGB encoder and its coarse head.
    Rgb,
    /// Thermal encoder and its coarse head.
    Thermal,
    /// Both encoders, deep fusion, global context and all three coarse heads.
    Gcm,
    /// Everything.
    Full,
    /// Everything the final prediction needs, nothing else.
    Inference,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ModelOutputs {
    pub stream: Option<StreamOutputs>,
    pub s_rgb: Option<Var>,
    pub s_thermal: Option<Var>,
    pub s_global: Option<Var>,
}

impl ModelOutputs {
    /// Logits used for prediction after `pass`.
    pub fn prediction(&self, pass: Pass) -> Option<Var> {
        match pass {
            Pass::Rgb => self.s_rgb,
            Pass::Thermal => self.s_thermal,
            Pass::Gcm => self.s_global,
            Pass::Full | Pass::Inference => self.stream.map(|s| s.p[3]),
        }
    }
}

impl CaiNet {
    pub fn new<T: Float>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        if config.imagenet_pretrained {
            return Err(Error::Config("ImageNet-pretrained encoders are not available".into()));
        }
        config.backbone.validate()?;
        let mut pb = ParamBuilder::new(store, seed);
        let ch = config.backbone.stage_channels();
        let k = config.num_classes();
        let m = &config.modules;
        let rgb = Encoder::new(&mut pb, &config.backbone, Modality::Rgb)?;
        let thermal = if m.thermal {
            Some(Encoder::new(&mut pb, &config.backbone, Modality::Thermal)?)
        } else {
            None
        };
        let mut fusion = Vec::with_capacity(3);
        for (i, &c) in ch[2..].iter().enumerate() {
            let name = format!("cacr.stage{}", i + 3);
            fusion.push(if m.cacr {
                Fusion::Cacr(Cacr::new(&mut pb, &name, c, config.modality_order)?)
            } else {
                Fusion::Bridge(Conv::new(&mut pb, &format!("{name}.bridge"), 2 * c, c, 1, 1, true)?)
            });
        }
        let crc = ch[2] + ch[3] + ch[4];
        let c = config.gcm_channels;
        let global = if m.gcm {
            GlobalContext::Gcm(Gcm::new(&mut pb, "gcm", crc, c)?)
        } else {
            GlobalContext::Bridge(Conv::new(&mut pb, "gcm.bridge", crc, c, 1, 1, true)?)
        };
        let mut detail = Vec::with_capacity(2);
        for (i, &c) in ch[..2].iter().enumerate() {
            let name = format!("da.stage{}", i + 1);
            detail.push(if m.da {
                Detail::Da(DetailAggregation::new(&mut pb, &name, c, config.da_reduction)?)
            } else {
                Detail::Bridge(Conv::new(&mut pb, &format!("{name}.bridge"), 2 * c, c, 1, 1, true)?)
            });
        }
        let stream = ArlmStream::new(
            &mut pb,
            "arlm",
            StreamInputs {
                global: c,
                cr5: ch[4],
                cr4: ch[3],
                cr3: ch[2],
                d2: ch[1],
                d1: ch[0],
            },
            config.arlm_width,
            k,
            m.arlm,
        )?;
        let dec_rgb = CoarseDecoder::new(&mut pb, "decoder.rgb", ch[4], config.decoder_hidden, k)?;
        let dec_thermal = if m.thermal {
            Some(CoarseDecoder::new(&mut pb, "decoder.thermal", ch[4], config.decoder_hidden, k)?)
        } else {
            None
        };
        let dec_global = CoarseDecoder::new(&mut pb, "decoder.global", c, config.decoder_hidden, k)?;
        Ok(CaiNet {
            config: config.clone(),
            rgb,
            thermal,
            fusion: fusion.try_into().expect("three levels"),
            global,
            detail: detail.try_into().expect("two levels"),
            stream,
            dec_rgb,
            dec_thermal,
            dec_global,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    fn thermal_pyramid<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        thermal: &Tensor<T>,
        like: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        match &self.thermal {
            Some(enc) => {
                let x = tape.constant(thermal.clone());
                enc.encode(tape, store, x)
            }
            None => {
                let mut levels = like.levels;
                for l in &mut levels {
                    *l = tape.constant(Tensor::zeros(tape.shape(*l).to_vec()));
                }
                Ok(FeaturePyramid {
                    levels,
                    modality: Modality::Thermal,
                })
            }
        }
    }

    fn fuse_pair<T: Float>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bridge: &Conv,
        a: Var,
        b: Var,
    ) -> Result<Var> {
        let cat = tape.concat(&[a, b])?;
        bridge.forward(tape, store, cat)
    }

    /// Complementary features `CR3..CR5`.
    pub fn deep_fusion<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        r: &FeaturePyramid,
        t: &FeaturePyramid,
    ) -> Result<[Var; 3]> {
        let mut out = [r.f(3); 3];
        for (i, f) in self.fusion.iter().enumerate() {
            let (a, b) = (r.f(i + 3), t.f(i + 3));
            out[i] = match f {
                Fusion::Cacr(c) => c.forward(tape, store, a, b)?,
                Fusion::Bridge(conv) => Self::fuse_pair(tape, store, conv, a, b)?,
            };
        }
        Ok(out)
    }

    pub fn global_context<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cr: &[Var; 3]) -> Result<Var> {
        let crc = aggregate_complementary(tape, cr[0], cr[1], cr[2])?;
        match &self.global {
            GlobalContext::Gcm(g) => g.forward(tape, store, crc),
            GlobalContext::Bridge(conv) => conv.forward(tape, store, crc),
        }
    }

    /// Detail features `D1, D2`.
    pub fn detail<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        r: &FeaturePyramid,
        t: &FeaturePyramid,
    ) -> Result<[Var; 2]> {
        let mut out = [r.f(1); 2];
        for (i, d) in self.detail.iter().enumerate() {
            let (a, b) = (r.f(i + 1), t.f(i + 1));
            out[i] = match d {
                Detail::Da(da) => da.forward(tape, store, a, b)?,
                Detail::Bridge(conv) => Self::fuse_pair(tape, store, conv, a, b)?,
            };
        }
        Ok(out)
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
        thermal: &Tensor<T>,
        pass: Pass,
    ) -> Result<ModelOutputs> {
        let (_, h, w) = rgb.dims3()?;
        let (tc, th, tw) = thermal.dims3()?;
        if (th, tw) != (h, w) || tc != 1 {
            return Err(Error::dim("forward", rgb.shape(), thermal.shape()));
        }
        let mut out = ModelOutputs::default();
        if pass == Pass::Thermal {
            let enc = self
                .thermal
                .as_ref()
                .ok_or_else(|| Error::Config("thermal stream is disabled".into()))?;
            let x = tape.constant(thermal.clone());
            let t = enc.encode(tape, store, x)?;
            let dec = self.dec_thermal.as_ref().expect("thermal decoder");
            out.s_thermal = Some(dec.forward(tape, store, t.f(5), h, w)?);
            return Ok(out);
        }
        let x = tape.constant(rgb.clone());
        let r = self.rgb.encode(tape, store, x)?;
        let decoders = matches!(pass, Pass::Rgb | Pass::Gcm | Pass::Full);
        if decoders {
            out.s_rgb = Some(self.dec_rgb.forward(tape, store, r.f(5), h, w)?);
        }
        if pass == Pass::Rgb {
            return Ok(out);
        }
        let t = self.thermal_pyramid(tape, store, thermal, &r)?;
        if decoders {
            if let Some(dec) = &self.dec_thermal {
                out.s_thermal = Some(dec.forward(tape, store, t.f(5), h, w)?);
            }
        }
        let cr = self.deep_fusion(tape, store, &r, &t)?;
        let g = self.global_context(tape, store, &cr)?;
        if decoders {
            out.s_global = Some(self.dec_global.forward(tape, store, g, h, w)?);
        }
        if pass == Pass::Gcm {
            return Ok(out);
        }
        let d = self.detail(tape, store, &r, &t)?;
        out.stream = Some(self.stream.forward(tape, store, g, cr[2], cr[1], cr[0], d[1], d[0], (h, w))?);
        Ok(out)
    }
}

/// Loss configuration shared by every training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSetup {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub lovasz: LovaszClasses,
    /// Label excluded from the segmentation losses, if any.
    pub ignore: Option<u32>,
}

/// Objective for the outputs of `pass`. Returns the scalar to differentiate
/// and its components.
pub fn objective<T: Float>(
    tape: &mut Tape<T>,
    outputs: &ModelOutputs,
    pass: Pass,
    labels: &LabelMap,
    aux: Option<&AuxTargets>,
    setup: &LossSetup,
) -> Result<(Var, LossReport)> {
    let (h, w) = (labels.height, labels.width);
    let lab = &labels.data;
    let mut report = LossReport::default();
    let mut terms: Vec<Var> = Vec::new();
    let mut add = |tape: &mut Tape<T>, v: Var, slot: &mut f64| {
        *slot += tape.value(v).item().widen();
        terms.push(v);
    };
    let to_label = |tape: &mut Tape<T>, v: Var| tape.resize_bilinear(v, h, w);

    let decoder_on = pass != Pass::Full || setup.toggles.decoder;
    if decoder_on {
        for s in [outputs.s_rgb, outputs.s_thermal, outputs.s_global].into_iter().flatten() {
            let l = weighted_cross_entropy(tape, s, lab, None, setup.ignore)?;
            add(tape, l, &mut report.l_decoder);
        }
    }
    if matches!(pass, Pass::Full) {
        let stream = outputs
            .stream
            .ok_or_else(|| Error::InvalidArgument("full objective needs stream outputs".into()))?;
        if setup.toggles.target {
            for (i, &p) in stream.p.iter().enumerate() {
                let p = to_label(tape, p)?;
                let l = if i < 2 {
                    lovasz_softmax(tape, p, lab, setup.lovasz, setup.ignore)?
                } else {
                    weighted_cross_entropy(tape, p, lab, Some(&setup.weights.class), setup.ignore)?
                };
                add(tape, l, &mut report.l_target);
            }
        }
        let needs_aux = setup.toggles.attention || setup.toggles.binary || setup.toggles.boundary;
        if needs_aux && (stream.att.is_some() || stream.binary.is_some()) {
            let aux = aux.ok_or_else(|| Error::InvalidArgument("auxiliary targets are required".into()))?;
            if let (true, Some(att)) = (setup.toggles.attention, stream.att) {
                for (i, &a) in att.iter().enumerate() {
                    let a = to_label(tape, a)?;
                    let l = attention_loss(tape, a, &aux.attention_q.data)?;
                    add(tape, l, if i == 0 { &mut report.l_att1 } else { &mut report.l_att2 });
                }
            }
            if let (true, Some(b)) = (setup.toggles.binary, stream.binary) {
                let b = to_label(tape, b)?;
                let l = weighted_binary_cross_entropy(tape, b, &aux.binary.data, setup.weights.binary)?;
                add(tape, l, &mut report.l_binary);
            }
            if let (true, Some(b)) = (setup.toggles.boundary, stream.boundary) {
                let b = to_label(tape, b)?;
                let l = weighted_binary_cross_entropy(tape, b, &aux.boundary.data, setup.weights.boundary)?;
                add(tape, l, &mut report.l_boundary);
            }
        }
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Config("every loss term is disabled".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    report.l_total = tape.value(total).item().widen();
    Ok((total, report))
}

/// Per-pixel argmax over the leading axis of `C×H×W` logits.
pub fn argmax_labels<T: Float>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (c, h, w) = logits.dims3()?;
    let hw_ = h * w;
    let x = logits.data();
    let data = (0..hw_)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if x[k * hw_ + p] > x[best * hw_ + p] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Extent of a var, re-exported for callers composing their own passes.
pub fn extent<T: Float>(tape: &Tape<T>, v: Var) -> (usize, usize) {
    hw(tape, v)
}

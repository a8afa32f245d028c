//! Detail aggregation for the two shallowest levels: a combined feature is
//! gated by itself plus a thermal spatial cue, added to the thermal feature
//! and rescaled by squeeze-excitation channel attention.

use crate::error::{Error, Result};
use crate::nn::{Conv, SeparableConv};
use crate::tensor::{Float, ParamBuilder, ParamStore, Tape, Var};

/// `x ⊙ sigmoid(fc2(ReLU(fc1(avgpool(x)))))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl ChannelAttention {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("channel attention reduction must be at least 1".into()));
        }
        let hidden = (channels / reduction).max(1);
        Ok(ChannelAttention {
            fc1: Conv::new(pb, &format!("{name}.fc1"), channels, hidden, 1, 1, true)?,
            fc2: Conv::new(pb, &format!("{name}.fc2"), hidden, channels, 1, 1, true)?,
        })
    }

    /// Per-channel scales in `(0, 1)`.
    pub fn scales<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x)[0];
        let pooled = tape.global_avg_pool(x)?;
        let v = tape.reshape(pooled, &[c, 1, 1])?;
        let h = self.fc1.forward(tape, store, v)?;
        let h = tape.relu(h);
        let s = self.fc2.forward(tape, store, h)?;
        let s = tape.sigmoid(s);
        tape.reshape(s, &[c])
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.scales(tape, store, x)?;
        tape.mul_channel(x, s)
    }
}

#[derive(Clone, Debug)]
pub struct DetailAggregation {
    pub combine: SeparableConv,
    pub spatial7: Conv,
    pub attention: ChannelAttention,
}

impl DetailAggregation {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(DetailAggregation {
            combine: SeparableConv::new(pb, &format!("{name}.combine"), 2 * channels, channels, 3, true)?,
            spatial7: Conv::new(pb, &format!("{name}.spatial7"), 1, 1, 7, 1, true)?,
            attention: ChannelAttention::new(pb, &format!("{name}.ca"), channels, reduction)?,
        })
    }

    /// Separable conv over the channel concatenation, back to `C` channels.
    pub fn combine_modalities<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_rgb: Var,
        f_thermal: Var,
    ) -> Result<Var> {
        if tape.shape(f_rgb) != tape.shape(f_thermal) {
            return Err(Error::dim("combine_modalities", tape.shape(f_rgb), tape.shape(f_thermal)));
        }
        let cat = tape.concat(&[f_rgb, f_thermal])?;
        self.combine.forward(tape, store, cat)
    }

    /// Max over channels then a 7×7 conv: a `1×H×W` map.
    pub fn spatial_cue<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f_thermal: Var) -> Result<Var> {
        let m = tape.channel_max(f_thermal)?;
        self.spatial7.forward(tape, store, m)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f_rgb: Var, f_thermal: Var) -> Result<Var> {
        let fc = self.combine_modalities(tape, store, f_rgb, f_thermal)?;
        let ts = self.spatial_cue(tape, store, f_thermal)?;
        let pre = tape.add_spatial(fc, ts)?;
        let gate = tape.relu(pre);
        let gated = tape.mul(fc, gate)?;
        let sum = tape.add(gated, f_thermal)?;
        self.attention.forward(tape, store, sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_fc_halves_input() {
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut ParamBuilder::new(&mut store, 3), "ca", 4, 2).unwrap();
        for id in [ca.fc1.weight, ca.fc2.weight] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_fn([4, 2, 2], |i| i as f64 - 7.0));
        let y = ca.forward(&mut tape, &store, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert_eq!(*a, b / 2.0);
        }
    }
}

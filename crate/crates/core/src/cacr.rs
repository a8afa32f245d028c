//! Cross-modal complementary reasoning over a flattened interaction space.
//!
//! Both modalities are projected by bias-free 1×1 convs into `t1` (`C×D`)
//! and `t2` (`C/2 × D`), with `D = H·W`. Their normalized cross-correlation
//! is mixed by two square matrices and used to reconstruct a complement that
//! is added to the modality sum.

use crate::error::{Error, Result};
use crate::nn::{flatten, Conv};
use crate::tensor::{Float, ParamBuilder, ParamId, ParamStore, Tape, Var};

/// Which modality feeds the full-width projection `t1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModalityOrder {
    #[default]
    RgbFirst,
    ThermalFirst,
}

impl std::str::FromStr for ModalityOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb_first" => Ok(ModalityOrder::RgbFirst),
            "thermal_first" => Ok(ModalityOrder::ThermalFirst),
            _ => Err(Error::Config(format!("unknown modality order `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cacr {
    pub channels: usize,
    pub w1: Conv,
    pub w2: Conv,
    /// `N×N`, right-multiplied.
    pub fc1: ParamId,
    /// `M×M`, left-multiplied.
    pub fc2: ParamId,
    pub order: ModalityOrder,
}

impl Cacr {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, order: ModalityOrder) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Config(format!("complementary reasoning needs an even channel count, got {channels}")));
        }
        let (n, m) = (channels, channels / 2);
        Ok(Cacr {
            channels,
            w1: Conv::new(pb, &format!("{name}.w1"), channels, n, 1, 1, false)?,
            w2: Conv::new(pb, &format!("{name}.w2"), channels, m, 1, 1, false)?,
            fc1: pb.matrix(&format!("{name}.fc1"), n, n)?,
            fc2: pb.matrix(&format!("{name}.fc2"), m, m)?,
            order,
        })
    }

    /// `(t1, t2)` flattened projections.
    pub fn project<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x_rgb: Var,
        x_thermal: Var,
    ) -> Result<(Var, Var)> {
        let (a, b) = match self.order {
            ModalityOrder::RgbFirst => (x_rgb, x_thermal),
            ModalityOrder::ThermalFirst => (x_thermal, x_rgb),
        };
        let p1 = self.w1.forward(tape, store, a)?;
        let t1 = flatten(tape, p1)?;
        let p2 = self.w2.forward(tape, store, b)?;
        let t2 = flatten(tape, p2)?;
        Ok((t1, t2))
    }

    /// `ReLU(fc2 · ReLU(i·fc1 + i))`.
    pub fn complementary_reasoning<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, i_corr: Var) -> Result<Var> {
        let fc1 = tape.param(store, self.fc1);
        let fc2 = tape.param(store, self.fc2);
        let mixed = tape.matmul(i_corr, fc1)?;
        let res = tape.add(mixed, i_corr)?;
        let inner = tape.relu(res);
        let out = tape.matmul(fc2, inner)?;
        Ok(tape.relu(out))
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_rgb: Var,
        f_thermal: Var,
    ) -> Result<Var> {
        if tape.shape(f_rgb) != tape.shape(f_thermal) {
            return Err(Error::dim("cacr", tape.shape(f_rgb), tape.shape(f_thermal)));
        }
        if tape.shape(f_rgb)[0] != self.channels {
            return Err(Error::dim("cacr", tape.shape(f_rgb), &[self.channels]));
        }
        let (t1, t2) = self.project(tape, store, f_rgb, f_thermal)?;
        let i_corr = interaction_correlation(tape, t1, t2)?;
        let cr = self.complementary_reasoning(tape, store, i_corr)?;
        let x_sum = tape.add(f_rgb, f_thermal)?;
        reconstruct(tape, x_sum, t2, cr)
    }
}

/// `t2 · t1ᵀ / (N·M)`, an `M×N` similarity between projected channels.
pub fn interaction_correlation<T: Float>(tape: &mut Tape<T>, t1: Var, t2: Var) -> Result<Var> {
    let (n, d1) = tape.value(t1).dims2()?;
    let (m, d2) = tape.value(t2).dims2()?;
    if d1 != d2 {
        return Err(Error::dim("interaction_correlation", tape.shape(t1), tape.shape(t2)));
    }
    let t1t = tape.transpose(t1)?;
    let prod = tape.matmul(t2, t1t)?;
    Ok(tape.scale(prod, 1.0 / (n * m) as f64))
}

/// `x_sum + Expand(cr′ᵀ · t2)`.
///
/// The literal product of the flattened `t1` transpose with `cr′` does not
/// close dimensionally for `N = C, M = C/2`; `cr′ᵀ · t2` is the parameter-free
/// reading that yields `C×D` for the residual add.
pub fn reconstruct<T: Float>(tape: &mut Tape<T>, x_sum: Var, t2: Var, cr_prime: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x_sum).dims3()?;
    let (m, n) = tape.value(cr_prime).dims2()?;
    let (m2, d) = tape.value(t2).dims2()?;
    if n != c || m2 != m || d != h * w {
        return Err(Error::shape(
            "reconstruct",
            format!(
                "x_sum {:?}, t2 {:?}, cr_prime {:?}",
                tape.shape(x_sum),
                tape.shape(t2),
                tape.shape(cr_prime)
            ),
        ));
    }
    let crt = tape.transpose(cr_prime)?;
    let comp = tape.matmul(crt, t2)?;
    let comp = tape.reshape(comp, &[c, h, w])?;
    tape.add(x_sum, comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn correlation_hand_values() {
        let mut tape = Tape::<f64>::no_grad();
        let t1 = tape.constant(Tensor::from_f64([1, 1], &[2.0]).unwrap());
        let t2 = tape.constant(Tensor::from_f64([1, 1], &[3.0]).unwrap());
        let i = interaction_correlation(&mut tape, t1, t2).unwrap();
        assert_eq!(tape.value(i).data(), &[6.0]);

        let t1 = tape.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let t2 = tape.constant(Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap());
        let i = interaction_correlation(&mut tape, t1, t2).unwrap();
        assert_eq!(tape.shape(i), &[1, 2]);
        assert_eq!(tape.value(i).data(), &[0.5, 0.5]);
    }

    #[test]
    fn reconstruct_hand_values() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64([2, 1, 1], &[1.0, 2.0]).unwrap());
        let t2 = tape.constant(Tensor::from_f64([1, 1], &[5.0]).unwrap());
        let cr = tape.constant(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
        let out = reconstruct(&mut tape, x, t2, cr).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0, 2.0]);
    }

    #[test]
    fn odd_channels_rejected() {
        let mut store = ParamStore::<f32>::new();
        let r = Cacr::new(&mut ParamBuilder::new(&mut store, 0), "c", 3, ModalityOrder::RgbFirst);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

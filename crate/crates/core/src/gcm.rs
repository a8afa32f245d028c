//! Global context from a channel affinity over the three deepest fused
//! levels.

use crate::error::Result;
use crate::nn::{flatten, hw, Conv};
use crate::tensor::{Float, ParamBuilder, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Gcm {
    pub channels: usize,
    pub reduce1: Conv,
    pub reduce2: Conv,
    pub reduce3: Conv,
    /// Kernel-1 1-D convs over affinity rows, i.e. `c×c` left multiplications.
    pub conv1d_a: ParamId,
    pub conv1d_b: ParamId,
}

impl Gcm {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, channels: usize) -> Result<Self> {
        Ok(Gcm {
            channels,
            reduce1: Conv::new(pb, &format!("{name}.reduce1"), c_in, channels, 1, 1, false)?,
            reduce2: Conv::new(pb, &format!("{name}.reduce2"), c_in, channels, 1, 1, false)?,
            reduce3: Conv::new(pb, &format!("{name}.reduce3"), c_in, channels, 1, 1, false)?,
            conv1d_a: pb.matrix(&format!("{name}.conv1d_a.weight"), channels, channels)?,
            conv1d_b: pb.matrix(&format!("{name}.conv1d_b.weight"), channels, channels)?,
        })
    }

    /// `a = p·qᵀ` with `p`, `q` from two distinct reductions.
    pub fn channel_affinity<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, crc: Var) -> Result<Var> {
        let p = self.reduce1.forward(tape, store, crc)?;
        let p = flatten(tape, p)?;
        let q = self.reduce2.forward(tape, store, crc)?;
        let q = flatten(tape, q)?;
        let qt = tape.transpose(q)?;
        tape.matmul(p, qt)
    }

    /// Row softmax mixed by `conv1d_a`, plus one softmax over all entries.
    pub fn relationship_modeling<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, a: Var) -> Result<Var> {
        let c = tape.shape(a)[0];
        let rows = tape.softmax(a, 1)?;
        let wa = tape.param(store, self.conv1d_a);
        let mixed = tape.matmul(wa, rows)?;
        let global = global_softmax(tape, a)?;
        let global = tape.reshape(global, &[c, c])?;
        tape.add(mixed, global)
    }

    /// `reshape(conv1d_b(rm) · v)` with `v` the third reduction of `crc`.
    pub fn global_context<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, crc: Var, rm: Var) -> Result<Var> {
        let (h, w) = hw(tape, crc);
        let v = self.reduce3.forward(tape, store, crc)?;
        let v = flatten(tape, v)?;
        let wb = tape.param(store, self.conv1d_b);
        let mixed = tape.matmul(wb, rm)?;
        let g = tape.matmul(mixed, v)?;
        tape.reshape(g, &[self.channels, h, w])
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, crc: Var) -> Result<Var> {
        let a = self.channel_affinity(tape, store, crc)?;
        let rm = self.relationship_modeling(tape, store, a)?;
        self.global_context(tape, store, crc, rm)
    }
}

/// Softmax over every entry of `x`, returned flat.
pub fn global_softmax<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let flat = tape.reshape(x, &[n])?;
    tape.softmax(flat, 0)
}

/// Aligns `cr3` and `cr5` to `cr4`'s extents and concatenates `(cr3, cr4, cr5)`.
pub fn aggregate_complementary<T: Float>(tape: &mut Tape<T>, cr3: Var, cr4: Var, cr5: Var) -> Result<Var> {
    let (h, w) = hw(tape, cr4);
    let a = tape.resize_bilinear(cr3, h, w)?;
    let c = tape.resize_bilinear(cr5, h, w)?;
    tape.concat(&[a, cr4, c])
}

//! Parameter-efficient tuning blocks: bottleneck adapters, scale-and-shift
//! (SSF) and shallow visual prompts (VPT).
//!
//! Each block has an identity configuration in which it leaves the host
//! network's function unchanged: adapter `up = 0`, SSF `scale = 1, shift = 0`,
//! and zero prompts.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numeric::{gaussian_matrix, Gradients, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetKind {
    None,
    Adapter,
    Ssf,
    Vpt,
}

/// Bottleneck adapter running parallel to a feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `d × r`
    pub down: Tensor,
    /// `r × d`
    pub up: Tensor,
}

impl Adapter {
    pub fn init(width: usize, rank: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        contract!(rank >= 1, "adapter rank must be at least 1");
        Ok(Adapter {
            down: gaussian_matrix(rng, width, rank, sigma)?.trainable(),
            up: gaussian_matrix(rng, rank, width, sigma)?.trainable(),
        })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }
}

/// Per-feature affine transform `y = scale·x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ssf {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl Ssf {
    pub fn identity(width: usize) -> Self {
        Ssf { scale: Tensor::full(vec![width], 1.0).trainable(), shift: Tensor::zeros(vec![width]).trainable() }
    }
}

/// `K × d` prompt tokens prepended to the encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct Vpt {
    pub prompts: Tensor,
}

impl Vpt {
    pub fn init(count: usize, width: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        let prompts = if count == 0 { Tensor::zeros(vec![0, width]) } else { gaussian_matrix(rng, count, width, sigma)? };
        Ok(Vpt { prompts: prompts.trainable() })
    }

    pub fn count(&self) -> usize {
        self.prompts.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PetConfig {
    pub kind: PetKind,
    /// Adapter bottleneck width `r`.
    pub rank: usize,
    /// VPT prompt count `K`.
    pub prompts: usize,
    /// Standard deviation for adapter and prompt initialization.
    pub init_sigma: f64,
}

impl Default for PetConfig {
    fn default() -> Self {
        PetConfig { kind: PetKind::Adapter, rank: 8, prompts: 4, init_sigma: 0.01 }
    }
}

/// PET parameters attached to a backbone with `blocks` encoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PetAttachment {
    pub kind: PetKind,
    pub adapters: Vec<Adapter>,
    /// Two insertion points per block: after attention, after feed-forward.
    pub ssf: Vec<Ssf>,
    pub vpt: Option<Vpt>,
}

impl PetAttachment {
    pub fn none() -> Self {
        PetAttachment { kind: PetKind::None, adapters: vec![], ssf: vec![], vpt: None }
    }

    pub fn init(cfg: &PetConfig, blocks: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let mut pet = PetAttachment { kind: cfg.kind, ..PetAttachment::none() };
        match cfg.kind {
            PetKind::None => {}
            PetKind::Adapter => {
                pet.adapters = (0..blocks).map(|_| Adapter::init(width, cfg.rank, cfg.init_sigma, rng)).collect::<Result<_>>()?;
            }
            PetKind::Ssf => pet.ssf = (0..2 * blocks).map(|_| Ssf::identity(width)).collect(),
            PetKind::Vpt => pet.vpt = Some(Vpt::init(cfg.prompts, width, cfg.init_sigma, rng)?),
        }
        Ok(pet)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.extend([&a.down, &a.up]);
        }
        for s in &self.ssf {
            out.extend([&s.scale, &s.shift]);
        }
        if let Some(v) = &self.vpt {
            out.push(&v.prompts);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for a in &mut self.adapters {
            out.extend([&mut a.down, &mut a.up]);
        }
        for s in &mut self.ssf {
            out.extend([&mut s.scale, &mut s.shift]);
        }
        if let Some(v) = &mut self.vpt {
            out.push(&mut v.prompts);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::freeze);
    }

    pub fn unfreeze(&mut self) {
        for t in self.tensors_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors().iter().all(|t| !t.is_trainable())
    }

    pub fn bind(&self, tape: &mut Tape) -> PetVars {
        let vars = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        PetVars { kind: self.kind, blocks_adapter: self.adapters.len(), ssf: self.ssf.len(), vars }
    }

    /// Handles over leaves created elsewhere, one per tensor in
    /// [`PetAttachment::tensors`] order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<PetVars> {
        let want = self.tensors().len();
        contract!(vars.len() == want, "{} handles for {want} PET tensors", vars.len());
        Ok(PetVars { kind: self.kind, blocks_adapter: self.adapters.len(), ssf: self.ssf.len(), vars: vars.to_vec() })
    }

    /// Copies gradients for the bound tensors into their gradient slots.
    pub fn store_grads(&mut self, vars: &PetVars, grads: &Gradients) {
        store_grads(self.tensors_mut(), &vars.vars, grads);
    }
}

pub(crate) fn store_grads(tensors: Vec<&mut Tensor>, vars: &[Var], grads: &Gradients) {
    debug_assert_eq!(tensors.len(), vars.len());
    for (t, v) in tensors.into_iter().zip(vars) {
        if t.is_trainable() {
            let len = t.len();
            t.grad = Some(grads.get_or_zeros(*v, len));
        }
    }
}

/// Tape handles for a bound [`PetAttachment`].
#[derive(Debug, Clone)]
pub struct PetVars {
    kind: PetKind,
    blocks_adapter: usize,
    ssf: usize,
    vars: Vec<Var>,
}

impl PetVars {
    pub fn none() -> Self {
        PetVars { kind: PetKind::None, blocks_adapter: 0, ssf: 0, vars: vec![] }
    }

    pub fn kind(&self) -> PetKind {
        self.kind
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn adapter(&self, block: usize) -> Option<AdapterVars> {
        (block < self.blocks_adapter).then(|| AdapterVars { down: self.vars[2 * block], up: self.vars[2 * block + 1] })
    }

    /// SSF handles for `block`, insertion point 0 (attention) or 1 (feed-forward).
    pub fn ssf(&self, block: usize, point: usize) -> Option<SsfVars> {
        let i = 2 * block + point;
        let base = 2 * self.blocks_adapter;
        (i < self.ssf).then(|| SsfVars { scale: self.vars[base + 2 * i], shift: self.vars[base + 2 * i + 1] })
    }

    pub fn prompts(&self) -> Option<Var> {
        (self.kind == PetKind::Vpt).then(|| *self.vars.last().expect("vpt binds its prompt tensor"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SsfVars {
    pub scale: Var,
    pub shift: Var,
}

/// `mlp_output + ReLU(x·down)·up` for token rows `x`.
pub fn adapter_forward(tape: &mut Tape, x: Var, mlp_output: Var, adapter: AdapterVars) -> Result<Var> {
    contract!(tape.shape(x) == tape.shape(mlp_output), "adapter input {:?} and MLP output {:?} differ", tape.shape(x), tape.shape(mlp_output));
    let d = *tape.shape(x).last().unwrap_or(&0);
    let (down, up) = (tape.shape(adapter.down).to_vec(), tape.shape(adapter.up).to_vec());
    contract!(down.len() == 2 && up.len() == 2 && down[0] == d && up[1] == d && down[1] == up[0], "adapter shapes {:?}/{:?} do not fit width {d}", down, up);
    let h = tape.matmul(x, adapter.down)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, adapter.up)?;
    tape.add(mlp_output, h)
}

/// `scale·x + shift`, broadcast over tokens.
pub fn ssf_forward(tape: &mut Tape, x: Var, ssf: SsfVars) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap_or(&0);
    contract!(tape.shape(ssf.scale) == [d] && tape.shape(ssf.shift) == [d], "SSF vectors must have width {d}");
    let y = tape.mul(x, ssf.scale)?;
    tape.add(y, ssf.shift)
}

/// Prepends the prompt rows to every token sequence in `x`.
pub fn vpt_extend(tape: &mut Tape, x: Var, prompts: Var) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap_or(&0);
    contract!(tape.shape(prompts).len() == 2 && tape.shape(prompts)[1] == d, "prompts {:?} do not match width {d}", tape.shape(prompts));
    if tape.shape(prompts)[0] == 0 {
        return Ok(x);
    }
    tape.concat(prompts, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn adapter_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(1, 2, vec![1.0, -1.0]));
        let zero = tape.constant(m(1, 2, vec![0.0, 0.0]));
        let eye = AdapterVars { down: tape.constant(Tensor::identity(2)), up: tape.constant(Tensor::identity(2)) };
        let y = adapter_forward(&mut tape, x, zero, eye).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);

        // Dead branch.
        let mlp = tape.constant(m(1, 2, vec![0.3, 0.7]));
        let dead = AdapterVars { down: tape.constant(Tensor::identity(2)), up: tape.constant(Tensor::zeros(vec![2, 2])) };
        let y = adapter_forward(&mut tape, x, mlp, dead).unwrap();
        assert_eq!(tape.value(y), &[0.3, 0.7]);

        // Nonnegative input passes through the identity bottleneck.
        let xp = tape.constant(m(2, 2, vec![0.5, 2.0, 0.0, 1.0]));
        let mlp = tape.constant(m(2, 2, vec![1.0, 1.0, 1.0, 1.0]));
        let y = adapter_forward(&mut tape, xp, mlp, eye).unwrap();
        assert_eq!(tape.value(y), &[1.5, 3.0, 1.0, 2.0]);
    }

    #[test]
    fn adapter_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(m(1, 3, vec![1.0; 3]));
        let mlp = tape.constant(m(1, 3, vec![1.0; 3]));
        let a = AdapterVars { down: tape.constant(Tensor::identity(2)), up: tape.constant(Tensor::identity(2)) };
        assert!(adapter_forward(&mut tape, x, mlp, a).is_err());
    }

    #[test]
    fn ssf_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(2, 2, vec![1.0, -1.0, 4.0, 5.0]));
        let id = SsfVars { scale: tape.constant(Tensor::vector(vec![1.0, 1.0])), shift: tape.constant(Tensor::vector(vec![0.0, 0.0])) };
        let y = ssf_forward(&mut tape, x, id).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let s = SsfVars { scale: tape.constant(Tensor::vector(vec![2.0, 2.0])), shift: tape.constant(Tensor::vector(vec![1.0, 1.0])) };
        let y = ssf_forward(&mut tape, x, s).unwrap();
        assert_eq!(&tape.value(y)[..2], &[3.0, -1.0]);

        let z = SsfVars { scale: tape.constant(Tensor::vector(vec![0.0, 0.0])), shift: tape.constant(Tensor::vector(vec![0.5, -0.5])) };
        let y = ssf_forward(&mut tape, x, z).unwrap();
        assert_eq!(tape.value(y), &[0.5, -0.5, 0.5, -0.5]);

        let bad = SsfVars { scale: tape.constant(Tensor::vector(vec![1.0; 3])), shift: tape.constant(Tensor::vector(vec![0.0; 3])) };
        assert!(ssf_forward(&mut tape, x, bad).is_err());
    }

    #[test]
    fn vpt_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let empty = tape.constant(Tensor::zeros(vec![0, 2]));
        let y = vpt_extend(&mut tape, x, empty).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let p = tape.constant(m(2, 2, vec![9.0, 8.0, 7.0, 6.0]));
        let y = vpt_extend(&mut tape, x, p).unwrap();
        assert_eq!(tape.shape(y), &[5, 2]);
        assert_eq!(&tape.value(y)[..4], &[9.0, 8.0, 7.0, 6.0]);
        assert_eq!(&tape.value(y)[4..], tape.value(x));

        let wrong = tape.constant(m(1, 3, vec![0.0; 3]));
        assert!(vpt_extend(&mut tape, x, wrong).is_err());
    }

    #[test]
    fn parameter_counts() {
        let mut rng = Rng::new(0);
        let (d, e) = (32, 2);
        let a = PetAttachment::init(&PetConfig { kind: PetKind::Adapter, rank: 8, ..Default::default() }, e, d, &mut rng).unwrap();
        assert_eq!(a.parameter_count(), e * 2 * d * 8);
        let s = PetAttachment::init(&PetConfig { kind: PetKind::Ssf, ..Default::default() }, e, d, &mut rng).unwrap();
        assert_eq!(s.tensors().len(), 4 * e);
        assert_eq!(s.parameter_count(), 2 * e * 2 * d);
        let v = PetAttachment::init(&PetConfig { kind: PetKind::Vpt, prompts: 4, ..Default::default() }, e, d, &mut rng).unwrap();
        assert_eq!(v.parameter_count(), 4 * d);
        assert_eq!(PetAttachment::none().parameter_count(), 0);
    }
}

//! Registration losses and their weighted sum.
//!
//! Each loss has a tape form used during training and a plain tensor form that
//! evaluates the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 100.0, beta: 10.0, gamma: 25.0, delta: 10.0 }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sim: f64,
    pub smooth: f64,
    pub guidance: f64,
    pub recon: f64,
}

/// Repeats a `[N, 1, H, W]` mask across `c` channels; a mask that already has `c` channels is returned as is.
pub fn broadcast_mask(mask: &Tensor, c: usize) -> Result<Tensor> {
    let (n, mc, h, w) = mask.dims4()?;
    if mc == c {
        return Ok(mask.clone());
    }
    ensure_shape!(mc == 1, "mask with {mc} channels for a {c}-channel image");
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c * plane);
    for s in mask.data().chunks(plane) {
        for _ in 0..c {
            out.extend_from_slice(s);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

fn check_binary_mask(mask: &Tensor) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Precondition(format!("mask values must be 0 or 1, got {v}")));
    }
    Ok(())
}

/// `½(MSE(x, gt) + MSE(m⊙x, m⊙gt))`, or plain MSE when no mask is given.
pub fn sim(tape: &mut Tape, x_warp: Var, gt: Var, mask: Option<&Tensor>) -> Result<Var> {
    let plain = tape.mse(x_warp, gt)?;
    let Some(mask) = mask else {
        return Ok(plain);
    };
    check_binary_mask(mask)?;
    let (_, c, _, _) = tape.value(x_warp).dims4()?;
    let m = broadcast_mask(mask, c)?;
    let mx = tape.mul_const(x_warp, &m)?;
    let mg = tape.mul_const(gt, &m)?;
    let masked = tape.mse(mx, mg)?;
    let sum = tape.add(plain, masked)?;
    Ok(tape.scale(sum, 0.5))
}

/// `MSE(a.0, b.0) + MSE(a.1, b.1)`; shared by the guidance, reconstruction and AG-Net losses.
pub fn pair_mse(tape: &mut Tape, a: (Var, Var), b: (Var, Var)) -> Result<Var> {
    let l0 = tape.mse(a.0, b.0)?;
    let l1 = tape.mse(a.1, b.1)?;
    tape.add(l0, l1)
}

/// Guidance loss between main-net MI features and (constant) AG-Net features.
pub fn guidance(tape: &mut Tape, mi_main: (Var, Var), mi_ag: (Var, Var)) -> Result<Var> {
    pair_mse(tape, mi_main, mi_ag)
}

pub fn recon(tape: &mut Tape, ix_hat: Var, ix: Var, iy_hat: Var, iy: Var) -> Result<Var> {
    pair_mse(tape, (ix_hat, iy_hat), (ix, iy))
}

pub fn agnet(tape: &mut Tape, ix_hat: Var, ix: Var, iy_hat: Var, iy: Var) -> Result<Var> {
    pair_mse(tape, (ix_hat, iy_hat), (ix, iy))
}

/// Weighted sum of the four terms. Terms with a zero weight are left out of the graph.
pub fn total(tape: &mut Tape, parts: [Var; 4], w: &LossWeights) -> Result<Var> {
    let weights = [w.alpha, w.beta, w.gamma, w.delta];
    let mut acc: Option<Var> = None;
    for (v, k) in parts.into_iter().zip(weights) {
        if k == 0.0 {
            continue;
        }
        let term = tape.scale(v, k);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

pub fn total_value(c: &LossComponents, w: &LossWeights) -> f64 {
    w.alpha * c.sim + w.beta * c.smooth + w.gamma * c.guidance + w.delta * c.recon
}

fn with_tape<const K: usize>(inputs: [&Tensor; K], f: impl FnOnce(&mut Tape, [Var; K]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.map(|t| tape.constant(t.clone()));
    let out = f(&mut tape, vars)?;
    Ok(tape.scalar(out))
}

pub fn sim_loss(x_warp: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    with_tape([x_warp, gt], |t, [a, b]| sim(t, a, b, mask))
}

/// Smoothness of a `[N, 2, H, W]` field.
pub fn smooth_loss(phi: &Tensor) -> Result<f64> {
    if !phi.is_finite() {
        return Err(Error::Numeric("deformation field is not finite".into()));
    }
    with_tape([phi], |t, [p]| t.smooth(p))
}

pub fn guidance_loss(mi_main: (&Tensor, &Tensor), mi_ag: (&Tensor, &Tensor)) -> Result<f64> {
    with_tape([mi_main.0, mi_main.1, mi_ag.0, mi_ag.1], |t, [a, b, c, d]| guidance(t, (a, b), (c, d)))
}

pub fn recon_loss(ix_hat: &Tensor, ix: &Tensor, iy_hat: &Tensor, iy: &Tensor) -> Result<f64> {
    with_tape([ix_hat, ix, iy_hat, iy], |t, [a, b, c, d]| recon(t, a, b, c, d))
}

pub fn agnet_loss(ix_hat: &Tensor, ix: &Tensor, iy_hat: &Tensor, iy: &Tensor) -> Result<f64> {
    with_tape([ix_hat, ix, iy_hat, iy], |t, [a, b, c, d]| agnet(t, a, b, c, d))
}

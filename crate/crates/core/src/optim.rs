//! SGD with momentum and Adam.
//!
//! SGD:  `b ← μ·b + g;  θ ← θ − γ·b`
//!
//! Adam: `m ← lerp(g, m, β1);  v ← lerp(g², v, β2);  t ← t + 1;`
//!       `m̂ = m / (1 − β1ᵗ);  v̂ = v / (1 − β2ᵗ);  θ ← θ − γ·m̂ / (√v̂ + ε)`
//!
//! with `lerp(a, b, w) = (1 − w)·a + w·b`. Buffers are created lazily as
//! zeros the first time a parameter receives a gradient.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Declarative optimizer choice as it appears in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
}

pub mod defaults {
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: defaults::momentum(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        OptimizerSpec { lr, ..self }
    }

    pub fn build<T: Scalar>(&self, n_params: usize) -> Optimizer<T> {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(
                n_params,
                T::from_f64(self.lr),
                T::from_f64(self.momentum),
            )),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(
                n_params,
                T::from_f64(self.lr),
                T::from_f64(self.beta1),
                T::from_f64(self.beta2),
                T::from_f64(self.eps),
            )),
        }
    }
}

/// Part of the optimizer state to clear: a whole parameter, or a range of
/// its leading-dimension rows (e.g. one class row of the fc weight).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSlice {
    pub param: usize,
    pub rows: Option<Range<usize>>,
}

impl StateSlice {
    pub fn whole(param: usize) -> Self {
        StateSlice { param, rows: None }
    }

    pub fn rows(param: usize, rows: Range<usize>) -> Self {
        StateSlice {
            param,
            rows: Some(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T: Scalar> {
    pub lr: T,
    pub momentum: T,
    buffers: Vec<Option<Tensor<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T: Scalar = f32> {
    Sgd(SgdState<T>),
    Adam(AdamState<T>),
}

fn buffer<'a, T: Scalar>(
    slot: &'a mut Option<Tensor<T>>,
    like: &Tensor<T>,
    name: usize,
) -> Result<&'a mut Tensor<T>> {
    let buf = slot.get_or_insert_with(|| Tensor::zeros(like.shape()));
    if buf.shape() != like.shape() {
        return Err(Error::shape(
            "optimizer",
            format!(
                "state buffer for parameter {name} has shape {:?}, gradient has {:?}",
                buf.shape(),
                like.shape()
            ),
        ));
    }
    Ok(buf)
}

fn check_grad<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, i: usize) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            "optimizer",
            format!("parameter {i} has shape {:?}, gradient {:?}", p.shape(), g.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> SgdState<T> {
    pub fn new(n_params: usize, lr: T, momentum: T) -> Self {
        SgdState {
            lr,
            momentum,
            buffers: vec![None; n_params],
        }
    }

    pub fn momentum_buffer(&self, i: usize) -> Option<&Tensor<T>> {
        self.buffers.get(i).and_then(Option::as_ref)
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            check_grad(p, g, i)?;
            let b = buffer(&mut self.buffers[i], g, i)?;
            for ((theta, bv), &gv) in p.data_mut().iter_mut().zip(b.data_mut()).zip(g.data()) {
                *bv = self.momentum * *bv + gv;
                *theta = *theta - self.lr * *bv;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (Option<&Tensor<T>>, Option<&Tensor<T>>) {
        (
            self.m.get(i).and_then(Option::as_ref),
            self.v.get(i).and_then(Option::as_ref),
        )
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                check_grad(p, g, i)?;
                buffer(&mut self.m[i], g, i)?;
                buffer(&mut self.v[i], g, i)?;
            }
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].as_mut().expect("allocated above").data_mut();
            let v = self.v[i].as_mut().expect("allocated above").data_mut();
            for (((theta, mv), vv), &gv) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *mv = (one - b1) * gv + b1 * *mv;
                *vv = (one - b2) * (gv * gv) + b2 * *vv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *theta = *theta - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn clear<T: Scalar>(slot: &mut [Option<Tensor<T>>], slice: &StateSlice) -> Result<()> {
    let Some(entry) = slot.get_mut(slice.param) else {
        return Err(Error::Invalid(format!("no optimizer slot for parameter {}", slice.param)));
    };
    let Some(buf) = entry.as_mut() else {
        // never stepped: already zero
        return Ok(());
    };
    match &slice.rows {
        None => buf.data_mut().iter_mut().for_each(|v| *v = T::zero()),
        Some(rows) => {
            let n_rows = buf.shape().first().copied().unwrap_or(1);
            if rows.start > rows.end || rows.end > n_rows {
                return Err(Error::Invalid(format!(
                    "rows {rows:?} out of range for parameter {} with {n_rows} rows",
                    slice.param
                )));
            }
            let width = buf.numel() / n_rows.max(1);
            buf.data_mut()[rows.start * width..rows.end * width]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
    Ok(())
}

impl<T: Scalar> Optimizer<T> {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(params, grads),
            Optimizer::Adam(s) => s.step(params, grads),
        }
    }

    /// Zeroes momentum / moment buffers for the given slices; Adam's step
    /// counter is left alone.
    pub fn reset_state_for(&mut self, slices: &[StateSlice]) -> Result<()> {
        for s in slices {
            match self {
                Optimizer::Sgd(st) => clear(&mut st.buffers, s)?,
                Optimizer::Adam(st) => {
                    clear(&mut st.m, s)?;
                    clear(&mut st.v, s)?;
                }
            }
        }
        Ok(())
    }

    /// Drops a parameter's buffers entirely, e.g. after its shape changed.
    pub fn forget(&mut self, param: usize) {
        let slots: Vec<&mut Option<Tensor<T>>> = match self {
            Optimizer::Sgd(st) => st.buffers.get_mut(param).into_iter().collect(),
            Optimizer::Adam(st) => st
                .m
                .get_mut(param)
                .into_iter()
                .chain(st.v.get_mut(param))
                .collect(),
        };
        for s in slots {
            *s = None;
        }
    }

    /// Step counter (always 0 for SGD).
    pub fn step_count(&self) -> u64 {
        match self {
            Optimizer::Sgd(_) => 0,
            Optimizer::Adam(a) => a.step,
        }
    }

    /// Named buffers per parameter slot: `[("b", …)]` or `[("m", …), ("v", …)]`.
    pub fn buffers(&self) -> Vec<(usize, &'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            Optimizer::Sgd(st) => {
                for (i, b) in st.buffers.iter().enumerate() {
                    if let Some(b) = b {
                        out.push((i, "b", b));
                    }
                }
            }
            Optimizer::Adam(st) => {
                for i in 0..st.m.len() {
                    if let Some(m) = &st.m[i] {
                        out.push((i, "m", m));
                    }
                    if let Some(v) = &st.v[i] {
                        out.push((i, "v", v));
                    }
                }
            }
        }
        out
    }

    /// Restores a buffer written by [`Optimizer::buffers`].
    pub fn set_buffer(&mut self, param: usize, slot: &str, value: Tensor<T>) -> Result<()> {
        let target = match (self, slot) {
            (Optimizer::Sgd(st), "b") => st.buffers.get_mut(param),
            (Optimizer::Adam(st), "m") => st.m.get_mut(param),
            (Optimizer::Adam(st), "v") => st.v.get_mut(param),
            (_, other) => return Err(Error::Invalid(format!("unknown optimizer buffer {other:?}"))),
        };
        *target.ok_or_else(|| Error::Invalid(format!("no optimizer slot {param}")))? = Some(value);
        Ok(())
    }

    pub fn set_step_count(&mut self, t: u64) {
        if let Optimizer::Adam(a) = self {
            a.step = t;
        }
    }
}

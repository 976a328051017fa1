//! Whole-model gradient check in 64-bit arithmetic: reverse-mode gradients
//! against central finite differences for every parameter element.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{relative_error, Tape};
use crate::error::Result;
use crate::nn::{forward_on, register, ConvNet, ModelConfig, Param, Trainable};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSpec {
    pub channels: usize,
    pub n_classes: usize,
    pub size: usize,
    pub batch: usize,
    /// Finite-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Smallest denominator of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            channels: 8,
            n_classes: 2,
            size: 28,
            batch: 2,
            h: 1e-3,
            tolerance: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: (String, usize),
    pub per_param: Vec<(String, f64)>,
    pub n_checked: usize,
    /// Elements whose ±h evaluations take a different ReLU or max-pool branch
    /// than the unperturbed pass, where a difference quotient does not
    /// estimate the derivative.
    pub n_branch_crossing: usize,
    /// Largest error over the remaining elements.
    pub max_rel_error_smooth: f64,
    pub passed: bool,
}

fn loss(cfg: &ModelConfig, params: &[Tensor<f64>], x: &Tensor<f64>, y: &[usize]) -> Result<(f64, Vec<u32>)> {
    let mut tape = Tape::<f64>::new();
    let p = register(&mut tape, params, Trainable::All);
    let xv = tape.constant(x.clone());
    let logits = forward_on(cfg, &mut tape, &p, xv)?;
    let l = tape.cross_entropy(logits, y)?;
    Ok((tape.value(l).item(), tape.branch_pattern()))
}

pub fn gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let cfg = ModelConfig::new(spec.channels, (spec.size, spec.size, 1), spec.n_classes);
    let model = ConvNet::init(cfg.clone(), spec.seed)?;
    let params: Vec<Tensor<f64>> = model.params().iter().map(|t| t.cast()).collect();
    // Conv biases start at zero; give every parameter a generic value.
    let mut rng = seed::rng(spec.seed, Stream::Synthetic, u32::MAX);
    let params: Vec<Tensor<f64>> = params
        .into_iter()
        .map(|t| {
            if t.shape().len() == 1 {
                let data = (0..t.numel()).map(|_| rng.random_range(-0.1..0.1)).collect();
                Tensor::new(t.shape().to_vec(), data).expect("same length")
            } else {
                t
            }
        })
        .collect();
    let n = spec.batch;
    let x = Tensor::new(
        vec![n, 1, spec.size, spec.size],
        (0..n * spec.size * spec.size).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let y: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();

    let mut tape = Tape::<f64>::new();
    let p = register(&mut tape, &params, Trainable::All);
    let xv = tape.constant(x.clone());
    let logits = forward_on(&cfg, &mut tape, &p, xv)?;
    let l = tape.cross_entropy(logits, &y)?;
    let mut grads = tape.backward(l)?;
    let pattern = tape.branch_pattern();

    let mut per_param = Vec::new();
    let mut worst = (String::new(), 0);
    let mut max_rel = 0f64;
    let mut n_checked = 0;
    let mut n_branch_crossing = 0;
    let mut max_smooth = 0f64;
    for q in Param::ALL {
        let analytic = grads.take(p.get(q)).expect("all parameters are trainable");
        let len = params[q.index()].numel();
        let numeric: Vec<Result<(f64, bool)>> = crate::par::map_indexed(len, |i| {
            let mut ps = params.clone();
            let orig = ps[q.index()].data()[i];
            ps[q.index()].data_mut()[i] = orig + spec.h;
            let (up, pu) = loss(&cfg, &ps, &x, &y)?;
            ps[q.index()].data_mut()[i] = orig - spec.h;
            let (down, pd) = loss(&cfg, &ps, &x, &y)?;
            Ok(((up - down) / (2.0 * spec.h), pu != pattern || pd != pattern))
        });
        let mut param_max = 0f64;
        for (i, num) in numeric.into_iter().enumerate() {
            let (num, crossed) = num?;
            let e = relative_error(analytic.data()[i], num, spec.floor);
            if crossed {
                n_branch_crossing += 1;
            } else {
                max_smooth = max_smooth.max(e);
            }
            if e > param_max {
                param_max = e;
            }
            if e > max_rel {
                max_rel = e;
                worst = (q.name().to_string(), i);
            }
        }
        n_checked += len;
        per_param.push((q.name().to_string(), param_max));
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        worst,
        per_param,
        n_checked,
        n_branch_crossing,
        max_rel_error_smooth: max_smooth,
        passed: max_rel < spec.tolerance,
    })
}

use super::Network;
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
    /// Coordinates checked at the requested step.
    pub at_step: usize,
    /// Coordinates where `±step` moved a ReLU or pooling switch and the
    /// step had to shrink until both sides stayed on the same smooth piece.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

/// ReLU on/off pattern and pooling winners of a training-mode pass.
pub fn activation_pattern(net: &Network, inputs: &[f64], n: usize) -> (Vec<bool>, Vec<u32>) {
    let (_, caches, _) = net.forward(inputs, n, true);
    let relu = caches.iter().flat_map(|c| c.act.iter().map(|&v| v > 0.0)).collect();
    let pool = caches.iter().flat_map(|c| c.pool_idx.iter().copied()).collect();
    (relu, pool)
}

/// Central differences of the training-mode loss for every parameter.
///
/// The loss is only piecewise smooth. Where `±step` would straddle a
/// switch the step is divided by ten until it does not, since a difference
/// across a kink says nothing about either one-sided derivative. Relative
/// errors use `max(|fd|, |grad|, 1e-6)` as denominator.
pub fn gradient_check(net: &Network, inputs: &[f64], labels: &[f64], step: f64) -> Result<GradCheckReport> {
    let n = labels.len();
    let mut grad = vec![0.0; net.n_params()];
    net.loss_and_grad(inputs, labels, Some(&mut grad))?;
    let base = activation_pattern(net, inputs, n);
    let mut report = GradCheckReport {
        per_tensor: net.param_info().iter().map(|p| (p.name.clone(), 0.0)).collect(),
        at_step: 0,
        refined: 0,
    };
    let mut probe = net.clone();
    for (t, info) in net.param_info().iter().enumerate() {
        for i in info.offset..info.offset + info.len {
            let orig = net.params()[i];
            let mut h = step;
            let fd = loop {
                probe.params_mut()[i] = orig + h;
                let same_plus = activation_pattern(&probe, inputs, n) == base;
                let fp = probe.loss_and_grad(inputs, labels, None)?.0;
                probe.params_mut()[i] = orig - h;
                let same_minus = activation_pattern(&probe, inputs, n) == base;
                let fm = probe.loss_and_grad(inputs, labels, None)?.0;
                if (same_plus && same_minus) || h < step * 1e-6 {
                    break (fp - fm) / (2.0 * h);
                }
                h /= 10.0;
            };
            probe.params_mut()[i] = orig;
            if h == step {
                report.at_step += 1;
            } else {
                report.refined += 1;
            }
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            let w = &mut report.per_tensor[t].1;
            *w = w.max(rel);
        }
    }
    Ok(report)
}

//! Feedforward ReLU network with explicit parameter storage and a
//! hand-written reverse pass.
//!
//! Parameters live in one flat buffer, layer by layer: the weight matrix
//! (`out x in`, row-major) followed by the bias. Gradients use the same
//! layout, which keeps the optimizer and checkpoints trivial.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rng;

/// Hidden layout used throughout the experiments: three layers of 200.
pub const DEFAULT_HIDDEN: [usize; 3] = [200, 200, 200];

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations cached by a batched forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    /// Input to each layer; `acts[0]` is the network input. Hidden entries
    /// are post-ReLU, so `act > 0` doubles as the ReLU derivative mask.
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Post-activation values of hidden layer `l` (1-based; 0 is the input).
    pub fn hidden(&self, l: usize) -> &[f64] {
        &self.acts[l]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.output.len() / self.batch.max(1);
        &self.output[i * n..(i + 1) * n]
    }
}

impl Mlp {
    /// Network with the given layer widths (`[n_in, hidden.., n_out]`) and
    /// every parameter zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "invalid layer widths {widths:?}"
            )));
        }
        let count = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// Uniform fan-in initialization: weights and biases of a layer with
    /// `fan_in` inputs are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(widths: &[usize], rng: &mut impl RngCore) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut off = 0;
        for w in net.widths.clone().windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut net.params[off..off + fan_in * out + out] {
                *p = rng::uniform(rng, -bound, bound);
            }
            off += fan_in * out + out;
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        if params.len() != net.params.len() {
            return Err(Error::dim("Mlp::from_params", net.params.len(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("mlp parameters"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_in(&self) -> usize {
        self.widths[0]
    }

    pub fn n_out(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Multiplies the last layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let k = self.widths.len();
        let (fan_in, out) = (self.widths[k - 2], self.widths[k - 1]);
        let start = self.params.len() - (fan_in * out + out);
        for p in &mut self.params[start..] {
            *p *= factor;
        }
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.widths.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    /// Forward pass over `batch` row-major inputs, keeping the activations.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<Tape> {
        let n_in = self.n_in();
        if x.len() != batch * n_in {
            return Err(Error::dim("Mlp::forward_batch", batch * n_in, x.len()));
        }
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        acts.push(x.to_vec());
        let mut output = Vec::new();
        for (l, (off, fan_in, out)) in self.layer_offsets().enumerate() {
            let input = acts.last().expect("input present");
            let w = &self.params[off..off + fan_in * out];
            let bias = &self.params[off + fan_in * out..off + fan_in * out + out];
            let mut z = Vec::with_capacity(batch * out);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            // z (batch x out) += input (batch x in) * w^T
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    fan_in,
                    out,
                    1.0,
                    input.as_ptr(),
                    fan_in as isize,
                    1,
                    w.as_ptr(),
                    1,
                    fan_in as isize,
                    1.0,
                    z.as_mut_ptr(),
                    out as isize,
                    1,
                );
            }
            if l + 1 < layers {
                for v in &mut z {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                acts.push(z);
            } else {
                output = z;
            }
        }
        Ok(Tape {
            batch,
            acts,
            output,
        })
    }

    /// Single-input forward pass without a tape.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.output)
    }

    /// Reverse pass. `upstream` is `d loss / d output` (batch x n_out).
    /// Parameter gradients are accumulated into `grads`; when `input_grad` is
    /// given it receives `d loss / d input` (batch x n_in, overwritten).
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        let batch = tape.batch;
        if upstream.len() != batch * self.n_out() {
            return Err(Error::dim("Mlp::backward upstream", batch * self.n_out(), upstream.len()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::dim("Mlp::backward grads", self.params.len(), grads.len()));
        }
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = upstream.to_vec();
        for (l, &(off, fan_in, out)) in offsets.iter().enumerate().rev() {
            let input = &tape.acts[l];
            let (gw, gb) = grads[off..off + fan_in * out + out].split_at_mut(fan_in * out);
            // gw (out x in) += delta^T (out x batch) * input (batch x in)
            unsafe {
                matrixmultiply::dgemm(
                    out,
                    batch,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    1,
                    out as isize,
                    input.as_ptr(),
                    fan_in as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            for row in delta.chunks_exact(out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            let w = &self.params[off..off + fan_in * out];
            let mut prev = vec![0.0; batch * fan_in];
            // prev (batch x in) = delta (batch x out) * w (out x in)
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    out,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    out as isize,
                    1,
                    w.as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    prev.as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        if let Some(ig) = input_grad {
            if ig.len() != delta.len() {
                return Err(Error::dim("Mlp::backward input_grad", delta.len(), ig.len()));
            }
            ig.copy_from_slice(&delta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn single_linear_layer() {
        // W = [[1,2],[3,4],[5,6]], b = [0.5,-1,2]
        let net = Mlp::from_params(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -1.0, 2.0])
            .unwrap();
        assert_eq!(net.forward(&[1.0, -1.0]).unwrap(), vec![-0.5, -2.0, 1.0]);
    }

    #[test]
    fn identity_net_weight_gradient_is_outer_product() {
        let net = Mlp::from_params(&[2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = [3.0, -2.0];
        let tape = net.forward_batch(&x, 1).unwrap();
        let g = [0.5, 2.0];
        let mut grads = vec![0.0; net.param_count()];
        let mut ig = vec![0.0; 2];
        net.backward(&tape, &g, &mut grads, Some(&mut ig)).unwrap();
        // g x^T, then bias grad g
        assert_eq!(grads, vec![1.5, -1.0, 6.0, -4.0, 0.5, 2.0]);
        assert_eq!(ig, vec![0.5, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut r = rng::stream(3, 0);
        let net = Mlp::new(&[2, 8, 8, 3], &mut r).unwrap();
        let tape = net.forward_batch(&[0.3, -0.1, 1.0, 2.0], 2).unwrap();
        let mut grads = vec![0.0; net.param_count()];
        net.backward(&tape, &[0.0; 6], &mut grads, None).unwrap();
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let mut r = rng::stream(4, 0);
        let net = Mlp::new(&[3, 16, 16, 2], &mut r).unwrap();
        let xs = [0.1, 0.2, 0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 0.0];
        let tape = net.forward_batch(&xs, 3).unwrap();
        for i in 0..3 {
            let single = net.forward(&xs[i * 3..i * 3 + 3]).unwrap();
            for (a, b) in single.iter().zip(tape.row(i)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    fn loss(net: &Mlp, x: &[f64], batch: usize, weights: &[f64]) -> f64 {
        let out = net.forward_batch(x, batch).unwrap().output;
        out.iter().zip(weights).map(|(o, w)| 0.5 * w * o * o).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut r = rng::stream(11, 0);
        let net = Mlp::new(&[3, 7, 6, 2], &mut r).unwrap();
        let x = [0.4, -0.9, 0.25, 1.1, 0.3, -0.5];
        let weights = [1.0, 2.0, -0.5, 0.7];
        let tape = net.forward_batch(&x, 2).unwrap();
        let upstream: Vec<f64> = tape.output().iter().zip(&weights).map(|(o, w)| w * o).collect();
        let mut grads = vec![0.0; net.param_count()];
        let mut ig = vec![0.0; x.len()];
        net.backward(&tape, &upstream, &mut grads, Some(&mut ig)).unwrap();

        let h = 1e-6;
        for i in 0..net.param_count() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut q = net.clone();
            q.params_mut()[i] -= h;
            let fd = (loss(&p, &x, 2, &weights) - loss(&q, &x, 2, &weights)) / (2.0 * h);
            assert!((fd - grads[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&net, &xp, 2, &weights) - loss(&net, &xm, 2, &weights)) / (2.0 * h);
            assert!((fd - ig[i]).abs() <= 1e-4 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
        let net = Mlp::zeros(&[2, 1]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(Mlp::from_params(&[2, 1], vec![0.0; 2]).is_err());
    }

    #[test]
    fn scale_output_layer_only_touches_last_layer() {
        let mut r = rng::stream(5, 0);
        let net = Mlp::new(&[2, 4, 3], &mut r).unwrap();
        let mut scaled = net.clone();
        scaled.scale_output_layer(0.0);
        assert_eq!(&scaled.params()[..12], &net.params()[..12]);
        assert!(scaled.params()[12..].iter().all(|p| *p == 0.0));
    }
}

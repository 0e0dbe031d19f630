//! Batched reconstruction loss with hand-written reverse-mode gradients, and
//! the forward-mode tangent of those gradients along a latent direction.
//! The tangent is what meta-learning needs to backpropagate through inner
//! latent updates (a Hessian-vector product without materializing the
//! Hessian).

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{LatentCode, SirenWeights};
use crate::error::{Error, Result};

/// Mean-squared reconstruction loss and its gradients.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// Gradient with respect to every network tensor; `None` when only the
    /// latent gradient was requested.
    pub weights: Option<SirenWeights>,
    pub latent: Vec<f64>,
}

struct BatchTrace {
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl SirenWeights {
    fn check_batch(&self, z: &LatentCode, points: &Array2<f64>, targets: &Array2<f64>) -> Result<()> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::shape("latent dimension does not match network"));
        }
        if points.ncols() != 2 || targets.ncols() != 2 || points.nrows() != targets.nrows() {
            return Err(Error::shape("points and targets must both be n x 2"));
        }
        if points.nrows() == 0 {
            return Err(Error::invalid("empty point batch"));
        }
        Ok(())
    }

    fn forward_batch(&self, z: &[f64], points: &Array2<f64>) -> BatchTrace {
        let shifts = self.shifts(z);
        let a0 = points.dot(&self.first.t()) * self.config.omega0;
        let x0 = a0.mapv(f64::sin);
        let mut pre = vec![a0];
        let mut act = vec![x0];
        for (layer, shift) in self.hidden.iter().zip(&shifts) {
            let a = act.last().expect("nonempty").dot(&layer.weight.t()) + shift;
            act.push(a.mapv(f64::sin));
            pre.push(a);
        }
        let out = act.last().expect("nonempty").dot(&self.out_weight.t()) + &self.out_bias;
        BatchTrace { pre, act, out }
    }

    /// Mean over all `2n` scalars of the squared error.
    pub fn mse_loss(&self, z: &LatentCode, points: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
        self.check_batch(z, points, targets)?;
        let out = self.forward_batch(&z.0, points).out;
        Ok(mse(&out, targets))
    }

    /// Loss plus gradients with respect to the latent and, when
    /// `with_weights` is set, every network tensor.
    pub fn loss_and_grads(
        &self,
        z: &LatentCode,
        points: &Array2<f64>,
        targets: &Array2<f64>,
        with_weights: bool,
    ) -> Result<LossGrads> {
        self.check_batch(z, points, targets)?;
        let tr = self.forward_batch(&z.0, points);
        let n = points.nrows() as f64;
        let loss = mse(&tr.out, targets);
        let d_out = (&tr.out - targets) / n;

        let mut grads = with_weights.then(|| SirenWeights::zeros(self.config));
        let mut d_z = Array1::<f64>::zeros(self.config.latent_dim);
        let zv = ArrayView1::from(&z.0[..]);

        if let Some(g) = grads.as_mut() {
            g.out_weight = d_out.t().dot(&tr.act[self.hidden.len()]);
            g.out_bias = d_out.sum_axis(Axis(0));
        }
        let mut d_x = d_out.dot(&self.out_weight);
        for l in (1..=self.hidden.len()).rev() {
            let layer = &self.hidden[l - 1];
            let d_a = &d_x * &tr.pre[l].mapv(f64::cos);
            let s = d_a.sum_axis(Axis(0));
            d_z += &layer.modulation.t().dot(&s);
            if let Some(g) = grads.as_mut() {
                let gl = &mut g.hidden[l - 1];
                gl.weight = d_a.t().dot(&tr.act[l - 1]);
                gl.modulation = outer(&s, &zv);
                gl.bias = s;
            }
            if l == 1 && grads.is_none() {
                break;
            }
            d_x = d_a.dot(&layer.weight);
        }
        if let Some(g) = grads.as_mut() {
            let d_a0 = d_x * tr.pre[0].mapv(f64::cos);
            g.first = d_a0.t().dot(points) * self.config.omega0;
            g.make_standard_layout();
        }
        Ok(LossGrads {
            loss,
            weights: grads,
            latent: d_z.to_vec(),
        })
    }

    /// Directional derivative, along latent direction `dir`, of the
    /// gradients returned by [`loss_and_grads`](Self::loss_and_grads):
    /// `(∂²L/∂φ∂z · dir, ∂²L/∂z² · dir)`.
    pub fn loss_grads_tangent(
        &self,
        z: &LatentCode,
        dir: &[f64],
        points: &Array2<f64>,
        targets: &Array2<f64>,
    ) -> Result<(SirenWeights, Vec<f64>)> {
        self.check_batch(z, points, targets)?;
        if dir.len() != self.config.latent_dim {
            return Err(Error::shape("tangent direction has wrong dimension"));
        }
        let tr = self.forward_batch(&z.0, points);
        let n = points.nrows() as f64;
        let zv = ArrayView1::from(&z.0[..]);
        let vv = ArrayView1::from(dir);

        // Tangent forward pass; the positional layer does not see z.
        let mut pre_dot: Vec<Array2<f64>> = vec![Array2::zeros(tr.pre[0].raw_dim())];
        let mut act_dot: Vec<Array2<f64>> = vec![Array2::zeros(tr.act[0].raw_dim())];
        for (l, layer) in self.hidden.iter().enumerate() {
            let shift_dot = layer.modulation.dot(&vv);
            let a_dot = if l == 0 {
                Array2::zeros(tr.pre[1].raw_dim()) + &shift_dot
            } else {
                act_dot[l].dot(&layer.weight.t()) + &shift_dot
            };
            act_dot.push(&a_dot * &tr.pre[l + 1].mapv(f64::cos));
            pre_dot.push(a_dot);
        }
        let last = self.hidden.len();
        let out_dot = act_dot[last].dot(&self.out_weight.t());

        let d_out = (&tr.out - targets) / n;
        let d_out_dot = out_dot / n;

        let mut g = SirenWeights::zeros(self.config);
        let mut d_z_dot = Array1::<f64>::zeros(self.config.latent_dim);
        g.out_weight = d_out_dot.t().dot(&tr.act[last]) + d_out.t().dot(&act_dot[last]);
        g.out_bias = d_out_dot.sum_axis(Axis(0));

        let mut d_x = d_out.dot(&self.out_weight);
        let mut d_x_dot = d_out_dot.dot(&self.out_weight);
        for l in (1..=last).rev() {
            let layer = &self.hidden[l - 1];
            let cos_a = tr.pre[l].mapv(f64::cos);
            let sin_a = tr.pre[l].mapv(f64::sin);
            let d_a = &d_x * &cos_a;
            let d_a_dot = &d_x_dot * &cos_a - &(&d_x * &sin_a * &pre_dot[l]);
            let s = d_a.sum_axis(Axis(0));
            let s_dot = d_a_dot.sum_axis(Axis(0));
            d_z_dot += &layer.modulation.t().dot(&s_dot);
            let gl = &mut g.hidden[l - 1];
            gl.weight = d_a_dot.t().dot(&tr.act[l - 1]);
            if l > 1 {
                gl.weight += &d_a.t().dot(&act_dot[l - 1]);
            }
            gl.modulation = outer(&s_dot, &zv) + outer(&s, &vv);
            gl.bias = s_dot;
            d_x = d_a.dot(&layer.weight);
            d_x_dot = d_a_dot.dot(&layer.weight);
        }
        let d_a0_dot = d_x_dot * tr.pre[0].mapv(f64::cos);
        g.first = d_a0_dot.t().dot(points) * self.config.omega0;
        g.make_standard_layout();
        Ok((g, d_z_dot.to_vec()))
    }

    /// Meta-learning objective for one field: starting from a zero latent,
    /// take `steps` gradient steps of size `lr` on the latent only, then
    /// report the loss at the adapted latent together with its gradient with
    /// respect to the network weights. With `first_order` the adapted latent
    /// is treated as a constant; otherwise the gradient flows back through
    /// every inner update.
    pub fn meta_loss_and_grads(
        &self,
        points: &Array2<f64>,
        targets: &Array2<f64>,
        steps: usize,
        lr: f64,
        first_order: bool,
    ) -> Result<(f64, SirenWeights, LatentCode)> {
        let mut zs = vec![LatentCode::zeros(self.config.latent_dim)];
        for _ in 0..steps {
            let z = zs.last().expect("nonempty");
            let g = self.loss_and_grads(z, points, targets, false)?;
            let next: Vec<f64> = z.0.iter().zip(&g.latent).map(|(a, b)| a - lr * b).collect();
            zs.push(LatentCode(next));
        }
        let z_final = zs.pop().expect("nonempty");
        let fin = self.loss_and_grads(&z_final, points, targets, true)?;
        let mut bar_w = fin.weights.expect("weights requested");
        if !first_order {
            let mut bar_z = fin.latent;
            for z in zs.iter().rev() {
                let (t_w, t_z) = self.loss_grads_tangent(z, &bar_z, points, targets)?;
                bar_w.axpy(-lr, &t_w);
                for (b, t) in bar_z.iter_mut().zip(&t_z) {
                    *b -= lr * t;
                }
            }
        }
        Ok((fin.loss, bar_w, z_final))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &SirenWeights) {
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += alpha * v;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|v| v * v)
            .sum()
    }
}

fn mse(out: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = out.len() as f64;
    out.iter().zip(targets.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

fn outer(a: &Array1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

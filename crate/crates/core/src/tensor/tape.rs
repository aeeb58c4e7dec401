//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Forward calls run the kernels in [`super::kernels`] and push one record per
//! operation; [`Tape::backward`] walks the records in exact reverse execution
//! order, applying each operation's adjoint rule and accumulating gradients
//! into per-node buffers that share their forward shapes.
//!
//! A tape is single-owner: build a fresh one per training step.

use super::kernels::{self, SampleGrid};
use super::Tensor4D;
use crate::error::{Error, Result};

/// Handle to a value on the tape.
pub type VId = usize;

struct Node {
    value: Tensor4D,
    grad: Option<Tensor4D>,
    needs_grad: bool,
    // For scalar reduction outputs: the value before the final f32 rounding.
    // Finite-difference checks read this to avoid a quantization floor.
    precise: Option<f64>,
}

enum OpRecord {
    Conv2d {
        x: VId,
        w: VId,
        b: Option<VId>,
        stride: usize,
        pad: usize,
        dilation: usize,
        out: VId,
    },
    Linear {
        x: VId,
        w: VId,
        b: Option<VId>,
        out: VId,
    },
    BatchNorm {
        x: VId,
        gamma: VId,
        beta: VId,
        // Statistics the forward pass normalized with (batch or running).
        mean: Vec<f32>,
        var: Vec<f32>,
        train: bool,
        out: VId,
    },
    LayerNormC {
        x: VId,
        gamma: VId,
        beta: VId,
        out: VId,
    },
    Relu {
        x: VId,
        out: VId,
    },
    Add {
        a: VId,
        b: VId,
        out: VId,
    },
    Sub {
        a: VId,
        b: VId,
        out: VId,
    },
    Mul {
        a: VId,
        b: VId,
        out: VId,
    },
    Scale {
        x: VId,
        k: f32,
        out: VId,
    },
    MulConst {
        x: VId,
        k: Tensor4D,
        out: VId,
    },
    GridSample {
        x: VId,
        grid: SampleGrid,
        out: VId,
    },
    Resize {
        x: VId,
        out: VId,
    },
    AvgPool {
        x: VId,
        out: VId,
    },
    L2Norm {
        x: VId,
        eps: f32,
        out: VId,
    },
    ChannelSum {
        x: VId,
        out: VId,
    },
    SumAll {
        x: VId,
        out: VId,
    },
    SliceBatch {
        x: VId,
        n0: usize,
        out: VId,
    },
    SoftmaxCe {
        logits: VId,
        targets: Vec<i32>,
        out: VId,
    },
}

/// Ordered record of executed operations with enough saved state to replay
/// each adjoint.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<OpRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a leaf value. Gradients are only tracked when `needs_grad`.
    pub fn leaf(&mut self, value: Tensor4D, needs_grad: bool) -> VId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            precise: None,
        });
        self.nodes.len() - 1
    }

    /// A leaf the backward pass treats as constant.
    pub fn constant(&mut self, value: Tensor4D) -> VId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VId) -> &Tensor4D {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VId) -> Option<&Tensor4D> {
        self.nodes[id].grad.as_ref()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Scalar value of a 1-element node at the best precision available.
    pub fn scalar_f64(&self, id: VId) -> f64 {
        let node = &self.nodes[id];
        debug_assert_eq!(node.value.numel(), 1);
        node.precise.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn scalar(&self, id: VId) -> f32 {
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Tensor4D, needs: bool) -> VId {
        self.leaf(value, needs)
    }

    fn push_precise(&mut self, value: Tensor4D, needs: bool, precise: f64) -> VId {
        let id = self.leaf(value, needs);
        self.nodes[id].precise = Some(precise);
        id
    }

    /// Shadow value for scalar nodes, defaulting to the stored f32.
    fn shadow(&self, id: VId) -> Option<f64> {
        let node = &self.nodes[id];
        if node.value.numel() == 1 {
            Some(node.precise.unwrap_or(node.value.data()[0] as f64))
        } else {
            None
        }
    }

    fn needs(&self, ids: &[VId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // -- operations ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: VId,
        w: VId,
        b: Option<VId>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<VId> {
        let bias = b.map(|bi| self.nodes[bi].value.data());
        let y = kernels::conv2d_fwd(
            &self.nodes[x].value,
            &self.nodes[w].value,
            bias,
            stride,
            pad,
            dilation,
        )?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs(&ids);
        let out = self.push(y, needs);
        self.ops.push(OpRecord::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            dilation,
            out,
        });
        Ok(out)
    }

    pub fn linear(&mut self, x: VId, w: VId, b: Option<VId>) -> Result<VId> {
        let bias = b.map(|bi| self.nodes[bi].value.data());
        let y = kernels::linear_fwd(&self.nodes[x].value, &self.nodes[w].value, bias)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs(&ids);
        let out = self.push(y, needs);
        self.ops.push(OpRecord::Linear { x, w, b, out });
        Ok(out)
    }

    /// Train-mode batch norm. Returns the output and the batch statistics so
    /// the caller can fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: VId,
        gamma: VId,
        beta: VId,
    ) -> Result<(VId, Vec<f32>, Vec<f32>)> {
        let (y, mean, var) = kernels::batch_norm_train_fwd(
            &self.nodes[x].value,
            self.nodes[gamma].value.data(),
            self.nodes[beta].value.data(),
        )?;
        let needs = self.needs(&[x, gamma, beta]);
        let out = self.push(y, needs);
        self.ops.push(OpRecord::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            var: var.clone(),
            train: true,
            out,
        });
        Ok((out, mean, var))
    }

    /// Eval-mode batch norm against frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: VId,
        gamma: VId,
        beta: VId,
        r_mean: &[f32],
        r_var: &[f32],
    ) -> Result<VId> {
        let y = kernels::batch_norm_eval_fwd(
            &self.nodes[x].value,
            self.nodes[gamma].value.data(),
            self.nodes[beta].value.data(),
            r_mean,
            r_var,
        );
        let needs = self.needs(&[x, gamma, beta]);
        let out = self.push(y, needs);
        self.ops.push(OpRecord::BatchNorm {
            x,
            gamma,
            beta,
            mean: r_mean.to_vec(),
            var: r_var.to_vec(),
            train: false,
            out,
        });
        Ok(out)
    }

    pub fn layer_norm_c(&mut self, x: VId, gamma: VId, beta: VId) -> VId {
        let y = kernels::layer_norm_c_fwd(
            &self.nodes[x].value,
            self.nodes[gamma].value.data(),
            self.nodes[beta].value.data(),
        );
        let needs = self.needs(&[x, gamma, beta]);
        let out = self.push(y, needs);
        self.ops.push(OpRecord::LayerNormC { x, gamma, beta, out });
        out
    }

    pub fn relu(&mut self, x: VId) -> VId {
        let y = kernels::relu_fwd(&self.nodes[x].value);
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::Relu { x, out });
        out
    }

    pub fn add(&mut self, a: VId, b: VId) -> Result<VId> {
        let y = kernels::zip2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        let shadow = match (self.shadow(a), self.shadow(b)) {
            (Some(pa), Some(pb)) => Some(pa + pb),
            _ => None,
        };
        let out = self.push(y, needs);
        self.nodes[out].precise = shadow;
        self.ops.push(OpRecord::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: VId, b: VId) -> Result<VId> {
        let y = kernels::zip2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        let shadow = match (self.shadow(a), self.shadow(b)) {
            (Some(pa), Some(pb)) => Some(pa - pb),
            _ => None,
        };
        let out = self.push(y, needs);
        self.nodes[out].precise = shadow;
        self.ops.push(OpRecord::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: VId, b: VId) -> Result<VId> {
        let y = kernels::zip2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        let shadow = match (self.shadow(a), self.shadow(b)) {
            (Some(pa), Some(pb)) => Some(pa * pb),
            _ => None,
        };
        let out = self.push(y, needs);
        self.nodes[out].precise = shadow;
        self.ops.push(OpRecord::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: VId, k: f32) -> VId {
        let y = self.nodes[x].value.map(|v| v * k);
        let needs = self.nodes[x].needs_grad;
        let shadow = self.shadow(x).map(|p| p * k as f64);
        let out = self.push(y, needs);
        self.nodes[out].precise = shadow;
        self.ops.push(OpRecord::Scale { x, k, out });
        out
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, x: VId, k: Tensor4D) -> Result<VId> {
        let y = kernels::zip2(&self.nodes[x].value, &k, |a, b| a * b)?;
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::MulConst { x, k, out });
        Ok(out)
    }

    /// Bilinear gather at the grid's coordinates. The grid is a constant;
    /// only the input receives an adjoint. Returns `(output, validity)`.
    pub fn grid_sample(&mut self, x: VId, grid: SampleGrid) -> Result<(VId, Tensor4D)> {
        let (y, valid) = kernels::grid_sample_fwd(&self.nodes[x].value, &grid)?;
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::GridSample { x, grid, out });
        Ok((out, valid))
    }

    pub fn bilinear_resize(&mut self, x: VId, oh: usize, ow: usize) -> Result<VId> {
        let y = kernels::bilinear_resize_fwd(&self.nodes[x].value, oh, ow)?;
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::Resize { x, out });
        Ok(out)
    }

    /// Spatial mean to a `(n, c, 1, 1)` channel vector.
    pub fn avg_pool_all(&mut self, x: VId) -> VId {
        let y = kernels::avg_pool_all_fwd(&self.nodes[x].value);
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::AvgPool { x, out });
        out
    }

    pub fn l2_normalize(&mut self, x: VId, eps: f32) -> VId {
        let y = kernels::l2_normalize_fwd(&self.nodes[x].value, eps);
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::L2Norm { x, eps, out });
        out
    }

    pub fn channel_sum(&mut self, x: VId) -> VId {
        let y = kernels::channel_sum_fwd(&self.nodes[x].value);
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::ChannelSum { x, out });
        out
    }

    pub fn sum_all(&mut self, x: VId) -> VId {
        let (y, precise) = kernels::sum_all_fwd(&self.nodes[x].value);
        let needs = self.nodes[x].needs_grad;
        let out = self.push_precise(y, needs, precise);
        self.ops.push(OpRecord::SumAll { x, out });
        out
    }

    /// Copies samples `[n0, n1)` out of the batch axis.
    pub fn slice_batch(&mut self, x: VId, n0: usize, n1: usize) -> Result<VId> {
        let v = &self.nodes[x].value;
        let (n, c, h, w) = v.shape();
        if n1 > n || n0 >= n1 {
            return Err(Error::Shape(format!(
                "slice_batch [{n0}, {n1}) out of range for batch {n}"
            )));
        }
        let chw = c * h * w;
        let data = v.data()[n0 * chw..n1 * chw].to_vec();
        let y = Tensor4D::from_vec(n1 - n0, c, h, w, data)?;
        let needs = self.nodes[x].needs_grad;
        let out = self.push(y, needs);
        self.ops.push(OpRecord::SliceBatch { x, n0, out });
        Ok(out)
    }

    /// Mean pixelwise softmax cross-entropy; targets `< 0` are ignored.
    pub fn softmax_ce(&mut self, logits: VId, targets: Vec<i32>) -> Result<VId> {
        let (loss, _count) = kernels::softmax_ce_fwd(&self.nodes[logits].value, &targets)?;
        let y = Tensor4D::from_vec(1, 1, 1, 1, vec![loss as f32])?;
        let needs = self.nodes[logits].needs_grad;
        let out = self.push_precise(y, needs, loss);
        self.ops.push(OpRecord::SoftmaxCe {
            logits,
            targets,
            out,
        });
        Ok(out)
    }

    // -- backward -----------------------------------------------------------

    /// Backward from a scalar output seeded with 1.0.
    pub fn backward(&mut self, out: VId) -> Result<()> {
        if self.nodes[out].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar output, got {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let (n, c, h, w) = self.nodes[out].value.shape();
        self.backward_with(out, Tensor4D::full(n, c, h, w, 1.0))
    }

    /// Backward with an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: VId, upstream: Tensor4D) -> Result<()> {
        self.backward_multi(vec![(out, upstream)])
    }

    /// Backward from several seeded nodes in one reverse sweep. Seeds
    /// accumulate, so a node may appear more than once.
    pub fn backward_multi(&mut self, seeds: Vec<(VId, Tensor4D)>) -> Result<()> {
        for (out, upstream) in seeds {
            if !upstream.same_shape(&self.nodes[out].value) {
                return Err(Error::Shape(format!(
                    "upstream gradient shape {:?} does not match output {:?}",
                    upstream.shape(),
                    self.nodes[out].value.shape()
                )));
            }
            match &mut self.nodes[out].grad {
                Some(g) => {
                    for (gv, uv) in g.data_mut().iter_mut().zip(upstream.data()) {
                        *gv += uv;
                    }
                }
                None => self.nodes[out].grad = Some(upstream),
            }
        }
        for i in (0..self.ops.len()).rev() {
            self.step_back(i)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VId, delta: Tensor4D) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            None => self.nodes[id].grad = Some(delta),
        }
    }

    fn out_grad(&self, out: VId) -> Option<Tensor4D> {
        if !self.nodes[out].needs_grad {
            return None;
        }
        self.nodes[out].grad.clone()
    }

    fn step_back(&mut self, op_idx: usize) -> Result<()> {
        // Records are immutable once pushed; swap the op out to appease the
        // borrow checker, then put it back.
        let op = std::mem::replace(
            &mut self.ops[op_idx],
            OpRecord::Relu { x: 0, out: 0 },
        );
        let result = self.apply_adjoint(&op);
        self.ops[op_idx] = op;
        result
    }

    fn apply_adjoint(&mut self, op: &OpRecord) -> Result<()> {
        match op {
            OpRecord::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
                out,
            } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let need_dx = self.nodes[*x].needs_grad;
                let (dx, dw, db) = kernels::conv2d_bwd(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    &g,
                    *stride,
                    *pad,
                    *dilation,
                    need_dx,
                    b.is_some(),
                );
                if let Some(dx) = dx {
                    self.accumulate(*x, dx);
                }
                self.accumulate(*w, dw);
                if let (Some(bi), Some(db)) = (b, db) {
                    let c = db.len();
                    self.accumulate(*bi, Tensor4D::from_vec(1, c, 1, 1, db)?);
                }
            }
            OpRecord::Linear { x, w, b, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let (dx, dw, db) = kernels::linear_bwd(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    &g,
                    b.is_some(),
                );
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                if let (Some(bi), Some(db)) = (b, db) {
                    let c = db.len();
                    self.accumulate(*bi, Tensor4D::from_vec(1, c, 1, 1, db)?);
                }
            }
            OpRecord::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
                out,
            } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let (dx, dgamma, dbeta) = if *train {
                    kernels::batch_norm_train_bwd(
                        &self.nodes[*x].value,
                        self.nodes[*gamma].value.data(),
                        mean,
                        var,
                        &g,
                    )
                } else {
                    kernels::batch_norm_eval_bwd(
                        &self.nodes[*x].value,
                        self.nodes[*gamma].value.data(),
                        mean,
                        var,
                        &g,
                    )
                };
                let c = dgamma.len();
                self.accumulate(*x, dx);
                self.accumulate(*gamma, Tensor4D::from_vec(1, c, 1, 1, dgamma)?);
                self.accumulate(*beta, Tensor4D::from_vec(1, c, 1, 1, dbeta)?);
            }
            OpRecord::LayerNormC { x, gamma, beta, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let (dx, dgamma, dbeta) = kernels::layer_norm_c_bwd(
                    &self.nodes[*x].value,
                    self.nodes[*gamma].value.data(),
                    &g,
                );
                let c = dgamma.len();
                self.accumulate(*x, dx);
                self.accumulate(*gamma, Tensor4D::from_vec(1, c, 1, 1, dgamma)?);
                self.accumulate(*beta, Tensor4D::from_vec(1, c, 1, 1, dbeta)?);
            }
            OpRecord::Relu { x, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::relu_bwd(&self.nodes[*out].value, &g);
                self.accumulate(*x, dx);
            }
            OpRecord::Add { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g);
            }
            OpRecord::Sub { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            OpRecord::Mul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let da = kernels::zip2(&g, &self.nodes[*b].value, |x, y| x * y)?;
                let db = kernels::zip2(&g, &self.nodes[*a].value, |x, y| x * y)?;
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            OpRecord::Scale { x, k, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                self.accumulate(*x, g.map(|v| v * k));
            }
            OpRecord::MulConst { x, k, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::zip2(&g, k, |a, b| a * b)?;
                self.accumulate(*x, dx);
            }
            OpRecord::GridSample { x, grid, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::grid_sample_bwd(&self.nodes[*x].value, grid, &g);
                self.accumulate(*x, dx);
            }
            OpRecord::Resize { x, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::bilinear_resize_bwd(&self.nodes[*x].value, &g);
                self.accumulate(*x, dx);
            }
            OpRecord::AvgPool { x, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::avg_pool_all_bwd(&self.nodes[*x].value, &g);
                self.accumulate(*x, dx);
            }
            OpRecord::L2Norm { x, eps, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::l2_normalize_bwd(&self.nodes[*x].value, *eps, &g);
                self.accumulate(*x, dx);
            }
            OpRecord::ChannelSum { x, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::channel_sum_bwd(&self.nodes[*x].value, &g);
                self.accumulate(*x, dx);
            }
            OpRecord::SumAll { x, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let gv = g.data()[0];
                let (n, c, h, w) = self.nodes[*x].value.shape();
                self.accumulate(*x, Tensor4D::full(n, c, h, w, gv));
            }
            OpRecord::SliceBatch { x, n0, out } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let (n, c, h, w) = self.nodes[*x].value.shape();
                let mut dx = Tensor4D::zeros(n, c, h, w);
                let chw = c * h * w;
                dx.data_mut()[n0 * chw..n0 * chw + g.numel()].copy_from_slice(g.data());
                self.accumulate(*x, dx);
            }
            OpRecord::SoftmaxCe {
                logits,
                targets,
                out,
            } => {
                let Some(g) = self.out_grad(*out) else { return Ok(()) };
                let dx = kernels::softmax_ce_bwd(&self.nodes[*logits].value, targets, g.data()[0]);
                self.accumulate(*logits, dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradient() {
        // y = sum(2 * x) => dy/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4D::from_fn(1, 1, 2, 2, |_, _, y, xx| (y * 2 + xx) as f32), true);
        let s = tape.scale(x, 2.0);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn square_via_mul_accumulates_both_paths() {
        // y = sum(x * x) => dy/dx = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4D::from_vec(1, 1, 1, 3, vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4D::full(1, 1, 1, 2, 3.0), true);
        let k = tape.constant(Tensor4D::full(1, 1, 1, 2, 5.0));
        let y = tape.mul(x, k).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(k).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4D::zeros(1, 2, 1, 1), true);
        let y = tape.scale(x, 1.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn slice_batch_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4D::from_fn(3, 1, 1, 2, |n, _, _, _| n as f32), true);
        let mid = tape.slice_batch(x, 1, 2).unwrap();
        assert_eq!(tape.value(mid).data(), &[1.0, 1.0]);
        let loss = tape.sum_all(mid);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}

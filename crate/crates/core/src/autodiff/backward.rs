//! Reverse accumulation. Every rule appends ordinary graph nodes, so the
//! returned gradients can themselves be differentiated.

use std::collections::BTreeMap;

use super::{AdError, AdResult, Graph, NodeId, OpKind};
use crate::tensor::kernels;

impl Graph {
    /// Gradients of a scalar-shaped `output` with respect to the given leaf
    /// nodes. Returned gradient nodes live in this graph; leaves that do not
    /// influence `output` map to zero tensors of the leaf's shape.
    pub fn backward(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
    ) -> AdResult<BTreeMap<NodeId, NodeId>> {
        let out_node = self.op_kind(output).ok_or(AdError::UnknownNode(output.0))?;
        let _ = out_node;
        let out_shape = self.value(output).shape().to_vec();
        if self.value(output).len() != 1 {
            return Err(AdError::NonScalarOutput {
                node: output.0,
                shape: out_shape,
            });
        }
        for &w in wrt {
            if self.op_kind(w).is_none() {
                return Err(AdError::UnknownNode(w.0));
            }
            if !self.is_leaf(w) {
                return Err(AdError::NotALeaf(w.0));
            }
        }

        // Adjoints for nodes that existed when the sweep started. Nodes
        // appended by the rules below have larger ids and are never visited.
        let mut adjoint: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        let seed = self.ones_const(&out_shape);
        adjoint[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let grad = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            let contributions = self.input_adjoints(NodeId(i), &op, &inputs, grad)?;
            for (input, contrib) in contributions {
                adjoint[input.0] = match adjoint[input.0] {
                    None => Some(contrib),
                    Some(prev) => Some(self.add(prev, contrib)?),
                };
            }
        }

        let mut grads = BTreeMap::new();
        for &w in wrt {
            let g = match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value(w).shape().to_vec();
                    self.zeros_const(&shape)
                }
            };
            grads.insert(w, g);
        }
        Ok(grads)
    }

    /// Second-order helper for penalties built on a first gradient.
    ///
    /// Computes `g = d output / d inner_wrt`; if `g` is scalar-shaped it is
    /// differentiated directly, otherwise it is scalarized as the row-wise
    /// gradient-norm penalty `mean((||g_row|| - 1)^2)` before the second
    /// backward pass over `outer_wrt`.
    pub fn grad_of_grad(
        &mut self,
        output: NodeId,
        inner_wrt: NodeId,
        outer_wrt: &[NodeId],
    ) -> AdResult<BTreeMap<NodeId, NodeId>> {
        let first = self.backward(output, &[inner_wrt])?;
        let g = first[&inner_wrt];
        let scalar = if self.value(g).len() == 1 {
            g
        } else {
            self.grad_norm_penalty(g)?
        };
        self.backward(scalar, outer_wrt)
    }

    /// `mean((||row|| - 1)^2)` over the rows of a rank-2 node.
    pub fn grad_norm_penalty(&mut self, g: NodeId) -> AdResult<NodeId> {
        let norms = self.l2_norm_rows(g)?;
        let shape = self.value(norms).shape().to_vec();
        let ones = self.ones_const(&shape);
        let centered = self.sub(norms, ones)?;
        let sq = self.square(centered)?;
        self.reduce_mean(sq)
    }

    /// Adjoint contributions of one node to each of its inputs, expressed as
    /// new graph nodes.
    fn input_adjoints(
        &mut self,
        node: NodeId,
        op: &OpKind,
        inputs: &[NodeId],
        grad: NodeId,
    ) -> AdResult<Vec<(NodeId, NodeId)>> {
        let out = match op {
            OpKind::Leaf | OpKind::Constant => vec![],
            OpKind::Add => vec![(inputs[0], grad), (inputs[1], grad)],
            OpKind::Sub => {
                let neg = self.scalar_mul(grad, -1.0)?;
                vec![(inputs[0], grad), (inputs[1], neg)]
            }
            OpKind::Mul => {
                let da = self.mul(grad, inputs[1])?;
                let db = self.mul(grad, inputs[0])?;
                vec![(inputs[0], da), (inputs[1], db)]
            }
            OpKind::ScalarMul(c) => {
                let d = self.scalar_mul(grad, *c)?;
                vec![(inputs[0], d)]
            }
            OpKind::LeakyRelu(s) => {
                // piecewise-constant factor, injected as a constant mask
                let slope = *s;
                let mask = self.nodes[inputs[0].0]
                    .value
                    .map(|x| kernels::leaky_relu_grad_scalar(x, slope));
                let mask = self.constant(mask);
                let d = self.mul(grad, mask)?;
                vec![(inputs[0], d)]
            }
            OpKind::Exp => {
                let d = self.mul(grad, node)?;
                vec![(inputs[0], d)]
            }
            OpKind::Log => {
                // 1/x = exp(-log x), reusing the forward output
                let neg = self.scalar_mul(node, -1.0)?;
                let recip = self.exp(neg)?;
                let d = self.mul(grad, recip)?;
                vec![(inputs[0], d)]
            }
            OpKind::Square => {
                let gx = self.mul(grad, inputs[0])?;
                let d = self.scalar_mul(gx, 2.0)?;
                vec![(inputs[0], d)]
            }
            OpKind::Sqrt => {
                // 0.5 / sqrt(x), via exp(-log(sqrt x))
                let logy = self.log(node)?;
                let neg = self.scalar_mul(logy, -1.0)?;
                let recip = self.exp(neg)?;
                let half = self.scalar_mul(recip, 0.5)?;
                let d = self.mul(grad, half)?;
                vec![(inputs[0], d)]
            }
            OpKind::Abs => {
                let mask = self.nodes[inputs[0].0].value.map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let mask = self.constant(mask);
                let d = self.mul(grad, mask)?;
                vec![(inputs[0], d)]
            }
            OpKind::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = if *ta {
                    self.matmul(b, grad, *tb, true)?
                } else {
                    self.matmul(grad, b, false, !*tb)?
                };
                let db = if *tb {
                    self.matmul(grad, a, true, *ta)?
                } else {
                    self.matmul(a, grad, !*ta, false)?
                };
                vec![(a, da), (b, db)]
            }
            OpKind::ConcatLastAxis => {
                let ca = self.value(inputs[0]).dims2().expect("validated rank-2").1;
                let cb = self.value(inputs[1]).dims2().expect("validated rank-2").1;
                let da = self.slice_last_axis(grad, 0, ca)?;
                let db = self.slice_last_axis(grad, ca, cb)?;
                vec![(inputs[0], da), (inputs[1], db)]
            }
            OpKind::SliceLastAxis { start, len } => {
                let (rows, cols) = self.value(inputs[0]).dims2().expect("validated rank-2");
                let (start, len) = (*start, *len);
                let mut acc = grad;
                if start > 0 {
                    let left = self.zeros_const(&[rows, start]);
                    acc = self.concat_last_axis(left, acc)?;
                }
                if start + len < cols {
                    let right = self.zeros_const(&[rows, cols - start - len]);
                    acc = self.concat_last_axis(acc, right)?;
                }
                vec![(inputs[0], acc)]
            }
            OpKind::ReduceMean => {
                let (rows, cols) = self.value(inputs[0]).dims2().expect("validated rank-2");
                let scaled = self.scalar_mul(grad, 1.0 / (rows * cols) as f64)?;
                let d = self.fill_rank2(scaled, rows, cols)?;
                vec![(inputs[0], d)]
            }
            OpKind::ReduceSum => {
                let (rows, cols) = self.value(inputs[0]).dims2().expect("validated rank-2");
                let d = self.fill_rank2(grad, rows, cols)?;
                vec![(inputs[0], d)]
            }
            OpKind::L2NormRows => {
                // d||x_i|| / dx_ij = x_ij / ||x_i||; singular on zero rows
                let (rows, cols) = self.value(inputs[0]).dims2().expect("validated rank-2");
                let _ = rows;
                let logn = self.log(node)?;
                let neg = self.scalar_mul(logn, -1.0)?;
                let recip = self.exp(neg)?;
                let factor = self.mul(grad, recip)?;
                let ones_row = self.ones_const(&[1, cols]);
                let spread = self.matmul(factor, ones_row, false, false)?;
                let d = self.mul(spread, inputs[0])?;
                vec![(inputs[0], d)]
            }
            OpKind::BroadcastRow { rows } => {
                let ones = self.ones_const(&[1, *rows]);
                let d = self.matmul(ones, grad, false, false)?;
                vec![(inputs[0], d)]
            }
        };
        Ok(out)
    }

    /// Spread a `[1, 1]` node to `[rows, cols]` via outer products with
    /// all-ones constants (keeps the fill differentiable).
    fn fill_rank2(&mut self, scalar: NodeId, rows: usize, cols: usize) -> AdResult<NodeId> {
        debug_assert_eq!(self.value(scalar).shape(), &[1, 1]);
        let ones_col = self.ones_const(&[rows, 1]);
        let col = self.matmul(ones_col, scalar, false, false)?;
        let ones_row = self.ones_const(&[1, cols]);
        self.matmul(col, ones_row, false, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tensor};

    fn scalar_leaf(g: &mut Graph, x: f64) -> NodeId {
        g.leaf(Tensor::scalar(x))
    }

    #[test]
    fn square_derivative() {
        // d/dx (x * x) = 2x
        let mut g = Graph::new(Precision::F64);
        let x = scalar_leaf(&mut g, 3.0);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(g.value(grads[&x]).scalar_value(), 6.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new(Precision::F64);
        let x = scalar_leaf(&mut g, 3.0);
        let unused = g.leaf(Tensor::matrix(2, 2, vec![1.0; 4]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[x, unused]).unwrap();
        let gu = g.value(grads[&unused]);
        assert_eq!(gu.shape(), &[2, 2]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new(Precision::F64);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.abs(x).unwrap();
        assert!(matches!(
            g.backward(y, &[x]),
            Err(AdError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn wrt_must_be_leaf_and_known() {
        let mut g = Graph::new(Precision::F64);
        let x = scalar_leaf(&mut g, 2.0);
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y, &[y]), Err(AdError::NotALeaf(_))));
        assert!(matches!(
            g.backward(y, &[NodeId(99)]),
            Err(AdError::UnknownNode(99))
        ));
    }

    #[test]
    fn cubic_second_derivative() {
        // f = x^3, f'' = 6x, at x = 2 -> 12
        let mut g = Graph::new(Precision::F64);
        let x = scalar_leaf(&mut g, 2.0);
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let second = g.grad_of_grad(x3, x, &[x]).unwrap();
        assert_eq!(g.value(second[&x]).scalar_value(), 12.0);
    }

    #[test]
    fn norm_penalty_gradient_closed_form() {
        // critic(x) = w . x, d/dw (||w|| - 1)^2 = 2(||w|| - 1) w / ||w||
        let mut g = Graph::new(Precision::F64);
        let w = g.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]));
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.7, -1.3]));
        let out = g.matmul(x, w, false, true).unwrap();
        let s = g.reduce_sum(out).unwrap();
        let grads = g.grad_of_grad(s, x, &[w]).unwrap();
        let gw = g.value(grads[&w]);
        assert!((gw.data()[0] - 4.8).abs() < 1e-12);
        assert!((gw.data()[1] - 6.4).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_gradients_route_correctly() {
        let mut g = Graph::new(Precision::F64);
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = g.leaf(Tensor::matrix(1, 1, vec![5.0]));
        let cat = g.concat_last_axis(a, b).unwrap();
        let sq = g.square(cat).unwrap();
        let s = g.reduce_sum(sq).unwrap();
        let grads = g.backward(s, &[a, b]).unwrap();
        assert_eq!(g.value(grads[&a]).data(), &[2.0, 4.0]);
        assert_eq!(g.value(grads[&b]).data(), &[10.0]);
    }

    #[test]
    fn broadcast_row_gradient_sums_columns() {
        let mut g = Graph::new(Precision::F64);
        let row = g.leaf(Tensor::matrix(1, 2, vec![1.0, -2.0]));
        let wide = g.broadcast_row(row, 3).unwrap();
        let s = g.reduce_sum(wide).unwrap();
        let grads = g.backward(s, &[row]).unwrap();
        assert_eq!(g.value(grads[&row]).data(), &[3.0, 3.0]);
    }
}

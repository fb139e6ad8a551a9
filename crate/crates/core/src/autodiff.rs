//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value, the ids of its
//! inputs and a pullback closure. [`Graph::backward`] walks the tape once in
//! reverse order, so each node is visited exactly once. Nodes that do not
//! depend on any parameter carry no pullback and never receive gradient.

use crate::error::{arg_err, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a pullback: parent values, this node's value, the incoming
/// gradient, and which parents actually need a gradient.
pub struct BackCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs: Vec<bool>,
}

pub type Pullback = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    pullback: Option<Pullback>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros when `v` is unreachable from the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), pullback: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The pullback is dropped when no parent needs
    /// gradient.
    pub fn push(&mut self, value: Tensor, parents: &[Var], pullback: Pullback) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            pullback: requires_grad.then_some(pullback),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return arg_err(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&root_val.shape, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(pullback) = node.pullback.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = pullback(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape, self.nodes[p].value.shape);
                match &mut grads[p] {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    // ---- elementwise -------------------------------------------------------

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return arg_err(format!("{op}: shape mismatch {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let neg = Tensor {
                    shape: c.grad.shape.clone(),
                    data: c.grad.data.iter().map(|g| -g).collect(),
                };
                vec![Some(c.grad.clone()), Some(neg)]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let prod = |other: &Tensor| Tensor {
                    shape: other.shape.clone(),
                    data: c.grad.data.iter().zip(&other.data).map(|(g, o)| g * o).collect(),
                };
                vec![
                    c.needs[0].then(|| prod(c.inputs[1])),
                    c.needs[1].then(|| prod(c.inputs[0])),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| k * x).collect() };
        self.push(
            out,
            &[a],
            Box::new(move |c| {
                vec![Some(Tensor {
                    shape: c.grad.shape.clone(),
                    data: c.grad.data.iter().map(|g| k * g).collect(),
                })]
            }),
        )
    }

    /// Pointwise map with a derivative expressed through input and output.
    pub fn map<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|&x| f(x)).collect() };
        self.push(
            out,
            &[a],
            Box::new(move |c| {
                let data = c
                    .grad
                    .data
                    .iter()
                    .zip(&c.inputs[0].data)
                    .zip(&c.output.data)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor { shape: c.grad.shape.clone(), data })]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, |x, _| sigmoid(x))
    }

    /// `exp(-(x / spread)^(2p))` with a learnable scalar `spread`.
    pub fn super_gaussian(&mut self, a: Var, spread: Var, p: u32) -> Result<Var> {
        if self.value(spread).numel() != 1 {
            return arg_err("super-gaussian spread must be a scalar");
        }
        if p == 0 {
            return arg_err("super-gaussian order must be positive");
        }
        let s = self.value(spread).item();
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| (-odd_power(x / s, p) * (x / s)).exp()).collect(),
        };
        let e = f64::from(2 * p);
        Ok(self.push(
            out,
            &[a, spread],
            Box::new(move |c| {
                let s = c.inputs[1].item();
                let mut dx = Vec::with_capacity(c.grad.numel());
                let mut ds = 0.0;
                for ((g, &x), &y) in c.grad.data.iter().zip(&c.inputs[0].data).zip(&c.output.data) {
                    let u = x / s;
                    let upow = odd_power(u, p);
                    // dy/dx = -e u^(e-1) y / s ; dy/ds = e u^e y / s
                    dx.push(-g * e * upow * y / s);
                    ds += g * e * upow * u * y / s;
                }
                vec![
                    c.needs[0].then(|| Tensor { shape: c.grad.shape.clone(), data: dx }),
                    c.needs[1].then(|| Tensor::scalar(ds)),
                ]
            }),
        ))
    }

    // ---- matrix ------------------------------------------------------------

    /// `a [.., k] * b [k x m]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rank() != 2 || va.cols() != vb.shape[0] {
            return arg_err(format!("matmul: incompatible {:?} x {:?}", va.shape, vb.shape));
        }
        let (n, k, m) = (va.rows(), va.cols(), vb.shape[1]);
        let mut shape = va.shape.clone();
        *shape.last_mut().expect("rank checked") = m;
        let mut out = Tensor::zeros(&shape);
        gemm(n, k, m, &va.data, false, &vb.data, false, &mut out.data, false);
        let a_shape = va.shape.clone();
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |c| {
                let da = c.needs[0].then(|| {
                    let mut t = Tensor::zeros(&a_shape);
                    gemm(n, m, k, &c.grad.data, false, &c.inputs[1].data, true, &mut t.data, false);
                    t
                });
                let db = c.needs[1].then(|| {
                    let mut t = Tensor::zeros(&[k, m]);
                    gemm(k, n, m, &c.inputs[0].data, true, &c.grad.data, false, &mut t.data, false);
                    t
                });
                vec![da, db]
            }),
        ))
    }

    /// Adds a length-`m` bias to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let m = va.cols();
        if vb.numel() != m {
            return arg_err(format!("add_bias: bias {:?} vs rows of width {m}", vb.shape));
        }
        let mut out = va.clone();
        for row in out.data.chunks_exact_mut(m) {
            row.iter_mut().zip(&vb.data).for_each(|(x, b)| *x += b);
        }
        let bshape = vb.shape.clone();
        Ok(self.push(
            out,
            &[a, bias],
            Box::new(move |c| {
                let db = c.needs[1].then(|| {
                    let mut t = Tensor::zeros(&bshape);
                    for row in c.grad.data.chunks_exact(m) {
                        t.data.iter_mut().zip(row).for_each(|(acc, g)| *acc += g);
                    }
                    t
                });
                vec![Some(c.grad.clone()), db]
            }),
        ))
    }

    /// `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg_err("concat of nothing");
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return arg_err("concat_cols: row count mismatch");
            }
        }
        let total: usize = widths.iter().sum();
        let mut shape = self.value(parts[0]).shape.clone();
        *shape.last_mut().expect("non-empty shape") = total;
        let mut out = Tensor::zeros(&shape);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.value(p).data;
            for r in 0..rows {
                out.data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape.clone()).collect();
        Ok(self.push(
            out,
            parts,
            Box::new(move |c| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if c.needs[i] {
                        let mut t = Tensor::zeros(&shapes[i]);
                        for r in 0..rows {
                            t.data[r * w..(r + 1) * w].copy_from_slice(
                                &c.grad.data[r * total + offset..r * total + offset + w],
                            );
                        }
                        grads.push(Some(t));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if start + len > cols {
            return arg_err(format!("slice_cols: [{start}, {}) exceeds {cols}", start + len));
        }
        let mut out_shape = va.shape.clone();
        *out_shape.last_mut().expect("non-empty shape") = len;
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data[r * cols + start..r * cols + start + len]);
        }
        let shape = va.shape.clone();
        Ok(self.push(
            out,
            &[a],
            Box::new(move |c| {
                let mut t = Tensor::zeros(&shape);
                for r in 0..rows {
                    t.data[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&c.grad.data[r * len..(r + 1) * len]);
                }
                vec![Some(t)]
            }),
        ))
    }

    /// Arithmetic mean of equally shaped tensors, accumulated in slice order.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return arg_err("mean of nothing");
        }
        let shape = self.value(parts[0]).shape.clone();
        let mut acc = Tensor::zeros(&shape);
        for &p in parts {
            let v = self.value(p);
            if v.shape != shape {
                return arg_err("mean: shape mismatch");
            }
            acc.data.iter_mut().zip(&v.data).for_each(|(a, x)| *a += x);
        }
        let inv = 1.0 / parts.len() as f64;
        acc.data.iter_mut().for_each(|a| *a *= inv);
        let count = parts.len();
        Ok(self.push(
            acc,
            parts,
            Box::new(move |c| {
                let g = Tensor {
                    shape: c.grad.shape.clone(),
                    data: c.grad.data.iter().map(|g| g * inv).collect(),
                };
                (0..count).map(|i| c.needs[i].then(|| g.clone())).collect()
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let shape = self.value(a).shape.clone();
        self.push(
            Tensor::scalar(total),
            &[a],
            Box::new(move |c| vec![Some(Tensor::full(&shape, c.grad.item()))]),
        )
    }

    /// `(1 / rows) * sum ||pred_r - target_r||^2` over matrix rows.
    pub fn mse_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same(pred, target, "mse")?;
        let rows = self.value(pred).rows().max(1) as f64;
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq);
        Ok(self.scale(total, 1.0 / rows))
    }
}

#[inline]
/// `u^(2p - 1)` by repeated multiplication (`powi` is a libcall).
pub fn odd_power(u: f64, p: u32) -> f64 {
    let u2 = u * u;
    let mut r = u;
    for _ in 1..p {
        r *= u2;
    }
    r
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

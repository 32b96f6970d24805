//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation pushes one node holding its output value, the indices of
//! its inputs and a [`Backward`] rule. [`Tape::gradients`] walks the nodes in
//! reverse order and accumulates adjoints.

use super::ops;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Real>: Send + Sync {
    /// Returns the adjoint of each input, in input order. `needs[i]` is false
    /// when input `i` has no path to a parameter, so its adjoint may be skipped.
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of a custom operation.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], rule: Box<dyn Backward<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs.to_vec(), Some(rule), requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape("gradients", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let contributions = rule.backward(&g, &inputs, &node.value, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for ((input, contribution), need) in
                node.inputs.iter().zip(contributions).zip(needs)
            {
                let Some(c) = contribution else { continue };
                if !need {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    // Differentiable operations.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], Box::new(MatmulRule)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(y, &[x, bias], Box::new(AddBiasRule)))
    }

    /// `x · w + b` with an optional bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, &[a, b], Box::new(AddRule)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, &[a, b], Box::new(MulRule)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, &[x], Box::new(ScaleRule(s)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = ops::silu(self.value(x));
        self.push(y, &[x], Box::new(SiluRule))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = ops::softplus(self.value(x));
        self.push(y, &[x], Box::new(SoftplusRule))
    }

    /// Elementwise `-exp(x)`.
    pub fn neg_exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| -v.exp());
        self.push(y, &[x], Box::new(NegExpRule))
    }

    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = ops::conv1d_depthwise(self.value(x), self.value(w), self.value(bias))?;
        Ok(self.push(y, &[x, w, bias], Box::new(ConvRule)))
    }

    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let y = ops::reverse_time(self.value(x))?;
        Ok(self.push(y, &[x], Box::new(ReverseRule)))
    }

    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let split = self.value(a).cols();
        let y = ops::concat_features(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], Box::new(ConcatRule { split })))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = ops::slice_cols(self.value(x), start, end)?;
        Ok(self.push(y, &[x], Box::new(SliceColsRule { start, end })))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (y, inv_rms) = ops::rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(y, &[x, gain], Box::new(RmsNormRule { inv_rms })))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x))?;
        Ok(self.push(y, &[x], Box::new(SoftmaxRule)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], Box::new(SumRule))
    }
}

/// Evaluates `loss_fn` on fresh parameter leaves and returns the loss value
/// together with `∂loss/∂p` for every parameter. Parameters with no path to
/// the loss receive zeros.
pub fn grad<T, F>(params: &[Tensor<T>], loss_fn: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    let mut grads = tape.gradients(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads[v.0].take().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

struct MatmulRule;
impl<T: Real> Backward<T> for MatmulRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| ops::matmul_nt(g, x[1])),
            needs[1].then(|| ops::matmul_tn(x[0], g)),
        ]
    }
}

struct AddBiasRule;
impl<T: Real> Backward<T> for AddBiasRule {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| ops::sum_rows(g)),
        ]
    }
}

struct AddRule;
impl<T: Real> Backward<T> for AddRule {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
    }
}

struct MulRule;
impl<T: Real> Backward<T> for MulRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| g.zip_map(other, |a, b| a * b).expect("shape checked forward");
        vec![needs[0].then(|| prod(x[1])), needs[1].then(|| prod(x[0]))]
    }
}

struct ScaleRule<T>(T);
impl<T: Real> Backward<T> for ScaleRule<T> {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.scale(self.0))]
    }
}

struct SiluRule;
impl<T: Real> Backward<T> for SiluRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let dx = g
            .zip_map(x[0], |gv, xv| {
                let s = ops::sigmoid_scalar(xv);
                gv * s * (T::one() + xv * (T::one() - s))
            })
            .expect("shape checked forward");
        vec![Some(dx)]
    }
}

struct SoftplusRule;
impl<T: Real> Backward<T> for SoftplusRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let dx = g
            .zip_map(x[0], |gv, xv| gv * ops::sigmoid_scalar(xv))
            .expect("shape checked forward");
        vec![Some(dx)]
    }
}

struct NegExpRule;
impl<T: Real> Backward<T> for NegExpRule {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], y: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(y, |a, b| a * b).expect("shape checked forward"))]
    }
}

struct ConvRule;
impl<T: Real> Backward<T> for ConvRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (input, w) = (x[0], x[1]);
        let (l, d) = (input.rows(), input.cols());
        let k = w.cols();
        let mut dx = Tensor::zeros(&[l, d]);
        let mut dw = Tensor::zeros(&[d, k]);
        let (gs, xs, ws) = (g.data(), input.data(), w.data());
        for t in 0..l {
            let grow = &gs[t * d..(t + 1) * d];
            for j in 0..k {
                let back = k - 1 - j;
                if back > t {
                    continue;
                }
                let src = t - back;
                if needs[0] {
                    let dxrow = &mut dx.data_mut()[src * d..(src + 1) * d];
                    for c in 0..d {
                        dxrow[c] += grow[c] * ws[c * k + j];
                    }
                }
                if needs[1] {
                    let xrow = &xs[src * d..(src + 1) * d];
                    let dws = dw.data_mut();
                    for c in 0..d {
                        dws[c * k + j] += grow[c] * xrow[c];
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dx),
            needs[1].then_some(dw),
            needs[2].then(|| ops::sum_rows(g)),
        ]
    }
}

struct ReverseRule;
impl<T: Real> Backward<T> for ReverseRule {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(ops::reverse_time(g).expect("rank checked forward"))]
    }
}

struct ConcatRule {
    split: usize,
}
impl<T: Real> Backward<T> for ConcatRule {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let w = g.cols();
        vec![
            needs[0].then(|| ops::slice_cols(g, 0, self.split).expect("in range")),
            needs[1].then(|| ops::slice_cols(g, self.split, w).expect("in range")),
        ]
    }
}

struct SliceColsRule {
    start: usize,
    end: usize,
}
impl<T: Real> Backward<T> for SliceColsRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (l, d) = (x[0].rows(), x[0].cols());
        let w = self.end - self.start;
        let mut dx = Tensor::zeros(&[l, d]);
        for t in 0..l {
            dx.data_mut()[t * d + self.start..t * d + self.end]
                .copy_from_slice(&g.data()[t * w..(t + 1) * w]);
        }
        vec![Some(dx)]
    }
}

struct RmsNormRule<T> {
    inv_rms: Vec<T>,
}
impl<T: Real> Backward<T> for RmsNormRule<T> {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (input, gain) = (x[0], x[1]);
        let (l, d) = (input.rows(), input.cols());
        let dn = T::lit(d as f64);
        let mut dx = Tensor::zeros(&[l, d]);
        let mut dg = Tensor::zeros(&[d]);
        for t in 0..l {
            let r = self.inv_rms[t];
            let xr = input.row(t);
            let gr = g.row(t);
            if needs[1] {
                for (c, dgc) in dg.data_mut().iter_mut().enumerate() {
                    *dgc += gr[c] * xr[c] * r;
                }
            }
            if needs[0] {
                let s: T = (0..d).map(|c| gr[c] * gain.data()[c] * xr[c]).sum();
                let coef = r * r * r * s / dn;
                let dxr = &mut dx.data_mut()[t * d..(t + 1) * d];
                for c in 0..d {
                    dxr[c] = r * gr[c] * gain.data()[c] - coef * xr[c];
                }
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dg)]
    }
}

struct SoftmaxRule;
impl<T: Real> Backward<T> for SoftmaxRule {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], y: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (l, c) = (y.rows(), y.cols());
        let mut dx = Tensor::zeros(&[l, c]);
        for t in 0..l {
            let (yr, gr) = (y.row(t), g.row(t));
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..c {
                dx.data_mut()[t * c + j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(dx)]
    }
}

struct SumRule;
impl<T: Real> Backward<T> for SumRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(x[0].shape(), g.item()))]
    }
}

//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append a node holding the result plus whatever the local
//! derivative needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for the leaves registered with [`Tape::param`].
//! Every op checks its output for NaN/Inf and fails instead of propagating.

use std::collections::BTreeMap;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Mask {
        w: Var,
        mask: Vec<S>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Mse {
        target: Var,
        pred: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Kl {
        mu: Var,
        log_var: Var,
    },
    Reparam {
        mu: Var,
        log_var: Var,
        noise: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S> {
    by_param: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor<S>> {
        self.by_param.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drop all recorded nodes so the tape can serve the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, value: Tensor<S>, id: ParamId) -> Var {
        self.push(value, Op::Leaf, Some(id), true)
    }

    /// Register a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, None, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, param: Option<ParamId>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var], name: &'static str) -> Result<Var, TensorError> {
        let value = value.ensure_finite(name)?;
        let needs = self.needs(inputs);
        Ok(self.push(value, op, None, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Affine map `x · wᵀ + b` for `x[n×in]`, `w[out×in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, input) = xv.matrix_dims("linear")?;
        let (out, w_in) = wv.matrix_dims("linear")?;
        if input != w_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if bv.len() != out {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                left: wv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * out);
        for _ in 0..n {
            data.extend_from_slice(bv.data());
        }
        S::gemm(
            n,
            input,
            out,
            S::one(),
            xv.data(),
            input as isize,
            1,
            wv.data(),
            1,
            input as isize,
            S::one(),
            &mut data,
            out as isize,
            1,
        );
        let value = Tensor::new(vec![n, out], data)?;
        self.record(value, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    /// Elementwise product with a fixed 0/1 mask.
    pub fn mask(&mut self, w: Var, mask: Vec<S>) -> Result<Var, TensorError> {
        let wv = self.value(w);
        if mask.len() != wv.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                left: wv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = wv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(wv.shape().to_vec(), data)?;
        self.record(value, Op::Mask { w, mask }, &[w], "mask")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.record(value, Op::Relu(x), &[x], "relu")
    }

    /// Elementwise sum of equal shapes, or a scalar added to a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.record(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var, TensorError> {
        let value = self.value(a).map(|v| v * factor);
        self.record(value, Op::Scale(a, factor), &[a], "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let total = self.value(a).data().iter().fold(S::zero(), |acc, &v| acc + v);
        self.record(Tensor::scalar(total), Op::Sum(a), &[a], "sum")
    }

    /// Mean over every element of `(target − pred)²`.
    pub fn mse_loss(&mut self, target: Var, pred: Var) -> Result<Var, TensorError> {
        let (tv, pv) = (self.value(target), self.value(pred));
        tv.same_shape(pv, "mse_loss")?;
        let n = S::of(tv.len() as f64);
        let total = tv
            .data()
            .iter()
            .zip(pv.data())
            .fold(S::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        self.record(Tensor::scalar(total / n), Op::Mse { target, pred }, &[target, pred], "mse_loss")
    }

    /// Softmax followed by negative log-likelihood, averaged over rows.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (n, classes) = lv.matrix_dims("cross_entropy_loss")?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_loss",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(n * classes);
        let mut total = S::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let sum_exp = row.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp());
            let log_z = max + sum_exp.ln();
            total += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(total / S::of(n as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record(value, op, &[logits], "cross_entropy_loss")
    }

    /// `−½ Σ (1 + log_var − mu² − exp(log_var))`, divided by the batch size.
    pub fn kl_standard_normal(&mut self, mu: Var, log_var: Var) -> Result<Var, TensorError> {
        let (mv, lv) = (self.value(mu), self.value(log_var));
        mv.same_shape(lv, "kl_standard_normal")?;
        let half = S::of(0.5);
        let total = mv
            .data()
            .iter()
            .zip(lv.data())
            .fold(S::zero(), |acc, (&m, &l)| acc + (l.exp() + m * m - S::one() - l));
        let value = Tensor::scalar(half * total / S::of(mv.rows() as f64));
        self.record(value, Op::Kl { mu, log_var }, &[mu, log_var], "kl_standard_normal")
    }

    /// `mu + exp(log_var / 2) ⊙ noise` with caller-supplied standard-normal noise.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, noise: &Tensor<S>) -> Result<Var, TensorError> {
        let (mv, lv) = (self.value(mu), self.value(log_var));
        mv.same_shape(lv, "reparameterize")?;
        mv.same_shape(noise, "reparameterize")?;
        let half = S::of(0.5);
        let data = mv
            .data()
            .iter()
            .zip(lv.data())
            .zip(noise.data())
            .map(|((&m, &l), &e)| m + (l * half).exp() * e)
            .collect();
        let value = Tensor::new(mv.shape().to_vec(), data)?;
        let op = Op::Reparam {
            mu,
            log_var,
            noise: noise.data().to_vec(),
        };
        self.record(value, op, &[mu, log_var], "reparameterize")
    }

    /// Propagate `d loss` back to every parameter leaf. A tape can be
    /// replayed only once; call [`Tape::clear`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar("backward"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.by_param.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        out.by_param.insert(id, t);
                    }
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut accumulate = |v: Var, delta: Vec<S>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                slot @ None => *slot = Some(delta),
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, bv.data(), 1, n as isize, S::zero(), &mut da, k as isize, 1);
                    accumulate(*a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), av.data(), 1, k as isize, g, n as isize, 1, S::zero(), &mut db, n as isize, 1);
                    accumulate(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (n, input) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[0];
                if wants(*x) {
                    let mut dx = vec![S::zero(); n * input];
                    S::gemm(n, out, input, S::one(), g, out as isize, 1, wv.data(), input as isize, 1, S::zero(), &mut dx, input as isize, 1);
                    accumulate(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![S::zero(); out * input];
                    S::gemm(out, n, input, S::one(), g, 1, out as isize, xv.data(), input as isize, 1, S::zero(), &mut dw, input as isize, 1);
                    accumulate(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![S::zero(); out];
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(*b, db);
                }
            }
            Op::Mask { w, mask } => {
                accumulate(*w, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                    .collect();
                accumulate(*x, d);
            }
            Op::Add(a, b) => {
                accumulate(*a, g.to_vec());
                accumulate(*b, g.to_vec());
            }
            Op::Scale(a, factor) => {
                accumulate(*a, g.iter().map(|&v| v * *factor).collect());
            }
            Op::Sum(a) => {
                accumulate(*a, vec![g[0]; nodes[a.0].value.len()]);
            }
            Op::Mse { target, pred } => {
                let (tv, pv) = (nodes[target.0].value.data(), nodes[pred.0].value.data());
                let coeff = S::of(2.0) * g[0] / S::of(tv.len() as f64);
                let d_pred: Vec<S> = tv.iter().zip(pv).map(|(&t, &p)| coeff * (p - t)).collect();
                if wants(*target) {
                    accumulate(*target, d_pred.iter().map(|&v| -v).collect());
                }
                accumulate(*pred, d_pred);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let coeff = g[0] / S::of(labels.len() as f64);
                let mut d: Vec<S> = probs.iter().map(|&p| p * coeff).collect();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * classes + label] -= coeff;
                }
                accumulate(*logits, d);
            }
            Op::Kl { mu, log_var } => {
                let (mv, lv) = (&nodes[mu.0].value, &nodes[log_var.0].value);
                let coeff = g[0] / S::of(mv.rows() as f64);
                let half = S::of(0.5);
                accumulate(*mu, mv.data().iter().map(|&m| m * coeff).collect());
                accumulate(
                    *log_var,
                    lv.data().iter().map(|&l| half * (l.exp() - S::one()) * coeff).collect(),
                );
            }
            Op::Reparam { mu, log_var, noise } => {
                let lv = nodes[log_var.0].value.data();
                let half = S::of(0.5);
                accumulate(*mu, g.to_vec());
                let d = g
                    .iter()
                    .zip(lv)
                    .zip(noise)
                    .map(|((&gi, &l), &e)| gi * e * half * (l * half).exp())
                    .collect();
                accumulate(*log_var, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_indicator_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]), ParamId(0));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]), ParamId(0));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![4], vec![-3.0, -0.5, -1e-6, -9.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 1.0]));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2], &[0.0, 2.0]));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.5);
        let l = tape.mse_loss(a, a).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let c = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.mse_loss(a, c).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy_loss(z, &[0]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = tape.constant(t(&[1, 2], &[100.0, 0.0]));
        let l = tape.cross_entropy_loss(z, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-12);
        assert_eq!(
            tape.cross_entropy_loss(z, &[2]),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let mu = tape.constant(t(&[1, 3], &[0.0; 3]));
        let lv = tape.constant(t(&[1, 3], &[0.0; 3]));
        let k = tape.kl_standard_normal(mu, lv).unwrap();
        assert_eq!(tape.value(k).item().unwrap(), 0.0);
        let mu = tape.constant(t(&[1, 1], &[1.0]));
        let lv = tape.constant(t(&[1, 1], &[0.0]));
        let k = tape.kl_standard_normal(mu, lv).unwrap();
        assert_eq!(tape.value(k).item().unwrap(), 0.5);
    }

    #[test]
    fn reparameterize_examples() {
        let mut tape = Tape::new();
        let mu = tape.constant(t(&[1, 2], &[0.5, -1.0]));
        let lv = tape.constant(t(&[1, 2], &[0.3, 2.0]));
        let z = tape.reparameterize(mu, lv, &t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(tape.value(z).data(), &[0.5, -1.0]);
        let lv0 = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let z = tape.reparameterize(mu, lv0, &t(&[1, 2], &[0.25, 2.0])).unwrap();
        assert_eq!(tape.value(z).data(), &[0.75, 1.0]);
        assert!(tape.reparameterize(mu, lv, &t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::<f32>::filled(&[2, 3], 0.7), ParamId(3));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_mse_against_zero() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[2.0]), ParamId(0));
        let zero = tape.constant(t(&[1], &[0.0]));
        let l = tape.mse_loss(w, zero).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[4.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[1], &[2.0]), ParamId(0));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        let mu = tape.constant(t(&[1, 1], &[0.0]));
        let lv = tape.constant(t(&[1, 1], &[1000.0]));
        assert_eq!(
            tape.kl_standard_normal(mu, lv),
            Err(TensorError::NonFinite("kl_standard_normal"))
        );
    }

    #[test]
    fn shared_param_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]), ParamId(0));
        let d = tape.add(w, w).unwrap();
        let s = tape.sum(d).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0, 2.0]);
    }
}

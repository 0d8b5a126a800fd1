//! Reverse-mode gradient tape over vector-valued nodes.
//!
//! Learnable arrays live in a [`ParamSet`] that the tape borrows read-only;
//! `backward` returns a fresh [`Gradients`] with one buffer per parameter, so
//! many tapes can run in parallel over the same parameters and their
//! gradients are reduced afterwards.

use super::matrix::{combine_partials, Matrix};
use super::ops::{argmax, one_hot, perturbed, softmax_unchecked, PROB_EPS};
use crate::error::{Error, Result};

/// Named collection of learnable matrices.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, m: Matrix) -> ParamId {
        self.names.push(name.into());
        self.mats.push(m);
        ParamId(self.mats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Matrix] {
        &mut self.mats
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.data().len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            mats: self
                .mats
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(Matrix::is_finite)
    }
}

/// Gradient buffers shaped like a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    mats: Vec<Matrix>,
}

impl Gradients {
    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Matrix] {
        &mut self.mats
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.mats {
            m.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.mats.iter().map(Matrix::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.mats.iter().all(|m| m.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Nodes produced by a straight-through Gumbel-Softmax draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StSample {
    /// Hard one-hot (forward) with soft gradient (backward).
    pub node: NodeId,
    pub soft: NodeId,
    pub index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    ParamRow { param: ParamId, row: usize },
    WeightedRows { param: ParamId, rows: Vec<usize>, weights: NodeId },
    Affine { parts: Vec<NodeId>, w: ParamId, b: ParamId },
    Tanh(NodeId),
    Softmax(NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    StraightThrough(NodeId),
    CrossEntropy { probs: NodeId, target: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mean(Vec<NodeId>),
    Norm(NodeId),
    Relu(NodeId),
    WeightedSum(Vec<NodeId>, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// A gradient tape recording vector operations over a borrowed [`ParamSet`].
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, v: &[f64]) -> NodeId {
        self.push(v.to_vec(), Op::Input)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![v], Op::Input)
    }

    /// Row `row` of parameter `param` (embedding lookup).
    pub fn param_row(&mut self, param: ParamId, row: usize) -> NodeId {
        let v = self.params.get(param).row(row).to_vec();
        self.push(v, Op::ParamRow { param, row })
    }

    /// `Σ_i weights[i] · param[rows[i]]`.
    pub fn weighted_rows(&mut self, param: ParamId, rows: Vec<usize>, weights: NodeId) -> Result<NodeId> {
        let m = self.params.get(param);
        let w = self.value(weights);
        if w.len() != rows.len() {
            return Err(Error::invalid(format!(
                "weighted_rows: {} weights for {} rows",
                w.len(),
                rows.len()
            )));
        }
        let mut out = vec![0.0; m.cols()];
        for (&r, &wi) in rows.iter().zip(w) {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += wi * v;
            }
        }
        Ok(self.push(out, Op::WeightedRows { param, rows, weights }))
    }

    /// `W [x_1 ‖ x_2 ‖ …] + b`, accumulated part by part.
    pub fn affine(&mut self, parts: &[NodeId], w: ParamId, b: ParamId) -> Result<NodeId> {
        let wm = self.params.get(w);
        let bm = self.params.get(b);
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        if wm.cols() != total || wm.rows() != bm.data().len() {
            return Err(Error::invalid(format!(
                "affine: W is {}x{}, input has {}, bias has {}",
                wm.rows(),
                wm.cols(),
                total,
                bm.data().len()
            )));
        }
        let mut partials = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            partials.push(wm.partial_matvec(offset, x));
            offset += x.len();
        }
        let refs: Vec<&[f64]> = partials.iter().map(Vec::as_slice).collect();
        let out = combine_partials(&refs, bm.data());
        Ok(self.push(
            out,
            Op::Affine {
                parts: parts.to_vec(),
                w,
                b,
            },
        ))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(v, Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax_unchecked(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn add_const(&mut self, x: NodeId, c: &[f64]) -> NodeId {
        let v = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        self.push(v, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).iter().map(|a| a * s).collect();
        self.push(v, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| Error::invalid("mean of zero vectors"))?;
        let n = self.value(*first).len();
        let mut out = vec![0.0; n];
        for &x in xs {
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(out, Op::Mean(xs.to_vec())))
    }

    /// Euclidean norm, a scalar node.
    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(vec![n], Op::Norm(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(v, Op::Relu(x))
    }

    /// `scale · Σ xs`, all inputs scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[NodeId], scale: f64) -> NodeId {
        let s: f64 = xs.iter().map(|&x| self.scalar(x)).sum();
        self.push(vec![scale * s], Op::WeightedSum(xs.to_vec(), scale))
    }

    /// `-ln(max(p[target], ε))` as a scalar node.
    pub fn cross_entropy(&mut self, probs: NodeId, target: usize) -> Result<NodeId> {
        let p = *self.value(probs).get(target).ok_or_else(|| {
            Error::invalid(format!("cross_entropy target {target} out of range"))
        })?;
        Ok(self.push(vec![-p.max(PROB_EPS).ln()], Op::CrossEntropy { probs, target }))
    }

    /// Straight-through Gumbel-Softmax.
    ///
    /// The soft sample is `softmax((logits + noise) / τ)`. The returned node's
    /// value is `hard + (soft − anchor)`, where `anchor` defaults to the soft
    /// value itself so the forward value is exactly the one-hot; the backward
    /// pass routes gradient through the soft sample's Jacobian. `force`
    /// replays a recorded choice; a fixed `anchor` makes the surrogate smooth
    /// for finite-difference checks.
    pub fn gumbel_straight_through(
        &mut self,
        logits: NodeId,
        noise: &[f64],
        temperature: f64,
        force: Option<usize>,
        anchor: Option<&[f64]>,
    ) -> Result<StSample> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
        }
        let n = self.value(logits).len();
        if noise.len() != n {
            return Err(Error::invalid("gumbel noise length mismatch"));
        }
        let shifted = self.add_const(logits, noise);
        let scaled = self.scale(shifted, 1.0 / temperature);
        debug_assert_eq!(
            self.value(scaled),
            perturbed(self.value(logits), noise, temperature).as_slice()
        );
        let soft = self.softmax(scaled);
        let index = force.unwrap_or_else(|| argmax(self.value(soft)));
        if index >= n {
            return Err(Error::invalid(format!("forced rule {index} out of range")));
        }
        let hard = one_hot(n, index);
        let soft_v = self.value(soft);
        let value = match anchor {
            None => hard,
            Some(a) => hard
                .iter()
                .zip(soft_v.iter().zip(a))
                .map(|(h, (s, a))| h + (s - a))
                .collect(),
        };
        let node = self.push(value, Op::StraightThrough(soft));
        Ok(StSample { node, soft, index })
    }

    /// Propagates d(root)/d(·) back through the tape; `root` must be scalar.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid("backward root must be a scalar node"));
        }
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Vec<f64>> = Vec::with_capacity(root.0 + 1);
        for node in &self.nodes[..=root.0] {
            adj.push(vec![0.0; node.value.len()]);
        }
        adj[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::ParamRow { param, row } => {
                    let m = &mut grads.mats[param.0];
                    for (d, v) in m.row_mut(*row).iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::WeightedRows { param, rows, weights } => {
                    let pm = self.params.get(*param);
                    let w = &self.nodes[weights.0].value;
                    for (k, &r) in rows.iter().enumerate() {
                        let dot: f64 = pm.row(r).iter().zip(&g).map(|(a, b)| a * b).sum();
                        adj[weights.0][k] += dot;
                        let gm = &mut grads.mats[param.0];
                        for (d, v) in gm.row_mut(r).iter_mut().zip(&g) {
                            *d += w[k] * v;
                        }
                    }
                }
                Op::Affine { parts, w, b } => {
                    let wm = self.params.get(*w);
                    for (d, v) in grads.mats[b.0].data_mut().iter_mut().zip(&g) {
                        *d += v;
                    }
                    let mut offset = 0;
                    for &p in parts {
                        let x = &self.nodes[p.0].value;
                        let len = x.len();
                        {
                            let gw = &mut grads.mats[w.0];
                            for (r, &gr) in g.iter().enumerate() {
                                if gr == 0.0 {
                                    continue;
                                }
                                let row = &mut gw.row_mut(r)[offset..offset + len];
                                for (d, xv) in row.iter_mut().zip(x) {
                                    *d += gr * xv;
                                }
                            }
                        }
                        let ax = &mut adj[p.0];
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &wm.row(r)[offset..offset + len];
                            for (d, wv) in ax.iter_mut().zip(row) {
                                *d += gr * wv;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Tanh(x) => {
                    for ((d, y), gv) in adj[x.0].iter_mut().zip(&node.value).zip(&g) {
                        *d += gv * (1.0 - y * y);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in adj[x.0].iter_mut().zip(y).zip(&g) {
                        *d += yv * (gv - dot);
                    }
                }
                Op::AddConst(x) | Op::StraightThrough(x) => {
                    for (d, gv) in adj[x.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Scale(x, s) => {
                    for (d, gv) in adj[x.0].iter_mut().zip(&g) {
                        *d += gv * s;
                    }
                }
                Op::CrossEntropy { probs, target } => {
                    let p = self.nodes[probs.0].value[*target];
                    if p > PROB_EPS {
                        adj[probs.0][*target] += -g[0] / p;
                    }
                }
                Op::Add(a, b) => {
                    for (d, gv) in adj[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, gv) in adj[b.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, gv) in adj[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, gv) in adj[b.0].iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mean(xs) => {
                    let inv = 1.0 / xs.len() as f64;
                    for &x in xs {
                        for (d, gv) in adj[x.0].iter_mut().zip(&g) {
                            *d += gv * inv;
                        }
                    }
                }
                Op::Norm(x) => {
                    let n = node.value[0];
                    if n > 0.0 {
                        let xv = &self.nodes[x.0].value;
                        for (d, v) in adj[x.0].iter_mut().zip(xv) {
                            *d += g[0] * v / n;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    for ((d, v), gv) in adj[x.0].iter_mut().zip(xv).zip(&g) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::WeightedSum(xs, s) => {
                    for &x in xs {
                        adj[x.0][0] += g[0] * s;
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamSet, ParamId, ParamId) {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap());
        let b = ps.add("b", Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap());
        (ps, w, b)
    }

    #[test]
    fn affine_forward_matches_hand_multiply() {
        let (ps, w, b) = setup();
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[1.0, 2.0]);
        let y = tape.affine(&[x], w, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, 5.0]);
        let x1 = tape.input(&[1.0]);
        assert!(tape.affine(&[x1], w, b).is_err());
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let (mut ps, w, b) = setup();
        let unused = ps.add("u", Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[1.0, 2.0]);
        let y = tape.affine(&[x], w, b).unwrap();
        let p = tape.softmax(y);
        let l = tape.cross_entropy(p, 0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(unused).data().iter().all(|&v| v == 0.0));
        assert!(g.get(w).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_forward_is_exactly_one_hot() {
        let (ps, _, _) = setup();
        let mut tape = Tape::new(&ps);
        let z = tape.input(&[0.3, -1.2, 0.7]);
        let st = tape
            .gumbel_straight_through(z, &[0.1, 0.2, -0.4], 1.0, None, None)
            .unwrap();
        assert_eq!(tape.value(st.node), one_hot(3, st.index).as_slice());
        assert!((tape.value(st.soft).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let (ps, _, _) = setup();
        let mut tape = Tape::new(&ps);
        let z = tape.input(&[0.3, -1.2]);
        assert!(tape.backward(z).is_err());
    }
}

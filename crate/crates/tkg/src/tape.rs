//! Reverse-mode differentiation over a tape of vector operations.
//!
//! Every value on the tape is a 1-D array (scalars are length-1). Matrix
//! parameters live in a [`ParamStore`] and enter the tape through matrix-
//! vector products, row lookups (embeddings), and column reads (biases).
//! Calling [`Tape::backward`] on a scalar node accumulates gradients for
//! every parameter reachable from it.

use ndarray::{Array1, Array2};

use crate::error::{Result, TkgError};

pub type NodeId = usize;
pub type ParamId = usize;

/// Named dense parameter tensors; vector parameters are stored as `(n, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Array2<f64>>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Array2<f64>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.to_string());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (i, self.names[i].as_str(), t))
    }

    /// Serializable form: (name, rows, cols, row-major values) per tensor.
    pub fn export(&self) -> ExportedParams {
        ExportedParams {
            entries: self
                .iter()
                .map(|(_, name, t)| {
                    (
                        name.to_string(),
                        t.nrows(),
                        t.ncols(),
                        t.iter().copied().collect(),
                    )
                })
                .collect(),
        }
    }

    /// Loads exported values back in; names and shapes must match the
    /// store's existing layout exactly.
    pub fn import(&mut self, exported: &ExportedParams) -> Result<()> {
        if exported.entries.len() != self.tensors.len() {
            return Err(TkgError::Validation(format!(
                "checkpoint has {} tensors, model has {}",
                exported.entries.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, rows, cols, vals)) in exported.entries.iter().enumerate() {
            if name != &self.names[i] {
                return Err(TkgError::Validation(format!(
                    "checkpoint tensor {i} is '{name}', model expects '{}'",
                    self.names[i]
                )));
            }
            let t = &mut self.tensors[i];
            if *rows != t.nrows() || *cols != t.ncols() || vals.len() != rows * cols {
                return Err(TkgError::Validation(format!(
                    "shape mismatch for '{name}': checkpoint {rows}x{cols}"
                )));
            }
            for (slot, v) in t.iter_mut().zip(vals) {
                *slot = *v;
            }
        }
        Ok(())
    }
}

/// Serializable snapshot of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExportedParams {
    pub entries: Vec<(String, usize, usize, Vec<f64>)>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator, indexed like the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<f64> {
        self.slots[id].get_or_insert_with(|| Array2::zeros(shape))
    }

    /// Parameters touched by the backward pass, in index order.
    pub fn touched(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|g| (i, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.touched()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * c);
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Constant; no gradient flows into it.
    Const,
    /// Column 0 of a `(n, 1)` parameter.
    ParamVec(ParamId),
    /// One row of a parameter matrix (embedding lookup).
    ParamRow(ParamId, usize),
    MatVec(ParamId, NodeId),
    /// Matrix-vector product using only the block-diagonal entries.
    BlockMatVec(ParamId, usize, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a constant mask (dropout).
    MulMask(NodeId, Array1<f64>),
    Concat(Vec<NodeId>),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    ClampMin(NodeId, f64),
    MaxMany(Vec<NodeId>),
    MeanMany(Vec<NodeId>),
    SumMany(Vec<NodeId>),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    Index(NodeId, usize),
}

struct Node {
    op: Op,
    value: Array1<f64>,
}

/// A record of forward operations supporting one reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array1<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    fn push(&mut self, op: Op, value: Array1<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Array1<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(ndarray::arr1(&[v]))
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.constant(Array1::zeros(n))
    }

    pub fn param_vec(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        let col = params.get(id).column(0).to_owned();
        self.push(Op::ParamVec(id), col)
    }

    pub fn param_row(&mut self, params: &ParamStore, id: ParamId, row: usize) -> NodeId {
        let r = params.get(id).row(row).to_owned();
        self.push(Op::ParamRow(id, row), r)
    }

    pub fn matvec(&mut self, params: &ParamStore, w: ParamId, x: NodeId) -> NodeId {
        let m = params.get(w);
        let xv = &self.nodes[x].value;
        debug_assert_eq!(m.ncols(), xv.len(), "matvec dims for {}", params.name(w));
        let y = m.dot(xv);
        self.push(Op::MatVec(w, x), y)
    }

    /// Matrix-vector product restricted to `blocks` diagonal blocks; the
    /// off-block entries of the parameter are never read.
    pub fn block_matvec(
        &mut self,
        params: &ParamStore,
        w: ParamId,
        blocks: usize,
        x: NodeId,
    ) -> NodeId {
        let m = params.get(w);
        let (rows, cols) = (m.nrows(), m.ncols());
        debug_assert!(rows % blocks == 0 && cols % blocks == 0);
        let (bo, bi) = (rows / blocks, cols / blocks);
        let xv = self.nodes[x].value.clone();
        let mut y = Array1::zeros(rows);
        for k in 0..blocks {
            for i in 0..bo {
                let mut acc = 0.0;
                for j in 0..bi {
                    acc += m[(bo * k + i, bi * k + j)] * xv[bi * k + j];
                }
                y[bo * k + i] = acc;
            }
        }
        self.push(Op::BlockMatVec(w, blocks, x), y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Array1<f64>) -> NodeId {
        let v = &self.nodes[a].value * &mask;
        self.push(Op::MulMask(a, mask), v)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.len()).sum();
        let mut v = Array1::zeros(total);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(ndarray::s![off..off + pv.len()]).assign(pv);
            off += pv.len();
        }
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(c));
        self.push(Op::ClampMin(a, c), v)
    }

    /// Elementwise max over several equal-length vectors; ties break to the
    /// earliest input for a deterministic subgradient.
    pub fn max_many(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.nodes[parts[0]].value.clone();
        for &p in &parts[1..] {
            let pv = &self.nodes[p].value;
            for (slot, &x) in v.iter_mut().zip(pv.iter()) {
                if x > *slot {
                    *slot = x;
                }
            }
        }
        self.push(Op::MaxMany(parts.to_vec()), v)
    }

    pub fn mean_many(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.nodes[parts[0]].value.clone();
        for &p in &parts[1..] {
            v += &self.nodes[p].value;
        }
        v /= parts.len() as f64;
        self.push(Op::MeanMany(parts.to_vec()), v)
    }

    pub fn sum_many(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.nodes[parts[0]].value.clone();
        for &p in &parts[1..] {
            v += &self.nodes[p].value;
        }
        self.push(Op::SumMany(parts.to_vec()), v)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let lse = log_sum_exp(x);
        let v = x.mapv(|xi| xi - lse);
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = log_sum_exp(&self.nodes[a].value);
        self.push(Op::LogSumExp(a), ndarray::arr1(&[v]))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.nodes[a].value[i];
        self.push(Op::Index(a, i), ndarray::arr1(&[v]))
    }

    /// Reverse sweep from a scalar node; returns per-parameter gradients.
    pub fn backward(&self, output: NodeId, params: &ParamStore) -> Result<Grads> {
        if self.nodes[output].value.len() != 1 {
            return Err(TkgError::Dimension(
                "backward requires a scalar output node".into(),
            ));
        }
        let mut adj: Vec<Option<Array1<f64>>> = vec![None; self.nodes.len()];
        adj[output] = Some(ndarray::arr1(&[1.0]));
        let mut grads = Grads::new(params.len());

        for id in (0..=output).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let bump = |adj: &mut Vec<Option<Array1<f64>>>, tgt: NodeId, delta: Array1<f64>| {
                match &mut adj[tgt] {
                    Some(a) => *a += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::ParamVec(pid) => {
                    let shape = params.get(*pid).dim();
                    let slot = grads.slot(*pid, shape);
                    for (i, &gi) in g.iter().enumerate() {
                        slot[(i, 0)] += gi;
                    }
                }
                Op::ParamRow(pid, row) => {
                    let shape = params.get(*pid).dim();
                    let slot = grads.slot(*pid, shape);
                    for (j, &gj) in g.iter().enumerate() {
                        slot[(*row, j)] += gj;
                    }
                }
                Op::MatVec(pid, x) => {
                    let m = params.get(*pid);
                    let xv = &self.nodes[*x].value;
                    bump(&mut adj, *x, m.t().dot(&g));
                    let slot = grads.slot(*pid, m.dim());
                    for (i, &gi) in g.iter().enumerate() {
                        for (j, &xj) in xv.iter().enumerate() {
                            slot[(i, j)] += gi * xj;
                        }
                    }
                }
                Op::BlockMatVec(pid, blocks, x) => {
                    let m = params.get(*pid);
                    let (rows, cols) = m.dim();
                    let (bo, bi) = (rows / blocks, cols / blocks);
                    let xv = self.nodes[*x].value.clone();
                    let mut gx = Array1::zeros(cols);
                    {
                        let slot = grads.slot(*pid, (rows, cols));
                        for k in 0..*blocks {
                            for i in 0..bo {
                                let gi = g[bo * k + i];
                                for j in 0..bi {
                                    slot[(bo * k + i, bi * k + j)] += gi * xv[bi * k + j];
                                    gx[bi * k + j] += gi * m[(bo * k + i, bi * k + j)];
                                }
                            }
                        }
                    }
                    bump(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    bump(&mut adj, *a, g.clone());
                    bump(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    bump(&mut adj, *a, g.clone());
                    bump(&mut adj, *b, -g);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    bump(&mut adj, *a, &g * &bv);
                    bump(&mut adj, *b, &g * &av);
                }
                Op::Scale(a, c) => bump(&mut adj, *a, g.mapv(|x| x * c)),
                Op::MulMask(a, mask) => bump(&mut adj, *a, &g * mask),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        bump(&mut adj, p, g.slice(ndarray::s![off..off + n]).to_owned());
                        off += n;
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let delta = ndarray::Zip::from(&g)
                        .and(av)
                        .map_collect(|&gi, &ai| if ai > 0.0 { gi } else { 0.0 });
                    bump(&mut adj, *a, delta);
                }
                Op::Tanh(a) => {
                    let yv = &self.nodes[id].value;
                    let delta = ndarray::Zip::from(&g)
                        .and(yv)
                        .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    bump(&mut adj, *a, delta);
                }
                Op::Exp(a) => {
                    let yv = self.nodes[id].value.clone();
                    bump(&mut adj, *a, &g * &yv);
                }
                Op::ClampMin(a, c) => {
                    let av = &self.nodes[*a].value;
                    let delta = ndarray::Zip::from(&g)
                        .and(av)
                        .map_collect(|&gi, &ai| if ai > *c { gi } else { 0.0 });
                    bump(&mut adj, *a, delta);
                }
                Op::MaxMany(parts) => {
                    let yv = self.nodes[id].value.clone();
                    let mut claimed = vec![false; yv.len()];
                    for &p in parts {
                        let pv = self.nodes[p].value.clone();
                        let mut delta = Array1::zeros(yv.len());
                        let mut any = false;
                        for d in 0..yv.len() {
                            if !claimed[d] && pv[d] == yv[d] {
                                claimed[d] = true;
                                delta[d] = g[d];
                                any = true;
                            }
                        }
                        if any {
                            bump(&mut adj, p, delta);
                        }
                    }
                }
                Op::MeanMany(parts) => {
                    let c = 1.0 / parts.len() as f64;
                    for p in parts.clone() {
                        bump(&mut adj, p, g.mapv(|x| x * c));
                    }
                }
                Op::SumMany(parts) => {
                    for p in parts.clone() {
                        bump(&mut adj, p, g.clone());
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &self.nodes[id].value;
                    let gsum: f64 = g.sum();
                    let delta = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gi, &yi| gi - yi.exp() * gsum);
                    bump(&mut adj, *a, delta);
                }
                Op::LogSumExp(a) => {
                    let xv = &self.nodes[*a].value;
                    let lse = self.nodes[id].value[0];
                    let delta = xv.mapv(|xi| (xi - lse).exp() * g[0]);
                    bump(&mut adj, *a, delta);
                }
                Op::Index(a, i) => {
                    let mut delta = Array1::zeros(self.nodes[*a].value.len());
                    delta[*i] = g[0];
                    bump(&mut adj, *a, delta);
                }
            }
        }
        Ok(grads)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable log-sum-exp of a vector.
pub fn log_sum_exp(x: &Array1<f64>) -> f64 {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m.is_infinite() {
        return m;
    }
    m + x.mapv(|xi| (xi - m).exp()).sum().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, FdReport};
    use ndarray::arr1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let t = Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
            store.add(&format!("p{i}"), t);
        }
        store
    }

    #[test]
    fn forward_values() {
        let params = random_params(&[(2, 3)], 0);
        let mut tape = Tape::new();
        let x = tape.constant(arr1(&[1.0, 2.0, -1.0]));
        let y = tape.matvec(&params, 0, x);
        let m = params.get(0);
        let want = m.dot(&arr1(&[1.0, 2.0, -1.0]));
        assert_eq!(tape.value(y), &want);

        let ls = tape.log_softmax(y);
        let total: f64 = tape.value(ls).mapv(f64::exp).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_matvec_zeroes_off_blocks() {
        let mut params = ParamStore::new();
        let m = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 + 1.0);
        params.add("w", m.clone());
        let mut tape = Tape::new();
        let x = tape.constant(arr1(&[1.0, 1.0, 1.0, 1.0]));
        let y = tape.block_matvec(&params, 0, 2, x);
        // Block 0 rows use columns 0..2, block 1 rows use columns 2..4.
        assert_eq!(tape.value(y)[0], m[(0, 0)] + m[(0, 1)]);
        assert_eq!(tape.value(y)[3], m[(3, 2)] + m[(3, 3)]);
    }

    /// Composite expression exercising every op; gradient checked by central
    /// finite differences.
    #[test]
    fn gradients_match_finite_differences() {
        let params = random_params(&[(3, 4), (3, 1), (4, 4), (2, 3)], 7);
        let f = |p: &ParamStore, tape: &mut Tape| {
            let x = tape.param_row(p, 2, 1); // row of a 4x4 "embedding"
            let b = tape.param_vec(p, 1);
            let h = tape.matvec(p, 0, x);
            let h = tape.add(h, b);
            let h = tape.tanh(h);
            let r = tape.matvec(p, 3, h);
            let r = tape.relu(r);
            let e = tape.exp(r);
            let c = tape.clamp_min(e, 1.05);
            let cat = tape.concat(&[h, c]);
            let sm = tape.log_softmax(cat);
            let i0 = tape.index(sm, 1);
            let lse = tape.log_sum_exp(h);
            let prod = tape.mul(i0, lse);
            let s = tape.scale(prod, 0.5);
            let d = tape.sub(s, i0);
            let mm = tape.mean_many(&[s, d, i0]);
            let mx = tape.max_many(&[s, d]);
            let sum = tape.sum_many(&[mm, mx]);
            let masked = tape.mul_mask(sum, arr1(&[1.25]));
            masked
        };
        let report = check_param_grads(&params, f, 1e-5);
        assert!(
            report.max_rel_err < 1e-6,
            "fd mismatch: {:?}",
            report.worst
        );
    }

    #[test]
    fn block_matvec_gradients() {
        let mut params = random_params(&[(4, 4)], 3);
        // Zero the off-block entries so values match what forward reads.
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (2, 1), (3, 0), (3, 1)] {
            params.get_mut(0)[(i, j)] = 0.0;
        }
        let extra = Array2::from_shape_fn((4, 1), |(i, _)| 0.3 * i as f64 - 0.5);
        params.add("x", extra);
        let f = |p: &ParamStore, tape: &mut Tape| {
            let x = tape.param_vec(p, 1);
            let y = tape.block_matvec(p, 0, 2, x);
            let t = tape.tanh(y);
            tape.log_sum_exp(t)
        };
        let report: FdReport = check_param_grads(&params, f, 1e-5);
        assert!(report.max_rel_err < 1e-6, "{:?}", report.worst);
    }

    #[test]
    fn backward_requires_scalar() {
        let params = ParamStore::new();
        let mut tape = Tape::new();
        let v = tape.constant(arr1(&[1.0, 2.0]));
        assert!(tape.backward(v, &params).is_err());
    }

    #[test]
    fn log_sum_exp_stable() {
        let v = arr1(&[1000.0, 1000.0]);
        let got = log_sum_exp(&v);
        assert!((got - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}

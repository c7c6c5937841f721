//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] walks it in
//! reverse and returns gradients for every parameter node. Tensors are
//! row-major; image batches use `[N, C, H, W]`.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

pub enum Init {
    Zeros,
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    Scaled {
        fan_in: usize,
        gain: f64,
    },
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Scaled { fan_in, gain } => {
                let normal = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| normal.sample(rng)).collect()
            }
        };
        self.push(name, shape, data)
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Rounds every value to the nearest f32.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in &mut e.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[lo, hi)`, for tests and initializers.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    Pow(Var, f64),
    ClampMax(Var, f64),
    Sum(Var),
    MeanRows(Var),
    RowSum(Var),
    SliceRows(Var, usize),
    RowNormalize(Var),
    DiagScale(Var, Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Conv2d(Var, Var, Var, ConvSpec),
    GlobalAvgPool(Var),
    BceLogit(Var, f64, f64),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.push(Cow::Owned(data), shape.to_vec(), Op::Leaf)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let e = store.get(id);
        self.push(Cow::Borrowed(&e.data), e.shape.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        self.push(Cow::Owned(out), vec![n, m], Op::Transpose(a))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        assert_eq!(self.value(b).len(), n, "bias length");
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::AddBias(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.map(a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x.min(c), Op::ClampMax(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(a))
    }

    /// `[m, n] -> [n]` column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v[i * n + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        self.push(Cow::Owned(out), vec![n], Op::MeanRows(a))
    }

    /// `[m, n] -> [m]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let out: Vec<f64> = (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Cow::Owned(out), vec![m], Op::RowSum(a))
    }

    /// Rows `start..start + count` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let s = self.shape(a);
        let n = s[1];
        assert!(start + count <= s[0]);
        let out = self.value(a)[start * n..(start + count) * n].to_vec();
        self.push(Cow::Owned(out), vec![count, n], Op::SliceRows(a, start))
    }

    /// Divides each row by its L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for j in 0..n {
                    out[i * n + j] = row[j] / norm;
                }
            }
        }
        self.push(Cow::Owned(out), vec![m, n], Op::RowNormalize(a))
    }

    /// `out[i, j] = s[i] * a[i, j] * s[j]` for square `a`.
    pub fn diag_scale(&mut self, a: Var, s: Var) -> Var {
        let n = self.shape(a)[0];
        assert_eq!(self.shape(a), &[n, n]);
        assert_eq!(self.value(s).len(), n);
        let (av, sv) = (self.value(a), self.value(s));
        let out: Vec<f64> = (0..n * n).map(|k| sv[k / n] * av[k] * sv[k % n]).collect();
        self.push(Cow::Owned(out), vec![n, n], Op::DiagScale(a, s))
    }

    /// Flattens and concatenates into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).to_vec()).collect();
        let n = out.len();
        self.push(Cow::Owned(out), vec![n], Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(a).len());
        let out = self.value(a).to_vec();
        self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(a))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, KH, KW]` plus
    /// bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), spec);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; geo.n * geo.o * geo.spatial()];
        let mut cols = vec![0.0; geo.patch() * geo.spatial()];
        for img in 0..geo.n {
            geo.im2col(&xv[img * geo.image()..(img + 1) * geo.image()], &mut cols);
            let dst = &mut out[img * geo.o * geo.spatial()..(img + 1) * geo.o * geo.spatial()];
            for o in 0..geo.o {
                let row = &mut dst[o * geo.spatial()..(o + 1) * geo.spatial()];
                row.iter_mut().for_each(|r| *r = bv[o]);
                for p in 0..geo.patch() {
                    let wgt = wv[o * geo.patch() + p];
                    let col = &cols[p * geo.spatial()..(p + 1) * geo.spatial()];
                    for (r, &c) in row.iter_mut().zip(col) {
                        *r += wgt * c;
                    }
                }
            }
        }
        let shape = vec![geo.n, geo.o, geo.oh, geo.ow];
        self.push(Cow::Owned(out), shape, Op::Conv2d(x, w, b, spec))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let v = self.value(x);
        let out: Vec<f64> = (0..n * c)
            .map(|k| v[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Cow::Owned(out), vec![n, c], Op::GlobalAvgPool(x))
    }

    /// Binary cross-entropy of a single logit against `target`, with the
    /// probability clamped to `[eps, 1 - eps]`.
    pub fn bce_logit(&mut self, z: Var, target: f64, eps: f64) -> Var {
        let p = clamp_prob(sigmoid(self.scalar(z)), eps);
        let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::BceLogit(z, target, eps),
        )
    }

    /// Gradients of scalar `root` for every parameter node, in tape order.
    /// A parameter used twice appears twice.
    pub fn backward(&self, root: Var) -> Vec<(ParamId, Vec<f64>)> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(a, b) => {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        db[i % n] += x;
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.iter().map(|x| x * c).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let da = g
                        .iter()
                        .zip(av)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let da = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(x, &y)| if y > 0.0 { x / (2.0 * y) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let da = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(x, v)| 2.0 * v * x)
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Pow(a, p) => {
                    let da = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(x, v)| x * p * v.powf(p - 1.0))
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::ClampMax(a, c) => {
                    let da = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(x, v)| if v <= c { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::MeanRows(a) => {
                    let s = self.shape(*a);
                    let (m, n) = (s[0], s[1]);
                    let da = (0..m * n).map(|k| g[k % n] / m as f64).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::RowSum(a) => {
                    let n = self.shape(*a)[1];
                    let total = self.value(*a).len();
                    let da = (0..total).map(|k| g[k / n]).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let s = self.shape(*a);
                    let n = s[1];
                    let mut da = vec![0.0; s[0] * n];
                    da[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::RowNormalize(a) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let av = self.value(*a);
                    let y = &node.value;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            da[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::DiagScale(a, s) => {
                    let n = node.shape[0];
                    let (av, sv) = (self.value(*a), self.value(*s));
                    let mut da = vec![0.0; n * n];
                    let mut ds = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            let k = i * n + j;
                            da[k] = g[k] * sv[i] * sv[j];
                            ds[i] += g[k] * av[k] * sv[j];
                            ds[j] += g[k] * sv[i] * av[k];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *s, ds);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        accumulate(&mut grads, *p, g[at..at + len].to_vec());
                        at += len;
                    }
                }
                Op::Conv2d(x, w, _b, spec) => {
                    let geo = ConvGeometry::new(self.shape(*x), self.shape(*w), *spec);
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let sp = geo.spatial();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; geo.o];
                    let mut cols = vec![0.0; geo.patch() * sp];
                    let mut dcols = vec![0.0; geo.patch() * sp];
                    for img in 0..geo.n {
                        geo.im2col(&xv[img * geo.image()..(img + 1) * geo.image()], &mut cols);
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        let gimg = &g[img * geo.o * sp..(img + 1) * geo.o * sp];
                        for o in 0..geo.o {
                            let grow = &gimg[o * sp..(o + 1) * sp];
                            db[o] += grow.iter().sum::<f64>();
                            for p in 0..geo.patch() {
                                let col = &cols[p * sp..(p + 1) * sp];
                                dw[o * geo.patch() + p] +=
                                    grow.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
                                let wgt = wv[o * geo.patch() + p];
                                for (d, &gv) in dcols[p * sp..(p + 1) * sp].iter_mut().zip(grow) {
                                    *d += wgt * gv;
                                }
                            }
                        }
                        geo.col2im(&dcols, &mut dx[img * geo.image()..(img + 1) * geo.image()]);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *_b, db);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let total = self.value(*x).len();
                    let da = (0..total).map(|k| g[k / hw] / hw as f64).collect();
                    accumulate(&mut grads, *x, da);
                }
                Op::BceLogit(z, target, eps) => {
                    let p = sigmoid(self.scalar(*z));
                    let d = if p > *eps && p < 1.0 - eps {
                        p - target
                    } else {
                        0.0
                    };
                    accumulate(&mut grads, *z, vec![g[0] * d]);
                }
            }
        }
        params
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], spec: ConvSpec) -> Self {
        assert_eq!(xs.len(), 4, "conv input must be [N, C, H, W]");
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, KH, KW]");
        assert_eq!(xs[1], ws[1], "conv channel mismatch");
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        assert!(
            h + 2 * spec.pad_h >= kh && w + 2 * spec.pad_w >= kw,
            "conv kernel too large"
        );
        let oh = (h + 2 * spec.pad_h - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.pad_w - kw) / spec.stride + 1;
        Self {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ws[0],
            kh,
            kw,
            oh,
            ow,
            spec,
        }
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn image(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Source pixel index for output position `(y, x)` and kernel tap.
    fn source(&self, ch: usize, ky: usize, kx: usize, y: usize, x: usize) -> Option<usize> {
        let iy = (y * self.spec.stride + ky).checked_sub(self.spec.pad_h)?;
        let ix = (x * self.spec.stride + kx).checked_sub(self.spec.pad_w)?;
        (iy < self.h && ix < self.w).then(|| (ch * self.h + iy) * self.w + ix)
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let sp = self.spatial();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let p = (ch * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[p * sp..(p + 1) * sp];
                    for y in 0..self.oh {
                        for x in 0..self.ow {
                            row[y * self.ow + x] = match self.source(ch, ky, kx, y, x) {
                                Some(i) => img[i],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let sp = self.spatial();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let p = (ch * self.kh + ky) * self.kw + kx;
                    for y in 0..self.oh {
                        for x in 0..self.ow {
                            if let Some(i) = self.source(ch, ky, kx, y, x) {
                                img[i] += cols[p * sp + y * self.ow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient of `f` with respect to every parameter.
pub fn numeric_gradient(
    store: &ParamStore,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<Vec<f64>> {
    let mut probe = store.clone();
    let mut out = store.zeros_like();
    for (pi, entry) in store.entries().iter().enumerate() {
        for k in 0..entry.data.len() {
            let orig = entry.data[k];
            probe.entries_mut()[pi].data[k] = orig + h;
            let up = f(&probe);
            probe.entries_mut()[pi].data[k] = orig - h;
            let down = f(&probe);
            probe.entries_mut()[pi].data[k] = orig;
            out[pi][k] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Sums a backward result into dense per-parameter buffers.
pub fn densify(store: &ParamStore, sparse: Vec<(ParamId, Vec<f64>)>) -> Vec<Vec<f64>> {
    let mut out = store.zeros_like();
    for (id, g) in sparse {
        out[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)` over all entries.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: &[usize],
    ) -> ParamId {
        store.add(
            name,
            shape,
            Init::Scaled {
                fan_in: 1,
                gain: 1.0,
            },
            rng,
        )
    }

    fn check(store: &ParamStore, f: impl for<'s> Fn(&mut Tape<'s>, &'s ParamStore) -> Var) {
        let mut tape = Tape::new();
        let root = f(&mut tape, store);
        let analytic = densify(store, tape.backward(root));
        let numeric = numeric_gradient(store, 1e-6, |s| {
            let mut t = Tape::new();
            let r = f(&mut t, s);
            t.scalar(r)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_bias_relu_gradients() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let a = random(&mut store, &mut rng, "a", &[3, 4]);
        let b = random(&mut store, &mut rng, "b", &[4, 2]);
        let c = random(&mut store, &mut rng, "c", &[2]);
        check(&store, |t, s| {
            let (av, bv, cv) = (t.param(s, a), t.param(s, b), t.param(s, c));
            let m = t.matmul(av, bv);
            let m = t.add_bias(m, cv);
            let r = t.relu(m);
            let tr = t.transpose(r);
            let sq = t.square(tr);
            t.sum(sq)
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = seeded_rng(2);
        let mut store = ParamStore::new();
        let x = random(&mut store, &mut rng, "x", &[2, 2, 5, 5]);
        let w = random(&mut store, &mut rng, "w", &[3, 2, 3, 3]);
        let b = random(&mut store, &mut rng, "b", &[3]);
        for spec in [
            ConvSpec {
                stride: 1,
                pad_h: 1,
                pad_w: 1,
            },
            ConvSpec {
                stride: 2,
                pad_h: 1,
                pad_w: 0,
            },
        ] {
            check(&store, |t, s| {
                let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
                let y = t.conv2d(xv, wv, bv, spec);
                let y = t.square(y);
                let p = t.global_avg_pool(y);
                let m = t.mean_rows(p);
                t.sum(m)
            });
        }
    }

    #[test]
    fn normalization_ops_gradients() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let x = random(&mut store, &mut rng, "x", &[4, 3]);
        check(&store, |t, s| {
            let xv = t.param(s, x);
            let xn = t.row_normalize(xv);
            let xt = t.transpose(xn);
            let a = t.matmul(xn, xt);
            let a = t.add_scalar(a, 2.0);
            let deg = t.row_sum(a);
            let inv = t.pow(deg, -0.5);
            let an = t.diag_scale(a, inv);
            let top = t.slice_rows(an, 1, 2);
            let c = t.concat(&[top, inv]);
            let c2 = t.mul(c, c);
            let c3 = t.scale(c2, 0.7);
            t.sum(c3)
        });
    }

    #[test]
    fn distance_and_bce_gradients() {
        let mut rng = seeded_rng(4);
        let mut store = ParamStore::new();
        let a = random(&mut store, &mut rng, "a", &[5]);
        let b = random(&mut store, &mut rng, "b", &[5]);
        check(&store, |t, s| {
            let (av, bv) = (t.param(s, a), t.param(s, b));
            let d = t.sub(av, bv);
            let d2 = t.square(d);
            let ss = t.sum(d2);
            let dist = t.sqrt(ss);
            let neg = t.scale(dist, -1.0);
            let hinge = t.add_scalar(neg, 5.0);
            let hinge = t.relu(hinge);
            let hinge = t.square(hinge);
            let col = t_reshape(t, av);
            let first = t.slice_rows(col, 0, 1);
            let z = t.reshape(first, &[1]);
            let ce = t.bce_logit(z, 1.0, 1e-7);
            t.add(hinge, ce)
        });

        fn t_reshape(t: &mut Tape, v: Var) -> Var {
            let n = t.value(v).len();
            t.reshape(v, &[n, 1])
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut t = Tape::new();
        let z = t.constant(vec![0.0], &[1]);
        let l = t.bce_logit(z, 0.0, 1e-7);
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

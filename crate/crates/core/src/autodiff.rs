//! Vector-valued tape for forward- and reverse-mode differentiation.
//!
//! Nodes hold whole vectors (a layer's activations, a weight matrix) rather
//! than scalars. Values are computed eagerly as nodes are pushed.
//!
//! Forward-mode tangents are *recorded on the same tape*: [`Tape::tangent`]
//! walks the primal nodes between an input and an output and appends the
//! nodes that compute the directional derivative. A later reverse sweep
//! ([`Tape::backward`]) therefore differentiates expressions such as
//! `Σ_j e_jᵀ (dv/dx) e_j` with respect to the parameters (forward over
//! reverse) without ever forming a Hessian.
//!
//! Parameters are borrowed, not copied: a `Param` node reads straight from
//! the slice handed to [`Tape::new`], and its adjoint is accumulated into a
//! caller-supplied buffer of the same shape.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Param(usize),
    /// `W x` with `W` stored row-major `rows×cols`.
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    /// `(n×k)(k×p)` row-major product.
    MatMul { a: Var, b: Var, n: usize, k: usize, p: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Vector times a length-1 node.
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Swish(Var),
    SwishPrime(Var),
    Exp(Var),
    Log(Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize, len: usize },
    Sum(Var),
    Dot(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatVec { .. } => "matvec",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sigmoid(_) => "sigmoid",
            Op::Swish(_) => "swish",
            Op::SwishPrime(_) => "swish_prime",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `σ(x) + x σ(x)(1 − σ(x))`
pub fn swish_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

fn swish_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

/// Computation record. See the module docs.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: &'p [Vec<f64>],
    /// Per-node cached derivative factor (e.g. `cos a` for `sin a`), shared by
    /// every tangent pass through that node.
    deriv_cache: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Vec<f64>]) -> Self {
        Tape { nodes: Vec::with_capacity(128), params, deriv_cache: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i],
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on a vector node");
        val[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.value(v).len()
    }

    /// Differentiable leaf (a point `x` we take tangents or adjoints with respect to).
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index {index} out of range");
        self.push(Op::Param(index), Vec::new())
    }

    fn binary_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise shape mismatch");
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    fn unary_values(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|x| f(*x)).collect()
    }

    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        assert_eq!(wv.len(), rows * cols, "matvec weight shape");
        assert_eq!(xv.len(), cols, "matvec input shape");
        let out = wv.chunks_exact(cols).map(|row| crate::linalg::dot(row, xv)).collect();
        self.push(Op::MatVec { w, x, rows, cols }, out)
    }

    pub fn matmul(&mut self, a: Var, b: Var, n: usize, k: usize, p: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), n * k, "matmul lhs shape");
        assert_eq!(bv.len(), k * p, "matmul rhs shape");
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            for l in 0..k {
                let a_il = av[i * k + l];
                for j in 0..p {
                    out[i * p + j] += a_il * bv[l * p + j];
                }
            }
        }
        self.push(Op::MatMul { a, b, n, k, p }, out)
    }

    pub fn transpose(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "transpose shape");
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        self.push(Op::Transpose { a, rows, cols }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_values(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "mul_scalar needs a length-1 factor");
        let s0 = sv[0];
        let v = self.unary_values(a, |x| x * s0);
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary_values(a, |x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary_values(a, |x| x + c);
        self.push(Op::Shift(a), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, f64::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, f64::cos);
        self.push(Op::Cos(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, swish);
        self.push(Op::Swish(a), v)
    }

    fn swish_prime(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, swish_prime);
        self.push(Op::SwishPrime(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.unary_values(a, f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.dim(*p)).sum());
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice { a, start, len }, v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![v])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "dot shape mismatch");
        let v = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), vec![v])
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let n = self.dim(v);
        self.constant(vec![0.0; n])
    }

    fn add_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Option<Var> {
        match (a, b) {
            (Some(a), Some(b)) => Some(self.add(a, b)),
            (a, None) => a,
            (None, b) => b,
        }
    }

    fn cached_factor(&mut self, node: usize, build: impl FnOnce(&mut Self) -> Var) -> Var {
        if self.deriv_cache.len() <= node {
            self.deriv_cache.resize(node + 1, None);
        }
        if let Some(v) = self.deriv_cache[node] {
            return v;
        }
        let v = build(self);
        self.deriv_cache[node] = Some(v);
        v
    }

    /// Records the directional derivative of `output` with respect to the
    /// input leaf `wrt` along `direction` and returns the tangent node.
    ///
    /// Nodes that do not depend on `wrt` contribute a zero tangent. Fails if
    /// a node on the path has no recorded tangent rule (third-order use).
    pub fn tangent(&mut self, wrt: Var, direction: Var, output: Var) -> Result<Var> {
        if !matches!(self.nodes[wrt.0].op, Op::Input) {
            return Err(Error::Contract("tangent must be taken with respect to an input leaf".into()));
        }
        if self.dim(direction) != self.dim(wrt) {
            return Err(Error::Contract(format!(
                "tangent direction has length {}, input has {}",
                self.dim(direction),
                self.dim(wrt)
            )));
        }
        if output.0 < wrt.0 {
            return Ok(self.zeros_like(output));
        }
        let base = wrt.0;
        let mut tan: Vec<Option<Var>> = vec![None; output.0 - base + 1];
        tan[0] = Some(direction);
        let t = |tan: &Vec<Option<Var>>, v: Var| if v.0 < base { None } else { tan[v.0 - base] };

        for i in base + 1..=output.0 {
            let op = self.nodes[i].op.clone();
            let y = Var(i);
            let out = match op {
                Op::Input | Op::Constant | Op::Param(_) => None,
                Op::MatVec { w, x, rows, cols } => {
                    let a = t(&tan, x).map(|tx| self.matvec(w, tx, rows, cols));
                    let b = t(&tan, w).map(|tw| self.matvec(tw, x, rows, cols));
                    self.add_opt(a, b)
                }
                Op::MatMul { a, b, n, k, p } => {
                    let l = t(&tan, a).map(|ta| self.matmul(ta, b, n, k, p));
                    let r = t(&tan, b).map(|tb| self.matmul(a, tb, n, k, p));
                    self.add_opt(l, r)
                }
                Op::Transpose { a, rows, cols } => t(&tan, a).map(|ta| self.transpose(ta, rows, cols)),
                Op::Add(a, b) => {
                    let (ta, tb) = (t(&tan, a), t(&tan, b));
                    self.add_opt(ta, tb)
                }
                Op::Sub(a, b) => match (t(&tan, a), t(&tan, b)) {
                    (Some(ta), Some(tb)) => Some(self.sub(ta, tb)),
                    (Some(ta), None) => Some(ta),
                    (None, Some(tb)) => Some(self.scale(tb, -1.0)),
                    (None, None) => None,
                },
                Op::Mul(a, b) => {
                    let l = t(&tan, a).map(|ta| self.mul(ta, b));
                    let r = t(&tan, b).map(|tb| self.mul(a, tb));
                    self.add_opt(l, r)
                }
                Op::Div(a, b) => {
                    // d(a/b) = (da - y db) / b
                    let num = match (t(&tan, a), t(&tan, b)) {
                        (ta, Some(tb)) => {
                            let ytb = self.mul(y, tb);
                            Some(match ta {
                                Some(ta) => self.sub(ta, ytb),
                                None => self.scale(ytb, -1.0),
                            })
                        }
                        (ta, None) => ta,
                    };
                    num.map(|n| self.div(n, b))
                }
                Op::MulScalar(a, s) => {
                    let l = t(&tan, a).map(|ta| self.mul_scalar(ta, s));
                    let r = t(&tan, s).map(|ts| self.mul_scalar(a, ts));
                    self.add_opt(l, r)
                }
                Op::Scale(a, c) => t(&tan, a).map(|ta| self.scale(ta, c)),
                Op::Shift(a) => t(&tan, a),
                Op::Sin(a) => t(&tan, a).map(|ta| {
                    let f = self.cached_factor(i, |tp| tp.cos(a));
                    self.mul(f, ta)
                }),
                Op::Cos(a) => t(&tan, a).map(|ta| {
                    let f = self.cached_factor(i, |tp| {
                        let s = tp.sin(a);
                        tp.scale(s, -1.0)
                    });
                    self.mul(f, ta)
                }),
                Op::Sigmoid(a) => t(&tan, a).map(|ta| {
                    let f = self.cached_factor(i, |tp| {
                        let one_minus = tp.scale(y, -1.0);
                        let one_minus = tp.shift(one_minus, 1.0);
                        tp.mul(y, one_minus)
                    });
                    self.mul(f, ta)
                }),
                Op::Swish(a) => t(&tan, a).map(|ta| {
                    let f = self.cached_factor(i, |tp| tp.swish_prime(a));
                    self.mul(f, ta)
                }),
                Op::Exp(a) => t(&tan, a).map(|ta| self.mul(y, ta)),
                Op::Log(a) => t(&tan, a).map(|ta| self.div(ta, a)),
                Op::Concat(parts) => {
                    let tans: Vec<Option<Var>> = parts.iter().map(|p| t(&tan, *p)).collect();
                    if tans.iter().all(Option::is_none) {
                        None
                    } else {
                        let filled: Vec<Var> = parts
                            .iter()
                            .zip(&tans)
                            .map(|(p, tp)| tp.unwrap_or_else(|| self.zeros_like(*p)))
                            .collect();
                        Some(self.concat(&filled))
                    }
                }
                Op::Slice { a, start, len } => t(&tan, a).map(|ta| self.slice(ta, start, len)),
                Op::Sum(a) => t(&tan, a).map(|ta| self.sum(ta)),
                Op::Dot(a, b) => {
                    let l = t(&tan, a).map(|ta| self.dot(ta, b));
                    let r = t(&tan, b).map(|tb| self.dot(a, tb));
                    self.add_opt(l, r)
                }
                Op::SwishPrime(a) => {
                    if t(&tan, a).is_some() {
                        return Err(Error::Unsupported(format!(
                            "no tangent rule for `{}` (third-order derivatives are not supported)",
                            op.name()
                        )));
                    }
                    None
                }
            };
            tan[i - base] = out;
        }
        Ok(match tan[output.0 - base] {
            Some(v) => v,
            None => self.zeros_like(output),
        })
    }

    /// Reverse sweep from a scalar `output`. Parameter adjoints are added to
    /// `param_grads` (shaped like the parameter slice); adjoints of all other
    /// nodes are returned.
    pub fn backward(&self, output: Var, param_grads: &mut [Vec<f64>]) -> Result<Adjoints> {
        if self.dim(output) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got length {}",
                self.dim(output)
            )));
        }
        if param_grads.len() != self.params.len()
            || param_grads.iter().zip(self.params).any(|(g, p)| g.len() != p.len())
        {
            return Err(Error::Contract("gradient buffer shape differs from parameters".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        adj.resize_with(output.0 + 1, || None);
        adj[output.0] = Some(vec![1.0]);

        fn slot<'a>(
            adj: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            grads: &'a mut [Vec<f64>],
            params: &[Vec<f64>],
            v: Var,
        ) -> &'a mut [f64] {
            if let Op::Param(p) = nodes[v.0].op {
                return &mut grads[p];
            }
            let n = match nodes[v.0].op {
                Op::Param(p) => params[p].len(),
                _ => nodes[v.0].value.len(),
            };
            adj[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            macro_rules! acc {
                ($v:expr) => {
                    slot(&mut adj, &self.nodes, param_grads, self.params, $v)
                };
            }
            match &node.op {
                Op::Input | Op::Constant | Op::Param(_) => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let xv = self.value(*x);
                    {
                        let gw = acc!(*w);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                row.iter_mut().zip(xv).for_each(|(a, b)| *a += gr * b);
                            }
                        }
                    }
                    let wv = self.value(*w);
                    let gx = acc!(*x);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += gr * b);
                        }
                    }
                }
                Op::MatMul { a, b, n, k, p } => {
                    let (n, k, p) = (*n, *k, *p);
                    let bv = self.value(*b);
                    {
                        let ga = acc!(*a);
                        for r in 0..n {
                            for l in 0..k {
                                ga[r * k + l] += (0..p).map(|j| g[r * p + j] * bv[l * p + j]).sum::<f64>();
                            }
                        }
                    }
                    let av = self.value(*a);
                    let gb = acc!(*b);
                    for l in 0..k {
                        for j in 0..p {
                            gb[l * p + j] += (0..n).map(|r| av[r * k + l] * g[r * p + j]).sum::<f64>();
                        }
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    let ga = acc!(*a);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc!(*a), &g, 1.0);
                    add_into(acc!(*b), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc!(*a), &g, 1.0);
                    add_into(acc!(*b), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let bv = self.value(*b);
                    acc!(*a).iter_mut().zip(g.iter().zip(bv)).for_each(|(s, (gi, bi))| *s += gi * bi);
                    let av = self.value(*a);
                    acc!(*b).iter_mut().zip(g.iter().zip(av)).for_each(|(s, (gi, ai))| *s += gi * ai);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc!(*a).iter_mut().zip(g.iter().zip(bv)).for_each(|(s, (gi, bi))| *s += gi / bi);
                    let y = &node.value;
                    acc!(*b)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(j, s)| *s -= g[j] * y[j] / bv[j]);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.value(*s)[0];
                    add_into(acc!(*a), &g, sv);
                    let av = self.value(*a);
                    let d: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    acc!(*s)[0] += d;
                }
                Op::Scale(a, c) => add_into(acc!(*a), &g, *c),
                Op::Shift(a) => add_into(acc!(*a), &g, 1.0),
                Op::Sin(a) => {
                    let av = self.value(*a).to_vec();
                    acc!(*a).iter_mut().zip(g.iter().zip(&av)).for_each(|(s, (gi, x))| *s += gi * x.cos());
                }
                Op::Cos(a) => {
                    let av = self.value(*a).to_vec();
                    acc!(*a).iter_mut().zip(g.iter().zip(&av)).for_each(|(s, (gi, x))| *s -= gi * x.sin());
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (gi, yi))| *s += gi * yi * (1.0 - yi));
                }
                Op::Swish(a) => {
                    let av = self.value(*a).to_vec();
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(&av))
                        .for_each(|(s, (gi, x))| *s += gi * swish_prime(*x));
                }
                Op::SwishPrime(a) => {
                    let av = self.value(*a).to_vec();
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(&av))
                        .for_each(|(s, (gi, x))| *s += gi * swish_second(*x));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (gi, yi))| *s += gi * yi);
                }
                Op::Log(a) => {
                    let av = self.value(*a).to_vec();
                    acc!(*a).iter_mut().zip(g.iter().zip(&av)).for_each(|(s, (gi, x))| *s += gi / x);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.dim(*p);
                        add_into(acc!(*p), &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Slice { a, start, len } => {
                    add_into(&mut acc!(*a)[*start..start + len], &g, 1.0);
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc!(*a).iter_mut().for_each(|s| *s += g0);
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let bv = self.value(*b);
                    add_into(acc!(*a), bv, g0);
                    let av = self.value(*a);
                    add_into(acc!(*b), av, g0);
                }
            }
        }
        Ok(Adjoints { adj })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}

/// Adjoints of non-parameter nodes after a reverse sweep.
pub struct Adjoints {
    adj: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Adjoint of `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }
}

/// Zero buffer shaped like `params`.
pub fn zeros_like(params: &[Vec<f64>]) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

/// `(df/dx) · v` at `x` for a graph builder `f`.
pub fn jvp<F>(f: F, params: &[Vec<f64>], x: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if x.len() != v.len() {
        return Err(Error::Contract("jvp direction length differs from input".into()));
    }
    let mut tape = Tape::new(params);
    let xv = tape.input(x.to_vec());
    let y = f(&mut tape, xv)?;
    let dir = tape.constant(v.to_vec());
    let t = tape.tangent(xv, dir, y)?;
    Ok(tape.value(t).to_vec())
}

/// `uᵀ (df/dx)` at `x` for a graph builder `f`.
pub fn vjp<F>(f: F, params: &[Vec<f64>], x: &[f64], u: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let xv = tape.input(x.to_vec());
    let y = f(&mut tape, xv)?;
    if tape.dim(y) != u.len() {
        return Err(Error::Contract("vjp cotangent length differs from output".into()));
    }
    let uc = tape.constant(u.to_vec());
    let s = tape.dot(uc, y);
    let mut scratch = zeros_like(params);
    let adj = tape.backward(s, &mut scratch)?;
    Ok(adj.get(xv).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
}

/// `∂loss/∂θ` for a scalar-valued graph builder. Returns `(loss, gradient)`.
pub fn grad_params<F>(loss: F, params: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape)?;
    let mut grads = zeros_like(params);
    tape.backward(out, &mut grads)?;
    Ok((tape.scalar(out), grads))
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let fp = f(&probe);
            probe[i] = orig - step;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

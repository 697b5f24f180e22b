//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are stored on the tape and referenced through [`Var`] handles; nodes are
//! appended after their inputs, so the node vector is already in
//! topological order and the reverse pass is a single backwards sweep.
//!
//! Parameters enter a tape as leaves tagged with a parameter index
//! ([`Tape::param`]). After [`Tape::backward`] the returned [`Gradients`]
//! hold the gradient of every leaf that requires one; parameter gradients
//! are folded into their owning store by the caller.
//!
//! Broadcasting is limited to leading batch dimensions
//! ([`Tape::add_broadcast`]); every other binary primitive requires
//! identical shapes.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    LogSigmoid(Var),
    ClampMin(Var, T),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    SegmentSum {
        x: Var,
        segments: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Cleared explicitly with [`Tape::reset`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bytes: usize,
    no_grad: bool,
}

/// Leaf gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, if it requires one and the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` pairs for every parameter leaf reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(node, pid)| self.leaves[node].as_deref().map(|g| (pid, g)))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, &b)| *a = *a + b),
        None => *dst = Some(src),
    }
}

fn add_into_slice<T: Real>(dst: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let d = dst.get_or_insert_with(|| vec![T::zero(); len]);
    f(d);
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bytes: 0,
            no_grad: false,
        }
    }

    /// A tape on which parameters are recorded as constants: nothing it
    /// computes can be differentiated.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of value storage currently held by recorded nodes.
    pub fn value_bytes(&self) -> usize {
        self.bytes
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bytes = 0;
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single element of a one-element value.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.bytes += value.len() * std::mem::size_of::<T>();
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ----- leaves ---------------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::Shape {
                op: "leaf",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, Op::Leaf { param: None }, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.push(vec![1], vec![x], Op::Leaf { param: None }, false)
    }

    /// Records a parameter value; gradients for it are reported under `id`.
    pub fn param(&mut self, id: usize, tensor: &crate::tensor::Tensor<T>) -> Var {
        let rg = tensor.requires_grad() && !self.no_grad;
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf { param: Some(id) },
            rg,
        )
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push(shape, value, Op::Leaf { param: None }, false)
    }

    // ----- linear algebra -------------------------------------------------

    /// `a · b` (or `a · bᵀ` when `transpose_b`), where `a` is `[.., k]` with
    /// its leading dimensions treated as rows and `b` is a matrix.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.is_empty() || sb.len() != 2 {
            return Err(err());
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(err());
        }
        let m = numel(&sa) / k;
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n, false, transpose_b);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            shape,
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                tb: transpose_b,
            },
            rg,
        ))
    }

    /// Batched product of `[.., m, k]` and `[.., k, n]` (or `[.., n, k]`
    /// with `transpose_b`); leading dimensions must be identical.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 3 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch = numel(&sa[..r - 2]);
        let value =
            kernels::batched_matmul(self.value(a), self.value(b), batch, m, k, n, false, transpose_b);
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            shape,
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb: transpose_b,
            },
            rg,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::Shape {
                op: "add_broadcast",
                lhs: sa,
                rhs: sb,
            });
        }
        let inner = numel(&sb);
        let bv = self.value(b);
        let value = self
            .value(a)
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, value, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let value = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::MulConst(a, c), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(SQRT_2_OVER_PI);
        let k = T::lit(GELU_C);
        let half = T::lit(0.5);
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    /// `log σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.min(T::zero()) - (-x.abs()).exp().ln_1p(),
            Op::LogSigmoid(a),
        )
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    // ----- normalisation --------------------------------------------------

    /// Scale-only RMS normalisation over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::invalid("rms_norm on a scalar"))?;
        if self.shape(gain) != [d] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain);
        let dn = T::lit(d as f64);
        let mut inv_rms = Vec::with_capacity(numel(&sx) / d);
        let mut value = Vec::with_capacity(numel(&sx));
        for row in self.value(x).chunks(d) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            value.extend(row.iter().zip(g).map(|(&v, &gi)| v * inv * gi));
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(sx, value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Divides every last-axis row by its Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::invalid("normalize_rows on a scalar"))?;
        let mut norms = Vec::with_capacity(numel(&sx) / d);
        let mut value = Vec::with_capacity(numel(&sx));
        for (r, row) in self.value(x).chunks(d).enumerate() {
            let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::invalid(format!("row {r} has zero or non-finite norm")));
            }
            norms.push(norm);
            value.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(sx, value, Op::NormalizeRows { x, norms }, rg))
    }

    // ----- indexing -------------------------------------------------------

    /// Rows of `table` (`[vocab, d]`) selected by `ids`; the result has
    /// shape `out_prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(out_prefix) != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: st,
                rhs: out_prefix.to_vec(),
            });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab,
            });
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = out_prefix.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            shape,
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Flat-index selection; the result is one-dimensional.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} out of range for {n} elements")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let xv = self.value(x);
        let value = idx.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len()],
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sums a flat vector into `n_segments` buckets; `segments[i]` is the
    /// bucket of element `i`.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if segments.len() != xv.len() || n_segments == 0 {
            return Err(Error::Shape {
                op: "segment_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![segments.len()],
            });
        }
        if segments.iter().any(|&s| s >= n_segments) {
            return Err(Error::invalid("segment id out of range"));
        }
        let mut value = vec![T::zero(); n_segments];
        for (&s, &v) in segments.iter().zip(xv) {
            value[s] = value[s] + v;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![n_segments],
            value,
            Op::SegmentSum {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                value.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("invalid permutation {perm:?} for rank {}", sx.len())));
        }
        let value = permute_values(self.value(x), &sx, perm);
        let shape = perm.iter().map(|&p| sx[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Writes `fill` wherever `mask` is true.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, fill: T) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::MaskedFill { x, mask }, rg))
    }

    // ----- softmax family -------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut value = self.value(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).fold(T::neg_infinity(), |m, j| m.max(value[at(j)]));
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (value[at(j)] - mx).exp();
                    value[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    value[at(j)] = value[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut value = self.value(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).fold(T::neg_infinity(), |m, j| m.max(value[at(j)]));
                let sum = (0..len).fold(T::zero(), |s, j| s + (value[at(j)] - mx).exp());
                let lse = mx + sum.ln();
                for j in 0..len {
                    value[at(j)] = value[at(j)] - lse;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::LogSoftmax { x, axis }, rg))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    // ----- reverse pass ---------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Reverse pass seeded with explicit output gradients. Seeds on the
    /// same node add.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut any = false;
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::Shape {
                    op: "backward seed",
                    lhs: self.shape(*v).to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if self.requires_grad(*v) {
                any = true;
                start = start.max(v.0 + 1);
                add_into(&mut grads[v.0], g.clone());
            }
        }
        if !any {
            return Err(Error::Detached);
        }

        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut params = Vec::new();
        let mut leaves = Vec::with_capacity(self.nodes.len());
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            match node.op {
                Op::Leaf { param } if node.requires_grad => {
                    if let Some(pid) = param {
                        params.push((i, pid));
                    }
                    leaves.push(g);
                }
                _ => leaves.push(None),
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value[..];
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, m, k, n, tb } => {
                if rg(a) {
                    // dA = dC · op(B)ᵀ
                    let da = kernels::matmul(g, val(b), m, n, k, false, !tb);
                    add_into(&mut grads[a.0], da);
                }
                if rg(b) {
                    let db = if tb {
                        kernels::matmul(g, val(a), n, m, k, true, false)
                    } else {
                        kernels::matmul(val(a), g, k, m, n, true, false)
                    };
                    add_into(&mut grads[b.0], db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb,
            } => {
                if rg(a) {
                    let da = kernels::batched_matmul(g, val(b), batch, m, n, k, false, !tb);
                    add_into(&mut grads[a.0], da);
                }
                if rg(b) {
                    let db = if tb {
                        kernels::batched_matmul(g, val(a), batch, n, m, k, true, false)
                    } else {
                        kernels::batched_matmul(val(a), g, batch, k, m, n, true, false)
                    };
                    add_into(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddBroadcast(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    let inner = val(b).len();
                    add_into_slice(&mut grads[b.0], inner, |acc| {
                        for row in g.chunks(inner) {
                            acc.iter_mut().zip(row).for_each(|(s, &x)| *s = *s + x);
                        }
                    });
                }
            }
            &Op::Scale(a, c) => {
                add_into(&mut grads[a.0], g.iter().map(|&x| x * c).collect());
            }
            Op::MulConst(a, c) => {
                add_into(&mut grads[a.0], g.iter().zip(c).map(|(&x, &y)| x * y).collect());
            }
            &Op::Exp(a) => {
                add_into(
                    &mut grads[a.0],
                    g.iter().zip(&node.value).map(|(&x, &y)| x * y).collect(),
                );
            }
            &Op::Log(a) => {
                add_into(&mut grads[a.0], g.iter().zip(val(a)).map(|(&x, &y)| x / y).collect());
            }
            &Op::Gelu(a) => {
                let c = T::lit(SQRT_2_OVER_PI);
                let k = T::lit(GELU_C);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&gy, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gy * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                add_into(&mut grads[a.0], d);
            }
            &Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(−x)
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&gy, &x)| {
                        let s = if x >= T::zero() {
                            let e = (-x).exp();
                            e / (T::one() + e)
                        } else {
                            T::one() / (T::one() + x.exp())
                        };
                        gy * s
                    })
                    .collect();
                add_into(&mut grads[a.0], d);
            }
            &Op::ClampMin(a, lo) => {
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&gy, &x)| if x >= lo { gy } else { T::zero() })
                    .collect();
                add_into(&mut grads[a.0], d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = *node.shape.last().unwrap();
                let dn = T::lit(d as f64);
                let xv = val(*x);
                let gv = val(*gain);
                if rg(*gain) {
                    add_into_slice(&mut grads[gain.0], d, |acc| {
                        for ((row, gy), &inv) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                            for j in 0..d {
                                acc[j] = acc[j] + gy[j] * row[j] * inv;
                            }
                        }
                    });
                }
                if rg(*x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for ((row, gy), &inv) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        // xh = x·inv, dxh = gy·gain, dx = inv·(dxh − xh·mean(dxh·xh))
                        let dot = (0..d).fold(T::zero(), |s, j| s + gy[j] * gv[j] * row[j] * inv);
                        let mdot = dot / dn;
                        for j in 0..d {
                            dx.push(inv * (gy[j] * gv[j] - row[j] * inv * mdot));
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = *node.shape.last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for ((y, gy), &norm) in node.value.chunks(d).zip(g.chunks(d)).zip(norms) {
                    let dot = (0..d).fold(T::zero(), |s, j| s + gy[j] * y[j]);
                    for j in 0..d {
                        dx.push((gy[j] - y[j] * dot) / norm);
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Embedding { table, ids } => {
                let d = *node.shape.last().unwrap();
                let len = val(*table).len();
                add_into_slice(&mut grads[table.0], len, |acc| {
                    for (row, &i) in g.chunks(d).zip(ids) {
                        let dst = &mut acc[i * d..(i + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(s, &x)| *s = *s + x);
                    }
                });
            }
            Op::Gather { x, idx } => {
                let len = val(*x).len();
                add_into_slice(&mut grads[x.0], len, |acc| {
                    for (&i, &gy) in idx.iter().zip(g) {
                        acc[i] = acc[i] + gy;
                    }
                });
            }
            Op::SegmentSum { x, segments } => {
                add_into(&mut grads[x.0], segments.iter().map(|&s| g[s]).collect());
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[*axis + 1..]);
                let total = node.shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(&mut grads[p.0], gp);
                    }
                    offset += len;
                }
            }
            &Op::Reshape(x) => add_into(&mut grads[x.0], g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                add_into(&mut grads[x.0], permute_values(g, &node.shape, &inv));
            }
            Op::MaskedFill { x, mask } => {
                let d = g
                    .iter()
                    .zip(mask)
                    .map(|(&gy, &m)| if m { T::zero() } else { gy })
                    .collect();
                add_into(&mut grads[x.0], d);
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, axis);
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, axis);
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let gs = (0..len).fold(T::zero(), |s, j| s + g[at(j)]);
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            &Op::Sum(x) => {
                let n = val(x).len();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
        }
    }
}

/// Permutes a row-major array: output axis `i` is input axis `perm[i]`.
fn permute_values<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

use rand::Rng;

use super::{gemm_into, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive logit offset for masked positions.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Bce {
        probs: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a computation. Nodes are stored in creation
/// order, which is a topological order of the data flow.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar output with respect to every node of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `[..×k] · [k×c]`, flattening every leading axis of `a` into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (k, c) = (sb[0], sb[1]);
        let rows = self.value(a).rows();
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(c);
        let mut out = vec![T::zero(); rows * c];
        gemm_into(
            rows,
            k,
            c,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }))
    }

    /// Batched product of `[B×r×k]` with `[B×k×c]`, or with `[B×c×k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, r, k) = (sa[0], sa[1], sa[2]);
        let (kb, c) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("bmm", sa, sb));
        }
        let mut out = vec![T::zero(); batch * r * c];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_into(
                r,
                k,
                c,
                &av[i * r * k..],
                false,
                &bv[i * k * c..],
                trans_b,
                &mut out[i * r * c..],
                T::zero(),
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, r, c], out)?,
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a bias vector broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        if vb.numel() != c || vb.ndim() != 1 {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let bd = vb.data();
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    /// Scales row `r` of `x` by `w[r]`; `w` holds one value per row.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let c = vx.last_dim();
        if vw.numel() != vx.rows() {
            return Err(Error::dim("mul_rows", vx.shape(), vw.shape()));
        }
        let data = vx
            .data()
            .chunks(c)
            .zip(vw.data())
            .flat_map(|(row, &s)| row.iter().map(move |&a| a * s))
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::MulRows { x, w }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let t = self.map(x, |e| e * factor);
        self.push(t, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| if e > T::zero() { e } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| e.tanh());
        self.push(t, Op::Tanh(x))
    }

    /// Softmax over the last axis after adding `mask`.
    ///
    /// `mask` is an additive tensor with the same last extent as `x` and a
    /// row count dividing that of `x`; mask row `i` covers the `i`-th
    /// contiguous block of rows of `x`. Entries at or below `MASK_NEG / 2`
    /// count as masked.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let rows = vx.rows();
        if let Some(m) = mask {
            if m.last_dim() != c || m.rows() == 0 || rows % m.rows() != 0 {
                return Err(Error::dim("softmax", vx.shape(), m.shape()));
            }
        }
        let cutoff = T::lit(MASK_NEG / 2.0);
        let mut out = vec![T::zero(); vx.numel()];
        for (r, (src, dst)) in vx.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let mrow = mask.map(|m| {
                let block = rows / m.rows();
                &m.data()[(r / block) * c..(r / block + 1) * c]
            });
            if let Some(mr) = mrow {
                if mr.iter().all(|&v| v <= cutoff) {
                    return Err(Error::DegenerateSlice { slice: r });
                }
            }
            let logit = |j: usize| match mrow {
                Some(mr) => src[j] + mr[j],
                None => src[j],
            };
            let max = (0..c).map(logit).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, d) in dst.iter_mut().enumerate() {
                *d = (logit(j) - max).exp();
                sum = sum + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Normalises each row of `x` over its last axis, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::dim("layer_norm", vx.shape(), g.shape()));
        }
        let n = T::from_usize(c).expect("extent");
        let eps = T::lit(eps);
        let rows = vx.rows();
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &e| s + e) / n;
            let var = row.iter().fold(T::zero(), |s, &e| s + (e - mean) * (e - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(vx.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// `out[i] = x[index[i]]` over the flattened data, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.numel()) {
            return Err(Error::Lookup {
                id: bad,
                rows: vx.numel(),
            });
        }
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Row lookup into a `[rows×e]` table; the result has shape
    /// `[ids.len()×e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(Error::dim("embedding", vt.shape(), &[]));
        }
        let (rows, e) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Lookup { id: bad, rows });
        }
        let index = ids.iter().flat_map(|&id| id * e..(id + 1) * e).collect();
        self.gather(table, index, &[ids.len(), e])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&1);
        if start + len > c {
            return Err(Error::dim("slice_last", &shape, &[start, len]));
        }
        let rows = self.value(x).rows();
        let index = (0..rows)
            .flat_map(|r| (start..start + len).map(move |j| r * c + j))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty shape") = len;
        self.gather(x, index, &out_shape)
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, r, c) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::dim("transpose", &shape, &[])),
        };
        let mut index = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push(b * r * c + i * c + j);
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 1, n - 2);
        self.gather(x, index, &out_shape)
    }

    /// `[B×n×(h·dh)] → [(B·h)×n×dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, n, d] = shape[..] else {
            return Err(Error::dim("split_heads", &shape, &[heads]));
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("split_heads", &shape, &[heads]));
        }
        let dh = d / heads;
        let mut index = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let base = bi * n * d + t * d + h * dh;
                    index.extend(base..base + dh);
                }
            }
        }
        self.gather(x, index, &[b * heads, n, dh])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [bh, n, dh] = shape[..] else {
            return Err(Error::dim("merge_heads", &shape, &[heads]));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(Error::dim("merge_heads", &shape, &[heads]));
        }
        let b = bh / heads;
        let d = dh * heads;
        let mut index = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let base = ((bi * heads + h) * n + t) * dh;
                    index.extend(base..base + dh);
                }
            }
        }
        self.gather(x, index, &[b, n, d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len().saturating_sub(1)] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(*first), s));
            }
            total += self.value(p).last_dim();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.last_dim();
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Stacks `[b×d]` steps into `[b×n×d]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::Contract("stack of zero steps".into()))?;
        let s = self.shape(first).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("stack_steps", &s, &[]));
        }
        let cat = self.concat_last(steps)?;
        self.reshape(cat, &[s[0], steps.len(), s[1]])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel().max(1)).expect("count");
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`. `rate == 0` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Mean binary cross-entropy between `probs` and `target`, with `probs`
    /// clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let vp = self.value(probs);
        if vp.shape() != target.shape() {
            return Err(Error::dim("bce", vp.shape(), target.shape()));
        }
        if let Some(t) = target
            .data()
            .iter()
            .find(|&&t| !(t >= T::zero() && t <= T::one()))
        {
            return Err(Error::Contract(format!("bce target {t} outside [0, 1]")));
        }
        let loss = bce_value(vp.data(), target.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: impl Iterator<Item = T>) {
        let dst = slot(grads, v, self.value(v).numel());
        for (d, x) in dst.iter_mut().zip(g) {
            *d = *d + x;
        }
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, c) = (vb.shape()[0], vb.shape()[1]);
                let rows = va.rows();
                let ga = slot(grads, *a, va.numel());
                gemm_into(rows, c, k, gout, false, vb.data(), true, ga, T::one());
                let gb = slot(grads, *b, vb.numel());
                gemm_into(k, rows, c, va.data(), true, gout, false, gb, T::one());
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, r, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let c = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                {
                    let ga = slot(grads, *a, va.numel());
                    for i in 0..batch {
                        // dA = dOut · op(B)ᵀ
                        gemm_into(
                            r,
                            c,
                            k,
                            &gout[i * r * c..],
                            false,
                            &vb.data()[i * k * c..],
                            !*trans_b,
                            &mut ga[i * r * k..],
                            T::one(),
                        );
                    }
                }
                let gb = slot(grads, *b, vb.numel());
                for i in 0..batch {
                    if *trans_b {
                        // B is [c×k]: dB = dOutᵀ · A
                        gemm_into(
                            c,
                            r,
                            k,
                            &gout[i * r * c..],
                            true,
                            &va.data()[i * r * k..],
                            false,
                            &mut gb[i * k * c..],
                            T::one(),
                        );
                    } else {
                        gemm_into(
                            k,
                            r,
                            c,
                            &va.data()[i * r * k..],
                            true,
                            &gout[i * r * c..],
                            false,
                            &mut gb[i * k * c..],
                            T::one(),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.iter().copied());
                self.accumulate(grads, *b, gout.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.iter().copied());
                self.accumulate(grads, *b, gout.iter().map(|&g| -g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gout.iter().zip(vb).map(|(&g, &y)| g * y));
                self.accumulate(grads, *b, gout.iter().zip(va).map(|(&g, &x)| g * x));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, gout.iter().copied());
                let c = self.value(*bias).numel();
                let gb = slot(grads, *bias, c);
                for row in gout.chunks(c) {
                    for (acc, &g) in gb.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
            }
            Op::MulRows { x, w } => {
                let vx = self.value(*x);
                let vw = self.value(*w).data();
                let c = vx.last_dim();
                self.accumulate(
                    grads,
                    *x,
                    gout.chunks(c)
                        .zip(vw)
                        .flat_map(|(row, &s)| row.iter().map(move |&g| g * s)),
                );
                let gw = slot(grads, *w, vw.len());
                for (r, (grow, xrow)) in gout.chunks(c).zip(vx.data().chunks(c)).enumerate() {
                    gw[r] = gw[r] + grow.iter().zip(xrow).fold(T::zero(), |s, (&g, &v)| s + g * v);
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, gout.iter().map(|&g| g * *factor));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    gout.iter()
                        .zip(vx)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Sigmoid(x) => {
                self.accumulate(
                    grads,
                    *x,
                    gout.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)),
                );
            }
            Op::Tanh(x) => {
                self.accumulate(
                    grads,
                    *x,
                    gout.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)),
                );
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let gx = slot(grads, *x, out.len());
                for ((grow, yrow), dst) in gout.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&g, &y)| s + g * y);
                    for ((d, &g), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + y * (g - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let n = T::from_usize(c).expect("extent");
                let gv = self.value(*gamma).data();
                {
                    let gg = slot(grads, *gamma, c);
                    for (grow, hrow) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                {
                    let gbeta = slot(grads, *beta, c);
                    for grow in gout.chunks(c) {
                        for j in 0..c {
                            gbeta[j] = gbeta[j] + grow[j];
                        }
                    }
                }
                let gx = slot(grads, *x, out.len());
                for (r, ((grow, hrow), dst)) in gout
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dh = mean_dh + d * hrow[j];
                    }
                    mean_d = mean_d / n;
                    mean_dh = mean_dh / n;
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        dst[j] = dst[j] + rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
            Op::Gather { x, index } => {
                let n = self.value(*x).numel();
                let gx = slot(grads, *x, n);
                for (&i, &g) in index.iter().zip(gout) {
                    gx[i] = gx[i] + g;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gout.iter().copied()),
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    let gp = slot(grads, p, rows * c);
                    for r in 0..rows {
                        let src = &gout[r * total + offset..r * total + offset + c];
                        for (d, &g) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *d = *d + g;
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, std::iter::repeat_n(gout[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = gout[0] / T::from_usize(n.max(1)).expect("count");
                self.accumulate(grads, *x, std::iter::repeat_n(g, n));
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gout.iter().zip(mask).map(|(&g, &m)| g * m));
            }
            Op::Bce { probs, target } => {
                let p = self.value(*probs).data();
                let n = T::from_usize(p.len().max(1)).expect("count");
                let (lo, hi) = clamp_bounds::<T>();
                self.accumulate(
                    grads,
                    *probs,
                    p.iter().zip(target).map(|(&p, &t)| {
                        let pc = p.max(lo).min(hi);
                        gout[0] * (pc - t) / (pc * (T::one() - pc)) / n
                    }),
                );
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp_bounds<T: Scalar>() -> (T, T) {
    (T::lit(1e-7), T::lit(1.0 - 1e-7))
}

pub(crate) fn bce_value<T: Scalar>(probs: &[T], target: &[T]) -> T {
    let (lo, hi) = clamp_bounds::<T>();
    let n = T::from_usize(probs.len().max(1)).expect("count");
    probs.iter().zip(target).fold(T::zero(), |s, (&p, &t)| {
        let p = p.max(lo).min(hi);
        s - (t * p.ln() + (T::one() - t) * (T::one() - p).ln())
    }) / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_relu_mul_definitions() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let x = g.leaf(t(&[2], &[-3.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let m = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.add_bias(m, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 1.0, 1.0]));
        let y = g.softmax(x, None).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.leaf(t(&[2], &[0.0, 2f64.ln()]));
        let y = g.softmax(x, None).unwrap();
        assert!(g.value(y).max_abs_diff(&t(&[2], &[1.0 / 3.0, 2.0 / 3.0])) < 1e-15);
        let x = g.leaf(t(&[2], &[1.0, 1.0]));
        let y = g.softmax(x, Some(&t(&[2], &[0.0, MASK_NEG]))).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < 1e-9);
    }

    #[test]
    fn softmax_fully_masked_slice_is_degenerate() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask = t(&[2, 2], &[0.0, 0.0, MASK_NEG, MASK_NEG]);
        assert!(matches!(
            g.softmax(x, Some(&mask)),
            Err(Error::DegenerateSlice { slice: 1 })
        ));
    }

    #[test]
    fn backward_linear_case_is_outer_product() {
        // loss = sum(W·x) ⇒ dW[i][j] = x[i] (x as a row vector times W).
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.leaf(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let p = g.leaf(t(&[2], &[5.0, 5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get_or_zeros(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*x) + sum(3x) ⇒ grad = 2x + 3
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq);
        let tx = g.scale(x, 3.0);
        let b = g.sum(tx);
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn embedding_out_of_range_names_id() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(Tensor::zeros(&[3, 2]));
        match g.embedding(table, &[0, 7]) {
            Err(Error::Lookup { id, rows }) => assert_eq!((id, rows), (7, 3)),
            other => panic!("unexpected {other:?}", other = other.err()),
        }
    }

    #[test]
    fn repeated_ids_double_row_gradient() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = g.embedding(table, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(e).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn heads_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let x = g.leaf(t(&[2, 3, 4], &data));
        let s = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 2]);
        // batch 0, head 1, step 2 → columns 2..4 of row 2
        assert_eq!(g.value(s).get(&[1, 2, 0]), 10.0);
        let m = g.merge_heads(s, 2).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn bce_closed_forms() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[3], &[0.5, 0.5, 0.5]));
        let l = g.bce(p, &t(&[3], &[1.0, 0.0, 1.0])).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let p = g.leaf(t(&[1], &[1.0]));
        let l = g.bce(p, &t(&[1], &[1.0])).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);
        let p = g.leaf(t(&[1], &[0.5]));
        assert!(matches!(g.bce(p, &t(&[1], &[1.5])), Err(Error::Contract(_))));
    }
}

use super::{Init, ParamId, ParamStore, Session, EMBED_INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Epsilon added to the variance in every layer norm.
pub const LN_EPS: f64 = 1e-6;

/// `x·W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.glorot(input, output))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?,
            input,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        let h = s.graph.matmul(x, w)?;
        s.graph.add_bias(h, b)
    }

    pub fn numel(&self) -> usize {
        self.input * self.output + self.output
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Trainable token table. Row 0 is the padding row.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> Result<Self> {
        let mut table: Tensor<T> = init.normal(&[rows, dim], EMBED_INIT_STD);
        for v in &mut table.data_mut()[..dim.min(rows * dim)] {
            *v = T::zero();
        }
        Ok(Self {
            table: store.add(format!("{name}.table"), table)?,
            rows,
            dim,
        })
    }

    /// `[ids.len()×dim]` rows of the table.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = s.p(self.table);
        s.graph.embedding(t, ids)
    }
}

/// Single-layer LSTM with zero initial state. Gate column order in the
/// packed weights is input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_input: store.add(format!("{name}.w_input"), init.glorot(input, 4 * hidden))?,
            w_hidden: store.add(format!("{name}.w_hidden"), init.glorot(hidden, 4 * hidden))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]))?,
            input,
            hidden,
        })
    }

    /// Runs the recurrence over `seq: [b×n×input]` and returns every
    /// hidden state, `[b×n×hidden]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, seq: Var) -> Result<Var> {
        let shape = s.graph.shape(seq).to_vec();
        let [b, n, e] = shape[..] else {
            return Err(Error::dim("lstm", &shape, &[self.input]));
        };
        if e != self.input {
            return Err(Error::dim("lstm", &shape, &[self.input]));
        }
        if n == 0 {
            return Err(Error::Contract("lstm over an empty sequence".into()));
        }
        let d = self.hidden;
        let (wi, wh, bias) = (s.p(self.w_input), s.p(self.w_hidden), s.p(self.bias));
        // Input contributions for all steps at once: [b×n×4d].
        let xw = s.graph.matmul(seq, wi)?;
        let xw = s.graph.add_bias(xw, bias)?;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let step = step_rows(s, xw, b, n, t)?;
            let pre = match h {
                Some(h) => {
                    let hw = s.graph.matmul(h, wh)?;
                    s.graph.add(step, hw)?
                }
                None => step,
            };
            let i_pre = s.graph.slice_last(pre, 0, d)?;
            let f_pre = s.graph.slice_last(pre, d, d)?;
            let g_pre = s.graph.slice_last(pre, 2 * d, d)?;
            let o_pre = s.graph.slice_last(pre, 3 * d, d)?;
            let i = s.graph.sigmoid(i_pre);
            let f = s.graph.sigmoid(f_pre);
            let g = s.graph.tanh(g_pre);
            let o = s.graph.sigmoid(o_pre);
            let ig = s.graph.mul(i, g)?;
            let c_new = match c {
                Some(c) => {
                    let fc = s.graph.mul(f, c)?;
                    s.graph.add(fc, ig)?
                }
                None => ig,
            };
            let tc = s.graph.tanh(c_new);
            let h_new = s.graph.mul(o, tc)?;
            outputs.push(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        s.graph.stack_steps(&outputs)
    }
}

/// Rows `[b×w]` for time step `t` out of a `[b×n×w]` tensor.
fn step_rows<T: Scalar>(s: &mut Session<'_, T>, x: Var, b: usize, n: usize, t: usize) -> Result<Var> {
    let w = s.graph.value(x).last_dim();
    let index = (0..b)
        .flat_map(|bi| {
            let base = (bi * n + t) * w;
            base..base + w
        })
        .collect();
    s.graph.gather(x, index, &[b, w])
}

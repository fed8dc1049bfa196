use std::fmt::Debug;

use crate::error::Result;
use crate::nn::{Init, ParamId, ParamStore, Session};
use crate::registry::Registry;
use crate::tensor::{Scalar, Tensor, Var};

/// Post-attention block applied to the multi-head output before the
/// residual connection.
pub trait OutputBlock<T: Scalar>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// `query` is the unit input `[b×q×d]`, `attended` the multi-head
    /// output of the same shape.
    fn forward(&self, s: &mut Session<'_, T>, query: Var, attended: Var) -> Result<Var>;
}

pub type BlockCtor<T> = fn(&mut ParamStore<T>, &mut Init<'_>, &str, usize) -> Result<Box<dyn OutputBlock<T>>>;

/// Registry of attention output blocks: `aoa` and the gate-ablated `plain`.
pub fn output_blocks<T: Scalar>() -> Registry<BlockCtor<T>> {
    Registry::<BlockCtor<T>>::new("attention block")
        .with(
            "aoa",
            "information vector gated by a sigmoid attention gate",
            build_aoa::<T>,
        )
        .with(
            "plain",
            "multi-head output passed through unchanged",
            build_plain::<T>,
        )
}

fn build_aoa<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    name: &str,
    d: usize,
) -> Result<Box<dyn OutputBlock<T>>> {
    Ok(Box::new(AoaBlock::new(store, init, name, d)?))
}

fn build_plain<T: Scalar>(
    _: &mut ParamStore<T>,
    _: &mut Init<'_>,
    _: &str,
    _: usize,
) -> Result<Box<dyn OutputBlock<T>>> {
    Ok(Box::new(PlainBlock))
}

/// Attention on attention: `I = Q·W_q + V′·W_v + b_i`,
/// `G = σ(Q·W_g + V′·W_gv + b_g)`, output `I ⊙ G`.
#[derive(Clone, Copy, Debug)]
pub struct AoaBlock {
    pub w_query: ParamId,
    pub w_attended: ParamId,
    pub w_gate_query: ParamId,
    pub w_gate_attended: ParamId,
    pub b_info: ParamId,
    pub b_gate: ParamId,
}

impl AoaBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_query: store.add(format!("{name}.w_query"), init.glorot(d, d))?,
            w_attended: store.add(format!("{name}.w_attended"), init.glorot(d, d))?,
            w_gate_query: store.add(format!("{name}.w_gate_query"), init.glorot(d, d))?,
            w_gate_attended: store.add(format!("{name}.w_gate_attended"), init.glorot(d, d))?,
            b_info: store.add(format!("{name}.b_info"), Tensor::zeros(&[d]))?,
            b_gate: store.add(format!("{name}.b_gate"), Tensor::zeros(&[d]))?,
        })
    }

    /// Information vector and gate, before the element-wise product.
    pub fn info_and_gate<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        query: Var,
        attended: Var,
    ) -> Result<(Var, Var)> {
        let info = affine_pair(s, query, self.w_query, attended, self.w_attended, self.b_info)?;
        let gate_pre = affine_pair(
            s,
            query,
            self.w_gate_query,
            attended,
            self.w_gate_attended,
            self.b_gate,
        )?;
        let gate = s.graph.sigmoid(gate_pre);
        Ok((info, gate))
    }
}

fn affine_pair<T: Scalar>(
    s: &mut Session<'_, T>,
    a: Var,
    wa: ParamId,
    b: Var,
    wb: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let (wa, wb, bias) = (s.p(wa), s.p(wb), s.p(bias));
    let ha = s.graph.matmul(a, wa)?;
    let hb = s.graph.matmul(b, wb)?;
    let sum = s.graph.add(ha, hb)?;
    s.graph.add_bias(sum, bias)
}

impl<T: Scalar> OutputBlock<T> for AoaBlock {
    fn name(&self) -> &'static str {
        "aoa"
    }

    fn forward(&self, s: &mut Session<'_, T>, query: Var, attended: Var) -> Result<Var> {
        let (info, gate) = self.info_and_gate(s, query, attended)?;
        s.graph.mul(info, gate)
    }
}

/// Identity on the attention result, as in plain co-attention networks.
#[derive(Clone, Copy, Debug)]
pub struct PlainBlock;

impl<T: Scalar> OutputBlock<T> for PlainBlock {
    fn name(&self) -> &'static str {
        "plain"
    }

    fn forward(&self, _s: &mut Session<'_, T>, _query: Var, attended: Var) -> Result<Var> {
        Ok(attended)
    }
}

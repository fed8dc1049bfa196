use std::fmt::Debug;

use super::FusionConfig;
use crate::error::Result;
use crate::nn::{Init, Linear, ParamId, ParamStore, Session};
use crate::registry::Registry;
use crate::tensor::{Scalar, Var};

/// Produces per-sample modality weights `[b×2]` (image, question) from the
/// pooled features `x′, y′: [b×d]`. Rows sum to one.
pub trait FusionHead<T: Scalar>: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn modality_weights(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Var>;
}

pub type FusionCtor<T> =
    fn(&mut ParamStore<T>, &mut Init<'_>, &FusionConfig) -> Result<Box<dyn FusionHead<T>>>;

/// Registry of modality gates: `attention` (concatenation + MLP) and
/// `mutan` (rank-decomposed bilinear interaction).
pub fn fusion_heads<T: Scalar>() -> Registry<FusionCtor<T>> {
    Registry::<FusionCtor<T>>::new("fusion head")
        .with(
            "attention",
            "concatenate pooled features, three linear layers, softmax",
            build_concat::<T>,
        )
        .with(
            "mutan",
            "rank-R bilinear fusion of pooled features, one linear layer, softmax",
            build_mutan::<T>,
        )
}

fn build_concat<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    cfg: &FusionConfig,
) -> Result<Box<dyn FusionHead<T>>> {
    Ok(Box::new(ConcatGate::new(store, init, "fusion.gate", cfg)?))
}

fn build_mutan<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    cfg: &FusionConfig,
) -> Result<Box<dyn FusionHead<T>>> {
    Ok(Box::new(MutanGate::new(store, init, "fusion.gate", cfg)?))
}

/// `softmax(FC(2) ∘ Dropout ∘ FC(h2) ∘ Dropout ∘ FC(h1) ([x′; y′]))`.
#[derive(Clone, Copy, Debug)]
pub struct ConcatGate {
    pub layers: [Linear; 3],
    pub dropout: f64,
}

impl ConcatGate {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let [h1, h2] = cfg.gate_hidden;
        Ok(Self {
            layers: [
                Linear::new(store, init, &format!("{name}.0"), 2 * cfg.d, h1)?,
                Linear::new(store, init, &format!("{name}.1"), h1, h2)?,
                Linear::new(store, init, &format!("{name}.2"), h2, 2)?,
            ],
            dropout: cfg.gate_dropout,
        })
    }
}

impl<T: Scalar> FusionHead<T> for ConcatGate {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn modality_weights(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Var> {
        let mut h = s.graph.concat_last(&[x, y])?;
        h = self.layers[0].forward(s, h)?;
        h = s.dropout(h, self.dropout)?;
        h = self.layers[1].forward(s, h)?;
        h = s.dropout(h, self.dropout)?;
        let logits = self.layers[2].forward(s, h)?;
        s.graph.softmax(logits, None)
    }
}

/// `z = Σ_r (x′·U_r) ⊙ (y′·V_r)`.
#[derive(Clone, Debug)]
pub struct MutanCore {
    pub u: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub dim: usize,
}

impl MutanCore {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        d: usize,
        dim: usize,
        rank: usize,
    ) -> Result<Self> {
        let mut u = Vec::with_capacity(rank);
        let mut v = Vec::with_capacity(rank);
        for r in 0..rank {
            u.push(store.add(format!("{name}.u.{r}"), init.glorot(d, dim))?);
            v.push(store.add(format!("{name}.v.{r}"), init.glorot(d, dim))?);
        }
        Ok(Self { u, v, dim })
    }

    pub fn rank(&self) -> usize {
        self.u.len()
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Var> {
        let mut z: Option<Var> = None;
        for (&u, &v) in self.u.iter().zip(&self.v) {
            let (u, v) = (s.p(u), s.p(v));
            let xu = s.graph.matmul(x, u)?;
            let yv = s.graph.matmul(y, v)?;
            let term = s.graph.mul(xu, yv)?;
            z = Some(match z {
                Some(acc) => s.graph.add(acc, term)?,
                None => term,
            });
        }
        Ok(z.expect("rank is at least one"))
    }
}

/// `softmax(FC(2)(Dropout(mutan(x′, y′))))`.
#[derive(Clone, Debug)]
pub struct MutanGate {
    pub core: MutanCore,
    pub out: Linear,
    pub dropout: f64,
}

impl MutanGate {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        Ok(Self {
            core: MutanCore::new(
                store,
                init,
                &format!("{name}.mutan"),
                cfg.d,
                cfg.mutan_dim,
                cfg.mutan_rank,
            )?,
            out: Linear::new(store, init, &format!("{name}.out"), cfg.mutan_dim, 2)?,
            dropout: cfg.gate_dropout,
        })
    }
}

impl<T: Scalar> FusionHead<T> for MutanGate {
    fn name(&self) -> &'static str {
        "mutan"
    }

    fn modality_weights(&self, s: &mut Session<'_, T>, x: Var, y: Var) -> Result<Var> {
        let z = self.core.forward(s, x, y)?;
        let z = s.dropout(z, self.dropout)?;
        let logits = self.out.forward(s, z)?;
        s.graph.softmax(logits, None)
    }
}

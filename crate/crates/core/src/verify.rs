//! Finite-difference verification of every differentiable component,
//! grouped by module. Each check projects the component output onto a
//! fixed random direction, differentiates that scalar with the tape, and
//! compares against central differences for every trainable parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    key_mask, output_blocks, AoaBlock, AttentionConfig, EncoderDecoder, MultiHead, OutputBlock, Unit,
};
use crate::data::{Batch, Category, MAX_QUESTION_LEN};
use crate::error::Result;
use crate::fusion::{AttentionPool, Classifier, ConcatGate, FusionConfig, FusionHead, MutanGate};
use crate::model::{Model, ModelConfig};
use crate::nn::{Embedding, Init, LayerNorm, Linear, Lstm, ParamStore, Session};
use crate::tensor::gradcheck::{finite_diff_grad, max_relative_error};
use crate::tensor::{Tensor, Var};

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Largest accepted relative error for the suite.
pub const TOLERANCE: f64 = 1e-3;
pub const MODULES: [&str; 5] = ["tensor-core", "nn", "attention", "fusion", "model"];

/// Worst relative error over one parameter of one check.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub module: &'static str,
    pub check: String,
    pub param: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Report {
    pub checks: Vec<ParamCheck>,
}

impl Report {
    pub fn worst(&self, module: &str) -> Option<f64> {
        self.checks
            .iter()
            .filter(|c| c.module == module)
            .map(|c| c.max_rel_err)
            .reduce(f64::max)
    }

    pub fn worst_overall(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&ParamCheck> {
        self.checks
            .iter()
            .filter(|c| !(c.max_rel_err < tolerance))
            .collect()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    pub seed: u64,
    /// Negative control: perturb the analytic gradient of the modality
    /// gate parameters before comparison.
    pub corrupt_gate_grad: bool,
}

type LossFn<'f> = dyn Fn(&mut Session<'_, f64>) -> Result<Var> + 'f;

struct Checker {
    module: &'static str,
    corrupt_gate: bool,
    out: Vec<ParamCheck>,
}

impl Checker {
    fn new(module: &'static str, opts: &Options) -> Self {
        Self {
            module,
            corrupt_gate: opts.corrupt_gate_grad,
            out: Vec::new(),
        }
    }

    fn run(&mut self, check: &str, store: &ParamStore<f64>, loss: &LossFn<'_>) -> Result<()> {
        let mut s = Session::eval(store);
        let l = loss(&mut s)?;
        let grads = s.backward(l)?;
        drop(s);
        let mut work = store.clone();
        for (k, (id, p)) in store.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let mut probe = vec![p.value.clone()];
            let numeric = finite_diff_grad(
                |vals| {
                    work.get_mut(id).value.data_mut().copy_from_slice(vals[0].data());
                    let mut s = Session::eval(&work);
                    let l = loss(&mut s)?;
                    Ok(s.value(l).data()[0])
                },
                &mut probe,
                EPS,
            )?;
            work.get_mut(id).value = p.value.clone();
            let mut analytic = grads[k].clone();
            if self.corrupt_gate && p.name.starts_with("fusion.gate") {
                for v in analytic.data_mut() {
                    *v = *v * 1.5 + 1e-3;
                }
            }
            self.out.push(ParamCheck {
                module: self.module,
                check: check.to_string(),
                param: p.name.clone(),
                max_rel_err: max_relative_error(&analytic, &numeric[0]),
            });
        }
        Ok(())
    }
}

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, for checks through kinks.
fn rt_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rt(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + 0.8 * v.abs());
    }
    t
}

/// `Σ out ⊙ r` for a fixed random `r` of the output's shape.
fn project(s: &mut Session<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rt(&mut rng, s.graph.shape(out));
    let r = s.input(r);
    let p = s.graph.mul(out, r)?;
    Ok(s.graph.sum(p))
}

fn inputs(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> (ParamStore<f64>, Vec<crate::nn::ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, sh)| store.add(*n, rt(rng, sh)).expect("unique names"))
        .collect();
    (store, ids)
}

/// Per-operation checks of the autodiff tape, extents at most 5.
pub fn tensor_core(opts: &Options) -> Result<Vec<ParamCheck>> {
    let mut c = Checker::new("tensor-core", opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seed = opts.seed;

    type Binary = fn(&mut Session<'_, f64>, Var, Var) -> Result<Var>;
    let binaries: [(&str, &[usize], &[usize], Binary); 9] = [
        ("matmul", &[2, 3, 4], &[4, 5], |s, a, b| s.graph.matmul(a, b)),
        ("bmm", &[2, 3, 4], &[2, 4, 5], |s, a, b| s.graph.bmm(a, b, false)),
        ("bmm_transposed", &[2, 3, 4], &[2, 5, 4], |s, a, b| {
            s.graph.bmm(a, b, true)
        }),
        ("add", &[3, 4], &[3, 4], |s, a, b| s.graph.add(a, b)),
        ("sub", &[3, 4], &[3, 4], |s, a, b| s.graph.sub(a, b)),
        ("mul", &[3, 4], &[3, 4], |s, a, b| s.graph.mul(a, b)),
        ("add_bias", &[2, 3, 4], &[4], |s, a, b| s.graph.add_bias(a, b)),
        ("mul_rows", &[3, 4], &[3, 1], |s, a, b| s.graph.mul_rows(a, b)),
        ("concat_last", &[3, 2], &[3, 3], |s, a, b| {
            s.graph.concat_last(&[a, b])
        }),
    ];
    for (name, sa, sb, op) in binaries {
        let (store, ids) = inputs(&mut rng, &[("a", sa), ("b", sb)]);
        c.run(name, &store, &|s| {
            let (a, b) = (s.p(ids[0]), s.p(ids[1]));
            let y = op(s, a, b)?;
            project(s, y, seed)
        })?;
    }

    type Unary = fn(&mut Session<'_, f64>, Var) -> Result<Var>;
    let unaries: [(&str, &[usize], Unary); 12] = [
        ("scale", &[3, 4], |s, x| Ok(s.graph.scale(x, 0.7))),
        ("relu", &[3, 4], |s, x| Ok(s.graph.relu(x))),
        ("sigmoid", &[3, 4], |s, x| Ok(s.graph.sigmoid(x))),
        ("tanh", &[3, 4], |s, x| Ok(s.graph.tanh(x))),
        ("softmax", &[3, 4], |s, x| s.graph.softmax(x, None)),
        ("slice_last", &[3, 5], |s, x| s.graph.slice_last(x, 1, 3)),
        ("transpose", &[2, 3, 4], |s, x| s.graph.transpose(x)),
        ("heads_round_trip", &[2, 3, 4], |s, x| {
            let h = s.graph.split_heads(x, 2)?;
            let h = s.graph.scale(h, 1.3);
            s.graph.merge_heads(h, 2)
        }),
        ("reshape", &[2, 6], |s, x| s.graph.reshape(x, &[3, 4])),
        ("sum", &[3, 4], |s, x| Ok(s.graph.sum(x))),
        ("mean", &[3, 4], |s, x| Ok(s.graph.mean(x))),
        ("dropout_fixed_mask", &[3, 4], |s, x| {
            s.graph.dropout(x, 0.3, &mut ChaCha8Rng::seed_from_u64(5))
        }),
    ];
    for (name, shape, op) in unaries {
        let mut store = ParamStore::new();
        let id = store.add("x", rt_away(&mut rng, shape))?;
        c.run(name, &store, &|s| {
            let x = s.p(id);
            let y = op(s, x)?;
            project(s, y, seed)
        })?;
    }

    let (store, ids) = inputs(&mut rng, &[("x", &[2, 3, 4])]);
    let mask = key_mask::<f64>(&[3, 2], 4);
    c.run("softmax_masked", &store, &|s| {
        let x = s.p(ids[0]);
        let y = s.graph.softmax(x, Some(&mask))?;
        project(s, y, seed)
    })?;

    let (store, ids) = inputs(&mut rng, &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])]);
    c.run("layer_norm", &store, &|s| {
        let (x, g, b) = (s.p(ids[0]), s.p(ids[1]), s.p(ids[2]));
        let y = s.graph.layer_norm(x, g, b, 1e-6)?;
        project(s, y, seed)
    })?;

    let (store, ids) = inputs(&mut rng, &[("table", &[5, 3])]);
    c.run("embedding", &store, &|s| {
        let t = s.p(ids[0]);
        let y = s.graph.embedding(t, &[0, 2, 2, 4])?;
        project(s, y, seed)
    })?;

    let (store, ids) = inputs(&mut rng, &[("s0", &[2, 3]), ("s1", &[2, 3]), ("s2", &[2, 3])]);
    c.run("stack_steps", &store, &|s| {
        let steps: Vec<Var> = ids.iter().map(|&i| s.p(i)).collect();
        let y = s.graph.stack_steps(&steps)?;
        project(s, y, seed)
    })?;

    let (store, ids) = inputs(&mut rng, &[("logits", &[2, 5])]);
    let target = Tensor::new(&[2, 5], (0..10).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    c.run("bce", &store, &|s| {
        let z = s.p(ids[0]);
        let p = s.graph.sigmoid(z);
        s.graph.bce(p, &target)
    })?;
    Ok(c.out)
}

/// Layers: linear, layer norm, embedding, LSTM.
pub fn nn(opts: &Options) -> Result<Vec<ParamCheck>> {
    let mut c = Checker::new("nn", opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let seed = opts.seed;

    let (mut store, ids) = inputs(&mut rng, &[("x", &[2, 3, 4])]);
    let lin = Linear::new(&mut store, &mut Init::new(&mut rng), "linear", 4, 5)?;
    c.run("linear", &store, &|s| {
        let x = s.p(ids[0]);
        let y = lin.forward(s, x)?;
        project(s, y, seed)
    })?;

    let (mut store, ids) = inputs(&mut rng, &[("x", &[3, 5])]);
    let ln = LayerNorm::new(&mut store, "norm", 5)?;
    let (g, b) = (ln.gamma, ln.beta);
    store.get_mut(g).value = rt(&mut rng, &[5]);
    store.get_mut(b).value = rt(&mut rng, &[5]);
    c.run("layer_norm", &store, &|s| {
        let x = s.p(ids[0]);
        let y = ln.forward(s, x)?;
        project(s, y, seed)
    })?;

    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, &mut Init::new(&mut rng), "embedding", 6, 3)?;
    c.run("embedding", &store, &|s| {
        let y = emb.forward(s, &[1, 5, 0, 5])?;
        project(s, y, seed)
    })?;

    let (mut store, ids) = inputs(&mut rng, &[("seq", &[2, 3, 3])]);
    let lstm = Lstm::new(&mut store, &mut Init::new(&mut rng), "lstm", 3, 4)?;
    let bias = lstm.bias;
    store.get_mut(bias).value = rt(&mut rng, &[16]);
    c.run("lstm", &store, &|s| {
        let x = s.p(ids[0]);
        let y = lstm.forward(s, x)?;
        project(s, y, seed)
    })?;
    Ok(c.out)
}

fn randomise_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let shape = p.value.shape().to_vec();
        if p.name.ends_with("bias")
            || p.name.ends_with("b_info")
            || p.name.ends_with("b_gate")
            || p.name.ends_with("beta")
        {
            p.value = rt(rng, &shape);
        } else if p.name.ends_with("gamma") {
            p.value = rt(rng, &shape);
            for v in p.value.data_mut() {
                *v += 1.5;
            }
        }
    }
}

/// Multi-head attention, the AoA block, self and guided units and a
/// one-layer encoder-decoder, at `d = 8`, two heads, `m = 3`, `n = 4`.
pub fn attention(opts: &Options) -> Result<Vec<ParamCheck>> {
    let mut c = Checker::new("attention", opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let seed = opts.seed;
    let cfg = AttentionConfig {
        d: 8,
        heads: 2,
        dropout: 0.0,
        layers: 1,
    };
    let mask_x = key_mask::<f64>(&[3, 2], 3);
    let mask_y = key_mask::<f64>(&[4, 3], 4);
    let shapes: [(&str, &[usize]); 2] = [("x", &[2, 3, 8]), ("y", &[2, 4, 8])];

    let (mut store, ids) = inputs(&mut rng, &shapes);
    let mh = MultiHead::new(&mut store, &mut Init::new(&mut rng), "attention", &cfg)?;
    randomise_biases(&mut store, &mut rng);
    c.run("multi_head", &store, &|s| {
        let (x, y) = (s.p(ids[0]), s.p(ids[1]));
        let (out, _) = mh.forward(s, x, y, Some(&mask_y))?;
        project(s, out, seed)
    })?;

    let (mut store, ids) = inputs(&mut rng, &[("query", &[2, 3, 8]), ("attended", &[2, 3, 8])]);
    let blk = AoaBlock::new(&mut store, &mut Init::new(&mut rng), "aoa", 8)?;
    randomise_biases(&mut store, &mut rng);
    c.run("aoa_block", &store, &|s| {
        let (q, v) = (s.p(ids[0]), s.p(ids[1]));
        let out = OutputBlock::<f64>::forward(&blk, s, q, v)?;
        project(s, out, seed)
    })?;

    for block in ["aoa", "plain"] {
        let ctor = output_blocks::<f64>().get(block)?;
        let (mut store, ids) = inputs(&mut rng, &shapes);
        let unit = Unit::new(&mut store, &mut Init::new(&mut rng), "unit", &cfg, ctor)?;
        randomise_biases(&mut store, &mut rng);
        c.run(&format!("self_unit_{block}"), &store, &|s| {
            let x = s.p(ids[0]);
            let out = unit.self_attend(s, x, Some(&mask_x), "u")?;
            project(s, out, seed)
        })?;
        c.run(&format!("guided_unit_{block}"), &store, &|s| {
            let (x, y) = (s.p(ids[0]), s.p(ids[1]));
            let out = unit.guided(s, x, y, Some(&mask_y), "u")?;
            project(s, out, seed)
        })?;
    }

    let (mut store, ids) = inputs(&mut rng, &shapes);
    let ctor = output_blocks::<f64>().get("aoa")?;
    let ed = EncoderDecoder::new(&mut store, &mut Init::new(&mut rng), &cfg, ctor)?;
    randomise_biases(&mut store, &mut rng);
    c.run("encoder_decoder", &store, &|s| {
        let (x, y) = (s.p(ids[0]), s.p(ids[1]));
        let (xl, yl) = ed.forward(s, x, y, Some(&mask_x), Some(&mask_y))?;
        let a = project(s, xl, seed)?;
        let b = project(s, yl, seed.wrapping_add(1))?;
        s.graph.add(a, b)
    })?;
    Ok(c.out)
}

/// Attention pooling, both modality gates and the classifier with BCE.
pub fn fusion(opts: &Options) -> Result<Vec<ParamCheck>> {
    let mut c = Checker::new("fusion", opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let seed = opts.seed;
    let d = 4;
    let fcfg = FusionConfig {
        d,
        gate_hidden: [6, 5],
        gate_dropout: 0.0,
        pool_dropout: 0.0,
        mutan_rank: 2,
        mutan_dim: 3,
        answers: 5,
    };

    let (mut store, ids) = inputs(&mut rng, &[("z", &[2, 3, d])]);
    let pool = AttentionPool::new(&mut store, &mut Init::new(&mut rng), "pool", d, 0.0)?;
    randomise_biases(&mut store, &mut rng);
    let mask = key_mask::<f64>(&[3, 2], 3);
    c.run("attention_pool", &store, &|s| {
        let z = s.p(ids[0]);
        let (out, _) = pool.forward(s, z, Some(&mask))?;
        project(s, out, seed)
    })?;

    let gates: [(
        &str,
        fn(&mut ParamStore<f64>, &mut Init<'_>, &FusionConfig) -> Result<Box<dyn FusionHead<f64>>>,
    ); 2] = [
        ("concat_gate", |st, i, f| {
            Ok(Box::new(ConcatGate::new(st, i, "fusion.gate", f)?))
        }),
        ("mutan_gate", |st, i, f| {
            Ok(Box::new(MutanGate::new(st, i, "fusion.gate", f)?))
        }),
    ];
    for (name, build) in gates {
        let (mut store, ids) = inputs(&mut rng, &[("x", &[2, d]), ("y", &[2, d])]);
        let gate = build(&mut store, &mut Init::new(&mut rng), &fcfg)?;
        randomise_biases(&mut store, &mut rng);
        c.run(name, &store, &|s| {
            let (x, y) = (s.p(ids[0]), s.p(ids[1]));
            let w = gate.modality_weights(s, x, y)?;
            project(s, w, seed)
        })?;
    }

    let (mut store, ids) = inputs(&mut rng, &[("x", &[2, d]), ("y", &[2, d]), ("w_logits", &[2, 2])]);
    let clf = Classifier::new(&mut store, &mut Init::new(&mut rng), "classifier", d, d, 5)?;
    randomise_biases(&mut store, &mut rng);
    let target = Tensor::from_f64(&[2, 5], &[0., 1., 0., 0., 0., 0., 0., 0., 0.3, 1.])?;
    c.run("classifier_bce", &store, &|s| {
        let (x, y, wl) = (s.p(ids[0]), s.p(ids[1]), s.p(ids[2]));
        let w = s.graph.softmax(wl, None)?;
        let p = clf.forward(s, x, y, w)?;
        s.graph.bce(p, &target)
    })?;
    Ok(c.out)
}

/// A two-sample batch at `m = 3`, `n = 4`: the second sample has two
/// objects and three tokens so both masks are exercised.
pub fn tiny_batch(config: &ModelConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d_in, v) = (3, config.d_in, config.answer_vocab);
    let counts = vec![3, 2];
    let lens = vec![4, 3];
    let mut image = rt(&mut rng, &[2, m, d_in]);
    for v in &mut image.data_mut()[(m + 2) * d_in..] {
        *v = 0.0;
    }
    let mut tokens = vec![0; 2 * MAX_QUESTION_LEN];
    for (i, &l) in lens.iter().enumerate() {
        for t in &mut tokens[i * MAX_QUESTION_LEN..i * MAX_QUESTION_LEN + l] {
            *t = rng.gen_range(1..config.question_vocab);
        }
    }
    let answers = vec![Some(1 % v), Some(3 % v)];
    let mut targets = Tensor::zeros(&[2, v]);
    for (i, a) in answers.iter().enumerate() {
        targets.data_mut()[i * v + a.expect("set")] = 1.0;
    }
    Batch {
        image,
        object_counts: counts,
        tokens,
        token_lens: lens,
        targets,
        answers,
        categories: vec![Category::Other, Category::Number],
        scene_ids: vec![0, 1],
        soft: vec![false, false],
    }
}

/// The full network under BCE, once per fusion head.
pub fn model(config: &ModelConfig, opts: &Options) -> Result<Vec<ParamCheck>> {
    let mut c = Checker::new("model", opts);
    let batch = tiny_batch(config, opts.seed.wrapping_add(4));
    for fusion in ["attention", "mutan"] {
        let cfg = ModelConfig {
            fusion: fusion.into(),
            seed: opts.seed,
            ..config.clone()
        };
        let mut m = Model::<f64>::build(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(5));
        randomise_biases(&mut m.store, &mut rng);
        let targets = batch.targets.clone();
        let store = m.store.clone();
        c.run(&format!("full_model_{fusion}"), &store, &|s| {
            let out = m.forward(s, &batch)?;
            s.graph.bce(out.probs, &targets)
        })?;
    }
    Ok(c.out)
}

/// Every module's checks. `config` is the model configuration for the
/// end-to-end checks; dropout must be off.
pub fn run_suite(config: &ModelConfig, opts: &Options) -> Result<Report> {
    let mut checks = tensor_core(opts)?;
    checks.extend(nn(opts)?);
    checks.extend(attention(opts)?);
    checks.extend(fusion(opts)?);
    checks.extend(model(config, opts)?);
    Ok(Report { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_module() {
        let report = run_suite(&ModelConfig::tiny(), &Options::default()).unwrap();
        for m in MODULES {
            let w = report.worst(m).unwrap();
            assert!(w < TOLERANCE, "{m}: {w}");
        }
        let fails: Vec<_> = report
            .failures(1e-6)
            .into_iter()
            .filter(|c| c.module == "tensor-core")
            .collect();
        assert!(fails.is_empty(), "{fails:?}");
    }

    #[test]
    fn corrupted_gate_gradient_fails() {
        let opts = Options {
            corrupt_gate_grad: true,
            ..Options::default()
        };
        let report = model(&ModelConfig::tiny(), &opts).unwrap();
        let fails: Vec<_> = report.iter().filter(|c| !(c.max_rel_err < TOLERANCE)).collect();
        assert!(!fails.is_empty());
        assert!(fails.iter().all(|c| c.param.starts_with("fusion.gate")));
    }
}

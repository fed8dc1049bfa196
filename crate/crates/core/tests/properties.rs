//! Property tests over random inputs, shapes and seeds.

use mcaoan::attention::{key_mask, output_blocks, AoaBlock, AttentionConfig, Unit};
use mcaoan::data::{generate_dataset, generate_splits, GeneratorSpec, MAX_QUESTION_LEN};
use mcaoan::fusion::{fusion_heads, Classifier};
use mcaoan::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use mcaoan::nn::{Init, Mode, ParamStore, Session};
use mcaoan::verify::tiny_batch;
use mcaoan::{Graph, Scalar, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn values(n: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, n)
}

fn tiny(fusion: &str, seed: u64) -> ModelConfig {
    ModelConfig {
        fusion: fusion.into(),
        seed,
        ..ModelConfig::tiny()
    }
}

fn probs<T: Scalar>(model: &Model<T>, batch: &mcaoan::data::Batch) -> Vec<f64> {
    model.probabilities(batch).unwrap().to_f64_vec()
}

/// Failures are reported, not persisted: this file is also compiled into
/// the acceptance suite, where proptest cannot locate a source root.
fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax_rows_normalise_and_masked_keys_vanish() {
    proptest!(cases(64), |((rows, k, data, lens) in (1usize..5, 1usize..7).prop_flat_map(|(r, k)| {
            (Just(r), Just(k), values(r * 3 * k, 30.0), prop::collection::vec(1..=k, r))
        }))| {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[rows, 3, k], data).unwrap());
        let mask = key_mask::<f64>(&lens, k);
        let p = g.softmax(x, Some(&mask)).unwrap();
        for (r, row) in g.value(p).data().chunks(k).enumerate() {
            let len = lens[r / 3];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[..len].iter().all(|&v| v >= 0.0));
            prop_assert!(row[len..].iter().all(|&v| v == 0.0));
        }
    });
}

pub fn aoa_gate_lies_strictly_inside_unit_interval() {
    proptest!(cases(64), |(seed in any::<u64>(),
        (n, d, q, a) in (1usize..4, 1usize..6).prop_flat_map(|(n, d)| {
            (Just(n), Just(d), values(n * d, 4.0), values(n * d, 4.0))
        }))| {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = AoaBlock::new(&mut store, &mut Init::new(&mut rng), "aoa", d).unwrap();
        let mut s = Session::new(&store, Mode::Eval, 0);
        let qv = s.input(Tensor::new(&[1, n, d], q).unwrap());
        let av = s.input(Tensor::new(&[1, n, d], a).unwrap());
        let (_, gate) = block.info_and_gate(&mut s, qv, av).unwrap();
        prop_assert!(s.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    });
}

pub fn modality_weights_form_a_convex_combination() {
    proptest!(cases(64), |(seed in any::<u64>(),
        mutan in any::<bool>(),
        (b, x, y) in (1usize..4).prop_flat_map(|b| (Just(b), values(b * 8, 3.0), values(b * 8, 3.0))))| {
        let config = tiny(if mutan { "mutan" } else { "attention" }, seed);
        let cfg = config.fusion_config();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let head = fusion_heads::<f64>().get(&config.fusion).unwrap()(&mut store, &mut init, &cfg).unwrap();
        let cls = Classifier::new(&mut store, &mut init, "classifier", 8, 8, 5).unwrap();
        let mut s = Session::new(&store, Mode::Eval, 0);
        let (xv, yv) = (s.input(Tensor::new(&[b, 8], x).unwrap()), s.input(Tensor::new(&[b, 8], y).unwrap()));
        let w = head.modality_weights(&mut s, xv, yv).unwrap();
        let fused = cls.fuse(&mut s, xv, yv, w).unwrap();
        let px = cls.proj_x.forward(&mut s, xv).unwrap();
        let py = cls.proj_y.forward(&mut s, yv).unwrap();
        let wd = s.value(w).data().to_vec();
        for row in wd.chunks(2) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        let (f, px, py) = (s.value(fused).data(), s.value(px).data(), s.value(py).data());
        for i in 0..f.len() {
            let (lo, hi) = (px[i].min(py[i]), px[i].max(py[i]));
            prop_assert!(f[i] >= lo - 1e-12 && f[i] <= hi + 1e-12);
        }
    });
}

pub fn padding_contents_do_not_change_predictions() {
    proptest!(cases(64), |(seed in any::<u64>(), junk in values(7 + 1, 5.0))| {
        let model = Model::<f64>::build(&tiny("attention", seed)).unwrap();
        let batch = tiny_batch(&model.config, seed);
        let base = probs(&model, &batch);
        let mut noisy = batch.clone();
        // Sample 1 has two of three objects and three of four tokens.
        let d_in = model.config.d_in;
        let row = (3 + 2) * d_in;
        noisy.image.data_mut()[row..row + d_in].copy_from_slice(&junk[..d_in]);
        noisy.tokens[MAX_QUESTION_LEN + 3] = 1 + (junk[d_in].abs() * 1e3) as usize % (model.config.question_vocab - 1);
        prop_assert!(max_diff(&base, &probs(&model, &noisy)) < 1e-12);
    });
}

pub fn object_order_does_not_change_predictions() {
    proptest!(cases(64), |(seed in any::<u64>(), perm in Just([0usize, 1, 2]).prop_shuffle())| {
        let model = Model::<f64>::build(&tiny("mutan", seed)).unwrap();
        let batch = tiny_batch(&model.config, seed);
        let d_in = model.config.d_in;
        let mut permuted = batch.clone();
        for (to, &from) in perm.iter().enumerate() {
            let src = batch.image.data()[from * d_in..(from + 1) * d_in].to_vec();
            permuted.image.data_mut()[to * d_in..(to + 1) * d_in].copy_from_slice(&src);
        }
        prop_assert!(max_diff(&probs(&model, &batch), &probs(&model, &permuted)) < 1e-10);
    });
}

pub fn self_attention_unit_is_permutation_equivariant() {
    proptest!(cases(64), |(seed in any::<u64>(),
        (n, x, perm) in (2usize..6).prop_flat_map(|n| {
            (Just(n), values(n * 8, 2.0), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }))| {
        let cfg = AttentionConfig { d: 8, heads: 2, dropout: 0.0, layers: 1 };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctor = output_blocks::<f64>().get("aoa").unwrap();
        let unit = Unit::new(&mut store, &mut Init::new(&mut rng), "unit", &cfg, ctor).unwrap();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| x[i * 8..(i + 1) * 8].to_vec()).collect();
        let run = |data: Vec<f64>| {
            let mut s = Session::new(&store, Mode::Eval, 0);
            let v = s.input(Tensor::new(&[1, n, 8], data).unwrap());
            let out = unit.self_attend(&mut s, v, None, "unit").unwrap();
            s.value(out).data().to_vec()
        };
        let (a, b) = (run(x), run(permuted));
        let a_perm: Vec<f64> = perm.iter().flat_map(|&i| a[i * 8..(i + 1) * 8].to_vec()).collect();
        prop_assert!(max_diff(&a_perm, &b) < 1e-10);
    });
}

pub fn eval_mode_ignores_dropout() {
    proptest!(cases(64), |(seed in any::<u64>(), rate in 0.05f64..0.6)| {
        let noisy = ModelConfig { dropout: rate, pool_dropout: rate, gate_dropout: rate, ..tiny("attention", seed) };
        let model = Model::<f64>::build(&noisy).unwrap();
        let clean = Model::<f64>::build(&tiny("attention", seed)).unwrap();
        let batch = tiny_batch(&noisy, seed);
        let eval = |seed| {
            let mut s = Session::new(&model.store, Mode::Eval, seed);
            let out = model.forward(&mut s, &batch).unwrap();
            s.value(out.probs).data().to_vec()
        };
        let first = eval(1);
        prop_assert_eq!(&first, &eval(2));
        prop_assert_eq!(first, probs(&clean, &batch));
    });
}

pub fn checkpoint_round_trip_is_bit_exact() {
    proptest!(cases(16), |(seed in any::<u64>(), mutan in any::<bool>(), single in any::<bool>())| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = tiny(if mutan { "mutan" } else { "attention" }, seed);
        fn check<T: Scalar>(config: &ModelConfig, path: &std::path::Path) -> Result<(), TestCaseError> {
            let model = Model::<T>::build(config).unwrap();
            save_checkpoint(&model, 3, path).unwrap();
            let (back, meta) = load_checkpoint::<T>(path).unwrap();
            prop_assert_eq!(meta.epoch, 3);
            for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                let bits = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.value), bits(&b.value));
            }
            Ok(())
        }
        if single { check::<f32>(&config, &path)? } else { check::<f64>(&config, &path)? }
    });
}

pub fn dataset_generation_is_deterministic() {
    proptest!(cases(16), |(seed in any::<u64>(), scenes in 5usize..30, distractor in any::<bool>())| {
        let spec = GeneratorSpec::default();
        let a = generate_splits(scenes, 3, &spec, seed, distractor).unwrap();
        let b = generate_splits(scenes, 3, &spec, seed, distractor).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.val, &b.val);
        prop_assert_eq!(&a.test, &b.test);
        prop_assert_eq!(&a.question_vocab, &b.question_vocab);
        // Scenes draw from their own streams: a longer run extends a shorter one.
        let short = generate_dataset(scenes, 3, &spec, seed).unwrap();
        let long = generate_dataset(scenes + 4, 3, &spec, seed).unwrap();
        prop_assert_eq!(&short.samples[..], &long.samples[..short.samples.len()]);
    });
}

macro_rules! register {
    ($($name:ident),* $(,)?) => {
        /// Every property by name, for callers outside the test harness.
        pub const PROPERTIES: &[(&str, fn())] = &[$((stringify!($name), $name as fn())),*];

        #[cfg(test)]
        mod run {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}

register!(
    softmax_rows_normalise_and_masked_keys_vanish,
    aoa_gate_lies_strictly_inside_unit_interval,
    modality_weights_form_a_convex_combination,
    padding_contents_do_not_change_predictions,
    object_order_does_not_change_predictions,
    self_attention_unit_is_permutation_equivariant,
    eval_mode_ignores_dropout,
    checkpoint_round_trip_is_bit_exact,
    dataset_generation_is_deterministic,
);

use super::{AttentionConfig, BlockCtor, MultiHead, OutputBlock};
use crate::error::Result;
use crate::nn::{Init, LayerNorm, Linear, ParamStore, Session};
use crate::tensor::{Scalar, Tensor, Var};

const FFN_MULT: usize = 4;

/// One attention unit: multi-head attention, output block, residual +
/// layer norm, then a position-wise feed-forward sublayer with its own
/// residual + layer norm.
///
/// Used as a self unit (keys from the input itself) or a guided unit
/// (keys from another sequence).
#[derive(Debug)]
pub struct Unit<T: Scalar> {
    pub attention: MultiHead,
    pub block: Box<dyn OutputBlock<T>>,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_attended: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub dropout: f64,
}

impl<T: Scalar> Unit<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        cfg: &AttentionConfig,
        block: BlockCtor<T>,
    ) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            attention: MultiHead::new(store, init, &format!("{name}.attention"), cfg)?,
            block: block(store, init, &format!("{name}.aoa"), d)?,
            ffn_in: Linear::new(store, init, &format!("{name}.ffn.0"), d, FFN_MULT * d)?,
            ffn_out: Linear::new(store, init, &format!("{name}.ffn.1"), FFN_MULT * d, d)?,
            norm_attended: LayerNorm::new(store, &format!("{name}.norm.0"), d)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm.1"), d)?,
            dropout: cfg.dropout,
        })
    }

    /// `x: [b×m×d]`; `guide: [b×n×d]` for a guided unit, `None` for self
    /// attention. `key_mask` covers the key sequence.
    pub fn forward(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        guide: Option<Var>,
        key_mask: Option<&Tensor<T>>,
        label: &str,
    ) -> Result<Var> {
        let keys = guide.unwrap_or(x);
        let (attended, probs) = self.attention.forward(s, x, keys, key_mask)?;
        s.record(|| label.to_string(), probs);
        let attended = s.dropout(attended, self.dropout)?;
        let blk = self.block.forward(s, x, attended)?;
        let blk = s.dropout(blk, self.dropout)?;
        let res = s.graph.add(x, blk)?;
        let a = self.norm_attended.forward(s, res)?;

        let h = self.ffn_in.forward(s, a)?;
        let h = s.graph.relu(h);
        let h = s.dropout(h, self.dropout)?;
        let f = self.ffn_out.forward(s, h)?;
        let f = s.dropout(f, self.dropout)?;
        let res = s.graph.add(a, f)?;
        self.norm_ffn.forward(s, res)
    }

    pub fn self_attend(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        mask: Option<&Tensor<T>>,
        label: &str,
    ) -> Result<Var> {
        self.forward(s, x, None, mask, label)
    }

    pub fn guided(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        y: Var,
        mask_y: Option<&Tensor<T>>,
        label: &str,
    ) -> Result<Var> {
        self.forward(s, x, Some(y), mask_y, label)
    }
}

/// `L` self units over the question (encoder) and `L` (self, guided)
/// pairs over the image (decoder). Every decoder layer is guided by the
/// final encoder output.
#[derive(Debug)]
pub struct EncoderDecoder<T: Scalar> {
    pub encoder: Vec<Unit<T>>,
    pub decoder: Vec<(Unit<T>, Unit<T>)>,
}

impl<T: Scalar> EncoderDecoder<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        cfg: &AttentionConfig,
        block: BlockCtor<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            encoder.push(Unit::new(store, init, &format!("encoder.{l}.self"), cfg, block)?);
        }
        let mut decoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            decoder.push((
                Unit::new(store, init, &format!("decoder.{l}.self"), cfg, block)?,
                Unit::new(store, init, &format!("decoder.{l}.guided"), cfg, block)?,
            ));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn layers(&self) -> usize {
        self.encoder.len()
    }

    /// Returns `(X_L, Y_L)` for image `x: [b×m×d]` and question `y: [b×n×d]`.
    pub fn forward(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        y: Var,
        mask_x: Option<&Tensor<T>>,
        mask_y: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let mut y = y;
        for (l, unit) in self.encoder.iter().enumerate() {
            y = unit.self_attend(s, y, mask_y, &format!("encoder.{l}.self"))?;
        }
        let mut x = x;
        for (l, (self_unit, guided)) in self.decoder.iter().enumerate() {
            x = self_unit.self_attend(s, x, mask_x, &format!("decoder.{l}.self"))?;
            x = guided.guided(s, x, y, mask_y, &format!("decoder.{l}.guided"))?;
        }
        Ok((x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{key_mask, output_blocks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize) -> AttentionConfig {
        AttentionConfig {
            d: 8,
            heads: 2,
            dropout: 0.1,
            layers,
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_for_every_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for l in [1, 2, 4, 6] {
            let mut store = ParamStore::<f64>::new();
            let ed = EncoderDecoder::new(
                &mut store,
                &mut Init::new(&mut rng),
                &cfg(l),
                output_blocks().get("aoa").unwrap(),
            )
            .unwrap();
            let mut s = Session::eval(&store);
            let x = s.input(rand_t(&mut rng, &[2, 3, 8]));
            let y = s.input(rand_t(&mut rng, &[2, 4, 8]));
            let (xl, yl) = ed.forward(&mut s, x, y, None, None).unwrap();
            assert_eq!(s.graph.shape(xl), &[2, 3, 8]);
            assert_eq!(s.graph.shape(yl), &[2, 4, 8]);
        }
    }

    #[test]
    fn single_row_unit_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let u = Unit::new(
            &mut store,
            &mut Init::new(&mut rng),
            "u",
            &cfg(1),
            output_blocks().get("aoa").unwrap(),
        )
        .unwrap();
        let mut s = Session::eval(&store);
        let x = s.input(rand_t(&mut rng, &[1, 1, 8]));
        let z = u.self_attend(&mut s, x, None, "u").unwrap();
        assert_eq!(s.graph.shape(z), &[1, 1, 8]);
    }

    #[test]
    fn masked_guide_row_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let u = Unit::new(
            &mut store,
            &mut Init::new(&mut rng),
            "u",
            &cfg(1),
            output_blocks().get("aoa").unwrap(),
        )
        .unwrap();
        let xv = rand_t(&mut rng, &[1, 3, 8]);
        let yv = rand_t(&mut rng, &[1, 4, 8]);
        let mask = key_mask::<f64>(&[3], 4);
        let run = |yv: &Tensor<f64>| {
            let mut s = Session::eval(&store);
            let x = s.input(xv.clone());
            let y = s.input(yv.clone());
            let z = u.guided(&mut s, x, y, Some(&mask), "g").unwrap();
            s.value(z).clone()
        };
        let base = run(&yv);
        let mut changed = yv.clone();
        for v in &mut changed.data_mut()[3 * 8..] {
            *v = 100.0;
        }
        assert_eq!(run(&changed), base);
    }
}

use super::{Builder, Conv, Ctx, Init};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Restormer-style block: transposed channel attention and a gated
/// depthwise feed-forward network, each behind a normalisation layer and a
/// residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    norm1: String,
    qkv: Conv,
    qkv_dw: Conv,
    temperature: String,
    project: Conv,
    norm2: String,
    ffn_in: Conv,
    ffn_dw: Conv,
    ffn_out: Conv,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, heads: usize, expansion: f64) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible into {heads} attention heads"
            )));
        }
        let hidden = ((channels as f64) * expansion).floor() as usize;
        if hidden == 0 {
            return Err(Error::Config(format!("feed-forward expansion {expansion} leaves no hidden units")));
        }
        let c = channels;
        b.scope(name, |b| {
            Ok(TransformerBlock {
                channels,
                heads,
                hidden,
                norm1: b.param("norm1", Shape::new(c, 1, 1), Init::Ones)?,
                qkv: Conv::new(b, "qkv", c, 3 * c, 1, 1, false)?,
                qkv_dw: Conv::new(b, "qkv_dw", 3 * c, 3 * c, 3, 3 * c, false)?,
                temperature: b.param("temperature", Shape::new(heads, 1, 1), Init::Ones)?,
                project: Conv::new(b, "project", c, c, 1, 1, false)?,
                norm2: b.param("norm2", Shape::new(c, 1, 1), Init::Ones)?,
                ffn_in: Conv::new(b, "ffn_in", c, 2 * hidden, 1, 1, false)?,
                ffn_dw: Conv::new(b, "ffn_dw", 2 * hidden, 2 * hidden, 3, 2 * hidden, false)?,
                ffn_out: Conv::new(b, "ffn_out", hidden, c, 1, 1, false)?,
            })
        })
    }

    pub fn attention<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = ctx.tape;
        let c = self.channels;
        let n = t.layer_norm(x, ctx.param(&self.norm1))?;
        let qkv = self.qkv_dw.forward(ctx, &self.qkv.forward(ctx, &n)?)?;
        let q = t.slice_channels(&qkv, 0, c)?;
        let k = t.slice_channels(&qkv, c, 2 * c)?;
        let v = t.slice_channels(&qkv, 2 * c, 3 * c)?;
        let a = t.channel_attention(&q, &k, &v, ctx.param(&self.temperature), self.heads)?;
        self.project.forward(ctx, &a)
    }

    pub fn feed_forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = ctx.tape;
        let n = t.layer_norm(x, ctx.param(&self.norm2))?;
        let h = self.ffn_dw.forward(ctx, &self.ffn_in.forward(ctx, &n)?)?;
        let gate = t.gelu(&t.slice_channels(&h, 0, self.hidden)?);
        let value = t.slice_channels(&h, self.hidden, 2 * self.hidden)?;
        self.ffn_out.forward(ctx, &t.mul(&gate, &value)?)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.channels {
            return Err(Error::dim("channels", self.channels, x.shape().c));
        }
        let t = ctx.tape;
        let x = t.add(x, &self.attention(ctx, x)?)?;
        t.add(&x, &self.feed_forward(ctx, &x)?)
    }

    /// Per-head channel attention matrices for `x`, for inspection.
    pub fn attention_weights<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Vec<Tensor<T>>> {
        let t = ctx.tape;
        let c = self.channels;
        let n = t.layer_norm(x, ctx.param(&self.norm1))?;
        let qkv = self.qkv_dw.forward(ctx, &self.qkv.forward(ctx, &n)?)?;
        let q = t.slice_channels(&qkv, 0, c)?;
        let k = t.slice_channels(&qkv, c, 2 * c)?;
        crate::autograd::channel_attention_weights(
            q.value(),
            k.value(),
            ctx.param(&self.temperature).value().data(),
            self.heads,
        )
    }

    /// The weights whose zeroing turns the block into the identity.
    pub fn output_projections(&self) -> [&str; 2] {
        [&self.project.weight, &self.ffn_out.weight]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_graph;
    use crate::nn::ParamStore;
    use crate::autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize, heads: usize, seed: u64) -> (TransformerBlock, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = TransformerBlock::new(&mut Builder::new(&mut store, &mut rng), "tf", c, heads, 2.66).unwrap();
        (blk, store)
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn hidden_width_and_divisibility() {
        let (blk, _) = build(16, 1, 0);
        assert_eq!(blk.hidden, 42);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = TransformerBlock::new(&mut Builder::new(&mut store, &mut rng), "tf", 6, 4, 2.66);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_projections_give_identity() {
        let (blk, mut store) = build(4, 2, 1);
        for name in blk.output_projections() {
            let w = store.get_mut(name).unwrap();
            *w = Tensor::zeros(w.shape());
        }
        let x = random(Shape::new(4, 6, 5), 2);
        let tape = Tape::inference();
        let ctx = store.bind(&tape, false);
        let y = blk.forward(&ctx, &tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn shape_and_attention_rows() {
        let (blk, store) = build(6, 2, 3);
        let x = random(Shape::new(6, 9, 7), 4);
        let tape = Tape::inference();
        let ctx = store.bind(&tape, false);
        let xv = tape.constant(x);
        assert_eq!(blk.forward(&ctx, &xv).unwrap().shape(), Shape::new(6, 9, 7));
        let att = blk.attention_weights(&ctx, &xv).unwrap();
        assert_eq!(att.len(), 2);
        for a in &att {
            for r in 0..3 {
                let s: f64 = (0..3).map(|j| a.at(0, r, j)).sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_wrt_input_and_weights() {
        let (blk, store) = build(4, 2, 5);
        let x = random(Shape::new(4, 5, 4), 6);
        let proj = random(Shape::new(4, 5, 4), 7);
        let r = check_graph(&[x], 1e-5, |t, v| {
            let ctx = store.bind(t, false);
            let y = blk.forward(&ctx, &v[0])?;
            Ok(t.sum(&t.mul(&y, &t.constant(proj.clone()))?))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

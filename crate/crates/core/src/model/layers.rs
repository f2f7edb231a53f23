use rand::Rng;

use super::params::{Init, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;

const LN_EPS: f64 = 1e-5;

/// Registers parameters in a deterministic order while building modules.
pub(crate) struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let m = init.sample(rows, cols, self.rng);
        self.store.add(name, m)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = bld.param(&format!("{name}.w"), din, dout, init);
        let b = bias.then(|| bld.param(&format!("{name}.b"), 1, dout, Init::Zeros));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.graph.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Scalar, R: Rng>(bld: &mut Builder<'_, T, R>, name: &str, d: usize) -> Self {
        Self {
            g: bld.param(&format!("{name}.g"), 1, d, Init::Ones),
            b: bld.param(&format!("{name}.b"), 1, d, Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let g = s.p(self.g);
        let b = s.p(self.b);
        s.graph.layer_norm(x, g, b, T::of(LN_EPS))
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc: Linear,
    proj: Linear,
}

impl Mlp {
    pub(crate) fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        d: usize,
        hidden: usize,
        out_std: f64,
    ) -> Self {
        Self {
            fc: Linear::new(bld, &format!("{name}.fc"), d, hidden, true, Init::Normal((d as f64).powf(-0.5))),
            proj: Linear::new(bld, &format!("{name}.proj"), hidden, d, true, Init::Normal(out_std)),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.fc.forward(s, x);
        let h = s.graph.quick_gelu(h);
        self.proj.forward(s, h)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        out_std: f64,
    ) -> Self {
        assert_eq!(d % heads, 0, "{name}: width {d} not divisible by {heads} heads");
        let std = (d as f64).powf(-0.5);
        Self {
            q: Linear::new(bld, &format!("{name}.q"), d, d, true, Init::Normal(std)),
            k: Linear::new(bld, &format!("{name}.k"), d, d, true, Init::Normal(std)),
            v: Linear::new(bld, &format!("{name}.v"), d, d, true, Init::Normal(std)),
            o: Linear::new(bld, &format!("{name}.o"), d, d, true, Init::Normal(out_std)),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(s, x);
        let k = self.k.forward(s, memory);
        let v = self.v.forward(s, memory);
        let a = s.graph.attention(q, k, v, self.heads, causal);
        self.o.forward(s, a)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub(crate) fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
    ) -> Self {
        let out_std = (d as f64).powf(-0.5) * ((2 * depth) as f64).powf(-0.5);
        Self {
            ln1: LayerNorm::new(bld, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(bld, &format!("{name}.attn"), d, heads, out_std),
            ln2: LayerNorm::new(bld, &format!("{name}.ln2"), d),
            mlp: Mlp::new(bld, &format!("{name}.mlp"), d, d * mlp_ratio, out_std),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(s, x);
        let a = self.attn.forward(s, h, h, causal);
        let x = s.graph.add(x, a);
        let h = self.ln2.forward(s, x);
        let m = self.mlp.forward(s, h);
        s.graph.add(x, m)
    }
}

/// Pre-norm decoder block: query self-attention, cross-attention to memory, MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock {
    pub(crate) fn new<T: Scalar, R: Rng>(
        bld: &mut Builder<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
    ) -> Self {
        let out_std = (d as f64).powf(-0.5) * ((3 * depth) as f64).powf(-0.5);
        Self {
            ln1: LayerNorm::new(bld, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(bld, &format!("{name}.self_attn"), d, heads, out_std),
            ln2: LayerNorm::new(bld, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(bld, &format!("{name}.cross_attn"), d, heads, out_std),
            ln3: LayerNorm::new(bld, &format!("{name}.ln3"), d),
            mlp: Mlp::new(bld, &format!("{name}.mlp"), d, d * mlp_ratio, out_std),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, queries: Var, memory: Var) -> Var {
        let h = self.ln1.forward(s, queries);
        let a = self.self_attn.forward(s, h, h, false);
        let x = s.graph.add(queries, a);
        let h = self.ln2.forward(s, x);
        let c = self.cross_attn.forward(s, h, memory, false);
        let x = s.graph.add(x, c);
        let h = self.ln3.forward(s, x);
        let m = self.mlp.forward(s, h);
        s.graph.add(x, m)
    }
}

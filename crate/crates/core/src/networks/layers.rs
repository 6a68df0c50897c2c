//! Linear maps and the post-norm multi-head attention block.

use rand::Rng;

use crate::diffmath::{concat_cols, siren_activation, siren_init, Bound, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(&[rows, cols], data).expect("consistent shape")
}

/// `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `1/sqrt(fan_in)` initialisation.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        Self::from_tensor(store, name, w)
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::from_tensor(store, name, Tensor::zeros(&[fan_in, fan_out]))
    }

    pub fn from_tensor(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (fan_in, fan_out) = w.dims2().expect("2-D weight");
        Linear {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(bound.get(self.w))?.add(bound.get(self.b))
    }
}

/// Affine layer normalisation over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(LN_EPS)?.mul(bound.get(self.gamma))?.add(bound.get(self.beta))
    }
}

/// Multi-head attention, residual, layer norm, Siren feed-forward, layer norm.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
    pub hidden: usize,
    pub heads: usize,
    pub omega: f64,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        hidden: usize,
        heads: usize,
        ffn: usize,
        omega: f64,
    ) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        AttentionBlock {
            wq: store.add(format!("{name}.wq"), uniform(rng, hidden, hidden, b)),
            wk: store.add(format!("{name}.wk"), uniform(rng, hidden, hidden, b)),
            wv: store.add(format!("{name}.wv"), uniform(rng, hidden, hidden, b)),
            out: Linear::new(store, rng, &format!("{name}.wo"), hidden, hidden),
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), hidden),
            ffn1: Linear::from_tensor(store, &format!("{name}.ffn1"), siren_init(rng, hidden, ffn, omega, true)),
            ffn2: Linear::from_tensor(store, &format!("{name}.ffn2"), siren_init(rng, ffn, hidden, omega, false)),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), hidden),
            hidden,
            heads,
            omega,
        }
    }

    /// Scaled dot-product attention over `heads` heads, including the output
    /// projection; no residual and no normalisation.
    pub fn attend<'t>(&self, bound: &Bound<'t>, query: Var<'t>, key: Var<'t>, value: Var<'t>) -> Result<Var<'t>> {
        let (qs, ks, vs) = (query.shape(), key.shape(), value.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != self.hidden || ks[1] != self.hidden || vs[1] != self.hidden {
            return Err(Error::Shape(format!(
                "attention expects [*, {}] inputs, got query {qs:?}, key {ks:?}, value {vs:?}",
                self.hidden
            )));
        }
        if ks[0] != vs[0] || ks[0] == 0 {
            return Err(Error::Shape(format!("key rows {} and value rows {} must match and be non-zero", ks[0], vs[0])));
        }
        let q = query.matmul(bound.get(self.wq))?;
        let k = key.matmul(bound.get(self.wk))?;
        let v = value.matmul(bound.get(self.wv))?;
        let dh = self.hidden / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads = (0..self.heads)
            .map(|h| {
                let qh = q.slice_cols(h * dh, dh)?;
                let kh = k.slice_cols(h * dh, dh)?;
                let vh = v.slice_cols(h * dh, dh)?;
                qh.matmul_t(kh)?.scale(scale)?.softmax()?.matmul(vh)
            })
            .collect::<Result<Vec<_>>>()?;
        let joined = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
        self.out.forward(bound, joined)
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, query: Var<'t>, key: Var<'t>, value: Var<'t>) -> Result<Var<'t>> {
        let a = self.attend(bound, query, key, value)?;
        let h = self.norm1.forward(bound, query.add(a)?)?;
        let f = siren_activation(self.ffn1.forward(bound, h)?, self.omega)?;
        let f = self.ffn2.forward(bound, f)?;
        self.norm2.forward(bound, h.add(f)?)
    }
}

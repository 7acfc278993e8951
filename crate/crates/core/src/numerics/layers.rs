//! Differentiable building blocks composed from tape ops.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{uniform_init, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// `y = x·W + b` with `W: [in, out]`, `b: [out]`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

impl AffineVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: g.param_named(store, &format!("{prefix}.w"))?,
            b: g.param_named(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        affine(g, x, self.w, self.b)
    }
}

pub fn register_affine<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), uniform_init(rng, &[d_in, d_out], d_in))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

/// GRU weights; each gate matrix acts on the concatenation `[x, h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub update: AffineVars,
    pub reset: AffineVars,
    pub candidate: AffineVars,
}

impl GruVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            update: AffineVars::bind(g, store, &format!("{prefix}.z"))?,
            reset: AffineVars::bind(g, store, &format!("{prefix}.r"))?,
            candidate: AffineVars::bind(g, store, &format!("{prefix}.h"))?,
        })
    }
}

pub fn register_gru<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_h: usize,
) -> Result<()> {
    for gate in ["z", "r", "h"] {
        register_affine(store, rng, &format!("{prefix}.{gate}"), d_in + d_h, d_h)?;
    }
    Ok(())
}

/// One GRU step on `[1, d_in]` input and `[1, d_h]` state:
/// `z = σ(W_z[x,h] + b_z)`, `r = σ(W_r[x,h] + b_r)`,
/// `ĥ = tanh(W_h[x, r⊙h] + b_h)`, `h' = (1 − z)⊙h + z⊙ĥ`.
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let xh = g.concat(&[x, h])?;
    let z_pre = p.update.forward(g, xh)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = p.reset.forward(g, xh)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let xrh = g.concat(&[x, rh])?;
    let c_pre = p.candidate.forward(g, xrh)?;
    let cand = g.tanh(c_pre)?;
    let keep = g.one_minus(z)?;
    let kept = g.mul(keep, h)?;
    let fresh = g.mul(z, cand)?;
    g.add(kept, fresh)
}

/// Two affine layers with a tanh hidden activation.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2Vars {
    pub first: AffineVars,
    pub second: AffineVars,
}

impl Mlp2Vars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            first: AffineVars::bind(g, store, &format!("{prefix}.l1"))?,
            second: AffineVars::bind(g, store, &format!("{prefix}.l2"))?,
        })
    }
}

pub fn register_mlp2<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) -> Result<()> {
    register_affine(store, rng, &format!("{prefix}.l1"), d_in, d_hidden)?;
    register_affine(store, rng, &format!("{prefix}.l2"), d_hidden, d_out)
}

pub fn mlp2(g: &mut Graph, x: Var, p: &Mlp2Vars) -> Result<Var> {
    let h = p.first.forward(g, x)?;
    let h = g.tanh(h)?;
    p.second.forward(g, h)
}

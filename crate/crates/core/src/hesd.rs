//! History-enhanced scanpath decoder.
//!
//! Previously fixated positions are run through a GRU, the final state is
//! concatenated with the context state `H_j`, and three independent
//! two-layer MLPs emit `X`, `Y` and validity `V` for all `lp` slots of pack
//! `j`. The linear head is the history-free ablation.

use rand::Rng;

use crate::context::{self, ContextVars};
use crate::domain::{FixationPack, ModelConfig, Scanpath};
use crate::error::{shape_err, Result};
use crate::numerics::{
    gru_cell, mlp2, register_affine, register_gru, register_mlp2, AffineVars, Graph, GruVars, Mlp2Vars, ParamStore,
    Tensor, Var,
};
use crate::packcodec::{decode_pack, history_row, HISTORY_WIDTH};

pub const HISTORY_GRU: &str = "hesd.gru";
pub const HEAD_X: &str = "hesd.x";
pub const HEAD_Y: &str = "hesd.y";
pub const HEAD_V: &str = "hesd.v";
pub const LINEAR: &str = "linear";

pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<()> {
    if cfg.ablation.no_hesd {
        return register_affine(store, rng, LINEAR, cfg.d_ctx, 3 * cfg.lp);
    }
    register_gru(store, rng, HISTORY_GRU, HISTORY_WIDTH, cfg.d_hist)?;
    // early fusion feeds history into the encoder instead of the heads
    let d_in = if cfg.ablation.early_fusion {
        cfg.d_ctx
    } else {
        cfg.d_ctx + cfg.d_hist
    };
    for head in [HEAD_X, HEAD_Y, HEAD_V] {
        register_mlp2(store, rng, head, d_in, cfg.d_mlp, cfg.lp)?;
    }
    Ok(())
}

/// Sigmoid outputs for the `lp` slots of one pack, each `[1, lp]`.
#[derive(Clone, Copy, Debug)]
pub struct PackVars {
    pub x: Var,
    pub y: Var,
    pub v: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackPrediction {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl PackVars {
    pub fn values(&self, g: &Graph) -> PackPrediction {
        PackPrediction {
            x: g.value(self.x).data().to_vec(),
            y: g.value(self.y).data().to_vec(),
            v: g.value(self.v).data().to_vec(),
        }
    }
}

impl PackPrediction {
    pub fn decode(&self, threshold: f64) -> FixationPack {
        decode_pack(&self.x, &self.y, &self.v, threshold)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HistoryVars {
    pub gru: GruVars,
    pub d_hist: usize,
}

impl HistoryVars {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        let gru = GruVars::bind(g, store, HISTORY_GRU)?;
        let d_hist = store.get(&format!("{HISTORY_GRU}.z.b"))?.len();
        Ok(Self { gru, d_hist })
    }

    pub fn zero_state(&self, g: &mut Graph) -> Result<Var> {
        g.input(Tensor::row(vec![0.0; self.d_hist]))
    }

    pub fn feed(&self, g: &mut Graph, h: Var, row: [f64; HISTORY_WIDTH]) -> Result<Var> {
        let x = g.input(Tensor::row(row.to_vec()))?;
        gru_cell(g, x, h, &self.gru)
    }
}

/// Final GRU state over the rows of `history` (`[L_h, 4]`), starting from
/// zero. No rows gives the zero vector.
pub fn history_encode(g: &mut Graph, store: &ParamStore, history: &Tensor) -> Result<Var> {
    let (n, w) = match history.shape() {
        [n, w] => (*n, *w),
        s => return Err(shape_err("history_encode", format!("expected [L_h, 4], got {s:?}"))),
    };
    if w != HISTORY_WIDTH {
        return Err(shape_err("history_encode", format!("row width {w} ≠ 4")));
    }
    let vars = HistoryVars::bind(g, store)?;
    let mut h = vars.zero_state(g)?;
    for r in 0..n {
        let row: [f64; HISTORY_WIDTH] = history.row_slice(r).try_into().expect("width checked");
        h = vars.feed(g, h, row)?;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub x: Mlp2Vars,
    pub y: Mlp2Vars,
    pub v: Mlp2Vars,
}

impl HeadVars {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            x: Mlp2Vars::bind(g, store, HEAD_X)?,
            y: Mlp2Vars::bind(g, store, HEAD_Y)?,
            v: Mlp2Vars::bind(g, store, HEAD_V)?,
        })
    }
}

/// Heads applied to `[H_j, h_hist]`, or to `H_j` alone when `h_hist` is
/// `None` (early fusion already folded history into `H_j`).
pub fn predict_pack(g: &mut Graph, heads: &HeadVars, h_j: Var, h_hist: Option<Var>) -> Result<PackVars> {
    let fused = match h_hist {
        Some(h) => g.concat(&[h_j, h])?,
        None => h_j,
    };
    let x = mlp2(g, fused, &heads.x)?;
    let y = mlp2(g, fused, &heads.y)?;
    let v = mlp2(g, fused, &heads.v)?;
    Ok(PackVars {
        x: g.sigmoid(x)?,
        y: g.sigmoid(y)?,
        v: g.sigmoid(v)?,
    })
}

/// One affine map to `3·lp` outputs split into X, Y and V thirds.
pub fn predict_pack_linear(g: &mut Graph, linear: &AffineVars, h_j: Var, lp: usize) -> Result<PackVars> {
    let out = linear.forward(g, h_j)?;
    let x = g.slice_cols(out, 0, lp)?;
    let y = g.slice_cols(out, lp, lp)?;
    let v = g.slice_cols(out, 2 * lp, lp)?;
    Ok(PackVars {
        x: g.sigmoid(x)?,
        y: g.sigmoid(y)?,
        v: g.sigmoid(v)?,
    })
}

/// The scanpath plus the raw head outputs for every pack.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub scanpath: Scanpath,
    pub raw: Vec<PackPrediction>,
}

/// Autoregressive inference over packs `0..=L+1`. `tokens` carries the BOT
/// and EOT sentinels. History for pack `j` is built from the packs already
/// decoded for `0..j`.
pub fn predict_scanpath(store: &ParamStore, cfg: &ModelConfig, patches: &[f64], tokens: &[usize]) -> Result<Inference> {
    let mut g = Graph::new();
    let img = context::image_feature(&mut g, store, patches)?;
    let mut packs = Vec::with_capacity(tokens.len());
    let mut raw = Vec::with_capacity(tokens.len());

    if cfg.ablation.no_hesd {
        let states = context::encode_context(&mut g, store, img, tokens)?;
        let linear = AffineVars::bind(&mut g, store, LINEAR)?;
        for h_j in states {
            let pv = predict_pack_linear(&mut g, &linear, h_j, cfg.lp)?.values(&g);
            packs.push(pv.decode(cfg.decode_threshold));
            raw.push(pv);
        }
        return Ok(Inference {
            scanpath: Scanpath::new(packs),
            raw,
        });
    }

    let hist = HistoryVars::bind(&mut g, store)?;
    let heads = HeadVars::bind(&mut g, store)?;
    let mut h_hist = hist.zero_state(&mut g)?;

    if cfg.ablation.early_fusion {
        let ctx = ContextVars::bind(&mut g, store)?;
        let mut h = ctx.initial_state(&mut g)?;
        for (j, &t) in tokens.iter().enumerate() {
            h = ctx.step(&mut g, img, t, h, Some(h_hist))?;
            let pv = predict_pack(&mut g, &heads, h, None)?.values(&g);
            let pack = pv.decode(cfg.decode_threshold);
            for (i, fx) in pack.fixations.iter().enumerate() {
                h_hist = hist.feed(&mut g, h_hist, history_row(*fx, j, i, cfg.lp))?;
            }
            packs.push(pack);
            raw.push(pv);
        }
    } else {
        let states = context::encode_context(&mut g, store, img, tokens)?;
        for (j, &h_j) in states.iter().enumerate() {
            let pv = predict_pack(&mut g, &heads, h_j, Some(h_hist))?.values(&g);
            let pack = pv.decode(cfg.decode_threshold);
            for (i, fx) in pack.fixations.iter().enumerate() {
                h_hist = hist.feed(&mut g, h_hist, history_row(*fx, j, i, cfg.lp))?;
            }
            packs.push(pack);
            raw.push(pv);
        }
    }
    Ok(Inference {
        scanpath: Scanpath::new(packs),
        raw,
    })
}

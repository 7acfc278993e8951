//! The three-term objective `L_total = L_txt + L_xy + L_token`.

use serde::{Deserialize, Serialize};

use crate::context;
use crate::domain::ModelConfig;
use crate::error::Result;
use crate::hesd::{self, HeadVars, HistoryVars, PackVars};
use crate::model::PreparedTrial;
use crate::numerics::{AffineVars, Graph, ParamStore, Tensor, Var};
use crate::packcodec::EncodedPack;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_txt: f64,
    pub l_xy: f64,
    pub l_token: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for l in items {
            acc.l_txt += l.l_txt;
            acc.l_xy += l.l_xy;
            acc.l_token += l.l_token;
            acc.l_total += l.l_total;
        }
        LossBreakdown {
            l_txt: acc.l_txt / n,
            l_xy: acc.l_xy / n,
            l_token: acc.l_token / n,
            l_total: acc.l_total / n,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub txt: Var,
    pub xy: Var,
    pub token: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_txt: g.scalar(self.txt),
            l_xy: g.scalar(self.xy),
            l_token: g.scalar(self.token),
            l_total: g.scalar(self.total),
        }
    }
}

/// Mean next-token cross-entropy: state `j` predicts token `j + 1` for
/// `j = 0..=L`. `tokens` includes the sentinels.
pub fn loss_txt(g: &mut Graph, store: &ParamStore, states: &[Var], tokens: &[usize]) -> Result<Var> {
    let positions = tokens.len() - 1;
    let rows = g.stack_rows(&states[..positions])?;
    let logits = context::next_token_logits(g, store, rows)?;
    let ce = g.cross_entropy_sum(logits, &tokens[1..])?;
    g.scale(ce, 1.0 / positions as f64)
}

/// L1 (or squared, with `use_l2`) coordinate error over valid ground-truth
/// slots, divided by the number of valid slots. Zero when there are none.
pub fn loss_xy(g: &mut Graph, preds: &[PackVars], targets: &[EncodedPack], use_l2: bool) -> Result<Var> {
    let valid: usize = targets.iter().map(EncodedPack::valid_count).sum();
    if valid == 0 {
        return g.input(Tensor::scalar(0.0));
    }
    let mut total: Option<Var> = None;
    for (p, t) in preds.iter().zip(targets) {
        if t.valid_count() == 0 {
            continue;
        }
        let (lx, ly) = if use_l2 {
            (
                g.masked_sq_sum(p.x, &t.xs(), &t.validity)?,
                g.masked_sq_sum(p.y, &t.ys(), &t.validity)?,
            )
        } else {
            (
                g.masked_abs_sum(p.x, &t.xs(), &t.validity)?,
                g.masked_abs_sum(p.y, &t.ys(), &t.validity)?,
            )
        };
        let s = g.add(lx, ly)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one valid pack");
    g.scale(total, 1.0 / valid as f64)
}

/// Mean focal loss over every slot of every pack, PAD slots included.
pub fn loss_token(g: &mut Graph, preds: &[PackVars], targets: &[EncodedPack], alpha: Option<f64>, gamma: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut slots = 0;
    for (p, t) in preds.iter().zip(targets) {
        let f = g.focal_sum(p.v, &t.validity, alpha, gamma)?;
        slots += t.validity.len();
        total = Some(match total {
            Some(acc) => g.add(acc, f)?,
            None => f,
        });
    }
    match total {
        Some(t) => g.scale(t, 1.0 / slots as f64),
        None => g.input(Tensor::scalar(0.0)),
    }
}

pub struct TrialForward {
    pub losses: LossVars,
    pub packs: Vec<PackVars>,
}

/// Teacher-forced forward pass for one trial: history for pack `j` comes
/// from ground-truth packs `0..j`.
pub fn forward_trial(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, trial: &PreparedTrial) -> Result<TrialForward> {
    let img = context::image_feature(g, store, &trial.patches)?;
    let tokens = &trial.tokens;

    let (states, packs) = if cfg.ablation.no_hesd {
        let states = context::encode_context(g, store, img, tokens)?;
        let linear = AffineVars::bind(g, store, hesd::LINEAR)?;
        let packs = states
            .iter()
            .map(|&h| hesd::predict_pack_linear(g, &linear, h, cfg.lp))
            .collect::<Result<Vec<_>>>()?;
        (states, packs)
    } else {
        let hist = HistoryVars::bind(g, store)?;
        let heads = HeadVars::bind(g, store)?;
        let mut h = hist.zero_state(g)?;
        let mut before = Vec::with_capacity(tokens.len());
        for j in 0..tokens.len() {
            before.push(h);
            if j + 1 < tokens.len() {
                for row in &trial.history[j] {
                    h = hist.feed(g, h, *row)?;
                }
            }
        }
        if cfg.ablation.early_fusion {
            let states = context::encode_context_early_fusion(g, store, img, tokens, &before)?;
            let packs = states
                .iter()
                .map(|&s| hesd::predict_pack(g, &heads, s, None))
                .collect::<Result<Vec<_>>>()?;
            (states, packs)
        } else {
            let states = context::encode_context(g, store, img, tokens)?;
            let packs = states
                .iter()
                .zip(&before)
                .map(|(&s, &hh)| hesd::predict_pack(g, &heads, s, Some(hh)))
                .collect::<Result<Vec<_>>>()?;
            (states, packs)
        }
    };

    let txt = if cfg.ablation.no_txt_loss {
        g.input(Tensor::scalar(0.0))?
    } else {
        loss_txt(g, store, &states, tokens)?
    };
    let xy = loss_xy(g, &packs, &trial.targets, cfg.ablation.use_l2_xy)?;
    let token = loss_token(g, &packs, &trial.targets, Some(cfg.focal_alpha), cfg.focal_gamma)?;
    let partial = g.add(txt, xy)?;
    let total = g.add(partial, token)?;
    Ok(TrialForward {
        losses: LossVars { txt, xy, token, total },
        packs,
    })
}

/// Fraction of slots whose thresholded validity matches the target.
pub fn slot_accuracy(g: &Graph, packs: &[PackVars], targets: &[EncodedPack], threshold: f64) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (p, t) in packs.iter().zip(targets) {
        for (v, y) in g.value(p.v).data().iter().zip(&t.validity) {
            total += 1;
            if (*v >= threshold) == (*y > 0.5) {
                correct += 1;
            }
        }
    }
    (correct, total)
}

use serde::{Deserialize, Serialize};

use crate::domain::{Fixation, IMAGE_H, IMAGE_W};
use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// Grid and smoothing used for fixation maps. The default 65×39 grid has
/// 8-pixel cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub gx: usize,
    pub gy: usize,
    pub sigma_px: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            gx: 65,
            gy: 39,
            sigma_px: 16.0,
        }
    }
}

impl SaliencyConfig {
    fn cell(&self, f: &Fixation) -> (usize, usize) {
        let col = ((f.x * self.gx as f64).floor().max(0.0) as usize).min(self.gx - 1);
        let row = ((f.y * self.gy as f64).floor().max(0.0) as usize).min(self.gy - 1);
        (col, row)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `[gy, gx]`, all entries ≥ 0.
    pub grid: Tensor,
    pub config: SaliencyConfig,
}

/// Unit impulse per fixation at its cell center, smoothed by an
/// unnormalized isotropic Gaussian cut off beyond 3σ.
pub fn saliency_map(fixations: &[Fixation], cfg: SaliencyConfig) -> SaliencyMap {
    let (gx, gy) = (cfg.gx, cfg.gy);
    let mut grid = Tensor::zeros(&[gy, gx]);
    let cell_w = IMAGE_W as f64 / gx as f64;
    let cell_h = IMAGE_H as f64 / gy as f64;
    let reach = 3.0 * cfg.sigma_px;
    let rx = (reach / cell_w).ceil() as isize;
    let ry = (reach / cell_h).ceil() as isize;
    let data = grid.data_mut();
    for f in fixations {
        let (c0, r0) = cfg.cell(f);
        for dr in -ry..=ry {
            let r = r0 as isize + dr;
            if r < 0 || r >= gy as isize {
                continue;
            }
            for dc in -rx..=rx {
                let c = c0 as isize + dc;
                if c < 0 || c >= gx as isize {
                    continue;
                }
                let (px, py) = (dc as f64 * cell_w, dr as f64 * cell_h);
                let d2 = px * px + py * py;
                if d2 > reach * reach {
                    continue;
                }
                data[r as usize * gx + c as usize] += (-d2 / (2.0 * cfg.sigma_px * cfg.sigma_px)).exp();
            }
        }
    }
    SaliencyMap { grid, config: cfg }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation over cells; 0 when either map is constant.
pub fn cc(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if a.grid.shape() != b.grid.shape() {
        return Err(shape_err(
            "cc",
            format!("grids {:?} and {:?}", a.grid.shape(), b.grid.shape()),
        ));
    }
    let (x, y) = (a.grid.data(), b.grid.data());
    let (mx, my) = (mean_std(x).0, mean_std(y).0);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        let (dp, dq) = (p - mx, q - my);
        sxy += dp * dq;
        sxx += dp * dp;
        syy += dq * dq;
    }
    if sxx == 0.0 || syy == 0.0 || is_constant(x) || is_constant(y) {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

// Rounding in the mean can leave a tiny nonzero spread on a constant map.
fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Mean z-scored prediction at the cells of the ground-truth fixations;
/// `None` for an empty ground truth.
pub fn nss(pred: &SaliencyMap, gt: &[Fixation]) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let data = pred.grid.data();
    let (mean, std) = mean_std(data);
    if std == 0.0 || is_constant(data) {
        return Some(0.0);
    }
    let cfg = pred.config;
    let total: f64 = gt
        .iter()
        .map(|f| {
            let (c, r) = cfg.cell(f);
            (data[r * cfg.gx + c] - mean) / std
        })
        .sum();
    Some(total / gt.len() as f64)
}

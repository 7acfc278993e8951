//! Stand-in for the vision-language fusion stack: image patch statistics and
//! token embeddings run through a unidirectional GRU, so the state for token
//! `j` only ever sees the image and tokens `0..=j`.

use rand::Rng;

use crate::domain::{ImageRaster, CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{
    gru_cell, register_affine, register_gru, uniform_init, AffineVars, Graph, GruVars, ParamStore, Tensor, Var,
};

pub const PATCH_GRID: usize = 8;
pub const PATCH_FEATURES: usize = PATCH_GRID * PATCH_GRID * CHANNELS;

pub const IMG: &str = "ctx.img";
pub const EMB: &str = "ctx.emb";
pub const GRU: &str = "ctx.gru";
pub const NEXT: &str = "ctx.next";
pub const FUSION: &str = "fusion.w";

/// Per-patch channel means on an 8×8 grid, patch-major then channel.
pub fn patch_means(image: &ImageRaster) -> Result<Vec<f64>> {
    let (h, w) = (image.height(), image.width());
    if h % PATCH_GRID != 0 || w % PATCH_GRID != 0 || h == 0 || w == 0 {
        return Err(Error::Range(format!("raster {h}x{w} is not divisible into an 8x8 patch grid")));
    }
    let (ph, pw) = (h / PATCH_GRID, w / PATCH_GRID);
    let mut sums = vec![0u64; PATCH_FEATURES];
    let bytes = image.bytes();
    for r in 0..h {
        let pr = r / ph;
        for c in 0..w {
            let base = (pr * PATCH_GRID + c / pw) * CHANNELS;
            let px = (r * w + c) * CHANNELS;
            for ch in 0..CHANNELS {
                sums[base + ch] += u64::from(bytes[px + ch]);
            }
        }
    }
    let denom = (ph * pw) as f64 * 255.0;
    Ok(sums.into_iter().map(|s| s as f64 / denom).collect())
}

pub fn register<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &crate::domain::ModelConfig,
) -> Result<()> {
    register_affine(store, rng, IMG, PATCH_FEATURES, cfg.d_img)?;
    store.insert(EMB, uniform_init(rng, &[cfg.vocab_size, cfg.d_emb], 1))?;
    register_gru(store, rng, GRU, cfg.d_emb + cfg.d_img, cfg.d_ctx)?;
    register_affine(store, rng, NEXT, cfg.d_ctx, cfg.vocab_size)?;
    if cfg.ablation.early_fusion {
        store.insert(FUSION, uniform_init(rng, &[cfg.d_hist, cfg.d_emb], cfg.d_hist))?;
    }
    Ok(())
}

/// `[1, d_img]` affine map of the patch statistics.
pub fn image_feature(g: &mut Graph, store: &ParamStore, patches: &[f64]) -> Result<Var> {
    let x = g.input(Tensor::row(patches.to_vec()))?;
    AffineVars::bind(g, store, IMG)?.forward(g, x)
}

/// Bound parameters of the recurrent encoder.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub emb: Var,
    pub gru: GruVars,
    pub fusion: Option<Var>,
    pub d_ctx: usize,
}

impl ContextVars {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        let emb = g.param_named(store, EMB)?;
        let gru = GruVars::bind(g, store, GRU)?;
        let fusion = if store.contains(FUSION) {
            Some(g.param_named(store, FUSION)?)
        } else {
            None
        };
        let d_ctx = store.get(&format!("{GRU}.z.b"))?.len();
        Ok(Self { emb, gru, fusion, d_ctx })
    }

    pub fn initial_state(&self, g: &mut Graph) -> Result<Var> {
        g.input(Tensor::row(vec![0.0; self.d_ctx]))
    }

    /// Consumes one token. `history`, when given, is projected to the
    /// embedding width and added to the token embedding.
    pub fn step(&self, g: &mut Graph, img: Var, token: usize, h_prev: Var, history: Option<Var>) -> Result<Var> {
        let mut e = g.gather(self.emb, &[token])?;
        if let Some(hist) = history {
            let w = self
                .fusion
                .ok_or_else(|| Error::Config("early fusion projection is not part of this model".into()))?;
            let proj = g.matmul(hist, w)?;
            e = g.add(e, proj)?;
        }
        let x = g.concat(&[e, img])?;
        gru_cell(g, x, h_prev, &self.gru)
    }
}

/// `H_0..H_{L+1}` as `[1, d_ctx]` rows; `tokens` includes BOT and EOT.
pub fn encode_context(g: &mut Graph, store: &ParamStore, img: Var, tokens: &[usize]) -> Result<Vec<Var>> {
    let vars = ContextVars::bind(g, store)?;
    let mut h = vars.initial_state(g)?;
    let mut states = Vec::with_capacity(tokens.len());
    for &t in tokens {
        h = vars.step(g, img, t, h, None)?;
        states.push(h);
    }
    Ok(states)
}

/// As [`encode_context`], with `history[j]` added to token `j`'s embedding.
pub fn encode_context_early_fusion(
    g: &mut Graph,
    store: &ParamStore,
    img: Var,
    tokens: &[usize],
    history: &[Var],
) -> Result<Vec<Var>> {
    if history.len() != tokens.len() {
        return Err(crate::error::shape_err(
            "encode_context_early_fusion",
            format!("{} tokens, {} history rows", tokens.len(), history.len()),
        ));
    }
    let vars = ContextVars::bind(g, store)?;
    let mut h = vars.initial_state(g)?;
    let mut states = Vec::with_capacity(tokens.len());
    for (&t, &hist) in tokens.iter().zip(history) {
        h = vars.step(g, img, t, h, Some(hist))?;
        states.push(h);
    }
    Ok(states)
}

pub fn next_token_logits(g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
    AffineVars::bind(g, store, NEXT)?.forward(g, h)
}

/// Stacks state rows into the `[L+2, d_ctx]` context tensor.
pub fn states_tensor(g: &Graph, states: &[Var]) -> Tensor {
    let d = states.first().map(|s| g.value(*s).len()).unwrap_or(0);
    let data = states.iter().flat_map(|s| g.value(*s).data().iter().copied()).collect();
    Tensor::new(vec![states.len(), d], data).expect("rows of equal width")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::domain::{ModelConfig, IMAGE_H, IMAGE_W};
    use crate::numerics::{grad_check, GradCheckConfig};

    fn small_cfg(early: bool) -> ModelConfig {
        let mut c = ModelConfig {
            d_ctx: 6,
            d_hist: 3,
            d_mlp: 5,
            d_emb: 4,
            d_img: 3,
            vocab_size: 9,
            ..ModelConfig::default()
        };
        c.ablation.early_fusion = early;
        c
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        register(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), cfg).unwrap();
        s
    }

    fn feature(s: &ParamStore, image: &ImageRaster) -> Tensor {
        let mut g = Graph::new();
        let p = patch_means(image).unwrap();
        let v = image_feature(&mut g, s, &p).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_feature() {
        let s = store(&small_cfg(false), 1);
        let f = feature(&s, &ImageRaster::filled(IMAGE_H, IMAGE_W, [0, 0, 0]));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_pixel_changes_the_feature() {
        let s = store(&small_cfg(false), 2);
        let a = ImageRaster::filled(IMAGE_H, IMAGE_W, [10, 20, 30]);
        let mut b = a.clone();
        b.set_rgb(100, 200, [255, 20, 30]);
        assert_ne!(feature(&s, &a), feature(&s, &b));
    }

    #[test]
    fn constant_images_are_related_affinely() {
        let s = store(&small_cfg(false), 3);
        let half = patch_means(&ImageRaster::filled(IMAGE_H, IMAGE_W, [51, 51, 51])).unwrap();
        let full = patch_means(&ImageRaster::filled(IMAGE_H, IMAGE_W, [255, 255, 255])).unwrap();
        assert!(half.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(full.iter().all(|&v| v == 1.0));
        // zero bias: feature(c·1) = c·W^T 1, so f(0.2) = 0.2 f(1)
        let f_half = feature(&s, &ImageRaster::filled(IMAGE_H, IMAGE_W, [51, 51, 51]));
        let f_full = feature(&s, &ImageRaster::filled(IMAGE_H, IMAGE_W, [255, 255, 255]));
        for (a, b) in f_half.data().iter().zip(f_full.data()) {
            assert!((a - 0.2 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dims_are_rejected() {
        assert!(patch_means(&ImageRaster::filled(10, 10, [0, 0, 0])).is_err());
    }

    fn run(s: &ParamStore, patches: &[f64], tokens: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let img = image_feature(&mut g, s, patches).unwrap();
        let states = encode_context(&mut g, s, img, tokens).unwrap();
        states_tensor(&g, &states)
    }

    #[test]
    fn states_are_prefix_causal() {
        let cfg = small_cfg(false);
        let s = store(&cfg, 4);
        let patches: Vec<f64> = (0..PATCH_FEATURES).map(|i| (i % 7) as f64 / 7.0).collect();
        let a = run(&s, &patches, &[0, 3, 4, 5, 1]);
        let b = run(&s, &patches, &[0, 3, 8, 5, 1]);
        assert_eq!(a.shape(), &[5, 6]);
        assert_eq!(a.row_slice(0), b.row_slice(0));
        assert_eq!(a.row_slice(1), b.row_slice(1));
        assert_ne!(a.row_slice(2), b.row_slice(2));
    }

    #[test]
    fn different_images_change_every_state() {
        let s = store(&small_cfg(false), 5);
        let p1: Vec<f64> = (0..PATCH_FEATURES).map(|i| (i % 5) as f64 / 5.0).collect();
        let p2: Vec<f64> = (0..PATCH_FEATURES).map(|i| (i % 3) as f64 / 3.0).collect();
        let a = run(&s, &p1, &[0, 3, 1]);
        let b = run(&s, &p2, &[0, 3, 1]);
        assert_eq!(a.shape(), &[3, 6]);
        for r in 0..3 {
            assert_ne!(a.row_slice(r), b.row_slice(r));
        }
    }

    #[test]
    fn out_of_vocab_token_is_an_error() {
        let s = store(&small_cfg(false), 6);
        let mut g = Graph::new();
        let img = image_feature(&mut g, &s, &vec![0.5; PATCH_FEATURES]).unwrap();
        assert!(matches!(
            encode_context(&mut g, &s, img, &[0, 9, 1]),
            Err(Error::Token { id: 9, vocab: 9 })
        ));
    }

    #[test]
    fn zero_logits_are_uniform() {
        let mut s = store(&small_cfg(false), 7);
        for n in [format!("{NEXT}.w"), format!("{NEXT}.b")] {
            let id = s.id(&n).unwrap();
            s.value_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let h = g.input(Tensor::row(vec![0.0; 6])).unwrap();
        let l = next_token_logits(&mut g, &s, h).unwrap();
        assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        let ce = g.cross_entropy_sum(l, &[4]).unwrap();
        assert!((g.scalar(ce) - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_has_lower_cross_entropy() {
        let mut g = Graph::new();
        let l = g.input(Tensor::new(vec![1, 4], vec![0.1, 3.0, -0.2, 0.4]).unwrap()).unwrap();
        let right = g.cross_entropy_sum(l, &[1]).unwrap();
        let right = g.scalar(right);
        for other in [0, 2, 3] {
            let wrong = g.cross_entropy_sum(l, &[other]).unwrap();
            assert!(right < g.scalar(wrong));
        }
    }

    #[test]
    fn zero_history_matches_plain_encoder() {
        let cfg = small_cfg(true);
        let s = store(&cfg, 8);
        let patches = vec![0.3; PATCH_FEATURES];
        let tokens = [0, 3, 4, 1];
        let plain = run(&s, &patches, &tokens);
        let mut g = Graph::new();
        let img = image_feature(&mut g, &s, &patches).unwrap();
        let hist: Vec<Var> = (0..4).map(|_| g.input(Tensor::row(vec![0.0; 3])).unwrap()).collect();
        let states = encode_context_early_fusion(&mut g, &s, img, &tokens, &hist).unwrap();
        assert_eq!(states_tensor(&g, &states), plain);
    }

    #[test]
    fn history_at_row_k_leaves_earlier_rows_alone() {
        let cfg = small_cfg(true);
        let s = store(&cfg, 9);
        let patches = vec![0.3; PATCH_FEATURES];
        let tokens = [0, 3, 4, 5, 1];
        let plain = run(&s, &patches, &tokens);
        let mut g = Graph::new();
        let img = image_feature(&mut g, &s, &patches).unwrap();
        let hist: Vec<Var> = (0..5)
            .map(|j| {
                let v = if j == 2 { vec![0.5, -0.4, 0.9] } else { vec![0.0; 3] };
                g.input(Tensor::row(v)).unwrap()
            })
            .collect();
        let states = encode_context_early_fusion(&mut g, &s, img, &tokens, &hist).unwrap();
        let fused = states_tensor(&g, &states);
        assert_eq!(fused.row_slice(0), plain.row_slice(0));
        assert_eq!(fused.row_slice(1), plain.row_slice(1));
        assert_ne!(fused.row_slice(2), plain.row_slice(2));
    }

    #[test]
    fn context_gradients_match_finite_differences() {
        let cfg = small_cfg(true);
        let mut s = store(&cfg, 10);
        s.insert("hist", crate::numerics::uniform_init(&mut ChaCha8Rng::seed_from_u64(11), &[3, 3], 1))
            .unwrap();
        let patches: Vec<f64> = (0..PATCH_FEATURES).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let report = grad_check(
            &s,
            |g, s| {
                let img = image_feature(g, s, &patches)?;
                let hist = g.param_named(s, "hist")?;
                let rows: Vec<Var> = (0..3).map(|r| g.row(hist, r)).collect::<Result<_>>()?;
                let states = encode_context_early_fusion(g, s, img, &[0, 5, 1], &rows)?;
                let stacked = g.concat(&states)?;
                let lg = next_token_logits(g, s, states[1])?;
                let ce = g.cross_entropy_sum(lg, &[1])?;
                let t = g.tanh(stacked)?;
                let t = g.sum(t)?;
                g.add(ce, t)
            },
            &GradCheckConfig {
                tol: 1e-5,
                full_check_limit: 10_000,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }
}

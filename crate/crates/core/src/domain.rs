//! Trials, expressions, fixations and the model configuration shared by
//! every other module.
//!
//! Coordinates are normalized to `[0, 1]` in memory. Pixel conversion only
//! happens at file boundaries and in the renderer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_H: usize = 312;
pub const IMAGE_W: usize = 520;
pub const CHANNELS: usize = 3;

pub const BOT_ID: usize = 0;
pub const EOT_ID: usize = 1;
pub const UNK_ID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_range(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixationPack {
    pub fixations: Vec<Fixation>,
}

impl FixationPack {
    pub fn new(fixations: Vec<Fixation>) -> Self {
        Self { fixations }
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    /// First `n` fixations, the truncation applied at the codec boundary.
    pub fn truncated(&self, n: usize) -> FixationPack {
        FixationPack::new(self.fixations.iter().take(n).copied().collect())
    }
}

/// Packs for BOT, w_1..w_L and EOT, in that order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub packs: Vec<FixationPack>,
}

impl Scanpath {
    pub fn new(packs: Vec<FixationPack>) -> Self {
        Self { packs }
    }

    pub fn fixation_count(&self) -> usize {
        self.packs.iter().map(FixationPack::len).sum()
    }

    /// All fixations in temporal order.
    pub fn flatten(&self) -> Vec<Fixation> {
        self.packs.iter().flat_map(|p| p.fixations.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferringExpression {
    pub token_ids: Vec<usize>,
    pub raw_words: Vec<String>,
}

impl ReferringExpression {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Token ids with the BOT/EOT sentinels attached, length L+2.
    pub fn with_sentinels(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.token_ids.len() + 2);
        ids.push(BOT_ID);
        ids.extend_from_slice(&self.token_ids);
        ids.push(EOT_ID);
        ids
    }

    pub fn prefix(&self, k: usize) -> ReferringExpression {
        ReferringExpression {
            token_ids: self.token_ids[..k].to_vec(),
            raw_words: self.raw_words[..k].to_vec(),
        }
    }
}

/// RGB raster stored as bytes; channel values read back as `byte / 255`.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for ImageRaster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageRaster")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl ImageRaster {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_bytes(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Range(format!(
                "raster of {}x{} needs {} bytes, got {}",
                height,
                width,
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        f64::from(self.data[(row * self.width + col) * CHANNELS + ch]) / 255.0
    }

    pub fn set_rgb(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, r0: usize, c0: usize, r1: usize, c1: usize, rgb: [u8; 3]) {
        for r in r0..r1.min(self.height) {
            for c in c0..c1.min(self.width) {
                self.set_rgb(r, c, rgb);
            }
        }
    }
}

/// Axis-aligned box in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TargetBox {
    pub fn center(&self) -> Fixation {
        Fixation::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trial_id: String,
    pub image: ImageRaster,
    pub expression: ReferringExpression,
    pub gt_scanpath: Scanpath,
    pub target_box: Option<TargetBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    ImageDims { height: usize, width: usize },
    EmptyExpression,
    PackCount { packs: usize, words: usize },
    TokenOutOfVocab { position: usize, id: usize },
    SentinelInExpression { position: usize, id: usize },
    WordCount { ids: usize, words: usize },
    FixationX { pack: usize, index: usize, value: f64 },
    FixationY { pack: usize, index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ImageDims { height, width } => {
                write!(f, "image dims {height}x{width} ≠ {IMAGE_H}x{IMAGE_W}")
            }
            Violation::EmptyExpression => write!(f, "expression is empty"),
            Violation::PackCount { packs, words } => {
                write!(f, "pack count {packs} ≠ {words}+2")
            }
            Violation::TokenOutOfVocab { position, id } => {
                write!(f, "token {id} at position {position} is outside the vocabulary")
            }
            Violation::SentinelInExpression { position, id } => {
                write!(f, "sentinel token {id} inside expression at position {position}")
            }
            Violation::WordCount { ids, words } => {
                write!(f, "{ids} token ids but {words} words")
            }
            Violation::FixationX { pack, index, value } => {
                write!(f, "fixation x out of [0,1] (pack {pack}, fixation {index}, x = {value})")
            }
            Violation::FixationY { pack, index, value } => {
                write!(f, "fixation y out of [0,1] (pack {pack}, fixation {index}, y = {value})")
            }
        }
    }
}

/// Reports every invariant violation of `trial`; an empty list means valid.
pub fn validate_trial(trial: &Trial, vocab_size: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if trial.image.height() != IMAGE_H || trial.image.width() != IMAGE_W {
        out.push(Violation::ImageDims {
            height: trial.image.height(),
            width: trial.image.width(),
        });
    }
    let expr = &trial.expression;
    if expr.is_empty() {
        out.push(Violation::EmptyExpression);
    }
    if expr.raw_words.len() != expr.token_ids.len() {
        out.push(Violation::WordCount {
            ids: expr.token_ids.len(),
            words: expr.raw_words.len(),
        });
    }
    for (position, &id) in expr.token_ids.iter().enumerate() {
        if id == BOT_ID || id == EOT_ID {
            out.push(Violation::SentinelInExpression { position, id });
        } else if id >= vocab_size {
            out.push(Violation::TokenOutOfVocab { position, id });
        }
    }
    if trial.gt_scanpath.packs.len() != expr.len() + 2 {
        out.push(Violation::PackCount {
            packs: trial.gt_scanpath.packs.len(),
            words: expr.len(),
        });
    }
    for (pack, p) in trial.gt_scanpath.packs.iter().enumerate() {
        for (index, fx) in p.fixations.iter().enumerate() {
            if !(fx.x.is_finite() && (0.0..=1.0).contains(&fx.x)) {
                out.push(Violation::FixationX { pack, index, value: fx.x });
            }
            if !(fx.y.is_finite() && (0.0..=1.0).contains(&fx.y)) {
                out.push(Violation::FixationY { pack, index, value: fx.y });
            }
        }
    }
    out
}

/// The ablation catalogue. `Full` is the complete model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoHesd,
    NoTxtLoss,
    UseL2Xy,
    EarlyFusion,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoHesd,
        Ablation::NoTxtLoss,
        Ablation::UseL2Xy,
        Ablation::EarlyFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoHesd => "no_hesd",
            Ablation::NoTxtLoss => "no_txt_loss",
            Ablation::UseL2Xy => "use_l2_xy",
            Ablation::EarlyFusion => "early_fusion",
        }
    }

    /// Row label used in the combined ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Full model",
            Ablation::NoHesd => "w/o HESD",
            Ablation::NoTxtLoss => "w/o L_txt",
            Ablation::UseL2Xy => "L_xy with L2",
            Ablation::EarlyFusion => "early fusion",
        }
    }

    pub fn parse(name: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Ablation::Full => {}
            Ablation::NoHesd => f.no_hesd = true,
            Ablation::NoTxtLoss => f.no_txt_loss = true,
            Ablation::UseL2Xy => f.use_l2_xy = true,
            Ablation::EarlyFusion => f.early_fusion = true,
        }
        f
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_hesd: bool,
    pub early_fusion: bool,
    pub no_txt_loss: bool,
    pub use_l2_xy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum fixations per pack.
    pub lp: usize,
    pub d_ctx: usize,
    pub d_hist: usize,
    pub d_mlp: usize,
    pub d_emb: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub decode_threshold: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lp: 4,
            d_ctx: 128,
            d_hist: 64,
            d_mlp: 128,
            d_emb: 64,
            d_img: 64,
            vocab_size: 32,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            decode_threshold: 0.5,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("lp", self.lp),
            ("d_ctx", self.d_ctx),
            ("d_hist", self.d_hist),
            ("d_mlp", self.d_mlp),
            ("d_emb", self.d_emb),
            ("d_img", self.d_img),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover BOT, EOT and UNK".into()));
        }
        if !(self.decode_threshold > 0.0 && self.decode_threshold < 1.0) {
            return Err(Error::Config(format!(
                "decode_threshold {} not in (0,1)",
                self.decode_threshold
            )));
        }
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal parameters out of range".into()));
        }
        if self.ablation.no_hesd && self.ablation.early_fusion {
            return Err(Error::Config("no_hesd and early_fusion are exclusive".into()));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation.flags();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(words: usize, packs: usize) -> Trial {
        Trial {
            trial_id: "t".into(),
            image: ImageRaster::filled(IMAGE_H, IMAGE_W, [0, 0, 0]),
            expression: ReferringExpression {
                token_ids: (0..words).map(|i| 3 + i).collect(),
                raw_words: (0..words).map(|i| format!("w{i}")).collect(),
            },
            gt_scanpath: Scanpath::new(vec![
                FixationPack::new(vec![Fixation::new(0.5, 0.5)]);
                packs
            ]),
            target_box: None,
        }
    }

    #[test]
    fn well_formed_trial_has_no_violations() {
        assert!(validate_trial(&trial(3, 5), 32).is_empty());
    }

    #[test]
    fn pack_count_mismatch_is_reported() {
        let v = validate_trial(&trial(3, 4), 32);
        assert_eq!(v, vec![Violation::PackCount { packs: 4, words: 3 }]);
        assert_eq!(v[0].to_string(), "pack count 4 ≠ 3+2");
    }

    #[test]
    fn out_of_range_x_is_reported() {
        let mut t = trial(1, 3);
        t.gt_scanpath.packs[1].fixations[0].x = 1.5;
        let v = validate_trial(&t, 32);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("fixation x out of [0,1]"));
    }

    #[test]
    fn sentinels_and_dims_are_reported() {
        let mut t = trial(2, 4);
        t.expression.token_ids[1] = EOT_ID;
        t.image = ImageRaster::filled(10, 10, [0, 0, 0]);
        let v = validate_trial(&t, 32);
        assert!(v.contains(&Violation::SentinelInExpression { position: 1, id: EOT_ID }));
        assert!(v.contains(&Violation::ImageDims { height: 10, width: 10 }));
    }

    #[test]
    fn ablation_names_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert_eq!(Ablation::parse("nope"), None);
    }
}

//! Synthetic referring scenes: colored rectangles on a dark background, an
//! expression that pins down the target only at its last word, and gaze
//! packs that move from a central start point over the candidate objects to the
//! target as words arrive.

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::domain::{
    Fixation, FixationPack, ImageRaster, ReferringExpression, Scanpath, TargetBox, Trial, IMAGE_H, IMAGE_W,
};
use crate::error::{Error, Result};
use crate::par;

const SLOT_COLS: usize = 4;
const SLOT_ROWS: usize = 2;
// Slot centers sit on cell centers of the default 8x6 evaluation grid, so a
// tight cluster of fixations on an object is not split across cells.
const SLOT_X_PX: [i64; SLOT_COLS] = [97, 227, 357, 487];
const SLOT_Y_PX: [i64; SLOT_ROWS] = [78, 234];
const SLOT_JITTER_PX: i64 = 10;
const BACKGROUND: [u8; 3] = [40, 40, 40];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeKind {
    pub name: String,
    pub width_px: usize,
    pub height_px: usize,
}

/// Characteristic pack length per word category.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseLengths {
    pub bot: usize,
    pub function: usize,
    pub color: usize,
    pub shape: usize,
    pub side: usize,
    pub eot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_trials: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub colors: Vec<NamedColor>,
    pub shapes: Vec<ShapeKind>,
    pub sides: [String; 2],
    pub article: String,
    /// Probability that an expression ends with a left/right word.
    pub side_prob: f64,
    /// Gaussian noise on fixations, normalized units.
    pub fixation_noise: f64,
    /// Where gaze rests before the referent is narrowed down, normalized.
    pub start_point: [f64; 2],
    /// Distribution of pack lengths 0..=6 used for jittered packs.
    pub pack_len_probs: Vec<f64>,
    /// Probability that a pack's length is drawn from `pack_len_probs`
    /// instead of the word category's base length.
    pub len_jitter: f64,
    pub base_lengths: BaseLengths,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let color = |name: &str, rgb| NamedColor {
            name: name.into(),
            rgb,
        };
        let shape = |name: &str, w, h| ShapeKind {
            name: name.into(),
            width_px: w,
            height_px: h,
        };
        Self {
            n_trials: 100,
            min_objects: 3,
            max_objects: 5,
            colors: vec![
                color("red", [220, 40, 40]),
                color("green", [40, 200, 60]),
                color("blue", [50, 90, 230]),
                color("yellow", [230, 210, 40]),
                color("purple", [150, 60, 200]),
                color("orange", [240, 140, 30]),
            ],
            shapes: vec![shape("square", 64, 64), shape("bar", 96, 40), shape("pillar", 40, 120)],
            sides: ["left".into(), "right".into()],
            article: "the".into(),
            side_prob: 0.4,
            fixation_noise: 0.02,
            start_point: [292.5 / 520.0, 182.0 / 312.0],
            pack_len_probs: vec![0.05, 0.35, 0.35, 0.15, 0.07, 0.02, 0.01],
            len_jitter: 0.1,
            base_lengths: BaseLengths {
                bot: 1,
                function: 1,
                color: 2,
                shape: 2,
                side: 2,
                eot: 3,
            },
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words = vec![self.article.clone()];
        words.extend(self.colors.iter().map(|c| c.name.clone()));
        words.extend(self.shapes.iter().map(|s| s.name.clone()));
        words.extend(self.sides.iter().cloned());
        Vocabulary::new(&words)
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: &str| Err(Error::Config(format!("infeasible synthetic config: {m}")));
        if self.min_objects < 2 {
            return infeasible("a referent needs at least one distractor (min_objects ≥ 2)");
        }
        if self.max_objects < self.min_objects || self.max_objects > SLOT_COLS * SLOT_ROWS {
            return infeasible("object count range must fit the 4x2 layout");
        }
        if self.colors.is_empty() || self.shapes.len() < 2 {
            return infeasible("need ≥ 1 color and ≥ 2 shapes to build an ambiguous prefix");
        }
        if self.pack_len_probs.is_empty() || self.pack_len_probs.iter().any(|p| p.is_nan() || *p < 0.0) {
            return infeasible("pack length probabilities must be non-negative");
        }
        if self.pack_len_probs.iter().sum::<f64>() <= 0.0 {
            return infeasible("pack length probabilities sum to zero");
        }
        if !(0.0..=1.0).contains(&self.len_jitter) || !(0.0..=1.0).contains(&self.side_prob) {
            return infeasible("probabilities must lie in [0,1]");
        }
        if !self.start_point.iter().all(|v| (0.0..=1.0).contains(v)) {
            return infeasible("start point must lie inside the image");
        }
        if self.fixation_noise.is_nan() || self.fixation_noise < 0.0 {
            return infeasible("fixation noise must be ≥ 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    color: usize,
    shape: usize,
    cx: f64,
    cy: f64,
    rect: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Bot,
    Function,
    Color,
    Shape,
    Side,
    Eot,
}

fn place(slot: usize, shape: &ShapeKind, rng: &mut ChaCha8Rng) -> (f64, f64, [usize; 4]) {
    let cx = SLOT_X_PX[slot % SLOT_COLS] + rng.random_range(-SLOT_JITTER_PX..=SLOT_JITTER_PX);
    let cy = SLOT_Y_PX[slot / SLOT_COLS] + rng.random_range(-SLOT_JITTER_PX..=SLOT_JITTER_PX);
    let (w, h) = (shape.width_px as i64, shape.height_px as i64);
    let c0 = (cx - w / 2).clamp(0, IMAGE_W as i64) as usize;
    let r0 = (cy - h / 2).clamp(0, IMAGE_H as i64) as usize;
    let c1 = (cx - w / 2 + w).clamp(0, IMAGE_W as i64) as usize;
    let r1 = (cy - h / 2 + h).clamp(0, IMAGE_H as i64) as usize;
    let fx = 0.5 * (c0 + c1) as f64 / IMAGE_W as f64;
    let fy = 0.5 * (r0 + r1) as f64 / IMAGE_H as f64;
    (fx, fy, [r0, c0, r1, c1])
}

fn matches(o: &Object, color: Option<usize>, shape: Option<usize>) -> bool {
    color.is_none_or(|c| o.color == c) && shape.is_none_or(|s| o.shape == s)
}

fn generate_trial(cfg: &SyntheticConfig, vocab: &Vocabulary, index: usize) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, cfg.fixation_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let len_dist = WeightedIndex::new(&cfg.pack_len_probs).map_err(|e| Error::Config(e.to_string()))?;

    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let with_side = rng.random_bool(cfg.side_prob);
    let color = rng.random_range(0..cfg.colors.len());
    let shape = rng.random_range(0..cfg.shapes.len());

    // attributes: target first, then the twin that keeps the prefix ambiguous
    let mut attrs = vec![(color, shape)];
    if with_side {
        attrs.push((color, shape));
    } else {
        let other: Vec<usize> = (0..cfg.shapes.len()).filter(|&s| s != shape).collect();
        attrs.push((color, *other.choose(&mut rng).expect("≥ 2 shapes")));
    }
    while attrs.len() < n_objects {
        let a = (rng.random_range(0..cfg.colors.len()), rng.random_range(0..cfg.shapes.len()));
        if a != (color, shape) {
            attrs.push(a);
        }
    }

    let mut slots: Vec<usize> = (0..SLOT_COLS * SLOT_ROWS).collect();
    loop {
        slots.shuffle(&mut rng);
        if !with_side || slots[0] % SLOT_COLS != slots[1] % SLOT_COLS {
            break;
        }
    }
    let objects: Vec<Object> = attrs
        .iter()
        .zip(&slots)
        .map(|(&(c, s), &slot)| {
            let (cx, cy, rect) = place(slot, &cfg.shapes[s], &mut rng);
            Object {
                color: c,
                shape: s,
                cx,
                cy,
                rect,
            }
        })
        .collect();
    let target = objects[0];

    let mut words = vec![cfg.article.clone(), cfg.colors[color].name.clone(), cfg.shapes[shape].name.clone()];
    let mut cats = vec![Category::Function, Category::Color, Category::Shape];
    if with_side {
        let side = if target.cx < objects[1].cx { 0 } else { 1 };
        words.push(cfg.sides[side].clone());
        cats.push(Category::Side);
    }

    // candidates consistent with each prefix, sorted left to right
    let sorted = |mut v: Vec<Object>| {
        v.sort_by(|a, b| a.cx.total_cmp(&b.cx).then(a.cy.total_cmp(&b.cy)));
        v
    };
    let by_color = sorted(objects.iter().copied().filter(|o| matches(o, Some(color), None)).collect());
    let by_both = sorted(objects.iter().copied().filter(|o| matches(o, Some(color), Some(shape))).collect());
    let final_set = if with_side { vec![target] } else { by_both.clone() };
    let before_last = if with_side { &by_both } else { &by_color };
    if final_set.len() != 1 || before_last.len() < 2 {
        return Err(Error::Config(format!(
            "infeasible synthetic config: trial {index} expression is not uniquely resolved at its last word"
        )));
    }

    let base = &cfg.base_lengths;
    let pack_len = |cat: Category, rng: &mut ChaCha8Rng| {
        if rng.random_bool(cfg.len_jitter) {
            len_dist.sample(rng)
        } else {
            match cat {
                Category::Bot => base.bot,
                Category::Function => base.function,
                Category::Color => base.color,
                Category::Shape => base.shape,
                Category::Side => base.side,
                Category::Eot => base.eot,
            }
        }
    };
    let clamp = |v: f64| v.clamp(0.0, 1.0);

    let mut all_cats = vec![Category::Bot];
    all_cats.extend(&cats);
    all_cats.push(Category::Eot);
    let mut packs = Vec::with_capacity(all_cats.len());
    for cat in all_cats {
        let n = pack_len(cat, &mut rng);
        let candidates: &[Object] = match cat {
            Category::Bot | Category::Function => &[],
            Category::Color => &by_color,
            Category::Shape => {
                if with_side {
                    &by_both
                } else {
                    &final_set
                }
            }
            Category::Side | Category::Eot => &final_set,
        };
        let fixations = (0..n)
            .map(|i| {
                if candidates.is_empty() {
                    Fixation::new(
                        clamp(cfg.start_point[0] + noise.sample(&mut rng)),
                        clamp(cfg.start_point[1] + noise.sample(&mut rng)),
                    )
                } else {
                    let o = candidates[i % candidates.len()];
                    Fixation::new(clamp(o.cx + noise.sample(&mut rng)), clamp(o.cy + noise.sample(&mut rng)))
                }
            })
            .collect();
        packs.push(FixationPack::new(fixations));
    }

    let mut image = ImageRaster::filled(IMAGE_H, IMAGE_W, BACKGROUND);
    for o in &objects {
        let [r0, c0, r1, c1] = o.rect;
        image.fill_rect(r0, c0, r1, c1, cfg.colors[o.color].rgb);
    }
    let [r0, c0, r1, c1] = target.rect;
    let target_box = TargetBox {
        x0: c0 as f64 / IMAGE_W as f64,
        y0: r0 as f64 / IMAGE_H as f64,
        x1: c1 as f64 / IMAGE_W as f64,
        y1: r1 as f64 / IMAGE_H as f64,
    };

    let token_ids = words.iter().map(|w| vocab.id(w)).collect();
    Ok(Trial {
        trial_id: format!("syn-{}-{index:05}", cfg.seed),
        image,
        expression: ReferringExpression {
            token_ids,
            raw_words: words,
        },
        gt_scanpath: Scanpath::new(packs),
        target_box: Some(target_box),
    })
}

/// Every trial draws from its own RNG stream of the master seed, so the
/// output does not depend on thread count.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Trial>> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    par::map_range(cfg.n_trials, |i| generate_trial(cfg, &vocab, i))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_trial;

    fn small(n: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_trials: n,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small(20, 7)).unwrap();
        let b = generate(&small(20, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(20, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_trials_validate() {
        let cfg = small(200, 3);
        let vocab = cfg.vocabulary();
        for t in generate(&cfg).unwrap() {
            assert!(validate_trial(&t, vocab.len()).is_empty(), "{}", t.trial_id);
        }
    }

    #[test]
    fn last_pack_is_closer_to_target_than_first() {
        let trials = generate(&small(150, 11)).unwrap();
        let mean_dist = |pick: fn(&Scanpath) -> &FixationPack| {
            let mut sum = 0.0;
            let mut n = 0;
            for t in &trials {
                let c = t.target_box.unwrap().center();
                for f in &pick(&t.gt_scanpath).fixations {
                    sum += ((f.x - c.x).powi(2) + (f.y - c.y).powi(2)).sqrt();
                    n += 1;
                }
            }
            sum / n as f64
        };
        let first = mean_dist(|s| &s.packs[0]);
        let last = mean_dist(|s| s.packs.last().unwrap());
        assert!(last < first, "last {last} vs first {first}");
    }

    #[test]
    fn long_packs_occur() {
        let trials = generate(&small(300, 5)).unwrap();
        let max = trials
            .iter()
            .flat_map(|t| t.gt_scanpath.packs.iter().map(FixationPack::len))
            .max()
            .unwrap();
        assert!(max > 4);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut cfg = small(1, 0);
        cfg.min_objects = 1;
        assert!(generate(&cfg).is_err());
        let mut cfg = small(1, 0);
        cfg.shapes.truncate(1);
        assert!(generate(&cfg).is_err());
    }
}

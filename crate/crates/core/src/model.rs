use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context;
use crate::domain::{ModelConfig, ReferringExpression, Scanpath, Trial};
use crate::error::Result;
use crate::hesd::{self, Inference};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::packcodec::{encode_pack, history_row, EncodedPack, HISTORY_WIDTH};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `seed`. Only the parameters the configured
    /// variant uses are created.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        context::register(&mut params, &mut rng, &config)?;
        hesd::register(&mut params, &mut rng, &config)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, trial: &Trial) -> Result<Inference> {
        let patches = context::patch_means(&trial.image)?;
        self.predict_with_patches(&patches, &trial.expression)
    }

    pub fn predict_with_patches(&self, patches: &[f64], expr: &ReferringExpression) -> Result<Inference> {
        hesd::predict_scanpath(&self.params, &self.config, patches, &expr.with_sentinels())
    }

    /// `[L+2, d_ctx]` context states for the given image and expression.
    pub fn context_states(&self, patches: &[f64], expr: &ReferringExpression) -> Result<Tensor> {
        let mut g = Graph::new();
        let img = context::image_feature(&mut g, &self.params, patches)?;
        let states = context::encode_context(&mut g, &self.params, img, &expr.with_sentinels())?;
        Ok(context::states_tensor(&g, &states))
    }
}

/// A trial with everything the training forward pass needs precomputed:
/// patch statistics, sentinel-wrapped tokens, FIX/PAD targets and the
/// teacher-forced history rows contributed by each ground-truth pack.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    pub trial_id: String,
    pub patches: Vec<f64>,
    pub tokens: Vec<usize>,
    pub targets: Vec<EncodedPack>,
    pub history: Vec<Vec<[f64; HISTORY_WIDTH]>>,
    pub expression: ReferringExpression,
    pub gt: Scanpath,
}

impl PreparedTrial {
    pub fn new(trial: &Trial, lp: usize) -> Result<Self> {
        let patches = context::patch_means(&trial.image)?;
        Self::from_parts(trial.trial_id.clone(), patches, &trial.expression, &trial.gt_scanpath, lp)
    }

    pub fn from_parts(
        trial_id: String,
        patches: Vec<f64>,
        expr: &ReferringExpression,
        gt: &Scanpath,
        lp: usize,
    ) -> Result<Self> {
        let targets = gt.packs.iter().map(|p| encode_pack(p, lp)).collect::<Result<Vec<_>>>()?;
        // the decoder never emits more than lp fixations, so teacher-forced
        // history only carries what it could have produced
        let history = gt
            .packs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                p.fixations
                    .iter()
                    .take(lp)
                    .enumerate()
                    .map(|(i, fx)| history_row(*fx, k, i, lp))
                    .collect()
            })
            .collect();
        Ok(Self {
            trial_id,
            patches,
            tokens: expr.with_sentinels(),
            targets,
            history,
            expression: expr.clone(),
            gt: gt.clone(),
        })
    }
}

pub fn prepare_all(trials: &[Trial], lp: usize) -> Result<Vec<PreparedTrial>> {
    crate::par::map(trials, |t| PreparedTrial::new(t, lp)).into_iter().collect()
}

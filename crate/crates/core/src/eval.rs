//! Toy hallucination benchmark.
//!
//! Generative metrics decode one caption per held-out scene and count
//! category mentions against the scene's ground truth. A caption with no
//! mentions counts as non-hallucinated, and a caption set with no mentions
//! at all has a mention-level rate of 1. Discriminative probes ask whether a
//! category is present and are answered from the policy's next-token
//! distribution under a fixed presence-question query.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::scene_world::{Scene, SceneImage, World, CAPTION_QUERIES, PROBE_QUERY};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seed: u64,
    pub probes_per_scene: usize,
    pub max_decode_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scenes: 200, seed: 1000, probes_per_scene: 4, max_decode_len: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeReport {
    pub non_rsp_rate: f64,
    pub non_men_rate: f64,
    pub chair: f64,
    pub n_scenes: usize,
    pub n_mentions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub non_rsp_rate: f64,
    pub non_men_rate: f64,
    pub chair: f64,
    pub disc_accuracy: f64,
    pub n_scenes: usize,
}

/// Mention metrics over `(caption, present categories)` pairs.
pub fn mention_metrics(vocab: &Vocab, captions: &[(Vec<TokenId>, BTreeSet<TokenId>)]) -> Result<GenerativeReport> {
    if captions.is_empty() {
        return Err(Error::Invalid("no captions to evaluate".into()));
    }
    let mut clean_responses = 0usize;
    let mut mentions = 0usize;
    let mut faithful = 0usize;
    for (caption, present) in captions {
        let mut hallucinated = false;
        for tok in caption.iter().filter(|&&t| vocab.is_category(t)) {
            mentions += 1;
            if present.contains(tok) {
                faithful += 1;
            } else {
                hallucinated = true;
            }
        }
        if !hallucinated {
            clean_responses += 1;
        }
    }
    let non_men_rate = if mentions == 0 { 1.0 } else { faithful as f64 / mentions as f64 };
    Ok(GenerativeReport {
        non_rsp_rate: clean_responses as f64 / captions.len() as f64,
        non_men_rate,
        chair: 100.0 * (1.0 - non_men_rate),
        n_scenes: captions.len(),
        n_mentions: mentions,
    })
}

/// Greedy-decodes a caption for each scene and scores its mentions.
pub fn evaluate_generative(params: &PolicyParams, world: &World, scenes: &[Scene], max_len: usize) -> Result<GenerativeReport> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes to evaluate".into()));
    }
    let query = world.vocab().encode_str(CAPTION_QUERIES[0])?;
    let captions: Vec<(Vec<TokenId>, BTreeSet<TokenId>)> = scenes
        .par_iter()
        .map(|scene| {
            let features = world.render_full(scene).features();
            let caption = params.greedy_decode(&query, &features, max_len)?;
            Ok((caption, scene.categories()))
        })
        .collect::<Result<_>>()?;
    mention_metrics(world.vocab(), &captions)
}

/// A yes/no presence question about one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub scene: usize,
    pub category: TokenId,
    pub present: bool,
}

/// Samples `per_scene` probes per scene. Labels alternate present / absent
/// over the global probe index, so the set is balanced up to one probe.
pub fn sample_probes(world: &World, scenes: &[Scene], per_scene: usize, seed: u64) -> Result<Vec<Probe>> {
    if per_scene == 0 {
        return Err(Error::Invalid("probes_per_scene must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(scenes.len() * per_scene);
    for (i, scene) in scenes.iter().enumerate() {
        let present: Vec<TokenId> = scene.categories().into_iter().collect();
        let absent: Vec<TokenId> = world
            .enabled_categories()
            .iter()
            .copied()
            .filter(|c| !present.contains(c))
            .collect();
        for _ in 0..per_scene {
            let want_present = probes.len() % 2 == 0;
            let pool = if want_present { &present } else { &absent };
            let category = *pool.choose(&mut rng).expect("scenes have present and absent categories");
            probes.push(Probe { scene: i, category, present: want_present });
        }
    }
    Ok(probes)
}

/// Answers presence questions about an image.
pub trait PresenceAnswerer: Sync {
    fn answer(&self, image: &SceneImage, category: TokenId) -> Result<bool>;
}

/// Answers from the policy: "present" iff the category token's first-step
/// log-probability under the presence query exceeds the median over all
/// enabled category tokens for that image.
pub struct PolicyProber<'a> {
    params: &'a PolicyParams,
    categories: &'a [TokenId],
    query: Vec<TokenId>,
}

impl<'a> PolicyProber<'a> {
    pub fn new(params: &'a PolicyParams, world: &'a World) -> Result<Self> {
        Ok(Self { params, categories: world.enabled_categories(), query: world.vocab().encode_str(PROBE_QUERY)? })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl PresenceAnswerer for PolicyProber<'_> {
    fn answer(&self, image: &SceneImage, category: TokenId) -> Result<bool> {
        let lps = self.params.next_token_log_probs(&self.query, &image.features(), TokenId::EOS)?;
        let mut cat_lps: Vec<f64> = self.categories.iter().map(|c| lps[c.index()]).collect();
        Ok(lps[category.index()] > median(&mut cat_lps))
    }
}

/// Reads presence straight from the scene.
pub struct GroundTruthAnswerer;

impl PresenceAnswerer for GroundTruthAnswerer {
    fn answer(&self, image: &SceneImage, category: TokenId) -> Result<bool> {
        Ok(image.surviving_objects().any(|o| o.category == category))
    }
}

pub fn probe_accuracy(answerer: &dyn PresenceAnswerer, world: &World, scenes: &[Scene], probes: &[Probe]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Invalid("no probes".into()));
    }
    let images: Vec<SceneImage> = scenes.par_iter().map(|s| world.render_full(s)).collect();
    let correct: Vec<bool> = probes
        .par_iter()
        .map(|p| Ok(answerer.answer(&images[p.scene], p.category)? == p.present))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / probes.len() as f64)
}

pub fn evaluate_discriminative(
    params: &PolicyParams,
    world: &World,
    scenes: &[Scene],
    probes_per_scene: usize,
    seed: u64,
) -> Result<f64> {
    let probes = sample_probes(world, scenes, probes_per_scene, seed)?;
    probe_accuracy(&PolicyProber::new(params, world)?, world, scenes, &probes)
}

/// Held-out scenes for evaluation, drawn from their own seed stream.
pub fn eval_scenes(world: &World, config: &EvalConfig) -> Vec<Scene> {
    World::record_seeds(config.seed, config.scenes)
        .into_iter()
        .map(|s| world.generate_scene(s))
        .collect()
}

/// Full report: generative metrics plus probe accuracy on the same scenes.
pub fn evaluate(params: &PolicyParams, world: &World, config: &EvalConfig) -> Result<EvalReport> {
    if params.vocab() != world.vocab() || params.d_img() != world.d_img() {
        return Err(Error::Checkpoint("checkpoint layout does not match the world configuration".into()));
    }
    let scenes = eval_scenes(world, config);
    let generative = evaluate_generative(params, world, &scenes, config.max_decode_len)?;
    let disc_accuracy = evaluate_discriminative(params, world, &scenes, config.probes_per_scene, config.seed)?;
    Ok(EvalReport {
        non_rsp_rate: generative.non_rsp_rate,
        non_men_rate: generative.non_men_rate,
        chair: generative.chair,
        disc_accuracy,
        n_scenes: generative.n_scenes,
    })
}

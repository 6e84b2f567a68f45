//! Synthetic grid scenes and the vision-rejected image cascade.
//!
//! A scene is a handful of colored objects on a `G × G` grid. Rendering
//! writes one channel per vocabulary category and one per attribute, so an
//! image is a `G × G × d_img` tensor with `d_img = #categories + #attributes`.
//! Perception (tagging, detection, segmentation, inpainting, sentence
//! splitting, image-text scoring) sits behind small traits; [`GridOracle`] is
//! the exact stand-in used everywhere by default.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// Shape of the synthetic world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of vocabulary categories scenes draw from (a prefix of the
    /// category list).
    pub num_categories: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { grid_size: 8, min_objects: 1, max_objects: 5, num_categories: 32 }
    }
}

impl WorldConfig {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let cells = self.grid_size * self.grid_size;
        if self.grid_size == 0 {
            return Err(Error::Config("grid_size must be at least 1".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if self.max_objects > cells {
            return Err(Error::Config(format!("max_objects {} exceeds {cells} grid cells", self.max_objects)));
        }
        if self.num_categories > vocab.categories().len() {
            return Err(Error::Config(format!(
                "num_categories {} exceeds the {} vocabulary categories",
                self.num_categories,
                vocab.categories().len()
            )));
        }
        // Hallucinated captions need at least one absent category.
        if self.num_categories <= self.max_objects {
            return Err(Error::Config("num_categories must exceed max_objects".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: TokenId,
    pub row: usize,
    pub col: usize,
    pub attribute: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub background: TokenId,
    pub seed: u64,
}

impl Scene {
    /// Distinct categories in the scene.
    pub fn categories(&self) -> BTreeSet<TokenId> {
        self.objects.iter().map(|o| o.category).collect()
    }
}

/// Rendered scene with removal provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    scene: Scene,
    removed: BTreeSet<usize>,
    grid: usize,
    channels: usize,
    data: Vec<f64>,
}

impl SceneImage {
    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    /// Indices into `scene().objects` that have been removed.
    pub fn removed(&self) -> &BTreeSet<usize> {
        &self.removed
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.grid + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.grid + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-channel max over all cells: the image block fed to the policy.
    pub fn features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for cell in self.data.chunks_exact(self.channels) {
            for (o, &x) in out.iter_mut().zip(cell) {
                *o = f64::max(*o, x);
            }
        }
        out
    }

    /// Objects still visible.
    pub fn surviving_objects(&self) -> impl Iterator<Item = &SceneObject> {
        self.scene
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.removed.contains(i))
            .map(|(_, o)| o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    /// Label the box was grounded on.
    pub category: TokenId,
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    grid: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn empty(grid: usize) -> Self {
        Self { grid, cells: vec![false; grid * grid] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.grid + col] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(i, _)| (i / self.grid, i % self.grid))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image: SceneImage,
    pub removed_category: TokenId,
    pub score: f64,
}

/// One candidate per tagged category, in tag order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
}

pub trait Tagger {
    fn tag(&self, image: &SceneImage) -> BTreeSet<TokenId>;
}

pub trait Detector {
    fn detect(&self, image: &SceneImage, category: TokenId) -> Result<BoundingBox>;
}

pub trait Segmenter {
    fn segment(&self, image: &SceneImage, bbox: &BoundingBox) -> Mask;
}

pub trait Inpainter {
    fn remove(&self, image: &SceneImage, mask: &Mask) -> SceneImage;
}

pub trait SentenceSplitter {
    fn split(&self, text: &[TokenId]) -> Vec<Vec<TokenId>>;
}

pub trait ImageTextScorer {
    fn similarity(&self, image: &SceneImage, sentence: &[TokenId]) -> f64;
}

/// Composition of the six perception stages.
pub struct Cascade<'a> {
    pub tagger: &'a dyn Tagger,
    pub detector: &'a dyn Detector,
    pub segmenter: &'a dyn Segmenter,
    pub inpainter: &'a dyn Inpainter,
    pub splitter: &'a dyn SentenceSplitter,
    pub scorer: &'a dyn ImageTextScorer,
}

impl Cascade<'_> {
    /// Sum of per-sentence similarities.
    pub fn clip_score(&self, candidate: &SceneImage, sentences: &[Vec<TokenId>]) -> f64 {
        sentences.iter().map(|s| self.scorer.similarity(candidate, s)).sum()
    }

    /// Builds one candidate per tagged category (detect → segment → remove),
    /// scores each against the sentences of `y_w`, and returns the lowest
    /// scoring candidate. Near-equal scores (relative 1e-12) are broken by
    /// the lexicographically smallest category word.
    pub fn select_rejected(
        &self,
        vocab: &Vocab,
        image_w: &SceneImage,
        y_w: &[TokenId],
    ) -> Result<(SceneImage, CandidateSet)> {
        let tags = self.tagger.tag(image_w);
        if tags.is_empty() {
            return Err(Error::Invalid("image has no tagged categories".into()));
        }
        let sentences = self.splitter.split(y_w);
        let mut entries = Vec::with_capacity(tags.len());
        for category in tags {
            let bbox = self.detector.detect(image_w, category)?;
            let mask = self.segmenter.segment(image_w, &bbox);
            let image = self.inpainter.remove(image_w, &mask);
            let score = self.clip_score(&image, &sentences);
            entries.push(Candidate { image, removed_category: category, score });
        }
        let chosen = argmin_candidate(vocab, &entries).expect("nonempty candidate set");
        let image = entries[chosen].image.clone();
        Ok((image, CandidateSet { entries }))
    }
}

/// Index of the lowest-scoring candidate under the tie rule of
/// [`Cascade::select_rejected`].
pub fn argmin_candidate(vocab: &Vocab, entries: &[Candidate]) -> Option<usize> {
    let min = entries.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * min.abs().max(1.0);
    entries
        .iter()
        .enumerate()
        .filter(|(_, c)| c.score <= min + tol)
        .min_by(|(_, a), (_, b)| vocab.word(a.removed_category).cmp(vocab.word(b.removed_category)))
        .map(|(i, _)| i)
}

/// Exact perception on synthetic renders.
#[derive(Debug, Clone)]
pub struct GridOracle {
    vocab: Vocab,
}

impl GridOracle {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    fn category_channel(&self, category: TokenId) -> Option<usize> {
        self.vocab.category_slot(category)
    }

    fn has_category(&self, image: &SceneImage, row: usize, col: usize, channel: usize) -> bool {
        image.cell(row, col)[channel] > 0.5
    }

    /// Instance counts of visible categories, read off the grid.
    pub fn category_counts(&self, image: &SceneImage) -> BTreeMap<TokenId, usize> {
        let mut counts = BTreeMap::new();
        let n = image.grid_size();
        for (slot, &cat) in self.vocab.categories().iter().enumerate() {
            let c = (0..n * n)
                .filter(|i| self.has_category(image, i / n, i % n, slot))
                .count();
            if c > 0 {
                counts.insert(cat, c);
            }
        }
        counts
    }

    pub fn cascade(&self) -> Cascade<'_> {
        Cascade {
            tagger: self,
            detector: self,
            segmenter: self,
            inpainter: self,
            splitter: self,
            scorer: self,
        }
    }
}

impl Tagger for GridOracle {
    fn tag(&self, image: &SceneImage) -> BTreeSet<TokenId> {
        self.category_counts(image).into_keys().collect()
    }
}

impl Detector for GridOracle {
    fn detect(&self, image: &SceneImage, category: TokenId) -> Result<BoundingBox> {
        let absent = || Error::CategoryAbsent(self.vocab.word(category).to_string());
        let channel = self.category_channel(category).ok_or_else(absent)?;
        let n = image.grid_size();
        let mut bbox: Option<BoundingBox> = None;
        for row in 0..n {
            for col in 0..n {
                if !self.has_category(image, row, col, channel) {
                    continue;
                }
                let b = bbox.get_or_insert(BoundingBox { category, row_min: row, col_min: col, row_max: row, col_max: col });
                b.row_min = b.row_min.min(row);
                b.col_min = b.col_min.min(col);
                b.row_max = b.row_max.max(row);
                b.col_max = b.col_max.max(col);
            }
        }
        bbox.ok_or_else(absent)
    }
}

impl Segmenter for GridOracle {
    fn segment(&self, image: &SceneImage, bbox: &BoundingBox) -> Mask {
        let n = image.grid_size();
        let mut mask = Mask::empty(n);
        if let Some(channel) = self.category_channel(bbox.category) {
            for row in bbox.row_min..=bbox.row_max.min(n - 1) {
                for col in bbox.col_min..=bbox.col_max.min(n - 1) {
                    if self.has_category(image, row, col, channel) {
                        mask.set(row, col, true);
                    }
                }
            }
        }
        mask
    }
}

impl Inpainter for GridOracle {
    fn remove(&self, image: &SceneImage, mask: &Mask) -> SceneImage {
        let mut out = image.clone();
        let background = background_cell(&self.vocab, image.channels(), image.scene.background);
        for (row, col) in mask.iter_set() {
            out.cell_mut(row, col).copy_from_slice(&background);
            for (i, obj) in image.scene.objects.iter().enumerate() {
                if obj.row == row && obj.col == col {
                    out.removed.insert(i);
                }
            }
        }
        out
    }
}

impl SentenceSplitter for GridOracle {
    /// Splits after each terminator. A tail made only of end-of-sequence
    /// tokens stays attached to the last sentence; any other tail becomes its
    /// own piece.
    fn split(&self, text: &[TokenId]) -> Vec<Vec<TokenId>> {
        let mut pieces: Vec<Vec<TokenId>> = Vec::new();
        let mut current = Vec::new();
        for &tok in text {
            current.push(tok);
            if self.vocab.is_terminator(tok) {
                pieces.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            let eos_only = current.iter().all(|&t| t == TokenId::EOS);
            match pieces.last_mut() {
                Some(last) if eos_only => last.extend(current),
                _ => pieces.push(current),
            }
        }
        pieces
    }
}

impl ImageTextScorer for GridOracle {
    /// Cosine similarity between the image's category-count bag and the
    /// sentence's category-mention bag; zero when either bag is empty.
    fn similarity(&self, image: &SceneImage, sentence: &[TokenId]) -> f64 {
        let image_bag = self.category_counts(image);
        let mut text_bag: BTreeMap<TokenId, usize> = BTreeMap::new();
        for &tok in sentence.iter().filter(|&&t| self.vocab.is_category(t)) {
            *text_bag.entry(tok).or_default() += 1;
        }
        cosine(&image_bag, &text_bag)
    }
}

fn cosine(a: &BTreeMap<TokenId, usize>, b: &BTreeMap<TokenId, usize>) -> f64 {
    let norm = |m: &BTreeMap<TokenId, usize>| m.values().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(k, &x)| b.get(k).map(|&y| (x * y) as f64)).sum();
    dot / (na * nb)
}

fn background_cell(vocab: &Vocab, channels: usize, background: TokenId) -> Vec<f64> {
    let mut cell = vec![0.0; channels];
    if let Some(slot) = vocab.attribute_slot(background) {
        cell[vocab.categories().len() + slot] = 1.0;
    }
    cell
}

/// Caption query phrasings; the first one is used at evaluation time.
pub const CAPTION_QUERIES: [&str; 3] = ["describe the image", "what is in this picture ?", "what do you see ?"];

/// Query used for presence probes.
pub const PROBE_QUERY: &str = "is there a ?";

/// One training unit: a faithful and a hallucinated caption for the same
/// query, the original image and its vision-rejected counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub seed: u64,
    pub query: Vec<TokenId>,
    pub image_w: SceneImage,
    pub image_l: SceneImage,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
    pub removed_category: TokenId,
    /// Pooled features of `image_w` and `image_l`, cached for training.
    pub features_w: Vec<f64>,
    pub features_l: Vec<f64>,
}

impl PreferenceRecord {
    pub fn scene(&self) -> &Scene {
        self.image_w.scene()
    }
}

/// The synthetic world: vocabulary, layout, scene sampling and captioning.
#[derive(Debug, Clone)]
pub struct World {
    vocab: Vocab,
    config: WorldConfig,
    oracle: GridOracle,
}

impl World {
    pub fn new(vocab: Vocab, config: WorldConfig) -> Result<Self> {
        config.validate(&vocab)?;
        Ok(Self { oracle: GridOracle::new(vocab.clone()), vocab, config })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn oracle(&self) -> &GridOracle {
        &self.oracle
    }

    /// Image channels: one per vocabulary category plus one per attribute.
    pub fn d_img(&self) -> usize {
        self.vocab.categories().len() + self.vocab.attributes().len()
    }

    pub fn enabled_categories(&self) -> &[TokenId] {
        &self.vocab.categories()[..self.config.num_categories]
    }

    /// Renders `scene` with the objects at indices in `removed` painted as
    /// background. Pure: identical inputs give bit-identical grids.
    pub fn render(&self, scene: &Scene, removed: &BTreeSet<usize>) -> SceneImage {
        let n = self.config.grid_size;
        let channels = self.d_img();
        let background = background_cell(&self.vocab, channels, scene.background);
        let mut image = SceneImage {
            scene: scene.clone(),
            removed: removed.clone(),
            grid: n,
            channels,
            data: background.repeat(n * n),
        };
        let n_cat = self.vocab.categories().len();
        for (i, obj) in scene.objects.iter().enumerate() {
            if removed.contains(&i) {
                continue;
            }
            let cell = image.cell_mut(obj.row, obj.col);
            cell.iter_mut().for_each(|x| *x = 0.0);
            if let Some(slot) = self.vocab.category_slot(obj.category) {
                cell[slot] = 1.0;
            }
            if let Some(slot) = self.vocab.attribute_slot(obj.attribute) {
                cell[n_cat + slot] = 1.0;
            }
        }
        image
    }

    pub fn render_full(&self, scene: &Scene) -> SceneImage {
        self.render(scene, &BTreeSet::new())
    }

    pub fn tag(&self, image: &SceneImage) -> BTreeSet<TokenId> {
        self.oracle.tag(image)
    }

    pub fn detect(&self, image: &SceneImage, category: TokenId) -> Result<BoundingBox> {
        self.oracle.detect(image, category)
    }

    pub fn segment(&self, image: &SceneImage, bbox: &BoundingBox) -> Mask {
        self.oracle.segment(image, bbox)
    }

    pub fn remove(&self, image: &SceneImage, mask: &Mask) -> SceneImage {
        self.oracle.remove(image, mask)
    }

    pub fn split_sentences(&self, y: &[TokenId]) -> Vec<Vec<TokenId>> {
        self.oracle.split(y)
    }

    pub fn clip_score(&self, candidate: &SceneImage, sentences: &[Vec<TokenId>]) -> f64 {
        self.oracle.cascade().clip_score(candidate, sentences)
    }

    pub fn select_rejected(&self, image_w: &SceneImage, y_w: &[TokenId]) -> Result<(SceneImage, CandidateSet)> {
        self.oracle.cascade().select_rejected(&self.vocab, image_w, y_w)
    }

    /// Samples a scene from its own seed.
    pub fn generate_scene(&self, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_scene(seed, &mut rng)
    }

    fn sample_scene(&self, seed: u64, rng: &mut ChaCha8Rng) -> Scene {
        let n = self.config.grid_size;
        let count = rng.random_range(self.config.min_objects..=self.config.max_objects);
        let cats = self.enabled_categories();
        let attrs = self.vocab.attributes();
        let cells = sample(rng, n * n, count).into_vec();
        let objects = cells
            .into_iter()
            .map(|cell| SceneObject {
                category: cats[rng.random_range(0..cats.len())],
                row: cell / n,
                col: cell % n,
                attribute: attrs[rng.random_range(0..attrs.len())],
            })
            .collect();
        let background = attrs[rng.random_range(0..attrs.len())];
        Scene { objects, background, seed }
    }

    /// Faithful caption: `a <attr> <category> .` per object, then
    /// `the <category> is <attr> .` for the first (salient) object, then
    /// end-of-sequence.
    pub fn caption(&self, scene: &Scene) -> Vec<TokenId> {
        let v = &self.vocab;
        let id = |w: &str| v.id(w).expect("caption word in vocabulary");
        let mut out = Vec::new();
        for obj in &scene.objects {
            out.extend([id("a"), obj.attribute, obj.category, id(".")]);
        }
        if let Some(first) = scene.objects.first() {
            out.extend([id("the"), first.category, id("is"), first.attribute, id(".")]);
        }
        out.push(TokenId::EOS);
        out
    }

    /// Replaces the category of the `phrase`-th object phrase with `absent`.
    pub fn hallucinate(&self, caption: &[TokenId], phrase: usize, absent: TokenId) -> Vec<TokenId> {
        let mut out = caption.to_vec();
        out[4 * phrase + 2] = absent;
        out
    }

    /// Builds the full record for the scene drawn from `seed`.
    pub fn generate_record(&self, seed: u64) -> Result<PreferenceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = self.sample_scene(seed, &mut rng);
        let query = self.vocab.encode_str(CAPTION_QUERIES[rng.random_range(0..CAPTION_QUERIES.len())])?;
        let y_w = self.caption(&scene);
        let present = scene.categories();
        let absent: Vec<TokenId> = self
            .enabled_categories()
            .iter()
            .copied()
            .filter(|c| !present.contains(c))
            .collect();
        let phrase = rng.random_range(0..scene.objects.len());
        let y_l = self.hallucinate(&y_w, phrase, absent[rng.random_range(0..absent.len())]);
        let image_w = self.render_full(&scene);
        let (image_l, candidates) = self.select_rejected(&image_w, &y_w)?;
        let removed_category = candidates
            .entries
            .iter()
            .find(|c| c.image == image_l)
            .map(|c| c.removed_category)
            .expect("selected image comes from the candidate set");
        Ok(PreferenceRecord {
            seed,
            query,
            features_w: image_w.features(),
            features_l: image_l.features(),
            image_w,
            image_l,
            y_w,
            y_l,
            removed_category,
        })
    }

    /// Per-record seeds: record `i` uses the `i`-th output of a ChaCha
    /// stream keyed by `seed`.
    pub fn record_seeds(seed: u64, n: usize) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.next_u64()).collect()
    }

    pub fn generate_dataset(&self, n: usize, seed: u64) -> Result<Vec<PreferenceRecord>> {
        if n == 0 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        Self::record_seeds(seed, n)
            .into_par_iter()
            .map(|s| self.generate_record(s))
            .collect()
    }

    /// Rebuilds a record from its symbolic form, re-rendering both images.
    pub fn rebuild_record(&self, line: &DatasetLine) -> Result<PreferenceRecord> {
        let v = &self.vocab;
        let tokens = |words: &[String]| -> Result<Vec<TokenId>> { words.iter().map(|w| v.id(w)).collect() };
        let mut objects = Vec::with_capacity(line.scene_objects.len());
        for o in &line.scene_objects {
            let category = v.id(&o.category)?;
            let attribute = v.id(&o.attribute)?;
            if !v.is_category(category) || v.attribute_slot(attribute).is_none() {
                return Err(Error::Invalid(format!("bad object {}/{}", o.category, o.attribute)));
            }
            if o.row >= self.config.grid_size || o.col >= self.config.grid_size {
                return Err(Error::Invalid(format!("object cell ({}, {}) outside grid", o.row, o.col)));
            }
            objects.push(SceneObject { category, row: o.row, col: o.col, attribute });
        }
        let scene = Scene { objects, background: v.id(&line.background)?, seed: line.seed };
        check_scene(&scene)?;
        let removed_category = v.id(&line.removed_category)?;
        let removed: BTreeSet<usize> = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.category == removed_category)
            .map(|(i, _)| i)
            .collect();
        if removed.is_empty() {
            return Err(Error::Invalid(format!("removed category `{}` not in scene", line.removed_category)));
        }
        let image_w = self.render_full(&scene);
        let image_l = self.render(&scene, &removed);
        let record = PreferenceRecord {
            seed: line.seed,
            query: tokens(&line.query_tokens)?,
            y_w: tokens(&line.y_w_tokens)?,
            y_l: tokens(&line.y_l_tokens)?,
            removed_category,
            features_w: image_w.features(),
            features_l: image_l.features(),
            image_w,
            image_l,
        };
        check_record(v, &record)?;
        Ok(record)
    }
}

fn check_scene(scene: &Scene) -> Result<()> {
    if scene.objects.is_empty() {
        return Err(Error::Invalid("scene has no objects".into()));
    }
    let cells: BTreeSet<(usize, usize)> = scene.objects.iter().map(|o| (o.row, o.col)).collect();
    if cells.len() != scene.objects.len() {
        return Err(Error::Invalid("two objects share a cell".into()));
    }
    Ok(())
}

/// Checks the record invariants: the faithful caption mentions only present
/// categories, the hallucinated caption mentions at least one absent
/// category, and the rejected image lacks exactly the removed category.
pub fn check_record(vocab: &Vocab, record: &PreferenceRecord) -> Result<()> {
    let present = record.scene().categories();
    let mentions = |y: &[TokenId]| -> Vec<TokenId> { y.iter().copied().filter(|&t| vocab.is_category(t)).collect() };
    if mentions(&record.y_w).iter().any(|c| !present.contains(c)) {
        return Err(Error::Invalid("faithful caption mentions an absent category".into()));
    }
    if !mentions(&record.y_l).iter().any(|c| !present.contains(c)) {
        return Err(Error::Invalid("hallucinated caption mentions no absent category".into()));
    }
    let oracle = GridOracle::new(vocab.clone());
    let mut expected = oracle.tag(&record.image_w);
    if !expected.remove(&record.removed_category) || oracle.tag(&record.image_l) != expected {
        return Err(Error::Invalid("rejected image does not differ by exactly the removed category".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLine {
    pub category: String,
    pub row: usize,
    pub col: usize,
    pub attribute: String,
}

/// One JSON-lines dataset record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub seed: u64,
    pub query_tokens: Vec<String>,
    pub y_w_tokens: Vec<String>,
    pub y_l_tokens: Vec<String>,
    pub removed_category: String,
    pub background: String,
    pub scene_objects: Vec<ObjectLine>,
}

impl DatasetLine {
    pub fn from_record(vocab: &Vocab, record: &PreferenceRecord) -> Self {
        let scene = record.scene();
        Self {
            seed: record.seed,
            query_tokens: vocab.decode(&record.query),
            y_w_tokens: vocab.decode(&record.y_w),
            y_l_tokens: vocab.decode(&record.y_l),
            removed_category: vocab.word(record.removed_category).to_string(),
            background: vocab.word(scene.background).to_string(),
            scene_objects: scene
                .objects
                .iter()
                .map(|o| ObjectLine {
                    category: vocab.word(o.category).to_string(),
                    row: o.row,
                    col: o.col,
                    attribute: vocab.word(o.attribute).to_string(),
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    effective_config: serde_json::Value,
}

/// Writes a dataset as JSON lines. The first line is a header object
/// `{"effective_config": …}`; every following line is one record.
pub fn write_dataset(path: &Path, vocab: &Vocab, records: &[PreferenceRecord], config: &serde_json::Value) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &HeaderLine { effective_config: config.clone() })?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, &DatasetLine::from_record(vocab, record))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], re-rendering every image.
/// Returns the records and the header's configuration (`Null` if absent).
pub fn read_dataset(path: &Path, world: &World) -> Result<(Vec<PreferenceRecord>, serde_json::Value)> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut header = serde_json::Value::Null;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Dataset { line: lineno, msg: e.to_string() })?;
        if let Some(cfg) = value.get("effective_config") {
            header = cfg.clone();
            continue;
        }
        let parsed: DatasetLine =
            serde_json::from_value(value).map_err(|e| Error::Dataset { line: lineno, msg: e.to_string() })?;
        let record = world
            .rebuild_record(&parsed)
            .map_err(|e| Error::Dataset { line: lineno, msg: e.to_string() })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((records, header))
}

/// Count of records per removed category word.
pub fn removed_histogram(vocab: &Vocab, records: &[PreferenceRecord]) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for r in records {
        *hist.entry(vocab.word(r.removed_category).to_string()).or_default() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(Vocab::default(), WorldConfig::default()).unwrap()
    }

    fn scene(w: &World, objs: &[(&str, usize, usize, &str)]) -> Scene {
        let v = w.vocab();
        Scene {
            objects: objs
                .iter()
                .map(|&(c, r, col, a)| SceneObject { category: v.id(c).unwrap(), row: r, col, attribute: v.id(a).unwrap() })
                .collect(),
            background: v.id("gray").unwrap(),
            seed: 0,
        }
    }

    fn ids(w: &World, words: &[&str]) -> BTreeSet<TokenId> {
        words.iter().map(|s| w.vocab().id(s).unwrap()).collect()
    }

    #[test]
    fn tag_reads_present_categories() {
        let w = world();
        let s = scene(&w, &[("dog", 0, 0, "brown"), ("frisbee", 2, 5, "red"), ("tree", 7, 7, "green")]);
        let img = w.render_full(&s);
        assert_eq!(w.tag(&img), ids(&w, &["dog", "frisbee", "tree"]));
        let frisbee = w.vocab().id("frisbee").unwrap();
        let mask = w.segment(&img, &w.detect(&img, frisbee).unwrap());
        assert_eq!(w.tag(&w.remove(&img, &mask)), ids(&w, &["dog", "tree"]));
        let single = w.render_full(&scene(&w, &[("cat", 3, 3, "black")]));
        assert_eq!(w.tag(&single).len(), 1);
    }

    #[test]
    fn detect_boxes() {
        let w = world();
        let v = w.vocab();
        let img = w.render_full(&scene(&w, &[("dog", 2, 3, "brown")]));
        let b = w.detect(&img, v.id("dog").unwrap()).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (2, 3, 2, 3));
        let img = w.render_full(&scene(&w, &[("dog", 1, 1, "brown"), ("dog", 4, 4, "white"), ("cat", 2, 2, "red")]));
        let b = w.detect(&img, v.id("dog").unwrap()).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (1, 1, 4, 4));
        assert!(matches!(w.detect(&img, v.id("tree").unwrap()), Err(Error::CategoryAbsent(_))));
    }

    #[test]
    fn segment_marks_only_object_cells() {
        let w = world();
        let v = w.vocab();
        let img = w.render_full(&scene(&w, &[("dog", 1, 1, "brown"), ("dog", 4, 4, "white"), ("cat", 2, 2, "red")]));
        let b = w.detect(&img, v.id("dog").unwrap()).unwrap();
        let m = w.segment(&img, &b);
        assert_eq!(m.count(), 2);
        assert!(!m.get(2, 2), "cat inside the merged box must not be masked");
        assert!(m.iter_set().all(|(r, c)| b.contains(r, c)));
        let img = w.render_full(&scene(&w, &[("cup", 6, 0, "blue")]));
        let m = w.segment(&img, &w.detect(&img, v.id("cup").unwrap()).unwrap());
        assert_eq!(m.iter_set().collect::<Vec<_>>(), vec![(6, 0)]);
    }

    #[test]
    fn remove_properties() {
        let w = world();
        let s = scene(&w, &[("dog", 1, 1, "brown"), ("kite", 5, 2, "yellow")]);
        let img = w.render_full(&s);
        assert_eq!(w.remove(&img, &Mask::empty(8)), img);

        let kite = w.vocab().id("kite").unwrap();
        let mask = w.segment(&img, &w.detect(&img, kite).unwrap());
        let removed = w.remove(&img, &mask);
        assert_eq!(removed, w.render(&s, &BTreeSet::from([1])));
        for r in 0..8 {
            for c in 0..8 {
                if !mask.get(r, c) {
                    assert_eq!(img.cell(r, c), removed.cell(r, c));
                }
            }
        }

        let mut all = Mask::empty(8);
        all.set(1, 1, true);
        all.set(5, 2, true);
        let bare = w.remove(&img, &all);
        let first = bare.cell(0, 0).to_vec();
        assert!((0..64).all(|i| bare.cell(i / 8, i % 8) == first.as_slice()));
        assert!(w.tag(&bare).is_empty());
    }

    #[test]
    fn render_is_pure() {
        let w = world();
        let s = w.generate_scene(99);
        let removed = BTreeSet::from([0]);
        let a = w.render(&s, &removed);
        let b = w.render(&s, &removed);
        assert_eq!(
            a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn split_sentences_examples() {
        let w = world();
        let v = w.vocab();
        let one = v.encode_str("a red dog . <eos>").unwrap();
        assert_eq!(w.split_sentences(&one).len(), 1);
        let two = v.encode_str("a red dog . a cat . <eos>").unwrap();
        let pieces = w.split_sentences(&two);
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces.concat(), two);
        let open = v.encode_str("a dog . a cat").unwrap();
        assert_eq!(w.split_sentences(&open).len(), 2);
        assert_eq!(w.split_sentences(&open).concat(), open);
    }

    #[test]
    fn clip_score_examples() {
        let w = world();
        let v = w.vocab();
        let img = w.render_full(&scene(&w, &[("dog", 0, 0, "brown"), ("frisbee", 1, 1, "red")]));
        let s = vec![v.encode_str("a dog a frisbee .").unwrap()];
        assert!((w.clip_score(&img, &s) - 1.0).abs() < 1e-15);
        let no_dog = w.render(img.scene(), &BTreeSet::from([0]));
        let only_dog = vec![v.encode_str("a brown dog .").unwrap()];
        assert_eq!(w.clip_score(&no_dog, &only_dog), 0.0);
        let no_mention = vec![v.encode_str("the image .").unwrap()];
        assert_eq!(w.clip_score(&img, &no_mention), 0.0);
    }

    #[test]
    fn clip_scores_order_by_mention_count() {
        // dog mentioned 3x, frisbee 2x, tree 1x: the candidate without the
        // most-mentioned category scores lowest. Expected values are
        // Σ_{c≠k} m_c / √2 for unit instance counts.
        let w = world();
        let v = w.vocab();
        let img = w.render_full(&scene(&w, &[("dog", 0, 0, "brown"), ("frisbee", 1, 1, "red"), ("tree", 2, 2, "green")]));
        let y = v.encode_str("a dog . the dog . a dog . a frisbee . the frisbee . a tree . <eos>").unwrap();
        let (chosen, set) = w.select_rejected(&img, &y).unwrap();
        let score = |c: &str| set.entries.iter().find(|e| e.removed_category == v.id(c).unwrap()).unwrap().score;
        let r2 = 2f64.sqrt();
        assert!((score("dog") - 3.0 / r2).abs() < 1e-12);
        assert!((score("frisbee") - 4.0 / r2).abs() < 1e-12);
        assert!((score("tree") - 5.0 / r2).abs() < 1e-12);
        assert_eq!(w.tag(&chosen), ids(&w, &["frisbee", "tree"]));
    }

    #[test]
    fn select_rejected_examples() {
        let w = world();
        let v = w.vocab();
        let img = w.render_full(&scene(&w, &[("dog", 0, 0, "brown"), ("frisbee", 3, 3, "red")]));
        let both = v.encode_str("a dog . a frisbee . <eos>").unwrap();
        let (chosen, set) = w.select_rejected(&img, &both).unwrap();
        assert_eq!(set.entries.len(), 2);
        // equal scores: lexicographically smaller "dog" is removed
        assert_eq!(set.entries[0].score, set.entries[1].score);
        assert_eq!(w.tag(&chosen), ids(&w, &["frisbee"]));

        let frisbee_only = v.encode_str("a red frisbee . <eos>").unwrap();
        let (chosen, set) = w.select_rejected(&img, &frisbee_only).unwrap();
        let brute = set
            .entries
            .iter()
            .min_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .unwrap();
        assert_eq!(brute.removed_category, v.id("frisbee").unwrap());
        assert_eq!(w.tag(&chosen), ids(&w, &["dog"]));
    }

    #[test]
    fn generated_records_hold_invariants() {
        let w = world();
        let data = w.generate_dataset(60, 5).unwrap();
        for r in &data {
            check_record(w.vocab(), r).unwrap();
            assert!((1..=5).contains(&r.scene().objects.len()));
        }
        assert_eq!(data, w.generate_dataset(60, 5).unwrap());
        assert!(w.generate_dataset(0, 5).is_err());
    }

    #[test]
    fn salient_category_is_removed() {
        let w = world();
        for r in w.generate_dataset(100, 17).unwrap() {
            let first = r.scene().objects[0].category;
            let counts = w.oracle().category_counts(&r.image_w);
            // a category with more instances can outweigh the salient mention
            if counts.values().all(|&c| c == 1) {
                assert_eq!(r.removed_category, first);
            }
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let w = world();
        let data = w.generate_dataset(25, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let cfg = serde_json::json!({"dataset_size": 25});
        write_dataset(&path, w.vocab(), &data, &cfg).unwrap();
        let (back, header) = read_dataset(&path, &w).unwrap();
        assert_eq!(header, cfg);
        assert_eq!(back, data);
    }

    #[test]
    fn malformed_dataset_line_reports_line_number() {
        let w = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"effective_config\": {}}\n{\"seed\": 1}\n").unwrap();
        match read_dataset(&path, &w) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let v = Vocab::default();
        assert!(WorldConfig { num_categories: 5, ..WorldConfig::default() }.validate(&v).is_err());
        assert!(WorldConfig { min_objects: 0, ..WorldConfig::default() }.validate(&v).is_err());
        assert!(WorldConfig { num_categories: 40, ..WorldConfig::default() }.validate(&v).is_err());
        assert!(WorldConfig::default().validate(&v).is_ok());
    }
}

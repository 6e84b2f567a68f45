//! Log-linear conditional token model.
//!
//! At each step the next-token scores are `W · φ`, where the context vector
//! `φ = [image features; query bag-of-tokens; one-hot previous token]`
//! has dimension `d = d_img + V + V`. The first step uses the
//! end-of-sequence token as its previous token. Sequence log-probabilities
//! are plain sums over steps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// Dense row-major matrix used for weights and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.cols + col]
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "matrix shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Dense conditioning vector `φ(Q, I, y_prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    pub vector: Vec<f64>,
}

/// Sequence log-probability with its per-step terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// Sparse image + query part of φ, shared by every step of a sequence.
struct BaseFeatures {
    idx: Vec<usize>,
    val: Vec<f64>,
}

/// Parameters of the policy: a `V × d` weight matrix plus the vocabulary
/// and feature layout needed to interpret it.

/// Neumaier summation. Sequence totals sit near −100 while individual
/// steps are O(1), so plain accumulation loses most of the low bits that
/// finite-difference checks of the preference loss depend on.
fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    d_img: usize,
    weights: Matrix,
}

impl PolicyParams {
    pub fn zeros(vocab: Vocab, d_img: usize) -> Self {
        let v = vocab.len();
        Self { weights: Matrix::zeros(v, d_img + 2 * v), vocab, d_img }
    }

    /// Gaussian initialization `N(0, std²)` from a seeded ChaCha stream.
    pub fn random(vocab: Vocab, d_img: usize, std: f64, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(vocab, d_img);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in params.weights.as_mut_slice() {
                *w = normal.sample(&mut rng);
            }
        } else if std < 0.0 || !std.is_finite() {
            return Err(Error::Invalid(format!("init std must be non-negative, got {std}")));
        }
        Ok(params)
    }

    pub fn from_weights(vocab: Vocab, d_img: usize, weights: Matrix) -> Result<Self> {
        let v = vocab.len();
        if weights.rows() != v || weights.cols() != d_img + 2 * v {
            return Err(Error::Invalid(format!(
                "weights are {}x{}, expected {v}x{}",
                weights.rows(),
                weights.cols(),
                d_img + 2 * v
            )));
        }
        if let Some(bad) = weights.as_slice().iter().find(|w| !w.is_finite()) {
            return Err(Error::NonFinite { field: "weights", value: *bad });
        }
        Ok(Self { vocab, d_img, weights })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn d_query(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Zero matrix shaped like the weights.
    pub fn zeros_like(&self) -> Matrix {
        Matrix::zeros(self.weights.rows(), self.weights.cols())
    }

    fn prev_column(&self, prev: TokenId) -> usize {
        self.d_img + self.vocab.len() + prev.index()
    }

    fn check_inputs(&self, query: &[TokenId], image: &[f64]) -> Result<()> {
        if image.len() != self.d_img {
            return Err(Error::FeatureDim { expected: self.d_img, got: image.len() });
        }
        for &tok in query {
            self.vocab.check(tok)?;
        }
        Ok(())
    }

    fn check_response(&self, response: &[TokenId]) -> Result<()> {
        let last = response.last().ok_or(Error::EmptyResponse)?;
        for &tok in response {
            self.vocab.check(tok)?;
        }
        if *last != TokenId::EOS {
            return Err(Error::Unterminated);
        }
        Ok(())
    }

    fn base_features(&self, query: &[TokenId], image: &[f64]) -> BaseFeatures {
        let v = self.vocab.len();
        let mut counts = vec![0.0; v];
        for &tok in query {
            counts[tok.index()] += 1.0;
        }
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (j, &x) in image.iter().enumerate() {
            if x != 0.0 {
                idx.push(j);
                val.push(x);
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            if c != 0.0 {
                idx.push(self.d_img + k);
                val.push(c);
            }
        }
        BaseFeatures { idx, val }
    }

    fn base_scores(&self, base: &BaseFeatures) -> Vec<f64> {
        (0..self.vocab.len())
            .map(|row| {
                base.idx
                    .iter()
                    .zip(&base.val)
                    .map(|(&j, &x)| self.weights.get(row, j) * x)
                    .sum()
            })
            .collect()
    }

    /// Log-softmax over the vocabulary at one step, given the shared base
    /// scores and the previous token.
    fn step_log_probs(&self, base_scores: &[f64], prev: TokenId) -> Vec<f64> {
        let col = self.prev_column(prev);
        let scores: Vec<f64> = base_scores
            .iter()
            .enumerate()
            .map(|(row, &s)| s + self.weights.get(row, col))
            .collect();
        let lse = crate::pref_math::log_sum_exp(&scores);
        scores.into_iter().map(|s| s - lse).collect()
    }

    /// Dense φ for one step.
    pub fn context_features(&self, query: &[TokenId], image: &[f64], prev: TokenId) -> Result<ContextFeatures> {
        self.check_inputs(query, image)?;
        self.vocab.check(prev)?;
        let mut vector = vec![0.0; self.dim()];
        let base = self.base_features(query, image);
        for (&j, &x) in base.idx.iter().zip(&base.val) {
            vector[j] = x;
        }
        vector[self.prev_column(prev)] = 1.0;
        Ok(ContextFeatures { vector })
    }

    /// Log-probabilities of every token following `prev`.
    pub fn next_token_log_probs(&self, query: &[TokenId], image: &[f64], prev: TokenId) -> Result<Vec<f64>> {
        self.check_inputs(query, image)?;
        self.vocab.check(prev)?;
        let base = self.base_features(query, image);
        Ok(self.step_log_probs(&self.base_scores(&base), prev))
    }

    pub fn log_prob(&self, query: &[TokenId], image: &[f64], response: &[TokenId]) -> Result<SequenceLogProb> {
        self.check_inputs(query, image)?;
        self.check_response(response)?;
        let base = self.base_features(query, image);
        let base_scores = self.base_scores(&base);
        let mut prev = TokenId::EOS;
        let per_token: Vec<f64> = response
            .iter()
            .map(|&tok| {
                let lp = self.step_log_probs(&base_scores, prev)[tok.index()];
                prev = tok;
                lp
            })
            .collect();
        Ok(SequenceLogProb { total: compensated_sum(&per_token), per_token })
    }

    /// Adds `coef · ∇_W log π(response | query, image)` into `grad` and
    /// returns the sequence log-probability computed along the way.
    pub fn accumulate_grad_log_prob(
        &self,
        query: &[TokenId],
        image: &[f64],
        response: &[TokenId],
        coef: f64,
        grad: &mut Matrix,
    ) -> Result<SequenceLogProb> {
        self.check_inputs(query, image)?;
        self.check_response(response)?;
        if (grad.rows(), grad.cols()) != (self.weights.rows(), self.weights.cols()) {
            return Err(Error::Invalid("gradient buffer shape does not match weights".into()));
        }
        let v = self.vocab.len();
        let base = self.base_features(query, image);
        let base_scores = self.base_scores(&base);
        let mut summed = vec![0.0; v];
        let mut per_token = Vec::with_capacity(response.len());
        let mut prev = TokenId::EOS;
        for &tok in response {
            let log_probs = self.step_log_probs(&base_scores, prev);
            per_token.push(log_probs[tok.index()]);
            let col = self.prev_column(prev);
            for (row, lp) in log_probs.iter().enumerate() {
                let g = f64::from(u8::from(row == tok.index())) - lp.exp();
                summed[row] += g;
                *grad.get_mut(row, col) += coef * g;
            }
            prev = tok;
        }
        for (row, &g) in summed.iter().enumerate() {
            for (&j, &x) in base.idx.iter().zip(&base.val) {
                *grad.get_mut(row, j) += coef * g * x;
            }
        }
        Ok(SequenceLogProb { total: compensated_sum(&per_token), per_token })
    }

    /// Exact gradient of the sequence log-probability: `Σ_t (e_{y_t} − p_t) ⊗ φ_t`.
    pub fn grad_log_prob(&self, query: &[TokenId], image: &[f64], response: &[TokenId]) -> Result<Matrix> {
        let mut grad = self.zeros_like();
        self.accumulate_grad_log_prob(query, image, response, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Argmax decoding; ties go to the lowest token index. Stops after
    /// emitting end-of-sequence or `max_len` tokens.
    pub fn greedy_decode(&self, query: &[TokenId], image: &[f64], max_len: usize) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::Invalid("max_len must be at least 1".into()));
        }
        self.check_inputs(query, image)?;
        let base = self.base_features(query, image);
        let base_scores = self.base_scores(&base);
        let col_offset = self.d_img + self.vocab.len();
        let mut out = Vec::new();
        let mut prev = TokenId::EOS;
        while out.len() < max_len {
            let col = col_offset + prev.index();
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (row, &s) in base_scores.iter().enumerate() {
                let score = s + self.weights.get(row, col);
                if score > best_score {
                    best = row;
                    best_score = score;
                }
            }
            let tok = TokenId(best);
            out.push(tok);
            if tok == TokenId::EOS {
                break;
            }
            prev = tok;
        }
        Ok(out)
    }
}

const CHECKPOINT_FORMAT: &str = "adavip-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(default)]
    config: serde_json::Value,
    vocab: Vec<String>,
    v: usize,
    d: usize,
    d_img: usize,
    d_query: usize,
    weights: Vec<f64>,
}

/// Writes a self-describing JSON checkpoint. `config` is embedded verbatim
/// so every checkpoint records the run that produced it.
pub fn save_checkpoint(path: &Path, params: &PolicyParams, config: &serde_json::Value) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocab: params.vocab.tokens().to_vec(),
        v: params.vocab_size(),
        d: params.dim(),
        d_img: params.d_img,
        d_query: params.d_query(),
        weights: params.weights.as_slice().to_vec(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], returning the
/// parameters and the embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, serde_json::Value)> {
    let reader = BufReader::new(File::open(path)?);
    let file: CheckpointFile =
        serde_json::from_reader(reader).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            file.format, file.version
        )));
    }
    let vocab = Vocab::from_tokens(&file.vocab).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.v != vocab.len() || file.d_query != vocab.len() || file.d != file.d_img + 2 * file.v {
        return Err(Error::Checkpoint("inconsistent dimensions".into()));
    }
    let weights = Matrix::from_vec(file.v, file.d, file.weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = PolicyParams::from_weights(vocab, file.d_img, weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((params, file.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    const D_IMG: usize = 6;

    fn setup(seed: u64) -> (PolicyParams, Vec<TokenId>, Vec<f64>, Vec<TokenId>) {
        let params = PolicyParams::random(Vocab::default(), D_IMG, 0.3, seed).unwrap();
        let v = params.vocab();
        let query = v.encode_str("describe the image").unwrap();
        let image = vec![1.0, 0.0, 0.5, 0.0, 0.25, 1.0];
        let response = v.encode_str("a red dog . <eos>").unwrap();
        (params, query, image, response)
    }

    #[test]
    fn zero_weights_give_uniform_log_prob() {
        let params = PolicyParams::zeros(Vocab::default(), D_IMG);
        let v = params.vocab();
        let resp = v.encode_str("a red dog . a cat . <eos>").unwrap();
        let lp = params.log_prob(&[], &[0.0; D_IMG], &resp).unwrap();
        let expected = -(resp.len() as f64) * 64f64.ln();
        assert!((lp.total - expected).abs() < 1e-10);
    }

    #[test]
    fn total_is_sum_of_steps_and_deterministic() {
        let (params, q, img, resp) = setup(3);
        let a = params.log_prob(&q, &img, &resp).unwrap();
        let b = params.log_prob(&q, &img, &resp).unwrap();
        assert_eq!(a, b);
        let sum: f64 = a.per_token.iter().sum();
        assert!((a.total - sum).abs() < 1e-10);
        assert!(a.per_token.iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn step_distribution_normalized() {
        let (params, q, img, _) = setup(5);
        for prev in [0, 3, 20, 63] {
            let lps = params.next_token_log_probs(&q, &img, TokenId(prev)).unwrap();
            let total: f64 = lps.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn input_errors() {
        let (params, q, img, _) = setup(1);
        let v = params.vocab();
        let unterminated = v.encode_str("a dog .").unwrap();
        assert!(matches!(params.log_prob(&q, &img, &unterminated), Err(Error::Unterminated)));
        assert!(matches!(params.log_prob(&q, &img, &[]), Err(Error::EmptyResponse)));
        assert!(matches!(
            params.log_prob(&q, &img, &[TokenId(999), TokenId::EOS]),
            Err(Error::TokenOutOfRange(999))
        ));
        assert!(matches!(
            params.log_prob(&q, &img[..3], &[TokenId::EOS]),
            Err(Error::FeatureDim { .. })
        ));
    }

    #[test]
    fn gradient_columns_sum_to_zero_over_vocab() {
        let (params, q, img, resp) = setup(9);
        let g = params.grad_log_prob(&q, &img, &resp).unwrap();
        for col in 0..g.cols() {
            let s: f64 = (0..g.rows()).map(|r| g.get(r, col)).sum();
            assert!(s.abs() < 1e-10, "column {col} sums to {s}");
        }
    }

    #[test]
    fn zero_feature_has_zero_gradient_column() {
        let (params, q, img, resp) = setup(2);
        let g = params.grad_log_prob(&q, &img, &resp).unwrap();
        for (j, &x) in img.iter().enumerate() {
            if x == 0.0 {
                assert!((0..g.rows()).all(|r| g.get(r, j) == 0.0));
            }
        }
    }

    #[test]
    fn gradient_matches_dense_outer_products() {
        // Independent route: build φ_t densely and form Σ (e_y − p) ⊗ φ_t.
        let (params, q, img, resp) = setup(11);
        let mut expected = params.zeros_like();
        let mut prev = TokenId::EOS;
        for &tok in &resp {
            let phi = params.context_features(&q, &img, prev).unwrap().vector;
            let scores: Vec<f64> = (0..params.vocab_size())
                .map(|r| (0..params.dim()).map(|c| params.weights().get(r, c) * phi[c]).sum())
                .collect();
            let lse = crate::pref_math::log_sum_exp(&scores);
            for r in 0..params.vocab_size() {
                let g = f64::from(u8::from(r == tok.index())) - (scores[r] - lse).exp();
                for c in 0..params.dim() {
                    *expected.get_mut(r, c) += g * phi[c];
                }
            }
            prev = tok;
        }
        let got = params.grad_log_prob(&q, &img, &resp).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn greedy_zero_weights_stops_immediately() {
        let params = PolicyParams::zeros(Vocab::default(), D_IMG);
        let out = params.greedy_decode(&[], &[0.0; D_IMG], 10).unwrap();
        assert_eq!(out, vec![TokenId::EOS]);
    }

    #[test]
    fn greedy_respects_max_len_and_is_deterministic() {
        let (mut params, q, img, _) = setup(4);
        // Force a non-terminating chain: every token prefers "a".
        let a = params.vocab().id("a").unwrap();
        let d_img = params.d_img();
        let v = params.vocab_size();
        for prev in 0..v {
            *params.weights_mut().get_mut(a.index(), d_img + v + prev) += 100.0;
        }
        let first = params.greedy_decode(&q, &img, 7).unwrap();
        assert_eq!(first.len(), 7);
        assert!(first.iter().all(|&t| t == a));
        assert_eq!(first, params.greedy_decode(&q, &img, 7).unwrap());
        assert!(params.greedy_decode(&q, &img, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (params, ..) = setup(42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let cfg = serde_json::json!({"seed": 42});
        save_checkpoint(&path, &params, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let bits = |p: &PolicyParams| p.weights().as_slice().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded), bits(&params));
        assert_eq!(loaded.vocab(), params.vocab());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, b"{\"format\": \"adavip-checkpoint\"").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}

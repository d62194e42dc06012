//! Vector-quantized skill codebook: a single-code autoencoder over model
//! states, EMA codebook updates, and periodic resampling of inactive codes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::substrate::nn::Mlp;
use crate::substrate::optim::{clip_grad_norm, ParamSet};
use crate::substrate::tape::{Tape, V};
use crate::substrate::tensor::Tensor;

/// Denominator floor in the EMA code average.
pub const EMA_COUNT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Codebook {
    /// `N x d_z` code rows.
    pub codes: Tensor,
    pub ema_counts: Vec<f64>,
    /// `N x d_z` running sums of assigned embeddings.
    pub ema_sums: Tensor,
    /// Consecutive batches during which each code received no assignment.
    pub inactive_batches: Vec<u32>,
    pub n: usize,
    pub d_z: usize,
}

impl Codebook {
    pub fn new(n: usize, d_z: usize, rng: &mut impl Rng) -> Self {
        assert!(n >= 2, "codebook needs at least 2 codes");
        let codes: Vec<f64> = (0..n * d_z).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Codebook {
            codes: Tensor::matrix(n, d_z, codes),
            ema_counts: vec![0.0; n],
            ema_sums: Tensor::matrix(n, d_z, vec![0.0; n * d_z]),
            inactive_batches: vec![0; n],
            n,
            d_z,
        }
    }

    pub fn code_row(&self, i: usize) -> &[f64] {
        self.codes.row_slice(i)
    }

    /// Index of the closest code (squared L2), ties broken by lowest index,
    /// plus a copy of the stored code row.
    pub fn quantize(&self, embedding: &[f64]) -> (usize, Vec<f64>) {
        assert_eq!(embedding.len(), self.d_z, "embedding dimension mismatch");
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..self.n {
            let d = sq_dist(embedding, self.code_row(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, self.code_row(best).to_vec())
    }

    /// Squared distance from `point` to its nearest code.
    pub fn nearest_sq_dist(&self, point: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| sq_dist(point, self.code_row(i)))
            .fold(f64::INFINITY, f64::min)
    }

    /// EMA update from one batch of assigned embeddings.
    pub fn ema_update(&mut self, embeddings: &Tensor, indices: &[usize], decay: f64) {
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
        assert_eq!(embeddings.rows(), indices.len());
        let mut counts = vec![0.0f64; self.n];
        let mut sums = vec![0.0f64; self.n * self.d_z];
        for (row, &i) in indices.iter().enumerate() {
            counts[i] += 1.0;
            for (k, &e) in embeddings.row_slice(row).iter().enumerate() {
                sums[i * self.d_z + k] += e;
            }
        }
        for i in 0..self.n {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * counts[i];
            for k in 0..self.d_z {
                let idx = i * self.d_z + k;
                self.ema_sums.data[idx] =
                    decay * self.ema_sums.data[idx] + (1.0 - decay) * sums[idx];
            }
            if counts[i] > 0.0 {
                let denom = self.ema_counts[i].max(EMA_COUNT_EPS);
                for k in 0..self.d_z {
                    self.codes.data[i * self.d_z + k] = self.ema_sums.data[i * self.d_z + k] / denom;
                }
                self.inactive_batches[i] = 0;
            } else {
                self.inactive_batches[i] += 1;
            }
        }
    }

    /// Re-initialize every code inactive for at least `m` batches from the
    /// given embeddings, weighted by squared distance to the nearest
    /// current code. Distances are recomputed after each overwrite so
    /// later resampled codes account for earlier ones.
    ///
    /// Returns the indices of the resampled codes.
    pub fn resample(
        &mut self,
        batch_embeddings: &Tensor,
        m: u32,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        if batch_embeddings.rows() == 0 {
            return Err(ChoreoError::contract(
                "resample requires a nonempty embedding batch".to_string(),
            ));
        }
        let rows = batch_embeddings.rows();
        let mut resampled = Vec::new();
        for code_idx in 0..self.n {
            if self.inactive_batches[code_idx] < m {
                continue;
            }
            let weights: Vec<f64> = (0..rows)
                .map(|r| self.nearest_sq_dist(batch_embeddings.row_slice(r)))
                .collect();
            let total: f64 = weights.iter().sum();
            let pick = if total > 0.0 {
                sample_weighted(&weights, total, rng)
            } else {
                // every embedding coincides with a code
                rng.gen_range(0..rows)
            };
            let chosen = batch_embeddings.row_slice(pick).to_vec();
            for (k, &v) in chosen.iter().enumerate() {
                self.codes.data[code_idx * self.d_z + k] = v;
                self.ema_sums.data[code_idx * self.d_z + k] = v;
            }
            self.ema_counts[code_idx] = 1.0;
            self.inactive_batches[code_idx] = 0;
            resampled.push(code_idx);
        }
        Ok(resampled)
    }

    /// Fraction of codes assigned at least once in the last `m` batches.
    pub fn active_fraction(&self, m: u32) -> f64 {
        let active = self.inactive_batches.iter().filter(|&&b| b < m).count();
        active as f64 / self.n as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn sample_weighted(weights: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Uniform skill draw, `z ~ Unif{0..n-1}`.
pub fn sample_skill_uniform(n: usize, rng: &mut impl Rng) -> usize {
    rng.gen_range(0..n)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VqConfig {
    /// Dimension of the model-state vectors being encoded.
    pub state_dim: usize,
    pub n_codes: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Commitment weight β.
    pub beta: f64,
    pub ema_decay: f64,
    /// Resampling period M in training batches.
    pub resample_every: u32,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            state_dim: 64,
            n_codes: 64,
            code_dim: 16,
            hidden: 128,
            layers: 2,
            beta: 0.25,
            ema_decay: 0.99,
            resample_every: 200,
            learning_rate: 3e-4,
            grad_clip: 100.0,
        }
    }
}

/// Skill autoencoder: encoder, codebook, decoder.
#[derive(Clone, Debug)]
pub struct SkillVq {
    pub cfg: VqConfig,
    pub params: ParamSet,
    pub codebook: Codebook,
    pub batches_seen: u64,
    encoder: Mlp,
    decoder: Mlp,
}

/// One forward pass over a batch of state vectors.
pub struct VqForward {
    pub embeddings: V,
    pub recon: V,
    pub indices: Vec<usize>,
    pub loss: V,
}

impl SkillVq {
    pub fn new(cfg: VqConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![cfg.state_dim];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.layers));
        dims.push(cfg.code_dim);
        let encoder = Mlp::new("vq.enc", dims);
        let mut dims = vec![cfg.code_dim];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.layers));
        dims.push(cfg.state_dim);
        let decoder = Mlp::new("vq.dec", dims);
        let mut params = ParamSet::new();
        encoder.init(&mut params, rng);
        decoder.init(&mut params, rng);
        let codebook = Codebook::new(cfg.n_codes, cfg.code_dim, rng);
        SkillVq {
            cfg,
            params,
            codebook,
            batches_seen: 0,
            encoder,
            decoder,
        }
    }

    /// Encode a batch of states (rows) into embeddings.
    pub fn encode(&self, tape: &mut Tape, states: V, train: bool) -> V {
        self.encoder.forward(tape, &self.params, states, train)
    }

    /// Deterministic decoder pass on code rows.
    pub fn decode(&self, tape: &mut Tape, codes: V, train: bool) -> V {
        self.decoder.forward(tape, &self.params, codes, train)
    }

    /// Decode a single code vector to a state-space vector.
    pub fn decode_vec(&self, code: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(code));
        let out = self.decode(&mut tape, c, false);
        tape.value(out).data.clone()
    }

    /// Quantized autoencoder forward: reconstruction + commitment loss.
    ///
    /// Gradients flow decoder -> encoder via straight-through; codebook
    /// rows receive none (they are EMA-updated).
    pub fn forward(&self, tape: &mut Tape, states: V, train: bool) -> VqForward {
        let batch = tape.value(states).rows();
        assert!(batch > 0, "vq forward needs a nonempty batch");
        let embeddings = self.encode(tape, states, train);
        let emb_val = tape.value(embeddings).clone();
        let mut indices = Vec::with_capacity(batch);
        let mut code_rows = Vec::with_capacity(batch * self.cfg.code_dim);
        for r in 0..batch {
            let (idx, code) = self.codebook.quantize(emb_val.row_slice(r));
            indices.push(idx);
            code_rows.extend_from_slice(&code);
        }
        let codes_t = Tensor::matrix(batch, self.cfg.code_dim, code_rows);
        let codes_const = tape.constant(codes_t.clone());
        let st_codes = tape.straight_through(embeddings, codes_t);
        let recon = self.decode(tape, st_codes, train);

        let rec_diff = tape.sub(recon, states);
        let rec_sq = tape.square(rec_diff);
        let rec_rows = tape.sum_rows(rec_sq);
        let rec_sum = tape.sum_all(rec_rows);
        let rec_term = tape.scale(rec_sum, 1.0 / batch as f64);

        let commit_diff = tape.sub(embeddings, codes_const);
        let commit_sq = tape.square(commit_diff);
        let commit_rows = tape.sum_rows(commit_sq);
        let commit_sum = tape.sum_all(commit_rows);
        let commit_term = tape.scale(commit_sum, self.cfg.beta / batch as f64);

        let loss = tape.add(rec_term, commit_term);
        VqForward {
            embeddings,
            recon,
            indices,
            loss,
        }
    }

    /// One training batch: gradient step on encoder/decoder, EMA codebook
    /// update, and (when enabled) code resampling every `resample_every`
    /// batches.
    pub fn train_batch(
        &mut self,
        states: &Tensor,
        with_resampling: bool,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        self.batches_seen += 1;
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let fwd = self.forward(&mut tape, s, true);
        let loss = tape.value(fwd.loss).item();
        let grads = tape.backward(fwd.loss)?;
        let mut grads = tape.param_grads(&self.params, &grads);
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let embeddings = tape.value(fwd.embeddings).clone();
        self.params.adam_step(&grads, self.cfg.learning_rate)?;
        self.codebook
            .ema_update(&embeddings, &fwd.indices, self.cfg.ema_decay);
        if with_resampling && self.batches_seen % self.cfg.resample_every as u64 == 0 {
            self.codebook
                .resample(&embeddings, self.cfg.resample_every, rng)?;
        }
        Ok(loss)
    }
}

/// Diagnostic export of a codebook.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookExport {
    pub version: u32,
    pub n: usize,
    pub d_z: usize,
    pub codes: Vec<Vec<f64>>,
    pub active_mask: Vec<bool>,
}

pub fn export_codebook(cb: &Codebook, m: u32) -> CodebookExport {
    CodebookExport {
        version: 1,
        n: cb.n,
        d_z: cb.d_z,
        codes: (0..cb.n).map(|i| cb.code_row(i).to_vec()).collect(),
        active_mask: cb.inactive_batches.iter().map(|&b| b < m).collect(),
    }
}

/// Synthetic-mixture training study used by the `bench-codebook` command:
/// trains the autoencoder on a Gaussian mixture with or without code
/// resampling and reports code usage.
pub mod bench {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[derive(Clone, Debug, Serialize, Deserialize)]
    pub struct BenchConfig {
        pub modes: usize,
        pub state_dim: usize,
        pub batch_size: usize,
        pub batches: u64,
        pub noise_std: f64,
        pub vq: VqConfig,
        pub with_resampling: bool,
        pub seed: u64,
    }

    impl Default for BenchConfig {
        fn default() -> Self {
            BenchConfig {
                modes: 64,
                state_dim: 16,
                batch_size: 64,
                batches: 10_000,
                noise_std: 0.05,
                vq: VqConfig {
                    state_dim: 16,
                    n_codes: 64,
                    code_dim: 16,
                    hidden: 64,
                    layers: 1,
                    ..VqConfig::default()
                },
                with_resampling: true,
                seed: 0,
            }
        }
    }

    #[derive(Clone, Debug, Serialize, Deserialize)]
    pub struct BenchReport {
        pub with_resampling: bool,
        pub seed: u64,
        /// Active-code fraction sampled every 100 batches.
        pub active_fraction_curve: Vec<f64>,
        /// Mean training loss over the final 100 batches.
        pub final_loss: f64,
        /// Per-code assignment counts over a held-out evaluation sample.
        pub assignment_histogram: Vec<usize>,
        /// Fraction of codes never assigned in the evaluation sample.
        pub unused_fraction: f64,
    }

    pub struct Mixture {
        pub centers: Vec<Vec<f64>>,
        pub noise_std: f64,
    }

    impl Mixture {
        pub fn new(modes: usize, dim: usize, noise_std: f64, rng: &mut impl Rng) -> Self {
            let centers = (0..modes)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            Mixture { centers, noise_std }
        }

        pub fn sample_batch(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
            let dim = self.centers[0].len();
            let noise = Normal::new(0.0, self.noise_std).unwrap();
            let mut data = Vec::with_capacity(batch * dim);
            for _ in 0..batch {
                let c = &self.centers[rng.gen_range(0..self.centers.len())];
                for &v in c {
                    data.push(v + noise.sample(rng));
                }
            }
            Tensor::matrix(batch, dim, data)
        }
    }

    pub fn run(cfg: &BenchConfig) -> crate::error::Result<BenchReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mixture = Mixture::new(cfg.modes, cfg.state_dim, cfg.noise_std, &mut rng);
        let mut vq = SkillVq::new(cfg.vq.clone(), &mut rng);
        let mut curve = Vec::new();
        let mut last_losses = std::collections::VecDeque::with_capacity(100);
        for b in 0..cfg.batches {
            let batch = mixture.sample_batch(cfg.batch_size, &mut rng);
            let loss = vq.train_batch(&batch, cfg.with_resampling, &mut rng)?;
            if last_losses.len() == 100 {
                last_losses.pop_front();
            }
            last_losses.push_back(loss);
            if (b + 1) % 100 == 0 {
                curve.push(vq.codebook.active_fraction(cfg.vq.resample_every));
            }
        }
        // held-out usage histogram
        let eval = mixture.sample_batch(2048, &mut rng);
        let mut tape = Tape::new();
        let s = tape.constant(eval);
        let emb = vq.encode(&mut tape, s, false);
        let emb_val = tape.value(emb);
        let mut histogram = vec![0usize; cfg.vq.n_codes];
        for r in 0..emb_val.rows() {
            let (idx, _) = vq.codebook.quantize(emb_val.row_slice(r));
            histogram[idx] += 1;
        }
        let unused = histogram.iter().filter(|&&c| c == 0).count();
        Ok(BenchReport {
            with_resampling: cfg.with_resampling,
            seed: cfg.seed,
            active_fraction_curve: curve,
            final_loss: last_losses.iter().sum::<f64>() / last_losses.len() as f64,
            assignment_histogram: histogram,
            unused_fraction: unused as f64 / cfg.vq.n_codes as f64,
        })
    }
}

//! Synthetic multi-language frame classification.
//!
//! Each language `k` owns a random linear map `A_k` and a centroid `c_k`;
//! each label `y` owns a prototype `u_y`. A frame of token `y` spoken in
//! language `k` is `A_k (c_k + u_y) + σ ε`. Tokens `0..shared` carry the same
//! label in every language; the remaining tokens are language specific.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{KvMap, KvWriter};
use crate::error::{Error, Result};
use crate::sequence::Segments;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub num_languages: usize,
    pub feature_dim: usize,
    pub tokens_per_language: usize,
    pub shared_tokens: usize,
    /// Tokens per sequence, inclusive range.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Encoder output frames each token lasts.
    pub frames_per_token: usize,
    /// Input frames per encoder output frame.
    pub input_frames_per_output: usize,
    pub noise: f64,
    /// Scale of the language centroids relative to the token prototypes.
    pub language_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_languages: 4,
            feature_dim: 16,
            tokens_per_language: 8,
            shared_tokens: 2,
            min_tokens: 4,
            max_tokens: 8,
            frames_per_token: 2,
            input_frames_per_output: 6,
            noise: 0.3,
            language_scale: 1.0,
            seed: 1234,
        }
    }
}

impl SyntheticTaskSpec {
    /// `shared + K·(V − shared)`.
    pub fn num_labels(&self) -> usize {
        self.shared_tokens + self.num_languages * (self.tokens_per_language - self.shared_tokens)
    }

    pub fn label(&self, language: usize, token: usize) -> usize {
        if token < self.shared_tokens {
            token
        } else {
            self.shared_tokens + language * (self.tokens_per_language - self.shared_tokens) + token
                - self.shared_tokens
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_languages == 0 || self.feature_dim == 0 || self.tokens_per_language == 0 {
            return Err(Error::config("task needs languages, features and tokens"));
        }
        if self.shared_tokens > self.tokens_per_language {
            return Err(Error::config(
                "task.shared_tokens exceeds task.tokens_per_language",
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::config(
                "task token range must satisfy 1 <= min <= max",
            ));
        }
        if self.frames_per_token == 0 || self.input_frames_per_output == 0 {
            return Err(Error::config("task frame rates must be positive"));
        }
        if !(self.noise >= 0.0) || !(self.language_scale >= 0.0) {
            return Err(Error::config(
                "task noise and language scale must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, defaults: &SyntheticTaskSpec) -> Result<Self> {
        let d = defaults;
        let spec = SyntheticTaskSpec {
            num_languages: kv.get_or("task.languages", d.num_languages)?,
            feature_dim: kv.get_or("task.feature_dim", d.feature_dim)?,
            tokens_per_language: kv.get_or("task.tokens_per_language", d.tokens_per_language)?,
            shared_tokens: kv.get_or("task.shared_tokens", d.shared_tokens)?,
            min_tokens: kv.get_or("task.min_tokens", d.min_tokens)?,
            max_tokens: kv.get_or("task.max_tokens", d.max_tokens)?,
            frames_per_token: kv.get_or("task.frames_per_token", d.frames_per_token)?,
            input_frames_per_output: d.input_frames_per_output,
            noise: kv.get_or("task.noise", d.noise)?,
            language_scale: kv.get_or("task.language_scale", d.language_scale)?,
            seed: kv.get_or("task.seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("task.languages", self.num_languages)
            .put("task.feature_dim", self.feature_dim)
            .put("task.tokens_per_language", self.tokens_per_language)
            .put("task.shared_tokens", self.shared_tokens)
            .put("task.min_tokens", self.min_tokens)
            .put("task.max_tokens", self.max_tokens)
            .put("task.frames_per_token", self.frames_per_token)
            .put("task.noise", self.noise)
            .put("task.language_scale", self.language_scale)
            .put("task.seed", self.seed);
    }
}

/// A packed batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[ΣT × feature_dim]` input frames.
    pub features: Tensor<f32>,
    pub segments: Segments,
    /// One label per encoder output frame.
    pub labels: Vec<usize>,
    /// Language of each sequence.
    pub languages: Vec<usize>,
}

impl Batch {
    /// Language of every output frame, given the output segments.
    pub fn frame_languages(&self, output: &Segments) -> Vec<usize> {
        output
            .frame_owner()
            .into_iter()
            .map(|s| self.languages[s])
            .collect()
    }
}

/// Generator state derived deterministically from a spec.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    /// Per language: `A_k` row-major `[d × d]`.
    maps: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let maps = (0..spec.num_languages)
            .map(|_| gaussian_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt()))
            .collect();
        let centroids = (0..spec.num_languages)
            .map(|_| gaussian_vec(&mut rng, d, spec.language_scale))
            .collect();
        let prototypes = (0..spec.num_labels())
            .map(|_| gaussian_vec(&mut rng, d, 1.0))
            .collect();
        Ok(SyntheticTask {
            spec: spec.clone(),
            maps,
            centroids,
            prototypes,
        })
    }

    /// Noise-free frame of `token` in `language`.
    pub fn mean_frame(&self, language: usize, token: usize) -> Vec<f64> {
        let d = self.spec.feature_dim;
        let label = self.spec.label(language, token);
        let m: Vec<f64> = self.centroids[language]
            .iter()
            .zip(&self.prototypes[label])
            .map(|(c, u)| c + u)
            .collect();
        let a = &self.maps[language];
        (0..d)
            .map(|i| (0..d).map(|j| a[i * d + j] * m[j]).sum())
            .collect()
    }

    /// One sequence: `(frames, output labels)`.
    pub fn sequence<R: Rng + ?Sized>(
        &self,
        language: usize,
        rng: &mut R,
    ) -> (Vec<f32>, Vec<usize>) {
        let s = &self.spec;
        let n_tokens = rng.random_range(s.min_tokens..=s.max_tokens);
        let hold = s.frames_per_token * s.input_frames_per_output;
        let mut frames = Vec::with_capacity(n_tokens * hold * s.feature_dim);
        let mut labels = Vec::with_capacity(n_tokens * s.frames_per_token);
        for _ in 0..n_tokens {
            let token = rng.random_range(0..s.tokens_per_language);
            let mean = self.mean_frame(language, token);
            for _ in 0..hold {
                for &m in &mean {
                    let e: f64 = StandardNormal.sample(rng);
                    frames.push((m + s.noise * e) as f32);
                }
            }
            labels.extend(std::iter::repeat_n(
                s.label(language, token),
                s.frames_per_token,
            ));
        }
        (frames, labels)
    }

    pub fn generate_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(batch_size);
        let mut labels = Vec::new();
        let mut languages = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let language = rng.random_range(0..self.spec.num_languages);
            let (frames, l) = self.sequence(language, rng);
            lengths.push(frames.len() / self.spec.feature_dim);
            data.extend(frames);
            labels.extend(l);
            languages.push(language);
        }
        let total = lengths.iter().sum();
        Batch {
            features: Tensor::from_parts(vec![total, self.spec.feature_dim], data),
            segments: Segments::new(lengths),
            labels,
            languages,
        }
    }
}

/// Builds the task and draws one batch.
pub fn generate_batch<R: Rng + ?Sized>(
    spec: &SyntheticTaskSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    Ok(SyntheticTask::new(spec)?.generate_batch(batch_size, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_alphabet() {
        let spec = SyntheticTaskSpec::default();
        assert_eq!(spec.num_labels(), 2 + 4 * 6);
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..4 {
            for v in 0..8 {
                seen.insert(spec.label(k, v));
            }
        }
        assert_eq!(seen.len(), spec.num_labels());
        assert_eq!(spec.label(0, 1), spec.label(3, 1));
    }

    #[test]
    fn zero_noise_repeats_frames() {
        let spec = SyntheticTaskSpec {
            noise: 0.0,
            ..SyntheticTaskSpec::default()
        };
        let task = SyntheticTask::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (frames, labels) = task.sequence(1, &mut rng);
        let d = spec.feature_dim;
        let hold = spec.frames_per_token * spec.input_frames_per_output;
        assert_eq!(
            frames.len() / d,
            labels.len() * spec.input_frames_per_output
        );
        assert_eq!(&frames[..d], &frames[(hold - 1) * d..hold * d]);
    }

    #[test]
    fn batches_are_reproducible() {
        let task = SyntheticTask::new(&SyntheticTaskSpec::default()).unwrap();
        let a = task.generate_batch(5, &mut ChaCha8Rng::seed_from_u64(8));
        let b = task.generate_batch(5, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        let out = a.segments.downsampled(6);
        assert_eq!(out.total(), a.labels.len());
    }
}

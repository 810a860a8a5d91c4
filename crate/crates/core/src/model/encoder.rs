//! Frozen stand-ins for the pretrained text and image encoders.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::layers::randn;
use super::ImageSpec;
use crate::error::{Error, Result};

/// Maps each name to a pseudo-random unit vector seeded by a stable hash of
/// the string. Has no trainable state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyTextEncoder {
    pub dim: usize,
    pub salt: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, salt: u64) -> Self {
        Self { dim, salt }
    }

    fn seed_for(&self, name: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.salt.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn encode_one(&self, name: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed_for(name));
        let v: Array1<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.dot(&v).sqrt();
        v / norm
    }

    /// One row per name.
    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> Result<Array2<f64>> {
        if self.dim == 0 {
            return Err(Error::EncoderUnavailable("zero embedding dimension".into()));
        }
        if names.is_empty() {
            return Err(Error::EmptyCategoryList);
        }
        let mut out = Array2::zeros((names.len(), self.dim));
        for (mut row, name) in out.rows_mut().into_iter().zip(names) {
            row.assign(&self.encode_one(name.as_ref()));
        }
        Ok(out)
    }
}

/// Non-overlapping linear patch embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoder {
    pub spec: ImageSpec,
    /// `(3·patch_h·patch_w, D)`; patch vectors are laid out as `(dy, dx, channel)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl PatchEncoder {
    pub fn init(spec: ImageSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = 3 * spec.patch_h() * spec.patch_w();
        Self {
            spec,
            weight: randn(&mut rng, fan_in, spec.embed_dim, 1.0 / (fan_in as f64).sqrt()),
            bias: Array1::zeros(spec.embed_dim),
        }
    }

    /// `(token_h·token_w, D)` features of an `(H, W, 3)` image.
    pub fn encode(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let spec = &self.spec;
        if image.dim() != (spec.height, spec.width, 3) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} does not match spec {}x{}x3",
                image.dim(),
                spec.height,
                spec.width
            )));
        }
        let (ph, pw) = (spec.patch_h(), spec.patch_w());
        let mut patches = Array2::zeros((spec.num_tokens(), 3 * ph * pw));
        for th in 0..spec.token_h {
            for tw in 0..spec.token_w {
                let mut row = patches.row_mut(th * spec.token_w + tw);
                let mut i = 0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        for c in 0..3 {
                            row[i] = image[[th * ph + dy, tw * pw + dx, c]];
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(patches.dot(&self.weight) + &self.bias)
    }
}

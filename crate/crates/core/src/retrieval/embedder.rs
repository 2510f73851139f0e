use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{features_36_with, FEATURE_DIM};
use crate::image::RgbImage;
use crate::stain::StainMatrix;

/// Maps a tile to a fixed-length vector. Implementations must be
/// deterministic and return finite values.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tile: &RgbImage) -> Vec<f32>;
}

fn l2_normalized(v: impl IntoIterator<Item = f64>) -> Vec<f32> {
    let v: Vec<f64> = v.into_iter().collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| (x / norm) as f32).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// The 36 color features, L2-normalized.
#[derive(Debug, Clone, Default)]
pub struct FeatureEmbedder {
    stains: StainMatrix,
}

impl FeatureEmbedder {
    pub fn new(stains: StainMatrix) -> Self {
        Self { stains }
    }
}

impl Embedder for FeatureEmbedder {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn embed(&self, tile: &RgbImage) -> Vec<f32> {
        l2_normalized(features_36_with(tile, &self.stains).0)
    }
}

/// Seeded Gaussian projection of the 36 color features to `dim`
/// dimensions, L2-normalized.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    dim: usize,
    seed: u64,
    matrix: Vec<f64>,
    inner: FeatureEmbedder,
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let matrix = (0..dim * FEATURE_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            dim,
            seed,
            matrix,
            inner: FeatureEmbedder::default(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tile: &RgbImage) -> Vec<f32> {
        let f = features_36_with(tile, &self.inner.stains);
        l2_normalized(
            self.matrix
                .chunks_exact(FEATURE_DIM)
                .map(|row| row.iter().zip(f.0.iter()).map(|(a, b)| a * b).sum::<f64>()),
        )
    }
}

/// Textual embedder selection: `features` or `random:<dim>:<seed>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderSpec {
    Features,
    RandomProjection { dim: usize, seed: u64 },
}

impl EmbedderSpec {
    pub fn build(self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderSpec::Features => Box::new(FeatureEmbedder::default()),
            EmbedderSpec::RandomProjection { dim, seed } => {
                Box::new(RandomProjectionEmbedder::new(dim, seed)?)
            }
        })
    }
}

impl FromStr for EmbedderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["features"] => Ok(EmbedderSpec::Features),
            ["random", dim, seed] => Ok(EmbedderSpec::RandomProjection {
                dim: dim
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad embedder dim {dim:?}")))?,
                seed: seed
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad embedder seed {seed:?}")))?,
            }),
            _ => Err(Error::invalid(format!(
                "unknown embedder {s:?} (expected `features` or `random:<dim>:<seed>`)"
            ))),
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Features => f.write_str("features"),
            EmbedderSpec::RandomProjection { dim, seed } => write!(f, "random:{dim}:{seed}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn feature_embedding_is_unit_norm() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 9) as u8, 100, (y * 13) as u8]));
        let v = FeatureEmbedder::default().embed(&img);
        assert_eq!(v.len(), 36);
        let n: f32 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn random_projection_seeded() {
        let img = RgbImage::from_pixel(8, 8, Rgb([10, 200, 30]));
        let a = RandomProjectionEmbedder::new(12, 3).unwrap();
        let b = RandomProjectionEmbedder::new(12, 3).unwrap();
        assert_eq!(a.embed(&img), b.embed(&img));
        assert_eq!(a.embed(&img).len(), 12);
        assert_ne!(a.embed(&img), RandomProjectionEmbedder::new(12, 4).unwrap().embed(&img));
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("features".parse::<EmbedderSpec>().unwrap(), EmbedderSpec::Features);
        let s: EmbedderSpec = "random:64:7".parse().unwrap();
        assert_eq!(s, EmbedderSpec::RandomProjection { dim: 64, seed: 7 });
        assert_eq!(s.to_string(), "random:64:7");
        assert!("random:x:1".parse::<EmbedderSpec>().is_err());
        assert!("resnet".parse::<EmbedderSpec>().is_err());
    }
}

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::linalg::Mat;
use crate::policy::{Activation, Mlp, PolicyError};
use crate::trainer::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum AutoencoderError {
    #[error("autoencoder corpus is empty")]
    EmptyCorpus,
    #[error("image {index} has {got} pixels, expected {expected}")]
    ImageSize {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid autoencoder configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed autoencoder file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Network(#[from] PolicyError),
    #[error(transparent)]
    Graph(#[from] crate::autodiff::GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 10,
            epochs: 300,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Image encoder and decoder trained jointly on reconstruction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub config: AutoencoderConfig,
    /// Mean squared reconstruction error per pixel over the corpus.
    pub reconstruction_mse: f64,
    pub corpus_size: usize,
}

impl Autoencoder {
    pub fn image_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, image: &[f64]) -> Vec<f64> {
        self.encoder.forward(image)
    }

    pub fn decode(&self, latent: &[f64]) -> Vec<f64> {
        self.decoder.forward(latent)
    }

    /// Trains on `images` with Adam; deterministic for a fixed seed.
    pub fn train(images: &[Vec<f64>], config: AutoencoderConfig) -> Result<Self, AutoencoderError> {
        let first = images.first().ok_or(AutoencoderError::EmptyCorpus)?;
        let dim = first.len();
        for (index, img) in images.iter().enumerate() {
            if img.len() != dim {
                return Err(AutoencoderError::ImageSize {
                    index,
                    expected: dim,
                    got: img.len(),
                });
            }
        }
        if config.batch_size == 0 || config.latent == 0 || config.hidden == 0 {
            return Err(AutoencoderError::Config(
                "hidden, latent and batch_size must be at least 1".into(),
            ));
        }
        let mut encoder = Mlp::init(&[dim, config.hidden, config.latent], Activation::Tanh, config.seed)?;
        let mut decoder = Mlp::init(
            &[config.latent, config.hidden, dim],
            Activation::Tanh,
            config.seed.wrapping_add(1),
        )?;
        let enc_slots = encoder.param_shapes().len();
        let mut shapes = encoder.param_shapes();
        shapes.extend(decoder.param_shapes());
        let mut opt = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &shapes,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let mut g = Graph::new();
                let enc = encoder.bind_at(&mut g, 0);
                let dec = decoder.bind_at(&mut g, enc_slots);
                let batch = image_matrix(images, chunk);
                let x = g.input(batch);
                let z = enc.forward(&mut g, x)?.output;
                let recon = dec.forward(&mut g, z)?.output;
                let diff = g.sub(recon, x)?;
                let sq = g.square(diff)?;
                let sum = g.sum(sq)?;
                let loss = g.scale(sum, 1.0 / (chunk.len() * dim) as f64)?;
                let grads = g.backward(loss)?;
                let mut params = encoder.params_mut();
                params.extend(decoder.params_mut());
                opt.step(params, &grads);
            }
        }
        let mut ae = Self {
            encoder,
            decoder,
            config,
            reconstruction_mse: 0.0,
            corpus_size: images.len(),
        };
        ae.reconstruction_mse = ae.mean_reconstruction_error(images);
        Ok(ae)
    }

    pub fn mean_reconstruction_error(&self, images: &[Vec<f64>]) -> f64 {
        if images.is_empty() {
            return 0.0;
        }
        let total: f64 = images
            .iter()
            .map(|img| {
                let r = self.decode(&self.encode(img));
                r.iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.len() as f64
            })
            .sum();
        total / images.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), AutoencoderError> {
        let mut text = serde_json::to_string_pretty(self).expect("autoencoder serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| AutoencoderError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AutoencoderError> {
        let text = fs::read_to_string(path).map_err(|source| AutoencoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| AutoencoderError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

fn image_matrix(images: &[Vec<f64>], idx: &[usize]) -> Mat {
    let dim = images[idx[0]].len();
    let mut m = Mat::zeros(dim, idx.len());
    for (col, &i) in idx.iter().enumerate() {
        for (row, &v) in images[i].iter().enumerate() {
            m[(row, col)] = v;
        }
    }
    m
}

//! Expert demonstration datasets: generation, JSON-lines storage and
//! content fingerprints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::{Autoencoder, AutoencoderError, EnvConfig, EnvError, EnvName, Environment, Status};

pub const DATASET_FORMAT: &str = "stable-bc-dataset";
pub const DATASET_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid request: {0}")]
    Config(String),
    #[error("expert failed too often: {kept} of {wanted} demonstrations after {attempts} attempts")]
    ExpertFailure {
        kept: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
    #[error("{path}: dataset file is empty")]
    Empty { path: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// One expert tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub env: String,
    pub seed: u64,
    pub demos: usize,
    /// Demonstrations dropped because the expert failed.
    pub discarded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u64,
    m: usize,
    d: usize,
    n: usize,
    samples: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(m: usize, d: usize, n: usize, provenance: Provenance) -> Self {
        Self {
            m,
            d,
            n,
            samples: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends a sample after checking its dimensions.
    pub fn push(&mut self, s: Sample) -> Result<(), DatagenError> {
        self.check(&s).map_err(DatagenError::Config)?;
        self.samples.push(s);
        Ok(())
    }

    fn check(&self, s: &Sample) -> Result<(), String> {
        for (name, v, want) in [("x", &s.x, self.m), ("y", &s.y, self.d), ("u", &s.u, self.n)] {
            if v.len() != want {
                return Err(format!("{name} has length {}, expected {want}", v.len()));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(format!("{name} has non-finite entries"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the dimensions and the exact bits of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.m, self.d, self.n, self.samples.len()] {
            h.update((v as u64).to_le_bytes());
        }
        for s in &self.samples {
            for v in s.x.iter().chain(&s.y).chain(&s.u) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            m: self.m,
            d: self.d,
            n: self.n,
            samples: self.samples.len(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        let io = |source| DatagenError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(f)).map_err(io)
    }

    pub fn read_from<R: BufRead>(r: R, path: &str) -> Result<Self, DatagenError> {
        let parse = |line: usize, message: String| DatagenError::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = r.lines().enumerate();
        let header_line = loop {
            match lines.next() {
                None => return Err(DatagenError::Empty { path: path.to_string() }),
                Some((i, line)) => {
                    let line = line.map_err(|source| DatagenError::Io {
                        path: path.to_string(),
                        source,
                    })?;
                    if !line.trim().is_empty() {
                        break (i + 1, line);
                    }
                }
            }
        };
        let header: Header =
            serde_json::from_str(&header_line.1).map_err(|e| parse(header_line.0, format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(parse(header_line.0, format!("not a dataset file (format {:?})", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(parse(
                header_line.0,
                format!("dataset version {} is not supported (expected {DATASET_VERSION})", header.version),
            ));
        }
        let mut ds = Dataset::new(header.m, header.d, header.n, header.provenance);
        for (i, line) in lines {
            let line = line.map_err(|source| DatagenError::Io {
                path: path.to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
            ds.check(&s).map_err(|m| parse(i + 1, m))?;
            ds.samples.push(s);
        }
        if ds.samples.len() != header.samples {
            return Err(parse(
                header_line.0,
                format!("header declares {} samples but the file holds {}", header.samples, ds.samples.len()),
            ));
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        let f = File::open(path).map_err(|source| DatagenError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(BufReader::new(f), &path.display().to_string())
    }
}

/// Random stream for demonstration attempt `attempt` of a run seeded `seed`.
pub fn demo_rng(seed: u64, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    rng
}

/// Rolls out the scripted expert from `demos` fresh initial states and
/// records every visited `(x, y, u)`. Demonstrations that end in a failure
/// are discarded and redrawn, up to ten attempts per requested demo.
pub fn generate(env: &dyn Environment, demos: usize, seed: u64) -> Result<Dataset, DatagenError> {
    if demos == 0 {
        return Err(DatagenError::Config("demos must be at least 1".into()));
    }
    let (m, d, n) = env.dims();
    let mut ds = Dataset::new(
        m,
        d,
        n,
        Provenance {
            env: env.name().to_string(),
            seed,
            demos,
            discarded: 0,
        },
    );
    let cap = demos * 10;
    let mut kept = 0;
    let mut attempt = 0;
    while kept < demos {
        if attempt >= cap {
            return Err(DatagenError::ExpertFailure {
                kept,
                wanted: demos,
                attempts: attempt,
            });
        }
        let mut rng = demo_rng(seed, attempt as u64);
        attempt += 1;
        match record_demo(env, &mut rng) {
            Some(samples) => {
                for s in samples {
                    ds.push(s)?;
                }
                kept += 1;
            }
            None => ds.provenance.discarded += 1,
        }
    }
    Ok(ds)
}

/// Generates demonstrations for the configured environment. For the point
/// mass an autoencoder is first trained on the raw demonstration images and
/// the stored observations are its latent codes; the encoder is returned
/// alongside so rollouts can observe through it.
pub fn generate_for(
    env: &EnvConfig,
    demos: usize,
    seed: u64,
) -> Result<(Dataset, Option<Autoencoder>), DatagenError> {
    let raw = generate(env.build(None)?.as_ref(), demos, seed)?;
    if env.name != EnvName::Pointmass {
        return Ok((raw, None));
    }
    let images: Vec<Vec<f64>> = raw.samples.iter().map(|s| s.y.clone()).collect();
    let ae = Autoencoder::train(&images, env.pointmass.autoencoder.clone())?;
    log::info!(
        "autoencoder reconstruction mse {:.3e} over {} images",
        ae.reconstruction_mse,
        ae.corpus_size
    );
    let mut ds = Dataset::new(raw.m, ae.latent_dim(), raw.n, raw.provenance);
    for s in raw.samples {
        let y = ae.encode(&s.y);
        ds.push(Sample { x: s.x, y, u: s.u })?;
    }
    Ok((ds, Some(ae)))
}

fn record_demo(env: &dyn Environment, rng: &mut ChaCha8Rng) -> Option<Vec<Sample>> {
    let mut s = env.reset(rng);
    let limit = env.demo_steps();
    let steps = limit.unwrap_or(env.horizon());
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        match env.status(&s) {
            Status::Running => {}
            Status::Success => return Some(out),
            _ => return None,
        }
        let u = env.expert(&s, rng);
        if u.iter().any(|v| !v.is_finite()) {
            return None;
        }
        out.push(Sample {
            x: s.x.clone(),
            y: s.y.clone(),
            u: u.clone(),
        });
        s = env.step(&s, &u, rng);
    }
    match (limit, env.status(&s)) {
        (_, Status::Collision | Status::Failed) => None,
        (None, Status::Success) => Some(out),
        (None, _) => None,
        (Some(_), _) => Some(out),
    }
}

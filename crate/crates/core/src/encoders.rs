//! Deterministic stand-ins for the frozen image and text backbones.
//!
//! Every vector is a pure function of its input and the configured seed:
//! inputs are hashed, the hash seeds a ChaCha stream, and Gaussian draws are
//! scaled to unit length. Text is encoded as a bag of hashed content tokens so
//! word order and stopwords do not matter. With `plant_structure` on, target
//! images are a fixed mix of their reference image and modification text,
//! which gives the retrieval task something learnable.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::dataset::TripletRecord;
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

/// Weight of the reference image in a planted target.
pub const PLANT_REFERENCE_WEIGHT: f64 = 0.6;
/// Weight of the modification text in a planted target.
pub const PLANT_TEXT_WEIGHT: f64 = 0.4;

/// Global vector (`1 x D`) and local token matrix (`C x D`) of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub global: Matrix,
    pub local: Matrix,
}

impl FeatureBundle {
    pub fn new(global: Matrix, local: Matrix) -> Result<Self> {
        if global.rows() != 1 || local.cols() != global.cols() {
            return Err(Error::dims(
                "FeatureBundle::new",
                format!("global {:?}, local {:?}", global.shape(), local.shape()),
            ));
        }
        if !global.is_finite() || !local.is_finite() {
            return Err(Error::NonFinite("FeatureBundle"));
        }
        Ok(Self { global, local })
    }

    pub fn dim(&self) -> usize {
        self.global.cols()
    }

    pub fn local_count(&self) -> usize {
        self.local.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub local_count: usize,
    pub seed: u64,
    pub plant_structure: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            local_count: 16,
            seed: 0,
            plant_structure: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::InvalidConfig(format!("dim {} < 8", self.dim)));
        }
        if self.local_count < 1 {
            return Err(Error::InvalidConfig("local_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where the trainer and evaluator get features from.
pub trait FeatureProvider {
    fn dim(&self) -> usize;
    fn local_count(&self) -> usize;
    fn image(&self, id: &str) -> Result<FeatureBundle>;
    fn text(&self, text: &str) -> Result<FeatureBundle>;
    /// Features of a triplet's target image.
    fn target(&self, record: &TripletRecord) -> Result<FeatureBundle>;
}

/// FNV-1a over length-prefixed parts, so `("ab", "c")` and `("a", "bc")`
/// hash differently.
fn fnv1a(parts: &[&[u8]], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&seed.to_le_bytes());
    for p in parts {
        eat(&(p.len() as u64).to_le_bytes());
        eat(p);
    }
    h
}

/// Unit-norm Gaussian direction determined by `(parts, seed)`.
pub fn hashed_unit_vector(dim: usize, parts: &[&[u8]], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(parts, seed));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

#[derive(Clone, Debug)]
pub struct SyntheticEncoder {
    cfg: EncoderConfig,
}

impl SyntheticEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        hashed_unit_vector(self.cfg.dim, &[b"tok", token.as_bytes()], self.cfg.seed)
    }

    /// Global and local rows are independent hashed unit vectors.
    pub fn encode_image(&self, id: &str) -> FeatureBundle {
        let d = self.cfg.dim;
        let global = hashed_unit_vector(d, &[b"img:g", id.as_bytes()], self.cfg.seed);
        let mut local = Vec::with_capacity(self.cfg.local_count * d);
        for c in 0..self.cfg.local_count {
            let idx = (c as u64).to_le_bytes();
            local.extend(hashed_unit_vector(d, &[b"img:l", id.as_bytes(), &idx], self.cfg.seed));
        }
        FeatureBundle {
            global: Matrix::from_raw(1, d, global),
            local: Matrix::from_raw(self.cfg.local_count, d, local),
        }
    }

    /// Global: normalized sum of hashed content-token vectors. Local: one row
    /// per content token (first `C`), zero rows after that.
    pub fn encode_text(&self, text: &str) -> FeatureBundle {
        let d = self.cfg.dim;
        let mut tokens = Lexicon::builtin().content_tokens(text);
        if tokens.is_empty() {
            tokens.push("<empty>".to_string());
        }
        let mut global = vec![0.0; d];
        let mut local = Matrix::zeros(self.cfg.local_count, d);
        for (i, tok) in tokens.iter().enumerate() {
            let v = self.token_vector(tok);
            for (g, x) in global.iter_mut().zip(&v) {
                *g += x;
            }
            if i < self.cfg.local_count {
                local.row_mut(i).copy_from_slice(&v);
            }
        }
        if !normalize(&mut global) {
            // Token vectors cancelled exactly; fall back to the first one.
            global = self.token_vector(&tokens[0]);
        }
        FeatureBundle {
            global: Matrix::from_raw(1, d, global),
            local,
        }
    }

    /// Planted target: `normalize(0.6 * ref + 0.4 * text)` for the global
    /// vector and row-wise for the local tokens.
    pub fn encode_target_pair(&self, ref_id: &str, mmt: &str) -> FeatureBundle {
        let r = self.encode_image(ref_id);
        let t = self.encode_text(mmt);
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut v: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(x, y)| PLANT_REFERENCE_WEIGHT * x + PLANT_TEXT_WEIGHT * y)
                .collect();
            if !normalize(&mut v) {
                v = a.to_vec();
            }
            v
        };
        let d = self.cfg.dim;
        let global = mix(r.global.data(), t.global.data());
        let mut local = Matrix::zeros(self.cfg.local_count, d);
        for c in 0..self.cfg.local_count {
            let row = mix(r.local.row(c), t.local.row(c));
            local.row_mut(c).copy_from_slice(&row);
        }
        FeatureBundle {
            global: Matrix::from_raw(1, d, global),
            local,
        }
    }
}

impl FeatureProvider for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn local_count(&self) -> usize {
        self.cfg.local_count
    }

    fn image(&self, id: &str) -> Result<FeatureBundle> {
        Ok(self.encode_image(id))
    }

    fn text(&self, text: &str) -> Result<FeatureBundle> {
        Ok(self.encode_text(text))
    }

    fn target(&self, record: &TripletRecord) -> Result<FeatureBundle> {
        Ok(if self.cfg.plant_structure {
            self.encode_target_pair(&record.reference, &record.mmt)
        } else {
            self.encode_image(&record.target)
        })
    }
}

/// Image features read from an embedding file; text still goes through a
/// synthetic encoder of matching shape.
#[derive(Clone, Debug)]
pub struct EmbeddingTableProvider {
    images: BTreeMap<String, FeatureBundle>,
    text: SyntheticEncoder,
}

impl EmbeddingTableProvider {
    pub fn new(images: BTreeMap<String, FeatureBundle>, text_seed: u64) -> Result<Self> {
        let first = images.values().next().ok_or(Error::EmptyInput("embedding table"))?;
        let (dim, local_count) = (first.dim(), first.local_count());
        let text = SyntheticEncoder::new(EncoderConfig {
            dim,
            local_count,
            seed: text_seed,
            plant_structure: false,
        })?;
        Ok(Self { images, text })
    }
}

impl FeatureProvider for EmbeddingTableProvider {
    fn dim(&self) -> usize {
        self.text.cfg.dim
    }

    fn local_count(&self) -> usize {
        self.text.cfg.local_count
    }

    fn image(&self, id: &str) -> Result<FeatureBundle> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::ProviderFailure(format!("no embedding for image {id:?}")))
    }

    fn text(&self, text: &str) -> Result<FeatureBundle> {
        Ok(self.text.encode_text(text))
    }

    fn target(&self, record: &TripletRecord) -> Result<FeatureBundle> {
        self.image(&record.target)
    }
}

/// Affine alignment of local features: `local * w + b`.
pub fn project_local(tape: &mut Tape, local: Var, w: Var, b: Var) -> Result<Var> {
    let (_, d_in) = tape.shape(local);
    let (w_in, d) = tape.shape(w);
    if w_in != d_in || tape.shape(b) != (1, d) {
        return Err(Error::dims(
            "project_local",
            format!(
                "local {:?}, w {:?}, b {:?}",
                tape.shape(local),
                tape.shape(w),
                tape.shape(b)
            ),
        ));
    }
    let y = tape.matmul(local, w)?;
    tape.add_row(y, b)
}

//! Training loop, checkpoints and model accounting.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, AdamWState, Bound, Matrix, Tape, Var};
use crate::dataset::TripletRecord;
use crate::encoders::{FeatureBundle, FeatureProvider};
use crate::entity_mapping::{target_representation, Ablation, ModelConfig, QueryFeatures, TemaModel};
use crate::error::{Error, Result};
use crate::objectives::{
    batch_loss_ortho, batch_loss_summ, bbc_from_matrices, total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::parsing::{refine_until_consistent, ReferenceSummarizer, Summarizer, DEFAULT_MAX_ITERS};
use crate::tef;

/// Seed offset for the batch shuffler, so it does not replay the init stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub max_refine_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 2e-5,
            epochs: 200,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            max_refine_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0 (got {})", self.lr)));
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.ablation.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            ..AdamWConfig::default()
        }
    }
}

/// Replays dataset summaries first and falls back to the reference
/// summarizer, which also handles every refinement request.
#[derive(Clone, Debug, Default)]
pub struct DatasetSummarizer {
    fixtures: std::collections::HashMap<String, String>,
}

impl DatasetSummarizer {
    pub fn from_records(records: &[TripletRecord]) -> Self {
        Self {
            fixtures: records
                .iter()
                .filter_map(|r| r.summary.as_ref().map(|s| (r.mmt.clone(), s.clone())))
                .collect(),
        }
    }
}

impl Summarizer for DatasetSummarizer {
    fn summarize(&self, mmt: &str) -> Result<String> {
        match self.fixtures.get(mmt) {
            Some(s) => Ok(s.clone()),
            None => ReferenceSummarizer.summarize(mmt),
        }
    }

    fn refine(&self, mmt: &str, _previous: &str, _verdict: &crate::parsing::ConsistencyVerdict) -> Result<String> {
        ReferenceSummarizer.summarize(mmt)
    }
}

/// Loss of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Trained weights, optimizer moments and the configuration they belong to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: TemaModel,
    pub optimizer: AdamWState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: serde_json::Value,
    config: TrainConfig,
    step: u64,
}

/// Canonical description of everything that fixes the parameter layout.
pub fn fingerprint(model: &ModelConfig, ablation: &Ablation) -> serde_json::Value {
    serde_json::json!({ "model": model, "ablation": ablation })
}

impl Checkpoint {
    pub fn fingerprint(&self) -> serde_json::Value {
        fingerprint(self.model.config(), self.model.ablation())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            fingerprint: self.fingerprint(),
            config: self.config,
            step: self.optimizer.step,
        };
        let header = serde_json::to_string(&header).expect("header serializes");
        let params = self.model.params();
        let mut sections = Vec::with_capacity(3 * params.len());
        for (i, (name, value)) in params.iter().enumerate() {
            sections.push((format!("param/{name}"), value.clone()));
            sections.push((format!("adam_m/{name}"), self.optimizer.m[i].clone()));
            sections.push((format!("adam_v/{name}"), self.optimizer.v[i].clone()));
        }
        tef::encode_sections(&header, &sections)
    }

    /// Decodes a checkpoint. With `expected`, the stored fingerprint must
    /// match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&serde_json::Value>) -> Result<Self> {
        let (header, sections) = tef::decode_sections(bytes)?;
        let header: CheckpointHeader = serde_json::from_str(&header)
            .map_err(|e| Error::CorruptRecord(format!("checkpoint header: {e}")))?;
        let stored = fingerprint(&header.config.model, &header.config.ablation);
        if stored != header.fingerprint {
            return Err(Error::CorruptRecord("checkpoint header disagrees with its fingerprint".into()));
        }
        if let Some(want) = expected {
            if *want != stored {
                return Err(Error::FingerprintMismatch {
                    expected: want.to_string(),
                    found: stored.to_string(),
                });
            }
        }
        let mut model = TemaModel::new(header.config.model, header.config.ablation, 0)?;
        let mut optimizer = AdamWState::new(header.config.adamw(), model.params());
        optimizer.step = header.step;
        let count = model.params().len();
        if sections.len() != 3 * count {
            return Err(Error::CorruptRecord(format!(
                "expected {} sections, found {}",
                3 * count,
                sections.len()
            )));
        }
        let mut seen = vec![[false; 3]; count];
        for (name, m) in sections {
            let (kind, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::CorruptRecord(format!("section {name}")))?;
            let id = model
                .params()
                .id(pname)
                .ok_or_else(|| Error::CorruptRecord(format!("unknown parameter {pname}")))?;
            let i = id.index();
            if m.shape() != model.params().get(id).shape() {
                return Err(Error::CorruptRecord(format!(
                    "section {name}: shape {:?}, expected {:?}",
                    m.shape(),
                    model.params().get(id).shape()
                )));
            }
            let slot = match kind {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => return Err(Error::CorruptRecord(format!("section {name}"))),
            };
            if seen[i][slot] {
                return Err(Error::CorruptRecord(format!("duplicate section {name}")));
            }
            seen[i][slot] = true;
            match slot {
                0 => *model.params_mut().get_mut(id) = m,
                1 => optimizer.m[i] = m,
                _ => optimizer.v[i] = m,
            }
        }
        Ok(Self {
            config: header.config,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&serde_json::Value>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

/// Exact parameter count and analytic MACs for one query.
pub fn count_params_macs(model: &TemaModel) -> (usize, u64) {
    (model.params().count(), model.macs_per_query())
}

/// Features of one training triplet, computed once before the first epoch.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub text: FeatureBundle,
    pub reference: FeatureBundle,
    /// Unit-norm target vector, `1 x D`.
    pub target: Matrix,
    /// Global embedding of the summary, when summaries are in use.
    pub summary: Option<Matrix>,
}

/// The weighted training objective for `items` on `tape`, with the model's
/// weights taken from `bound`.
pub fn objective(
    tape: &mut Tape,
    model: &TemaModel,
    bound: &Bound,
    items: &[&Prepared],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = model.config().channels;
    let queries: Vec<QueryFeatures<'_>> = items
        .iter()
        .map(|p| QueryFeatures {
            text: &p.text,
            reference: &p.reference,
            summary: p.summary.as_ref(),
        })
        .collect();
    let fwd = model.forward(tape, bound, &queries)?;
    let targets = tape.constant(Matrix::stack_rows(items.iter().map(|p| &p.target))?);
    let bbc = bbc_from_matrices(tape, fwd.composed, targets, weights.tau)?;
    let ab = model.ablation();
    let summ = match (ab.summ_active(), fwd.a_hat) {
        (true, Some(a)) => {
            let rows = items
                .iter()
                .map(|p| p.summary.as_ref().ok_or(Error::InvalidConfig("summary features missing".into())))
                .collect::<Result<Vec<_>>>()?;
            let s = tape.constant(Matrix::stack_rows(rows)?);
            Some(batch_loss_summ(tape, s, a, n)?)
        }
        _ => None,
    };
    let a = fwd.a_hat.filter(|_| ab.ortho_txt_active());
    let b = fwd.b_hat.filter(|_| ab.ortho_img_active());
    let ortho = if a.is_some() || b.is_some() {
        Some(batch_loss_ortho(tape, a, b, n)?)
    } else {
        None
    };
    total_loss(tape, LossParts { bbc, summ, ortho }, weights)
}

/// Summary text for one modification text, following the refinement loop.
/// An exhausted loop falls back to its last attempt.
pub fn training_summary(mmt: &str, provider: &dyn Summarizer, max_iters: usize) -> Result<String> {
    match refine_until_consistent(mmt, provider, max_iters) {
        Ok(r) => Ok(r.summary),
        Err(Error::RefinementExhausted {
            attempts,
            last_summary,
            verdict,
        }) => {
            log::warn!(
                "summary for {mmt:?} still inconsistent after {attempts} attempts ({:?}); using the last one",
                verdict.status
            );
            Ok(last_summary)
        }
        Err(e) => Err(e),
    }
}

/// Stepwise trainer; [`train`] runs it to completion.
pub struct Trainer {
    config: TrainConfig,
    model: TemaModel,
    optimizer: AdamWState,
    data: Vec<Prepared>,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(
        records: &[TripletRecord],
        provider: &dyn FeatureProvider,
        summarizer: &dyn Summarizer,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::DataEmpty);
        }
        if provider.dim() != config.model.dim || provider.local_count() != config.model.local_count {
            return Err(Error::InvalidConfig(format!(
                "provider gives {}x{} features, model expects {}x{}",
                provider.local_count(),
                provider.dim(),
                config.model.local_count,
                config.model.dim
            )));
        }
        let wrap = |r: &TripletRecord, e: Error| Error::Triplet {
            id: r.id.clone(),
            source: Box::new(e),
        };
        let mut data = Vec::with_capacity(records.len());
        for r in records {
            let summary = if config.ablation.uses_summary() {
                let text = training_summary(&r.mmt, summarizer, config.max_refine_iters).map_err(|e| wrap(r, e))?;
                Some(provider.text(&text).map_err(|e| wrap(r, e))?.global)
            } else {
                None
            };
            let target = provider.target(r).and_then(|b| target_representation(&b)).map_err(|e| wrap(r, e))?;
            data.push(Prepared {
                text: provider.text(&r.mmt).map_err(|e| wrap(r, e))?,
                reference: provider.image(&r.reference).map_err(|e| wrap(r, e))?,
                target,
                summary,
            });
        }
        let model = TemaModel::new(config.model, config.ablation, config.seed)?;
        let optimizer = AdamWState::new(config.adamw(), model.params());
        Ok(Self {
            config,
            model,
            optimizer,
            data,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM),
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Batch size actually used: the configured size, capped by the number
    /// of triplets.
    pub fn effective_batch(&self) -> usize {
        self.config.batch_size.min(self.data.len())
    }

    pub fn model(&self) -> &TemaModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn prepared(&self) -> &[Prepared] {
        &self.data
    }

    /// Loss and per-parameter gradients of the objective over `batch`.
    pub fn gradients(&self, batch: &[usize]) -> Result<(LossBreakdown, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape);
        let items: Vec<&Prepared> = batch.iter().map(|&i| &self.data[i]).collect();
        let (total, breakdown) = objective(&mut tape, &self.model, &bound, &items, &self.config.weights)?;
        tape.backward(total)?;
        Ok((breakdown, self.model.params().grads(&tape, &bound)))
    }

    fn step(&mut self, batch: &[usize]) -> Result<LossBreakdown> {
        let (loss, grads) = self.gradients(batch)?;
        self.optimizer.step(self.model.params_mut(), &grads);
        Ok(loss)
    }

    /// One pass over a fresh permutation; the last partial batch is dropped.
    /// Returns the mean total loss over the epoch's steps.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let b = self.effective_batch();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks_exact(b) {
            let loss = self.step(chunk)?;
            sum += loss.total;
            steps += 1;
            self.history.push(StepRecord {
                epoch: self.epoch,
                step: self.optimizer.step,
                loss,
            });
        }
        self.epoch += 1;
        Ok(sum / steps as f64)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            model: self.model,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains for `config.epochs` epochs. `on_epoch` sees the epoch index and its
/// mean loss.
pub fn train_with(
    records: &[TripletRecord],
    provider: &dyn FeatureProvider,
    summarizer: &dyn Summarizer,
    config: TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(records, provider, summarizer, config)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let l = t.run_epoch()?;
        on_epoch(e, l);
        epoch_losses.push(l);
    }
    let history = t.history.clone();
    Ok(TrainOutcome {
        checkpoint: t.into_checkpoint(),
        history,
        epoch_losses,
    })
}

/// [`train_with`] using dataset summaries with the reference summarizer as
/// fallback, and no progress callback.
pub fn train(records: &[TripletRecord], provider: &dyn FeatureProvider, config: TrainConfig) -> Result<TrainOutcome> {
    let summarizer = DatasetSummarizer::from_records(records);
    train_with(records, provider, &summarizer, config, &mut |_, _| {})
}

//! Browser bindings: summary checking, a live training run on synthetic
//! triplets, and the entity Gram matrix of a query.
//!
//! Everything returns JSON strings or plain arrays so the page needs no
//! glue beyond what `wasm-bindgen` generates. Errors come back as strings.

use tema_core::dataset::{generate_synthetic, SynthConfig, TripletRecord};
use tema_core::encoders::{EncoderConfig, FeatureProvider, SyntheticEncoder};
use tema_core::entity_mapping::{ModelConfig, QueryFeatures};
use tema_core::objectives::mean_offdiag_gram;
use tema_core::parsing::{check_consistency, summarize, ReferenceSummarizer};
use tema_core::retrieval::{evaluate, EvalOptions};
use tema_core::trainer::{DatasetSummarizer, TrainConfig, Trainer};
use wasm_bindgen::prelude::*;

const DIM: usize = 32;
const LOCALS: usize = 4;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Consistency verdict of a summary against its modification text.
#[wasm_bindgen]
pub fn check_summary(mmt: &str, summary: &str) -> String {
    serde_json::to_string(&check_consistency(mmt, summary)).expect("verdict serializes")
}

/// Summary from the built-in template summarizer.
#[wasm_bindgen]
pub fn reference_summary(mmt: &str) -> Result<String, String> {
    summarize(mmt, &ReferenceSummarizer).map_err(text)
}

#[wasm_bindgen]
pub struct Session {
    records: Vec<TripletRecord>,
    encoder: SyntheticEncoder,
    trainer: Trainer,
}

#[wasm_bindgen]
impl Session {
    /// `n` synthetic triplets and a model with `channels` entities per side.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u64, channels: usize, lr: f64) -> Result<Session, String> {
        let records = generate_synthetic(n, seed, &SynthConfig::default());
        let encoder = SyntheticEncoder::new(EncoderConfig {
            dim: DIM,
            local_count: LOCALS,
            seed,
            plant_structure: true,
        })
        .map_err(text)?;
        let config = TrainConfig {
            model: ModelConfig {
                dim: DIM,
                channels,
                local_count: LOCALS,
                ..ModelConfig::default()
            },
            batch_size: 8,
            lr,
            seed,
            ..TrainConfig::default()
        };
        let summaries = DatasetSummarizer::from_records(&records);
        let trainer = Trainer::new(&records, &encoder, &summaries, config).map_err(text)?;
        Ok(Session { records, encoder, trainer })
    }

    pub fn channels(&self) -> usize {
        self.trainer.model().config().channels
    }

    /// One epoch. Returns `{"epoch", "loss", "r1"}` with R@1 over the
    /// training triplets.
    pub fn step(&mut self) -> Result<String, String> {
        let loss = self.trainer.run_epoch().map_err(text)?;
        let report = evaluate(self.trainer.model(), &self.encoder, &self.records, &EvalOptions::default())
            .map_err(text)?;
        let r1 = report
            .rows
            .iter()
            .find(|r| r.category == "all" && r.metric == "R@1")
            .map_or(0.0, |r| r.value);
        Ok(serde_json::json!({ "epoch": self.trainer.epoch(), "loss": loss, "r1": r1 }).to_string())
    }

    /// Row-major `N x N` cosine Gram of the textual entities for `mmt` on
    /// the first triplet's reference image, followed by the mean off-diagonal
    /// magnitude as a last element.
    pub fn gram(&self, mmt: &str) -> Result<Vec<f64>, String> {
        let t = self.encoder.text(mmt).map_err(text)?;
        let r = self.encoder.image(&self.records[0].reference).map_err(text)?;
        let q = [QueryFeatures {
            text: &t,
            reference: &r,
            summary: None,
        }];
        let bank = self
            .trainer
            .model()
            .textual_entities(&q)
            .map_err(text)?
            .ok_or("textual mapping is disabled")?;
        let rows: Vec<Vec<f64>> = (0..bank.rows())
            .map(|i| {
                let v = bank.row(i);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut out: Vec<f64> = rows
            .iter()
            .flat_map(|a| rows.iter().map(move |b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()))
            .collect();
        out.push(mean_offdiag_gram(&bank));
        Ok(out)
    }
}

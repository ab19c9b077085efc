//! Training-time summary generation and verification.
//!
//! A [`Summarizer`] proposes a summary of a modification text, the
//! consistency detector compares the entities it mentions against the
//! modification text, and [`refine_until_consistent`] feeds the verdict back
//! until the two agree or the attempt budget runs out. None of this runs at
//! inference time.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

pub const DEFAULT_MAX_ITERS: usize = 3;

/// Normalized entity stems.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub stems: BTreeSet<String>,
}

impl EntitySet {
    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn contains(&self, stem: &str) -> bool {
        self.stems.contains(stem)
    }

    pub fn difference(&self, other: &EntitySet) -> EntitySet {
        EntitySet {
            stems: self.stems.difference(&other.stems).cloned().collect(),
        }
    }
}

impl<S: Into<String>> FromIterator<S> for EntitySet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        EntitySet {
            stems: iter.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsistencyStatus {
    Pass,
    Missing,
    Extraneous,
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub status: ConsistencyStatus,
    pub missing: EntitySet,
    pub extraneous: EntitySet,
}

impl ConsistencyVerdict {
    pub fn passed(&self) -> bool {
        self.status == ConsistencyStatus::Pass
    }
}

/// Entities of `text`: lowercase, split on non-alphanumerics, drop stopwords
/// and editing verbs, strip suffixes.
pub fn extract_entities(text: &str) -> EntitySet {
    Lexicon::builtin().entity_tokens(text).into_iter().collect()
}

/// Same as [`extract_entities`] but keeps first-occurrence order.
pub fn extract_entities_ordered(text: &str) -> Vec<String> {
    Lexicon::builtin().entity_tokens(text)
}

/// Consistency detector: every entity of the modification text must appear
/// in the summary, and the summary must not add any.
pub fn check_consistency(mmt: &str, summary: &str) -> ConsistencyVerdict {
    let want = extract_entities(mmt);
    let got = extract_entities(summary);
    let missing = want.difference(&got);
    let extraneous = got.difference(&want);
    let status = match (missing.is_empty(), extraneous.is_empty()) {
        (true, true) => ConsistencyStatus::Pass,
        (false, true) => ConsistencyStatus::Missing,
        (true, false) => ConsistencyStatus::Extraneous,
        (false, false) => ConsistencyStatus::Both,
    };
    ConsistencyVerdict {
        status,
        missing,
        extraneous,
    }
}

/// Source of summaries. `refine` receives the rejected attempt and the
/// detector's verdict on it.
pub trait Summarizer {
    fn summarize(&self, mmt: &str) -> Result<String>;

    fn refine(&self, mmt: &str, _previous: &str, _verdict: &ConsistencyVerdict) -> Result<String> {
        self.summarize(mmt)
    }
}

/// Deterministic summarizer: `"Modify the e1, e2, ..."` over the extracted
/// entities in first-occurrence order.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceSummarizer;

impl Summarizer for ReferenceSummarizer {
    fn summarize(&self, mmt: &str) -> Result<String> {
        let entities = extract_entities_ordered(mmt);
        if entities.is_empty() {
            return Err(Error::ProviderFailure(format!(
                "no entities found in modification text {mmt:?}"
            )));
        }
        Ok(format!("Modify the {}.", entities.join(", ")))
    }
}

/// Replays summaries shipped with a dataset, keyed by modification text.
#[derive(Clone, Debug, Default)]
pub struct FixtureSummarizer {
    summaries: HashMap<String, String>,
}

impl FixtureSummarizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mmt: impl Into<String>, summary: impl Into<String>) {
        self.summaries.insert(mmt.into(), summary.into());
    }
}

impl Summarizer for FixtureSummarizer {
    fn summarize(&self, mmt: &str) -> Result<String> {
        self.summaries
            .get(mmt)
            .cloned()
            .ok_or_else(|| Error::ProviderFailure(format!("no fixture summary for {mmt:?}")))
    }
}

/// Successful outcome of [`refine_until_consistent`].
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub summary: String,
    pub attempts: usize,
}

/// Summarize, check, and refine until the detector passes, calling the
/// provider at most `max_iters` times. On exhaustion the error carries the
/// last attempt and its verdict.
pub fn refine_until_consistent(mmt: &str, provider: &dyn Summarizer, max_iters: usize) -> Result<Refined> {
    let max_iters = max_iters.max(1);
    let mut summary = provider.summarize(mmt)?;
    let mut attempts = 1;
    loop {
        let verdict = check_consistency(mmt, &summary);
        if verdict.passed() {
            return Ok(Refined { summary, attempts });
        }
        if attempts >= max_iters {
            return Err(Error::RefinementExhausted {
                attempts,
                last_summary: summary,
                verdict,
            });
        }
        summary = provider.refine(mmt, &summary, &verdict)?;
        attempts += 1;
    }
}

/// Convenience wrapper: summarize with the given provider and return the
/// summary text.
pub fn summarize(mmt: &str, provider: &dyn Summarizer) -> Result<String> {
    if mmt.trim().is_empty() {
        return Err(Error::ProviderFailure("empty modification text".into()));
    }
    provider.summarize(mmt)
}

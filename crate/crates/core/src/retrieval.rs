//! Candidate index, ranking, recall metrics and the evaluation driver.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::dataset::{Split, TripletRecord};
use crate::encoders::{FeatureBundle, FeatureProvider};
use crate::entity_mapping::{target_representation, QueryFeatures, TemaModel};
use crate::error::{Error, Result};
use crate::objectives::mean_offdiag_gram;

/// Unit-norm candidate vectors, rows in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    vectors: Matrix,
}

/// Builds an index. Ids are sorted ascending so that ties always break the
/// same way regardless of insertion order.
pub fn build_index<I>(embeddings: I) -> Result<RetrievalIndex>
where
    I: IntoIterator<Item = (String, Vec<f64>)>,
{
    let mut map = BTreeMap::new();
    for (id, v) in embeddings {
        if map.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        map.insert(id, v);
    }
    let Some(dim) = map.values().next().map(Vec::len) else {
        return Err(Error::EmptyInput("build_index"));
    };
    let mut data = Vec::with_capacity(map.len() * dim);
    let mut ids = Vec::with_capacity(map.len());
    for (id, v) in map {
        if v.len() != dim {
            return Err(Error::dims("build_index", format!("{id}: width {} vs {dim}", v.len())));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector(id));
        }
        data.extend(v.iter().map(|x| x / norm));
        ids.push(id);
    }
    Ok(RetrievalIndex {
        vectors: Matrix::from_vec(ids.len(), dim, data)?,
        ids,
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position(id).is_some()
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    /// Cosine score of every candidate against `query`.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::dims("scores", format!("query width {} vs {}", query.len(), self.dim())));
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector("query".into()));
        }
        Ok((0..self.len())
            .map(|i| self.vectors.row(i).iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / norm)
            .collect())
    }

    /// Candidate ids by descending score, ties by ascending id. Ids in
    /// `exclude` are dropped; `allow`, when given, keeps only those ids.
    pub fn rank_filtered(
        &self,
        query: &[f64],
        exclude: &[&str],
        allow: Option<&HashSet<&str>>,
    ) -> Result<Vec<String>> {
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let id = self.ids[i].as_str();
                !exclude.contains(&id) && allow.is_none_or(|a| a.contains(id))
            })
            .collect();
        if order.is_empty() {
            return Err(Error::EmptyAfterExclusion);
        }
        // ids are already ascending, and the sort is stable
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(order.into_iter().map(|i| self.ids[i].clone()).collect())
    }
}

/// Ranks every indexed candidate except `exclude`.
pub fn rank_candidates(query: &[f64], index: &RetrievalIndex, exclude: &[&str]) -> Result<Vec<String>> {
    index.rank_filtered(query, exclude, None)
}

/// 1-based position of `target` in `ranking`.
pub fn rank_of(ranking: &[String], target: &str) -> Option<usize> {
    ranking.iter().position(|id| id == target).map(|p| p + 1)
}

/// Fraction of queries whose target is within the first `k` entries. A
/// target missing from its ranking is a miss.
pub fn recall_at_k(rankings: &[Vec<String>], targets: &[String], k: usize) -> f64 {
    assert_eq!(rankings.len(), targets.len(), "one target per ranking");
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| r.iter().take(k).any(|id| id == *t))
        .count();
    hits as f64 / rankings.len() as f64
}

/// Rank of `target` among `members` only.
pub fn subset_rank(
    query_id: &str,
    query: &[f64],
    index: &RetrievalIndex,
    members: Option<&[String]>,
    target: &str,
) -> Result<usize> {
    let members = members.ok_or_else(|| Error::SubsetMissingTarget(query_id.to_string()))?;
    if !members.iter().any(|m| m == target) || !index.contains(target) {
        return Err(Error::SubsetMissingTarget(query_id.to_string()));
    }
    let allow: HashSet<&str> = members.iter().map(String::as_str).collect();
    let ranking = index.rank_filtered(query, &[], Some(&allow))?;
    Ok(rank_of(&ranking, target).expect("target is an allowed, indexed member"))
}

/// Fraction of queries whose subset rank is at most `k`.
pub fn subset_recall_at_k(subset_ranks: &[usize], k: usize) -> f64 {
    if subset_ranks.is_empty() {
        return 0.0;
    }
    subset_ranks.iter().filter(|&&r| r <= k).count() as f64 / subset_ranks.len() as f64
}

/// `(R@5 + R_subset@1) / 2`.
pub fn cirr_average(r5: f64, rsub1: f64) -> f64 {
    (r5 + rsub1) / 2.0
}

/// Mean over categories of each category's `(R@10 + R@50) / 2`.
pub fn fashion_average(per_category: &[(f64, f64)]) -> f64 {
    per_category.iter().map(|(a, b)| (a + b) / 2.0).sum::<f64>() / per_category.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    #[default]
    Plain,
    Fashion,
    Cirr,
}

impl ReportKind {
    /// Fashion when every record has a category, CIRR when every record has
    /// subset members, plain otherwise.
    pub fn detect(records: &[TripletRecord]) -> Self {
        if !records.is_empty() && records.iter().all(|r| r.category.is_some()) {
            ReportKind::Fashion
        } else if !records.is_empty() && records.iter().all(|r| r.subset_members.is_some()) {
            ReportKind::Cirr
        } else {
            ReportKind::Plain
        }
    }
}

impl FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(ReportKind::Plain),
            "fashion" => Ok(ReportKind::Fashion),
            "cirr" => Ok(ReportKind::Cirr),
            other => Err(format!("unknown report kind {other:?}")),
        }
    }
}

/// Per-query ranking result fed to [`aggregate`].
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub id: String,
    pub split: Split,
    pub category: Option<String>,
    pub rank: Option<usize>,
    pub subset_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub category: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

fn recall_of(ranks: &[Option<usize>], k: usize) -> f64 {
    ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64
}

/// Groups outcomes by split (and category), computes R@K and the averages
/// of the chosen report kind.
pub fn aggregate(outcomes: &[QueryOutcome], kind: ReportKind, ks: &[usize]) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut by_split: BTreeMap<Split, Vec<&QueryOutcome>> = BTreeMap::new();
    for o in outcomes {
        by_split.entry(o.split).or_default().push(o);
    }
    let mut rows = Vec::new();
    let mut push = |split: Split, category: &str, metric: String, value: f64| {
        rows.push(MetricRow {
            split: split.to_string(),
            category: category.to_string(),
            metric,
            value,
        })
    };
    for (split, qs) in by_split {
        let ranks: Vec<Option<usize>> = qs.iter().map(|q| q.rank).collect();
        for &k in ks {
            push(split, "all", format!("R@{k}"), recall_of(&ranks, k));
        }
        match kind {
            ReportKind::Plain => {}
            ReportKind::Fashion => {
                let mut cats: BTreeMap<&str, Vec<Option<usize>>> = BTreeMap::new();
                for q in &qs {
                    let c = q.category.as_deref().ok_or_else(|| Error::MissingCategory(q.id.clone()))?;
                    cats.entry(c).or_default().push(q.rank);
                }
                let mut pairs = Vec::new();
                for (c, r) in &cats {
                    for &k in ks {
                        push(split, c, format!("R@{k}"), recall_of(r, k));
                    }
                    pairs.push((recall_of(r, 10), recall_of(r, 50)));
                }
                push(split, "avg", "fashion_avg".into(), fashion_average(&pairs));
            }
            ReportKind::Cirr => {
                let sub: Vec<usize> = qs
                    .iter()
                    .map(|q| q.subset_rank.ok_or_else(|| Error::SubsetMissingTarget(q.id.clone())))
                    .collect::<Result<_>>()?;
                for k in SUBSET_KS {
                    push(split, "all", format!("Rsubset@{k}"), subset_recall_at_k(&sub, k));
                }
                push(
                    split,
                    "avg",
                    "cirr_avg".into(),
                    cirr_average(recall_of(&ranks, 5), subset_recall_at_k(&sub, 1)),
                );
            }
        }
    }
    Ok(MetricsReport { rows })
}

impl MetricsReport {
    pub fn get(&self, split: &str, category: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.category == category && r.metric == metric)
            .map(|r| r.value)
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\tcategory\tmetric\tvalue\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.4}", r.split, r.category, r.metric, r.value);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("rows serialize")
    }

    /// Every recall in `[0, 1]` and nondecreasing in `K` per group.
    pub fn is_valid(&self) -> bool {
        let in_range = self.rows.iter().all(|r| r.value.is_finite() && (0.0..=1.0).contains(&r.value));
        let mut groups: BTreeMap<(&str, &str, &str), Vec<(usize, f64)>> = BTreeMap::new();
        for r in &self.rows {
            for prefix in ["R@", "Rsubset@"] {
                if let Some(k) = r.metric.strip_prefix(prefix).and_then(|k| k.parse::<usize>().ok()) {
                    groups.entry((&r.split, &r.category, prefix)).or_default().push((k, r.value));
                }
            }
        }
        let monotone = groups.values_mut().all(|g| {
            g.sort_by_key(|(k, _)| *k);
            g.windows(2).all(|w| w[0].1 <= w[1].1)
        });
        !self.rows.is_empty() && in_range && monotone
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub exclude_reference: bool,
    pub ks: Vec<usize>,
    /// Report kind; detected from the records when `None`.
    pub kind: Option<ReportKind>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_reference: true,
            ks: DEFAULT_KS.to_vec(),
            kind: None,
        }
    }
}

/// Candidate pool for a set of records: every target (planted features) and
/// every reference image. An id seen first as a target keeps its target
/// features. Each id carries the category of the first record naming it.
pub fn candidate_pool(
    provider: &dyn FeatureProvider,
    records: &[TripletRecord],
) -> Result<BTreeMap<String, (FeatureBundle, Option<String>)>> {
    let mut pool = BTreeMap::new();
    for r in records {
        if !pool.contains_key(&r.target) {
            let b = provider.target(r).map_err(|e| triplet_err(r, e))?;
            pool.insert(r.target.clone(), (b, r.category.clone()));
        }
    }
    for r in records {
        if !pool.contains_key(&r.reference) {
            let b = provider.image(&r.reference).map_err(|e| triplet_err(r, e))?;
            pool.insert(r.reference.clone(), (b, r.category.clone()));
        }
    }
    Ok(pool)
}

fn triplet_err(r: &TripletRecord, e: Error) -> Error {
    Error::Triplet {
        id: r.id.clone(),
        source: Box::new(e),
    }
}

/// Text and reference features for each record, in record order.
pub fn query_features(
    provider: &dyn FeatureProvider,
    records: &[TripletRecord],
) -> Result<Vec<(FeatureBundle, FeatureBundle)>> {
    records
        .iter()
        .map(|r| {
            let t = provider.text(&r.mmt).map_err(|e| triplet_err(r, e))?;
            let i = provider.image(&r.reference).map_err(|e| triplet_err(r, e))?;
            Ok((t, i))
        })
        .collect()
}

/// Inference-path query vectors (no summary) for `records`.
pub fn encode_records(model: &TemaModel, provider: &dyn FeatureProvider, records: &[TripletRecord]) -> Result<Matrix> {
    let feats = query_features(provider, records)?;
    let qs: Vec<QueryFeatures<'_>> = feats
        .iter()
        .map(|(t, r)| QueryFeatures {
            text: t,
            reference: r,
            summary: None,
        })
        .collect();
    model.encode_queries(&qs)
}

/// Mean off-diagonal `|Gram|` of the inference-path textual entity banks,
/// averaged over `records`. `None` when the textual mapping is disabled.
pub fn entity_overlap(model: &TemaModel, provider: &dyn FeatureProvider, records: &[TripletRecord]) -> Result<Option<f64>> {
    let feats = query_features(provider, records)?;
    let qs: Vec<QueryFeatures<'_>> = feats
        .iter()
        .map(|(t, r)| QueryFeatures {
            text: t,
            reference: r,
            summary: None,
        })
        .collect();
    let Some(banks) = model.textual_entities(&qs)? else {
        return Ok(None);
    };
    let n = model.config().channels;
    let total: f64 = (0..qs.len()).map(|i| mean_offdiag_gram(&banks.slice_rows(i * n, n))).sum();
    Ok(Some(total / qs.len() as f64))
}

/// Per-query outcomes for `records` against their own candidate pool.
/// Candidates are restricted to the query's category when it has one.
pub fn rank_records(
    model: &TemaModel,
    provider: &dyn FeatureProvider,
    records: &[TripletRecord],
    opts: &EvalOptions,
) -> Result<Vec<QueryOutcome>> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let pool = candidate_pool(provider, records)?;
    let index = build_index(
        pool.iter()
            .map(|(id, (b, _))| Ok((id.clone(), target_representation(b)?.into_vec())))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let categories: BTreeMap<&str, BTreeSet<&str>> = pool.iter().fold(BTreeMap::new(), |mut m, (id, (_, c))| {
        if let Some(c) = c {
            m.entry(c.as_str()).or_insert_with(BTreeSet::new).insert(id.as_str());
        }
        m
    });
    let queries = encode_records(model, provider, records)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let q = queries.row(i);
        let exclude: Vec<&str> = if opts.exclude_reference { vec![r.reference.as_str()] } else { vec![] };
        let allow: Option<HashSet<&str>> = r
            .category
            .as_deref()
            .and_then(|c| categories.get(c))
            .map(|s| s.iter().copied().collect());
        let ranking = index.rank_filtered(q, &exclude, allow.as_ref())?;
        let subset_rank = match &r.subset_members {
            Some(m) => Some(subset_rank(&r.id, q, &index, Some(m), &r.target)?),
            None => None,
        };
        out.push(QueryOutcome {
            id: r.id.clone(),
            split: r.split,
            category: r.category.clone(),
            rank: rank_of(&ranking, &r.target),
            subset_rank,
        });
    }
    Ok(out)
}

/// Ranks and aggregates in one go.
pub fn evaluate(
    model: &TemaModel,
    provider: &dyn FeatureProvider,
    records: &[TripletRecord],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let kind = opts.kind.unwrap_or_else(|| ReportKind::detect(records));
    let outcomes = rank_records(model, provider, records, opts)?;
    aggregate(&outcomes, kind, &opts.ks)
}

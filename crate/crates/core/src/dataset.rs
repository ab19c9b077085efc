//! Triplet files: loading, validation, length statistics and a synthetic
//! generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::parsing::{ReferenceSummarizer, Summarizer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?} (expected train or val)")),
        }
    }
}

/// One (reference image, modification text, target image) query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub reference: String,
    pub target: String,
    pub mmt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_members: Option<Vec<String>>,
    #[serde(default)]
    pub split: Split,
}

fn parse_record(line_no: usize, text: &str) -> Result<TripletRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(Error::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    let schema = |field: &str, message: &str| Error::Schema {
        line: line_no,
        field: field.to_string(),
        message: message.to_string(),
    };
    let required = |field: &str| -> Result<String> {
        match obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(schema(field, "expected a string")),
            None => Err(schema(field, "missing")),
        }
    };
    let optional = |field: &str| -> Result<Option<String>> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(schema(field, "expected a string")),
        }
    };
    let subset_members = match obj.get("subset_members") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| schema("subset_members", "expected an array of strings"))?,
        ),
        Some(_) => return Err(schema("subset_members", "expected an array of strings")),
    };
    let split = match optional("split")? {
        None => Split::Train,
        Some(s) => s.parse().map_err(|m: String| schema("split", &m))?,
    };
    Ok(TripletRecord {
        id: required("id")?,
        reference: required("reference")?,
        target: required("target")?,
        mmt: required("mmt")?,
        summary: optional("summary")?,
        category: optional("category")?,
        subset_members,
        split,
    })
}

/// Parses JSON-lines text. Blank lines are skipped; unknown fields ignored.
pub fn parse_jsonl(text: &str) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(line_no, line)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Schema {
                line: line_no,
                field: "id".into(),
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn to_jsonl(records: &[TripletRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[TripletRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub id: String,
    pub message: String,
}

/// Checks record invariants; an empty list means the data is clean.
pub fn validate(records: &[TripletRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (index, r) in records.iter().enumerate() {
        let mut flag = |message: String| {
            out.push(Violation {
                index,
                id: r.id.clone(),
                message,
            })
        };
        if r.id.trim().is_empty() {
            flag("empty id".into());
        } else if !seen.insert(r.id.as_str()) {
            flag("duplicate id".into());
        }
        if r.mmt.trim().is_empty() {
            flag("empty modification text".into());
        }
        if r.reference.trim().is_empty() {
            flag("empty reference id".into());
        }
        if r.target.trim().is_empty() {
            flag("empty target id".into());
        }
        if let Some(members) = &r.subset_members {
            if !members.contains(&r.target) {
                flag(format!("subset does not contain target {:?}", r.target));
            }
        }
    }
    out
}

/// Token-length summary of modification texts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthStats {
    pub minimal: usize,
    pub maximal: usize,
    pub average: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub per_split: BTreeMap<Split, LengthStats>,
}

impl DatasetStats {
    /// Tab-separated table with `#Minimal`, `#Maximal`, `#Average` columns.
    pub fn to_table(&self) -> String {
        let mut s = String::from("split\t#Minimal\t#Maximal\t#Average\n");
        for (split, st) in &self.per_split {
            s.push_str(&format!(
                "{split}\t{:.1}\t{:.1}\t{:.1}\n",
                st.minimal as f64, st.maximal as f64, st.average
            ));
        }
        s
    }
}

/// Whitespace-token counts of the modification texts, per split.
pub fn dataset_stats(records: &[TripletRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut lengths: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for r in records {
        lengths
            .entry(r.split)
            .or_default()
            .push(r.mmt.split_whitespace().count());
    }
    let per_split = lengths
        .into_iter()
        .map(|(split, ls)| {
            let total: usize = ls.iter().sum();
            let st = LengthStats {
                minimal: *ls.iter().min().expect("non-empty"),
                maximal: *ls.iter().max().expect("non-empty"),
                average: total as f64 / ls.len() as f64,
                count: ls.len(),
            };
            (split, st)
        })
        .collect();
    Ok(DatasetStats { per_split })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// No categories, no subsets.
    Plain,
    /// Every query carries a small curated candidate subset.
    #[default]
    Cirr,
    /// Every query carries one of three garment categories.
    Fashion,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(SynthKind::Plain),
            "cirr" => Ok(SynthKind::Cirr),
            "fashion" => Ok(SynthKind::Fashion),
            other => Err(format!("unknown synthetic kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub kind: SynthKind,
    /// Fraction of records (taken from the end) placed in the val split.
    pub val_fraction: f64,
    pub subset_size: usize,
    pub min_clauses: usize,
    pub max_clauses: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::Cirr,
            val_fraction: 0.0,
            subset_size: 6,
            min_clauses: 3,
            max_clauses: 5,
        }
    }
}

pub const FASHION_CATEGORIES: [&str; 3] = ["dress", "shirt", "toptee"];

const ENTITIES: [&str; 24] = [
    "sleeves", "hem", "collar", "belt", "neckline", "pocket", "buttons", "straps", "skirt", "logo",
    "pattern", "zipper", "cuffs", "hood", "lace", "bow", "trim", "waistband", "shoulders", "back",
    "print", "fabric", "lining", "seams",
];

const ATTRIBUTES: [&str; 24] = [
    "red", "navy", "black", "white", "golden", "silver", "pleated", "ruffled", "striped", "floral",
    "leather", "denim", "satin", "velvet", "sheer", "glossy", "matte", "longer", "shorter", "wider",
    "narrower", "embroidered", "sequined", "checkered",
];

const TEMPLATES: [&str; 5] = [
    "make the {e} {a}",
    "change the {e} to {a}",
    "the {e} should be {a}",
    "replace the {e} with a {a} one",
    "turn the {e} {a}",
];

fn synth_mmt(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    let lo = cfg.min_clauses.clamp(1, ENTITIES.len());
    let hi = cfg.max_clauses.clamp(lo, ENTITIES.len());
    let k = rng.random_range(lo..=hi);
    let entities: Vec<&str> = ENTITIES.choose_multiple(rng, k).copied().collect();
    let clauses: Vec<String> = entities
        .iter()
        .map(|e| {
            let tpl = TEMPLATES.choose(rng).expect("templates");
            let attr = ATTRIBUTES.choose(rng).expect("attributes");
            tpl.replace("{e}", e).replace("{a}", attr)
        })
        .collect();
    let (last, head) = clauses.split_last().expect("at least one clause");
    let mut text = if head.is_empty() {
        last.clone()
    } else {
        format!("{}, and {}", head.join(", "), last)
    };
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

/// Deterministic multi-clause triplets whose summaries pass the consistency
/// detector. Ids follow `q-NNNNN` / `ref-NNNNN` / `tgt-NNNNN`.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<TripletRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let n_val = ((n as f64) * cfg.val_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut records: Vec<TripletRecord> = (0..n)
        .map(|i| {
            let mmt = synth_mmt(&mut rng, cfg);
            let summary = ReferenceSummarizer
                .summarize(&mmt)
                .expect("templates always carry entities");
            TripletRecord {
                id: format!("q-{i:05}"),
                reference: format!("ref-{i:05}"),
                target: format!("tgt-{i:05}"),
                mmt,
                summary: Some(summary),
                category: (cfg.kind == SynthKind::Fashion).then(|| FASHION_CATEGORIES[i % 3].to_string()),
                subset_members: None,
                split: if i + n_val >= n { Split::Val } else { Split::Train },
            }
        })
        .collect();
    if cfg.kind == SynthKind::Cirr {
        for split in [Split::Train, Split::Val] {
            let targets: Vec<String> = records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.target.clone())
                .collect();
            for r in records.iter_mut().filter(|r| r.split == split) {
                let mut others: Vec<&String> = targets.iter().filter(|t| **t != r.target).collect();
                others.shuffle(&mut rng);
                let mut members = vec![r.target.clone()];
                members.extend(others.into_iter().take(cfg.subset_size.saturating_sub(1)).cloned());
                members.sort();
                r.subset_members = Some(members);
            }
        }
    }
    records
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tema_core::dataset::{self, generate_synthetic, Split, SynthConfig, SynthKind, TripletRecord};
use tema_core::encoders::{EmbeddingTableProvider, EncoderConfig, FeatureProvider, SyntheticEncoder};
use tema_core::entity_mapping::{target_representation, Ablation, ModelConfig, TemaModel};
use tema_core::retrieval::{
    build_index, candidate_pool, encode_records, evaluate, EvalOptions, MetricsReport, ReportKind,
};
use tema_core::tef;
use tema_core::trainer::{count_params_macs, train_with, Checkpoint, DatasetSummarizer, TrainConfig};
use tema_core::verify::gradient_suite;

use crate::args::*;

pub enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome<T = ()> = Result<T, Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

pub fn execute(cmd: Command) -> Outcome {
    match cmd {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Retrieve(a) => run_retrieve(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Stats(a) => run_stats(a),
        Command::GenSynth(a) => run_gen(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::CountParams(a) => run_count(a),
    }
}

fn env_seed() -> Outcome<Option<u64>> {
    match std::env::var("TEMA_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("TEMA_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the config file, then flags. The seed falls back to
/// `TEMA_SEED` when neither the flags nor the file set it.
fn resolve(common: &Common, kappa: Option<f64>, channels: Option<usize>) -> Outcome<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut file_seed = false;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        file_seed = table.contains_key("seed");
        cfg = table
            .try_into()
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    match (common.seed, file_seed, env_seed()?) {
        (Some(s), _, _) => cfg.seed = s,
        (None, false, Some(s)) => cfg.seed = s,
        _ => {}
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = common.lr {
        cfg.lr = v;
    }
    if let Some(v) = common.mu {
        cfg.weights.mu = v;
    }
    if let Some(v) = common.tau {
        cfg.weights.tau = v;
    }
    if let Some(v) = kappa {
        cfg.weights.kappa = v;
    }
    if let Some(v) = common.dim {
        cfg.model.dim = v;
    }
    if let Some(v) = channels {
        cfg.model.channels = v;
    }
    if let Some(flags) = &common.ablate {
        cfg.ablation = flags.parse::<Ablation>().map_err(usage)?;
    }
    Ok(cfg)
}

fn echo<T: serde::Serialize + ?Sized>(what: &T) {
    eprintln!("config: {}", serde_json::to_string(what).expect("config serializes"));
}

fn provider(features: Option<&Path>, model: &ModelConfig) -> Outcome<Box<dyn FeatureProvider>> {
    match features {
        Some(path) => {
            let images = tef::load_embedding_file(path).map_err(runtime)?;
            Ok(Box::new(EmbeddingTableProvider::new(images, 0).map_err(runtime)?))
        }
        None => Ok(Box::new(
            SyntheticEncoder::new(EncoderConfig {
                dim: model.dim,
                local_count: model.local_count,
                seed: 0,
                plant_structure: true,
            })
            .map_err(usage)?,
        )),
    }
}

/// Adopts the feature file's `D` and `C` unless `--dim` pinned them.
fn fit_to_features(cfg: &mut TrainConfig, common: &Common) -> Outcome<Box<dyn FeatureProvider>> {
    let p = provider(common.features.as_deref(), &cfg.model)?;
    if common.features.is_some() {
        if common.dim.is_some_and(|d| d != p.dim()) {
            return Err(usage(format!("--dim {} disagrees with feature width {}", cfg.model.dim, p.dim())));
        }
        cfg.model.dim = p.dim();
        cfg.model.local_count = p.local_count();
    }
    cfg.validate().map_err(usage)?;
    Ok(p)
}

fn load(path: &Path) -> Outcome<Vec<TripletRecord>> {
    dataset::load_jsonl(path).map_err(runtime)
}

fn of_split(records: &[TripletRecord], split: Split) -> Vec<TripletRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn train_records(records: &[TripletRecord]) -> Outcome<Vec<TripletRecord>> {
    let t = of_split(records, Split::Train);
    if t.is_empty() {
        return Err(runtime("no records in the train split"));
    }
    Ok(t)
}

fn toggle(t: Toggle) -> bool {
    t == Toggle::On
}

fn run_train(a: TrainArgs) -> Outcome {
    let mut cfg = resolve(&a.common, a.kappa, a.channels)?;
    let p = fit_to_features(&mut cfg, &a.common)?;
    echo(&cfg);
    let records = train_records(&load(&a.data)?)?;
    let summarizer = DatasetSummarizer::from_records(&records);
    println!("epoch\tloss");
    let out = train_with(&records, p.as_ref(), &summarizer, cfg, &mut |e, l| {
        println!("{}\t{l:.6}", e + 1);
    })
    .map_err(runtime)?;
    out.checkpoint.save(&a.out).map_err(runtime)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn require_checkpoint(path: &Option<PathBuf>) -> Outcome<Checkpoint> {
    let path = path.as_ref().ok_or_else(|| runtime("checkpoint required"))?;
    Checkpoint::load(path, None).map_err(runtime)
}

fn emit(report: &MetricsReport, format: Format, out: Option<&Path>) -> Outcome {
    let text = match format {
        Format::Tsv => report.to_tsv(),
        Format::Json => report.to_json() + "\n",
    };
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let kind = a.kind.as_deref().map(str::parse::<ReportKind>).transpose().map_err(usage)?;
    let ckpt = require_checkpoint(&a.checkpoint)?;
    let opts = EvalOptions {
        exclude_reference: toggle(a.exclude_reference),
        kind,
        ..EvalOptions::default()
    };
    echo(&serde_json::json!({ "train": ckpt.config, "eval": opts }));
    let p = provider(a.features.as_deref(), ckpt.model.config())?;
    let all = load(&a.data)?;
    let records = match a.split {
        SplitArg::Train => of_split(&all, Split::Train),
        SplitArg::Val => of_split(&all, Split::Val),
        SplitArg::All => all,
    };
    let report = evaluate(&ckpt.model, p.as_ref(), &records, &opts).map_err(runtime)?;
    emit(&report, a.format, a.out.as_deref())
}

fn run_retrieve(a: RetrieveArgs) -> Outcome {
    let ckpt = require_checkpoint(&a.checkpoint)?;
    echo(&serde_json::json!({ "train": ckpt.config, "query": a.query, "top": a.top }));
    let p = provider(a.features.as_deref(), ckpt.model.config())?;
    let records = load(&a.data)?;
    let query = records
        .iter()
        .find(|r| r.id == a.query)
        .ok_or_else(|| runtime(format!("no record with id {:?}", a.query)))?;
    let pool = candidate_pool(p.as_ref(), &records).map_err(runtime)?;
    let mut entries = Vec::with_capacity(pool.len());
    for (id, (bundle, category)) in pool {
        if query.category.is_some() && category != query.category {
            continue;
        }
        let v = target_representation(&bundle).map_err(runtime)?;
        entries.push((id, v.into_vec()));
    }
    let index = build_index(entries).map_err(runtime)?;
    let q = encode_records(&ckpt.model, p.as_ref(), std::slice::from_ref(query)).map_err(runtime)?;
    let q = q.row(0);
    let exclude: Vec<&str> = if toggle(a.exclude_reference) {
        vec![query.reference.as_str()]
    } else {
        vec![]
    };
    let scores = index.scores(q).map_err(runtime)?;
    let pos: BTreeMap<&str, usize> = index.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let ranking = index.rank_filtered(q, &exclude, None).map_err(runtime)?;
    println!("rank\tid\tscore\ttarget");
    for (i, id) in ranking.iter().take(a.top).enumerate() {
        let mark = if *id == query.target { "yes" } else { "" };
        println!("{}\t{id}\t{:.6}\t{mark}", i + 1, scores[pos[id.as_str()]]);
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Outcome<Vec<T>> {
    let items: Result<Vec<T>, _> = s.split(',').map(|x| x.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(usage(format!("--{flag} expects a comma-separated list, got {s:?}"))),
    }
}

fn run_sweep(a: SweepArgs) -> Outcome {
    let grid: Vec<(String, TrainConfig)> = match (&a.kappa, &a.channels) {
        (Some(list), None) => {
            let base = resolve(&a.common, None, None)?;
            parse_list::<f64>(list, "kappa")?
                .into_iter()
                .map(|k| {
                    let mut c = base;
                    c.weights.kappa = k;
                    (k.to_string(), c)
                })
                .collect()
        }
        (None, Some(list)) => {
            let base = resolve(&a.common, None, None)?;
            parse_list::<usize>(list, "channels")?
                .into_iter()
                .map(|n| {
                    let mut c = base;
                    c.model.channels = n;
                    (n.to_string(), c)
                })
                .collect()
        }
        _ => return Err(usage("sweep needs exactly one of --kappa or --channels")),
    };
    let param = if a.kappa.is_some() { "kappa" } else { "channels" };
    let all = load(&a.data)?;
    let train_set = train_records(&all)?;
    let val = of_split(&all, Split::Val);
    let (eval_set, eval_split) = if val.is_empty() { (&train_set, "train") } else { (&val, "val") };
    let opts = EvalOptions {
        exclude_reference: toggle(a.exclude_reference),
        ..EvalOptions::default()
    };
    let mut header = false;
    for (value, mut cfg) in grid {
        let p = fit_to_features(&mut cfg, &a.common)?;
        echo(&cfg);
        let summarizer = DatasetSummarizer::from_records(&train_set);
        let out = train_with(&train_set, p.as_ref(), &summarizer, cfg, &mut |_, _| {}).map_err(runtime)?;
        let report = evaluate(&out.checkpoint.model, p.as_ref(), eval_set, &opts).map_err(runtime)?;
        let cols: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.split == eval_split && (r.category == "all" || r.category == "avg"))
            .collect();
        if !header {
            let names: Vec<&str> = cols.iter().map(|r| r.metric.as_str()).collect();
            println!("{param}\tsplit\t{}", names.join("\t"));
            header = true;
        }
        let vals: Vec<String> = cols.iter().map(|r| format!("{:.4}", r.value)).collect();
        println!("{value}\t{eval_split}\t{}", vals.join("\t"));
    }
    Ok(())
}

fn run_stats(a: StatsArgs) -> Outcome {
    let records = load(&a.data)?;
    echo(&serde_json::json!({ "data": a.data }));
    let stats = dataset::dataset_stats(&records).map_err(runtime)?;
    print!("{}", stats.to_table());
    Ok(())
}

fn run_gen(a: GenArgs) -> Outcome {
    let kind: SynthKind = a.kind.parse().map_err(usage)?;
    if !(0.0..=1.0).contains(&a.val_fraction) {
        return Err(usage(format!("--val-fraction must be in [0, 1], got {}", a.val_fraction)));
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let cfg = SynthConfig {
        kind,
        val_fraction: a.val_fraction,
        ..SynthConfig::default()
    };
    echo(&serde_json::json!({ "n": a.n, "seed": seed, "kind": kind, "val_fraction": a.val_fraction }));
    let records = generate_synthetic(a.n, seed, &cfg);
    match &a.out {
        Some(path) => {
            dataset::write_jsonl(path, &records).map_err(runtime)?;
            eprintln!("wrote {} records to {}", records.len(), path.display());
        }
        None => print!("{}", dataset::to_jsonl(&records)),
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    echo(&serde_json::json!({ "seed": seed, "tol": a.tol, "h": 1e-5 }));
    let cases = gradient_suite(seed, a.tol).map_err(runtime)?;
    println!("check\tmax_rel_err\tstatus");
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for c in &cases {
        let e = c.report.max_rel_err();
        worst = worst.max(e);
        if !c.passed() {
            failed += 1;
        }
        println!("{}\t{e:.3e}\t{}", c.name, if c.passed() { "ok" } else { "FAIL" });
    }
    println!("max rel err {worst:.3e} over {} checks", cases.len());
    if failed > 0 {
        return Err(runtime(format!("{failed} checks exceed tolerance {}", a.tol)));
    }
    Ok(())
}

fn run_count(a: CountArgs) -> Outcome {
    let cfg = resolve(&a.common, None, a.channels)?;
    cfg.validate().map_err(usage)?;
    echo(&serde_json::json!({ "model": cfg.model, "ablation": cfg.ablation }));
    let model = TemaModel::new(cfg.model, cfg.ablation, cfg.seed).map_err(runtime)?;
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, m) in model.params().iter() {
        let head = name.split('.').next().unwrap_or(name);
        *groups.entry(head).or_default() += m.len();
    }
    let (params, macs) = count_params_macs(&model);
    println!("component\tparams");
    for (g, n) in &groups {
        println!("{g}\t{n}");
    }
    println!("total\t{params}");
    println!("macs_per_query\t{macs}");
    Ok(())
}

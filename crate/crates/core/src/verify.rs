//! Finite-difference gradient suite shared by the CLI and the test harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, Bound, GradCheckOptions, GradCheckReport, Matrix, Tape, Var};
use crate::dataset::{generate_synthetic, SynthConfig};
use crate::encoders::{EncoderConfig, SyntheticEncoder};
use crate::entity_mapping::ModelConfig;
use crate::error::{Error, Result};
use crate::trainer::{objective, DatasetSummarizer, Prepared, TrainConfig, Trainer};
use crate::transformer::normal_matrix;

/// One named check of the suite.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Case = (&'static str, Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut m = |r: usize, c: usize| normal_matrix(rng, r, c, 1.0);
    let (a, b, row, probe, probe_t, u) = (m(3, 5), m(5, 4), m(1, 5), m(3, 5), m(5, 3), m(1, 5));
    let (q, k, v, mix) = (m(5, 4), m(5, 4), m(5, 4), m(5, 4));
    let weigh = move |t: &mut Tape, x: Var, w: &Matrix| -> Result<Var> {
        let w = t.constant(w.clone());
        let y = t.mul(x, w)?;
        Ok(t.sum(y))
    };
    let p1 = probe.clone();
    let p2 = probe.clone();
    let p3 = probe.clone();
    let p4 = probe.clone();
    vec![
        ("matmul", vec![a.clone(), b], Box::new(|t, x| {
            let y = t.matmul(x[0], x[1])?;
            Ok(t.frobenius_sq(y))
        })),
        ("add/sub/mul", vec![a.clone(), probe.clone()], Box::new(move |t, x| {
            let s = t.add(x[0], x[1])?;
            let d = t.sub(x[0], x[1])?;
            let y = t.mul(s, d)?;
            weigh(t, y, &p1)
        })),
        ("add_row/scale/add_scalar", vec![a.clone(), row.clone()], Box::new(move |t, x| {
            let y = t.add_row(x[0], x[1])?;
            let y = t.scale(y, -1.3);
            let y = t.add_scalar(y, 0.4);
            Ok(t.frobenius_sq(y))
        })),
        ("transpose", vec![probe_t.clone()], Box::new(move |t, x| {
            let y = t.transpose(x[0]);
            weigh(t, y, &p2)
        })),
        ("softmax_rows", vec![a.clone()], Box::new(move |t, x| {
            let y = t.softmax_rows(x[0]);
            weigh(t, y, &p3)
        })),
        ("layer_norm_rows", vec![a.clone(), row.clone(), u.clone()], Box::new(move |t, x| {
            let y = t.layer_norm_rows(x[0], x[1], x[2])?;
            weigh(t, y, &p4)
        })),
        ("mean_rows/sum", vec![a.clone()], Box::new(|t, x| {
            let y = t.mean_rows(x[0])?;
            let y = t.frobenius_sq(y);
            let s = t.sum(x[0]);
            t.add(y, s)
        })),
        ("concat/slice", vec![a.clone(), u.clone()], Box::new(|t, x| {
            let r = t.concat_rows(&[x[0], x[1]])?;
            let r = t.slice_rows(r, 1, 3)?;
            let c = t.slice_cols(r, 1, 3)?;
            let l = t.slice_cols(r, 0, 1)?;
            let y = t.concat_cols(&[c, l, c])?;
            Ok(t.frobenius_sq(y))
        })),
        ("gather_rows", vec![a.clone()], Box::new(|t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2, 1])?;
            Ok(t.frobenius_sq(y))
        })),
        ("gelu", vec![a.clone()], Box::new(|t, x| {
            let y = t.gelu(x[0]);
            Ok(t.frobenius_sq(y))
        })),
        ("cosine_similarity", vec![u.clone(), row.clone()], Box::new(|t, x| t.cosine_similarity(x[0], x[1]))),
        ("l2_normalize_rows", vec![a.clone()], Box::new(move |t, x| {
            let y = t.l2_normalize_rows(x[0])?;
            let p = t.constant(probe_t.clone());
            let y = t.matmul(y, p)?;
            Ok(t.sum(y))
        })),
        ("softmax_cross_entropy", vec![a], Box::new(|t, x| t.softmax_cross_entropy(x[0], &[4, 0, 2]))),
        ("segment_attention", vec![q, k, v], Box::new(move |t, x| {
            let y = t.segment_attention(x[0], x[1], x[2], &[(0, 2), (2, 3)], 2)?;
            weigh(t, y, &mix)
        })),
    ]
}

/// Small model used for the objective checks.
pub fn suite_model() -> ModelConfig {
    ModelConfig {
        dim: 16,
        channels: 3,
        local_count: 4,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        combiner_layers: 1,
    }
}

/// Parameters whose gradient of the full objective is checked: both query
/// banks and the first query projection of every stack.
pub const OBJECTIVE_PARAMS: [&str; 5] =
    ["em_txt.queries", "em_img.queries", "em_txt.stack.0.wq", "em_img.stack.0.wq", "combiner.0.wq"];

fn suite_trainer(seed: u64) -> Result<Trainer> {
    let model = suite_model();
    let records = generate_synthetic(3, seed, &SynthConfig::default());
    let enc = SyntheticEncoder::new(EncoderConfig {
        dim: model.dim,
        local_count: model.local_count,
        seed,
        plant_structure: true,
    })?;
    let config = TrainConfig {
        model,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(&records, &enc, &DatasetSummarizer::from_records(&records), config)
}

/// Runs every primitive check and the objective checks at `h = 1e-5`,
/// tolerance `tol`.
pub fn gradient_suite(seed: u64, tol: f64) -> Result<Vec<SuiteCase>> {
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in primitive_cases(&mut rng) {
        let report = finite_difference_check(|t, v| f(t, v), &inputs, &opts)?;
        out.push(SuiteCase {
            name: name.to_string(),
            report,
        });
    }
    let tr = suite_trainer(seed)?;
    // Fresh weights sit close to an identity map, where some gradients are
    // too small to resolve with finite differences. Check at a generic point.
    let mut model = tr.model().clone();
    for v in model.params_mut().values_mut() {
        let noise = normal_matrix(&mut rng, v.rows(), v.cols(), 0.3);
        v.add_assign(&noise);
    }
    let params = model.params();
    let items: Vec<&Prepared> = tr.prepared().iter().collect();
    let weights = TrainConfig::default().weights;
    for name in OBJECTIVE_PARAMS {
        let pick = params
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter {name}")))?
            .index();
        let report = finite_difference_check(
            |t, v| {
                let vars: Vec<Var> = params
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, m)| if i == pick { v[0] } else { t.constant(m.clone()) })
                    .collect();
                let bound = Bound::from_vars(vars);
                objective(t, &model, &bound, &items, &weights).map(|(l, _)| l)
            },
            &[params.values()[pick].clone()],
            &opts,
        )?;
        out.push(SuiteCase {
            name: format!("objective wrt {name}"),
            report,
        });
    }
    Ok(out)
}

//! Training losses: summary-guided distillation, channel orthogonality and
//! in-batch classification, plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the distillation term.
    pub kappa: f64,
    /// Weight of the orthogonality term.
    pub mu: f64,
    /// Softmax temperature of the classification term.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kappa: 0.6,
            mu: 0.2,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.mu >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kappa and mu must be >= 0 (got {}, {})",
                self.kappa, self.mu
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0 (got {})", self.tau)));
        }
        Ok(())
    }
}

/// Which channel banks the orthogonality term covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthoMode {
    #[default]
    Both,
    /// Textual bank only.
    Txt,
    /// Visual bank only.
    Img,
    Off,
}

impl OrthoMode {
    pub fn textual(self) -> bool {
        matches!(self, OrthoMode::Both | OrthoMode::Txt)
    }

    pub fn visual(self) -> bool {
        matches!(self, OrthoMode::Both | OrthoMode::Img)
    }
}

impl std::str::FromStr for OrthoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(OrthoMode::Both),
            "txt" => Ok(OrthoMode::Txt),
            "img" => Ok(OrthoMode::Img),
            "off" => Ok(OrthoMode::Off),
            other => Err(format!("unknown ortho mode {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bbc: f64,
    pub summ: f64,
    pub ortho: f64,
    pub total: f64,
}

/// `1 - cos(summary, mean_rows(entities))`.
pub fn loss_summ(tape: &mut Tape, summary: Var, entities: Var) -> Result<Var> {
    let pooled = tape.mean_rows(entities)?;
    let c = tape
        .cosine_similarity(summary, pooled)
        .map_err(|_| Error::ZeroVector("summary or pooled entity channels".into()))?;
    let neg = tape.scale(c, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `|X X^T - I|_F^2` for the `N x D` channel bank `X`.
pub fn gram_penalty(tape: &mut Tape, channels: Var) -> Result<Var> {
    let n = tape.shape(channels).0;
    let t = tape.transpose(channels);
    let gram = tape.matmul(channels, t)?;
    let eye = tape.constant(Matrix::identity(n));
    let diff = tape.sub(gram, eye)?;
    Ok(tape.frobenius_sq(diff))
}

/// Mean `|x_i . x_j|` over the off-diagonal pairs of a channel bank.
/// Zero for a single channel.
pub fn mean_offdiag_gram(bank: &Matrix) -> f64 {
    let n = bank.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dot: f64 = bank.row(i).iter().zip(bank.row(j)).map(|(a, b)| a * b).sum();
                sum += dot.abs();
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Orthogonality penalty over whichever banks are given.
pub fn loss_ortho(tape: &mut Tape, textual: Option<Var>, visual: Option<Var>) -> Result<Var> {
    match (textual, visual) {
        (Some(a), Some(b)) => {
            if tape.shape(a).0 != tape.shape(b).0 {
                return Err(Error::dims(
                    "loss_ortho",
                    format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
                ));
            }
            let pa = gram_penalty(tape, a)?;
            let pb = gram_penalty(tape, b)?;
            tape.add(pa, pb)
        }
        (Some(x), None) | (None, Some(x)) => gram_penalty(tape, x),
        (None, None) => Ok(tape.constant(Matrix::scalar(0.0))),
    }
}

/// In-batch softmax cross-entropy over `s(c_i, t_j) / tau`, with `s` the dot
/// product of the (already unit-norm) rows.
pub fn loss_bbc(tape: &mut Tape, composed: &[Var], targets: &[Var], tau: f64) -> Result<Var> {
    if composed.is_empty() {
        return Err(Error::BatchEmpty);
    }
    if composed.len() != targets.len() {
        return Err(Error::dims(
            "loss_bbc",
            format!("{} queries vs {} targets", composed.len(), targets.len()),
        ));
    }
    let c = tape.concat_rows(composed)?;
    let t = tape.concat_rows(targets)?;
    bbc_from_matrices(tape, c, t, tau)
}

/// [`loss_bbc`] on pre-stacked `B x D` query and target matrices.
pub fn bbc_from_matrices(tape: &mut Tape, composed: Var, targets: Var, tau: f64) -> Result<Var> {
    if tape.shape(composed).0 == 0 {
        return Err(Error::BatchEmpty);
    }
    if tape.shape(composed) != tape.shape(targets) {
        return Err(Error::dims(
            "loss_bbc",
            format!("{:?} vs {:?}", tape.shape(composed), tape.shape(targets)),
        ));
    }
    let tt = tape.transpose(targets);
    let sims = tape.matmul(composed, tt)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let labels: Vec<usize> = (0..tape.shape(composed).0).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Mean over a batch of [`loss_summ`]. `summaries` is `B x D`, `entities`
/// is `B*N x D` with each triplet's `N` rows contiguous.
pub fn batch_loss_summ(tape: &mut Tape, summaries: Var, entities: Var, n: usize) -> Result<Var> {
    let (b, d) = tape.shape(summaries);
    if b == 0 {
        return Err(Error::BatchEmpty);
    }
    if tape.shape(entities) != (b * n, d) {
        return Err(Error::dims(
            "batch_loss_summ",
            format!("{:?} summaries vs {:?} entities, N={n}", (b, d), tape.shape(entities)),
        ));
    }
    let mut pool = Matrix::zeros(b, b * n);
    for i in 0..b {
        pool.row_mut(i)[i * n..(i + 1) * n].fill(1.0 / n as f64);
    }
    let pool = tape.constant(pool);
    let pooled = tape.matmul(pool, entities)?;
    let pooled = tape
        .l2_normalize_rows(pooled)
        .map_err(|_| Error::ZeroVector("pooled entity channels".into()))?;
    let s = tape
        .l2_normalize_rows(summaries)
        .map_err(|_| Error::ZeroVector("summary feature".into()))?;
    let prod = tape.mul(pooled, s)?;
    let cos_sum = tape.sum(prod);
    let neg = tape.scale(cos_sum, -1.0 / b as f64);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean over a batch of [`gram_penalty`] for one `B*N x D` bank.
pub fn batch_gram_penalty(tape: &mut Tape, channels: Var, n: usize) -> Result<Var> {
    let rows = tape.shape(channels).0;
    if n == 0 || rows == 0 || rows % n != 0 {
        return Err(Error::dims("batch_gram_penalty", format!("{rows} rows, N={n}")));
    }
    let b = rows / n;
    let t = tape.transpose(channels);
    let gram = tape.matmul(channels, t)?;
    // only the N x N diagonal blocks belong to one triplet
    let mut mask = Matrix::zeros(rows, rows);
    for i in 0..b {
        for r in i * n..(i + 1) * n {
            mask.row_mut(r)[i * n..(i + 1) * n].fill(1.0);
        }
    }
    let mask = tape.constant(mask);
    let blocks = tape.mul(gram, mask)?;
    let eye = tape.constant(Matrix::identity(rows));
    let diff = tape.sub(blocks, eye)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, 1.0 / b as f64))
}

/// Mean over a batch of [`loss_ortho`].
pub fn batch_loss_ortho(tape: &mut Tape, textual: Option<Var>, visual: Option<Var>, n: usize) -> Result<Var> {
    let a = textual.map(|a| batch_gram_penalty(tape, a, n)).transpose()?;
    let b = visual.map(|b| batch_gram_penalty(tape, b, n)).transpose()?;
    match (a, b) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Ok(tape.constant(Matrix::scalar(0.0))),
    }
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub summ: bool,
    pub ortho: bool,
}

/// Component loss nodes for one batch; `None` marks a disabled term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub bbc: Var,
    pub summ: Option<Var>,
    pub ortho: Option<Var>,
}

/// `bbc + kappa * summ + mu * ortho` over the active terms. Returns the
/// total node and the scalar breakdown.
pub fn total_loss(tape: &mut Tape, parts: LossParts, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut total = parts.bbc;
    let mut bd = LossBreakdown {
        bbc: tape.value(parts.bbc).item(),
        ..LossBreakdown::default()
    };
    if let Some(s) = parts.summ {
        bd.summ = tape.value(s).item();
        let ws = tape.scale(s, w.kappa);
        total = tape.add(total, ws)?;
    }
    if let Some(o) = parts.ortho {
        bd.ortho = tape.value(o).item();
        let wo = tape.scale(o, w.mu);
        total = tape.add(total, wo)?;
    }
    bd.total = tape.value(total).item();
    if !bd.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, GradCheckOptions};

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn summ_examples() {
        let mut t = Tape::new();
        let s = t.constant(Matrix::row_vector(&[0.3, -1.0, 2.0]));
        let same = t.constant(Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0]; 3]).unwrap());
        let l = loss_summ(&mut t, s, same).unwrap();
        assert!(value(&t, l).abs() <= 1e-12);
        let opp = t.constant(Matrix::from_rows(&vec![vec![-0.3, 1.0, -2.0]; 2]).unwrap());
        let l = loss_summ(&mut t, s, opp).unwrap();
        assert!((value(&t, l) - 2.0).abs() <= 1e-12);
        let ex = t.constant(Matrix::row_vector(&[1.0, 0.0, 0.0]));
        let ortho = t.constant(Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        let l = loss_summ(&mut t, ex, ortho).unwrap();
        assert!((value(&t, l) - 1.0).abs() <= 1e-12);
        let cancel = t.constant(Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap());
        assert!(matches!(loss_summ(&mut t, ex, cancel), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn ortho_examples() {
        let mut t = Tape::new();
        let eye = t.constant(Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.6, 0.0, 0.8, 0.0]]).unwrap());
        let l = loss_ortho(&mut t, Some(eye), Some(eye)).unwrap();
        assert!(value(&t, l).abs() <= 1e-12);
        let two = t.constant(Matrix::row_vector(&[2.0, 0.0]));
        let l = loss_ortho(&mut t, Some(two), Some(two)).unwrap();
        assert_eq!(value(&t, l), 18.0);
        let z = t.constant(Matrix::zeros(3, 5));
        let l = loss_ortho(&mut t, Some(z), Some(z)).unwrap();
        assert_eq!(value(&t, l), 6.0);
        let l = loss_ortho(&mut t, Some(z), None).unwrap();
        assert_eq!(value(&t, l), 3.0);
    }

    #[test]
    fn bbc_examples() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::row_vector(&[0.6, 0.8]));
        let l = loss_bbc(&mut t, &[c], &[c], 0.07).unwrap();
        assert_eq!(value(&t, l), 0.0);
        assert!(matches!(loss_bbc(&mut t, &[], &[], 0.07), Err(Error::BatchEmpty)));

        let e = t.constant(Matrix::row_vector(&[1.0, 0.0]));
        for b in [2usize, 8, 64] {
            let cs = vec![e; b];
            let l = loss_bbc(&mut t, &cs, &cs, 0.07).unwrap();
            assert!((value(&t, l) - (b as f64).ln()).abs() <= 1e-12);
        }

        let ex = t.constant(Matrix::row_vector(&[1.0, 0.0]));
        let ey = t.constant(Matrix::row_vector(&[0.0, 1.0]));
        let l = loss_bbc(&mut t, &[ex, ey], &[ex, ey], 1.0).unwrap();
        let e1 = std::f64::consts::E;
        assert!((value(&t, l) - -(e1 / (e1 + 1.0)).ln()).abs() <= 1e-15);
    }

    #[test]
    fn bbc_decreases_when_diagonal_rises() {
        let mut t = Tape::new();
        let targets = Matrix::identity(3);
        let tv = t.constant(targets);
        let lo = t.constant(Matrix::from_rows(&[vec![0.5, 0.1, 0.0], vec![0.1, 0.5, 0.0], vec![0.0, 0.1, 0.5]]).unwrap());
        let hi = t.constant(Matrix::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.0], vec![0.0, 0.1, 0.9]]).unwrap());
        let a = bbc_from_matrices(&mut t, lo, tv, 0.07).unwrap();
        let b = bbc_from_matrices(&mut t, hi, tv, 0.07).unwrap();
        assert!(value(&t, b) < value(&t, a));
        assert!(value(&t, b) >= 0.0);
    }

    #[test]
    fn total_weighting() {
        let mut t = Tape::new();
        let bbc = t.constant(Matrix::scalar(1.0));
        let summ = t.constant(Matrix::scalar(0.5));
        let ortho = t.constant(Matrix::scalar(0.25));
        let w = LossWeights::default();
        let (node, bd) = total_loss(&mut t, LossParts { bbc, summ: Some(summ), ortho: Some(ortho) }, &w).unwrap();
        assert!((bd.total - 1.35).abs() < 1e-15);
        assert_eq!(value(&t, node), bd.total);
        let zero = LossWeights { kappa: 0.0, mu: 0.0, tau: 0.07 };
        let (_, bd) = total_loss(&mut t, LossParts { bbc, summ: Some(summ), ortho: Some(ortho) }, &zero).unwrap();
        assert_eq!(bd.total, 1.0);
        let (_, bd) = total_loss(&mut t, LossParts { bbc, summ: None, ortho: None }, &w).unwrap();
        assert_eq!((bd.summ, bd.ortho, bd.total), (0.0, 0.0, 1.0));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { kappa: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batched_losses_match_per_sample_mean() {
        let rows = |seed: u64, r: usize| {
            Matrix::from_vec(
                r,
                4,
                (0..r * 4).map(|i| ((i as u64 * 7919 + seed * 104_729) % 97) as f64 / 50.0 - 0.9).collect(),
            )
            .unwrap()
        };
        let (b, n) = (3, 2);
        let s = rows(1, b);
        let a = rows(2, b * n);
        let v = rows(3, b * n);
        let mut t = Tape::new();
        let sv = t.constant(s.clone());
        let av = t.constant(a.clone());
        let vv = t.constant(v.clone());
        let bs = batch_loss_summ(&mut t, sv, av, n).unwrap();
        let bo = batch_loss_ortho(&mut t, Some(av), Some(vv), n).unwrap();
        let (mut summ, mut ortho) = (0.0, 0.0);
        for i in 0..b {
            let si = t.constant(s.slice_rows(i, 1));
            let ai = t.constant(a.slice_rows(i * n, n));
            let vi = t.constant(v.slice_rows(i * n, n));
            let l = loss_summ(&mut t, si, ai).unwrap();
            summ += value(&t, l) / b as f64;
            let l = loss_ortho(&mut t, Some(ai), Some(vi)).unwrap();
            ortho += value(&t, l) / b as f64;
        }
        assert!((value(&t, bs) - summ).abs() < 1e-12);
        assert!((value(&t, bo) - ortho).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let s = Matrix::row_vector(&[0.3, -0.2, 0.9, 0.1]);
        let a = Matrix::from_rows(&[vec![0.5, 0.1, -0.3, 0.2], vec![-0.1, 0.4, 0.6, 0.0], vec![0.2, 0.2, 0.2, -0.7]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.1, -0.5, 0.3, 0.9], vec![0.7, 0.1, -0.2, 0.3], vec![0.0, 0.3, 0.5, 0.4]]).unwrap();
        let opts = GradCheckOptions::default();
        let r = finite_difference_check(
            |t, v| {
                let ls = loss_summ(t, v[0], v[1])?;
                let lo = loss_ortho(t, Some(v[1]), Some(v[2]))?;
                let na = t.l2_normalize_rows(v[1])?;
                let nb = t.l2_normalize_rows(v[2])?;
                let lb = bbc_from_matrices(t, na, nb, 0.07)?;
                let (tot, _) = total_loss(
                    t,
                    LossParts { bbc: lb, summ: Some(ls), ortho: Some(lo) },
                    &LossWeights::default(),
                )?;
                Ok(tot)
            },
            &[s, a, b],
            &opts,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

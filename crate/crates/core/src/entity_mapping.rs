//! Entity mapping and multimodal query composition.
//!
//! Each side owns a bank of `N` learnable query channels and a transformer.
//! The text side reads `[E_s; E^l_m; a_q]`, the image side
//! `[E^g_r; FC(E^l_r); b_q]`, and the last `N` output rows are the entity
//! features. The combiner pools `[E^g_m; a_hat; E^g_r; b_hat]` into one
//! unit-norm query vector.
//!
//! A whole batch is packed into one tape: rows of every triplet are stacked
//! and attention is restricted to each triplet's span.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Matrix, ParamId, ParamSet, Tape, Var};
use crate::encoders::{project_local, FeatureBundle};
use crate::error::{Error, Result};
use crate::objectives::OrthoMode;
use crate::transformer::{affine, normal_matrix, StackShape, TransformerStack};

/// Std of the query-bank and segment-embedding init.
pub const QUERY_INIT_STD: f64 = 0.02;

/// Segment ids added to every mapping-stack input row.
const SEG_GLOBAL: usize = 0;
const SEG_LOCAL: usize = 1;
const SEG_QUERY: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    /// Entity channels `N`.
    pub channels: usize,
    /// Local tokens `C`.
    pub local_count: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub combiner_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            channels: 3,
            local_count: 16,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            combiner_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::InvalidConfig(format!("dim must be >= 8 (got {})", self.dim)));
        }
        if self.channels == 0 || self.local_count == 0 {
            return Err(Error::InvalidConfig("channels and local_count must be >= 1".into()));
        }
        if self.layers == 0 || self.combiner_layers == 0 {
            return Err(Error::InvalidConfig("layer counts must be >= 1".into()));
        }
        self.stack_shape(self.layers).validate()
    }

    fn stack_shape(&self, layers: usize) -> StackShape {
        StackShape {
            dim: self.dim,
            layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }

    /// Rows per triplet in a mapping stack.
    pub fn mapping_len(&self) -> usize {
        1 + self.local_count + self.channels
    }

    /// Rows per triplet in the combiner.
    pub fn combiner_len(&self) -> usize {
        2 * (1 + self.channels)
    }
}

/// Component switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_pa: bool,
    pub disable_em: bool,
    pub disable_em_txt: bool,
    pub disable_em_img: bool,
    pub disable_summ: bool,
    pub ortho_mode: OrthoMode,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.disable_em && (self.disable_em_txt || self.disable_em_img) {
            return Err(Error::ConflictingFlags(
                "disable_em already covers disable_em_txt/disable_em_img".into(),
            ));
        }
        if self.disable_em_txt && self.disable_em_img {
            return Err(Error::ConflictingFlags(
                "disable_em_txt with disable_em_img: use disable_em".into(),
            ));
        }
        if self.ortho_mode == OrthoMode::Txt && !self.textual_em() {
            return Err(Error::ConflictingFlags(
                "ortho_mode=txt needs the textual mapping".into(),
            ));
        }
        if self.ortho_mode == OrthoMode::Img && !self.visual_em() {
            return Err(Error::ConflictingFlags(
                "ortho_mode=img needs the visual mapping".into(),
            ));
        }
        Ok(())
    }

    pub fn textual_em(&self) -> bool {
        !self.disable_em && !self.disable_em_txt
    }

    pub fn visual_em(&self) -> bool {
        !self.disable_em && !self.disable_em_img
    }

    /// Whether training computes a summary feature at all.
    pub fn uses_summary(&self) -> bool {
        !self.disable_pa
    }

    pub fn summ_active(&self) -> bool {
        self.uses_summary() && !self.disable_summ && self.textual_em()
    }

    pub fn ortho_txt_active(&self) -> bool {
        self.ortho_mode.textual() && self.textual_em()
    }

    pub fn ortho_img_active(&self) -> bool {
        self.ortho_mode.visual() && self.visual_em()
    }

    /// Applies one `--ablate` token.
    pub fn apply(&mut self, flag: &str) -> Result<()> {
        match flag {
            "pa" => self.disable_pa = true,
            "em" => self.disable_em = true,
            "em_txt" => self.disable_em_txt = true,
            "em_img" => self.disable_em_img = true,
            "summ" => self.disable_summ = true,
            "ortho" => self.ortho_mode = OrthoMode::Off,
            "ortho_txt" => {
                self.ortho_mode = match self.ortho_mode {
                    OrthoMode::Both => OrthoMode::Img,
                    _ => OrthoMode::Off,
                }
            }
            "ortho_img" => {
                self.ortho_mode = match self.ortho_mode {
                    OrthoMode::Both => OrthoMode::Txt,
                    _ => OrthoMode::Off,
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown ablation {other:?} (expected pa, em, em_txt, em_img, summ, ortho, ortho_txt, ortho_img)"
                )))
            }
        }
        Ok(())
    }

    pub fn from_flags<'a>(flags: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut a = Ablation::default();
        for f in flags {
            a.apply(f.trim())?;
        }
        a.validate()?;
        Ok(a)
    }

    /// The eight single-component variants, keyed by their `--ablate` token.
    pub fn variants() -> Vec<(&'static str, Ablation)> {
        ["pa", "em", "em_txt", "em_img", "summ", "ortho", "ortho_txt", "ortho_img"]
            .into_iter()
            .map(|f| (f, Ablation::from_flags([f]).expect("known flag")))
            .collect()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.disable_pa, "pa"),
            (self.disable_em, "em"),
            (self.disable_em_txt, "em_txt"),
            (self.disable_em_img, "em_img"),
            (self.disable_summ, "summ"),
        ] {
            if on {
                parts.push(name);
            }
        }
        match self.ortho_mode {
            OrthoMode::Both => {}
            OrthoMode::Txt => parts.push("ortho_img"),
            OrthoMode::Img => parts.push("ortho_txt"),
            OrthoMode::Off => parts.push("ortho"),
        }
        if parts.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() || s.trim() == "full" {
            return Ok(Ablation::default());
        }
        Ablation::from_flags(s.split(','))
    }
}

/// Inputs for one query.
#[derive(Clone, Copy, Debug)]
pub struct QueryFeatures<'a> {
    /// Modification text features (`E^g_m`, `E^l_m`).
    pub text: &'a FeatureBundle,
    /// Reference image features (`E^g_r`, `E^l_r`).
    pub reference: &'a FeatureBundle,
    /// Summary feature `E_s`; `None` at inference or without the parsing
    /// assistant, in which case `E^g_m` takes its slot.
    pub summary: Option<&'a Matrix>,
}

#[derive(Clone, Debug)]
struct EntityMapper {
    stack: TransformerStack,
    segment: ParamId,
    queries: ParamId,
}

/// Graph nodes produced by one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `B x D`, unit rows.
    pub composed: Var,
    /// Textual entity features, `B*N x D`, triplet-major.
    pub a_hat: Option<Var>,
    /// Visual entity features, `B*N x D`, triplet-major.
    pub b_hat: Option<Var>,
    /// Combiner input, `B*2(1+N) x D`; per triplet `[E_hat_m; E_hat_r]`.
    pub tokens: Var,
    pub batch: usize,
    pub channels: usize,
}

impl Forward {
    fn rows_of(tape: &mut Tape, x: Option<Var>, start: usize, len: usize) -> Result<Option<Var>> {
        x.map(|v| tape.slice_rows(v, start, len)).transpose()
    }

    /// `a_hat` of triplet `i`, `N x D`.
    pub fn a_hat_of(&self, tape: &mut Tape, i: usize) -> Result<Option<Var>> {
        Self::rows_of(tape, self.a_hat, i * self.channels, self.channels)
    }

    /// `b_hat` of triplet `i`, `N x D`.
    pub fn b_hat_of(&self, tape: &mut Tape, i: usize) -> Result<Option<Var>> {
        Self::rows_of(tape, self.b_hat, i * self.channels, self.channels)
    }

    /// `E_hat_m` of triplet `i`, `(1+N) x D`.
    pub fn e_hat_m(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        tape.slice_rows(self.tokens, i * 2 * (1 + self.channels), 1 + self.channels)
    }

    /// `E_hat_r` of triplet `i`, `(1+N) x D`.
    pub fn e_hat_r(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        let n1 = 1 + self.channels;
        tape.slice_rows(self.tokens, i * 2 * n1 + n1, n1)
    }
}

/// The trainable model: optional mapping stacks, local projection, combiner
/// and output map, all stored in one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct TemaModel {
    config: ModelConfig,
    ablation: Ablation,
    params: ParamSet,
    text: Option<EntityMapper>,
    image: Option<EntityMapper>,
    local_proj: Option<(ParamId, ParamId)>,
    combiner: TransformerStack,
    out_w: ParamId,
    out_b: ParamId,
}

impl TemaModel {
    /// Builds a freshly initialized model. Only components active under
    /// `ablation` get parameters.
    pub fn new(config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.dim;
        let n = config.channels;
        let mapper = |params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng| -> Result<EntityMapper> {
            let queries = params.add(format!("{prefix}.queries"), normal_matrix(rng, n, d, QUERY_INIT_STD));
            let segment = params.add(format!("{prefix}.segment"), normal_matrix(rng, 3, d, QUERY_INIT_STD));
            let stack = TransformerStack::new(params, &format!("{prefix}.stack"), config.stack_shape(config.layers), rng)?;
            Ok(EntityMapper { stack, segment, queries })
        };
        let text = if ablation.textual_em() {
            Some(mapper(&mut params, "em_txt", &mut rng)?)
        } else {
            None
        };
        let image = if ablation.visual_em() {
            Some(mapper(&mut params, "em_img", &mut rng)?)
        } else {
            None
        };
        let local_proj = image.as_ref().map(|_| {
            (
                params.add("fc_local.w", Matrix::identity(d)),
                params.add("fc_local.b", Matrix::zeros(1, d)),
            )
        });
        let combiner = TransformerStack::new(
            &mut params,
            "combiner",
            config.stack_shape(config.combiner_layers),
            &mut rng,
        )?;
        let out_w = params.add("out.w", Matrix::identity(d));
        let out_b = params.add("out.b", Matrix::zeros(1, d));
        Ok(Self {
            config,
            ablation,
            params,
            text,
            image,
            local_proj,
            combiner,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `a_q`, if the textual mapping is active.
    pub fn textual_queries(&self) -> Option<ParamId> {
        self.text.as_ref().map(|m| m.queries)
    }

    /// `b_q`, if the visual mapping is active.
    pub fn visual_queries(&self) -> Option<ParamId> {
        self.image.as_ref().map(|m| m.queries)
    }

    /// First query projection of each stack (text, image, combiner).
    pub fn stack_weights(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = [&self.text, &self.image]
            .into_iter()
            .flatten()
            .filter_map(|m| m.stack.first_query_weight())
            .collect();
        v.extend(self.combiner.first_query_weight());
        v
    }

    /// Analytic multiply-accumulate count for one query.
    pub fn macs_per_query(&self) -> u64 {
        let c = &self.config;
        let d = c.dim as u64;
        let mut total = 0u64;
        if let Some(m) = &self.text {
            total += m.stack.shape().macs(c.mapping_len());
        }
        if let Some(m) = &self.image {
            total += m.stack.shape().macs(c.mapping_len()) + c.local_count as u64 * d * d;
        }
        total += self.combiner.shape().macs(c.combiner_len());
        // mean pooling as a product with the averaging row, then the output map
        total += c.combiner_len() as u64 * d + d * d;
        total
    }

    fn check_inputs(&self, queries: &[QueryFeatures<'_>]) -> Result<()> {
        let (d, c) = (self.config.dim, self.config.local_count);
        for (i, q) in queries.iter().enumerate() {
            for (what, b) in [("text", q.text), ("reference", q.reference)] {
                if b.global.shape() != (1, d) || b.local.shape() != (c, d) {
                    return Err(Error::dims(
                        "forward",
                        format!(
                            "query {i} {what}: global {:?}, local {:?}, expected 1x{d} and {c}x{d}",
                            b.global.shape(),
                            b.local.shape()
                        ),
                    ));
                }
            }
            if let Some(s) = q.summary {
                if s.shape() != (1, d) {
                    return Err(Error::dims("forward", format!("query {i} summary {:?}", s.shape())));
                }
            }
        }
        Ok(())
    }

    /// One mapping stack over the packed batch; returns the `B*N x D` query
    /// slot outputs.
    fn map_side(
        &self,
        tape: &mut Tape,
        p: &Bound,
        m: &EntityMapper,
        globals: Var,
        locals: Var,
        batch: usize,
    ) -> Result<Var> {
        let (c, n) = (self.config.local_count, self.config.channels);
        let len = self.config.mapping_len();
        let all = tape.concat_rows(&[globals, locals, p.var(m.queries)])?;
        let mut index = Vec::with_capacity(batch * len);
        let mut seg = Vec::with_capacity(batch * len);
        let mut slots = Vec::with_capacity(batch * n);
        for b in 0..batch {
            index.push(b);
            index.extend(batch + b * c..batch + (b + 1) * c);
            index.extend(batch + batch * c..batch + batch * c + n);
            seg.push(SEG_GLOBAL);
            seg.extend(std::iter::repeat_n(SEG_LOCAL, c));
            seg.extend(std::iter::repeat_n(SEG_QUERY, n));
            slots.extend(b * len + 1 + c..(b + 1) * len);
        }
        let x = tape.gather_rows(all, &index)?;
        let s = tape.gather_rows(p.var(m.segment), &seg)?;
        let x = tape.add(x, s)?;
        let segments: Vec<(usize, usize)> = (0..batch).map(|b| (b * len, len)).collect();
        let y = m.stack.forward(tape, p, x, &segments)?;
        tape.gather_rows(y, &slots)
    }

    /// Batched forward pass up to the composed query vectors.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: &[QueryFeatures<'_>]) -> Result<Forward> {
        let batch = queries.len();
        if batch == 0 {
            return Err(Error::BatchEmpty);
        }
        self.check_inputs(queries)?;
        let n = self.config.channels;
        let stack = |rows: Vec<&Matrix>| Matrix::stack_rows(rows);

        let text_globals = tape.constant(stack(queries.iter().map(|q| &q.text.global).collect())?);
        let ref_globals = tape.constant(stack(queries.iter().map(|q| &q.reference.global).collect())?);
        let ctx = tape.constant(stack(
            queries.iter().map(|q| q.summary.unwrap_or(&q.text.global)).collect(),
        )?);

        let a_hat = match &self.text {
            Some(m) => {
                let locals = tape.constant(stack(queries.iter().map(|q| &q.text.local).collect())?);
                Some(self.map_side(tape, p, m, ctx, locals, batch)?)
            }
            None => None,
        };
        let b_hat = match &self.image {
            Some(m) => {
                let raw = tape.constant(stack(queries.iter().map(|q| &q.reference.local).collect())?);
                let (w, b) = self.local_proj.expect("visual mapping owns the local projection");
                let locals = project_local(tape, raw, p.var(w), p.var(b))?;
                Some(self.map_side(tape, p, m, ref_globals, locals, batch)?)
            }
            None => None,
        };

        // Per triplet: [E^g_m; a_hat; E^g_r; b_hat]. A bypassed side repeats
        // its context row in place of the entity channels.
        let a_src = a_hat.unwrap_or(ctx);
        let b_src = b_hat.unwrap_or(ref_globals);
        let pool = tape.concat_rows(&[text_globals, a_src, ref_globals, b_src])?;
        let (o_a, o_r, o_b) = (batch, batch + tape.shape(a_src).0, 2 * batch + tape.shape(a_src).0);
        let len = self.config.combiner_len();
        let mut index = Vec::with_capacity(batch * len);
        for b in 0..batch {
            index.push(b);
            if a_hat.is_some() {
                index.extend(o_a + b * n..o_a + (b + 1) * n);
            } else {
                index.extend(std::iter::repeat_n(o_a + b, n));
            }
            index.push(o_r + b);
            if b_hat.is_some() {
                index.extend(o_b + b * n..o_b + (b + 1) * n);
            } else {
                index.extend(std::iter::repeat_n(o_r + b, n));
            }
        }
        let tokens = tape.gather_rows(pool, &index)?;
        let segments: Vec<(usize, usize)> = (0..batch).map(|b| (b * len, len)).collect();
        let y = self.combiner.forward(tape, p, tokens, &segments)?;
        let mut pooling = Matrix::zeros(batch, batch * len);
        for b in 0..batch {
            pooling.row_mut(b)[b * len..(b + 1) * len].fill(1.0 / len as f64);
        }
        let pooling = tape.constant(pooling);
        let pooled = tape.matmul(pooling, y)?;
        let z = affine(tape, pooled, p.var(self.out_w), p.var(self.out_b))?;
        let composed = tape.l2_normalize_rows(z)?;
        Ok(Forward {
            composed,
            a_hat,
            b_hat,
            tokens,
            batch,
            channels: n,
        })
    }

    /// Stacked textual entity banks `a_hat` (`B*N x D`), or `None` when the
    /// textual mapping is disabled.
    pub fn textual_entities(&self, queries: &[QueryFeatures<'_>]) -> Result<Option<Matrix>> {
        if !self.ablation.textual_em() {
            return Ok(None);
        }
        let mut parts = Vec::new();
        for chunk in queries.chunks(64) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let f = self.forward(&mut tape, &p, chunk)?;
            if let Some(a) = f.a_hat {
                parts.push(tape.value(a).clone());
            }
        }
        Matrix::stack_rows(parts.iter()).map(Some)
    }

    /// Composed query vectors without building gradients, `B x D`.
    pub fn encode_queries(&self, queries: &[QueryFeatures<'_>]) -> Result<Matrix> {
        const CHUNK: usize = 64;
        let mut parts = Vec::new();
        for chunk in queries.chunks(CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let f = self.forward(&mut tape, &p, chunk)?;
            parts.push(tape.value(f.composed).clone());
        }
        Matrix::stack_rows(parts.iter())
    }
}

/// Unit-norm target vector from a bundle's global feature.
pub fn target_representation(bundle: &FeatureBundle) -> Result<Matrix> {
    let g = &bundle.global;
    let norm = g.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector("target global feature".into()));
    }
    Ok(g.map(|v| v / norm))
}

/// `[global; entity]`, `(1+N) x D`.
pub fn build_query_tokens(tape: &mut Tape, global: Var, entity: Var) -> Result<Var> {
    if tape.shape(global).0 != 1 {
        return Err(Error::dims("build_query_tokens", format!("global {:?}", tape.shape(global))));
    }
    tape.concat_rows(&[global, entity])
}

//! Extract-manipulate-sample editing pipeline.
//!
//! Extract reads the source tuple off the image with the oracle classifier
//! and swaps the target slot token; manipulate shifts the text embedding by
//! the prompt-difference direction scaled with the editing degree; sample
//! optionally runs constrained score distillation on the noised latent
//! before the guided reverse pass. The sampler works purely on denoiser
//! predictions: no differentiation tape is ever constructed here, and
//! [`edit`] asserts that.
//!
//! The default policy tries the text-side edit first and falls back to the
//! latent update when the target score misses its threshold; the order can
//! be flipped in the config.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::diffusion::{forward, Denoiser, LatentState, NoiseSchedule};
use crate::embed::{
    direction, encode, manipulate, manipulate_multi, EditDirection, EditPlan, TextEmbedding,
    TokenTable,
};
use crate::error::{Error, Result};
use crate::graph::graph_build_count;
use crate::neural::NeuralDenoiser;
use crate::oracle::{GmmWorld, OracleDenoiser};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::toyworld::{
    describe, AttributeSchema, PromptTokens, Prototypes, SemanticTuple, ToyImage,
};

/// Latent codec plus denoiser bundle an editing backend.
pub trait EditBackend: Sync {
    fn denoiser(&self) -> &dyn Denoiser;
    fn schedule(&self) -> &NoiseSchedule;
    fn latent_of_image(&self, img: &ToyImage) -> Result<Tensor>;
    fn decode_latent(&self, z0: &Tensor) -> Result<ToyImage>;
    /// Valid range for clean latents, clamped during reverse sampling.
    /// `None` for unbounded latent spaces.
    fn clean_bounds(&self) -> Option<(f64, f64)> {
        None
    }
    fn label(&self) -> String;
}

/// Exact backend: images encode to their component mean, latents decode by
/// nearest component.
pub struct OracleBackend {
    pub world: Arc<GmmWorld>,
    pub denoiser: OracleDenoiser,
    protos: Prototypes,
}

impl OracleBackend {
    pub fn new(world: Arc<GmmWorld>, schedule: NoiseSchedule, table: Arc<TokenTable>) -> Self {
        let protos = Prototypes::new(world.schema());
        let denoiser = OracleDenoiser::new(world.clone(), schedule, table);
        OracleBackend { world, denoiser, protos }
    }
}

impl EditBackend for OracleBackend {
    fn denoiser(&self) -> &dyn Denoiser {
        &self.denoiser
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.denoiser.schedule
    }

    fn latent_of_image(&self, img: &ToyImage) -> Result<Tensor> {
        let tuple = self.protos.classify(img);
        Tensor::new(vec![self.world.latent_dim()], self.world.mean_of(&tuple).to_vec())
    }

    fn decode_latent(&self, z0: &Tensor) -> Result<ToyImage> {
        self.world.decode(z0.data())
    }

    fn label(&self) -> String {
        if self.world.is_entangled() { "oracle-entangled".into() } else { "oracle".into() }
    }
}

/// Trained backend: the latent is the flattened image itself.
pub struct NeuralBackend {
    pub model: NeuralDenoiser,
    pub schedule: NoiseSchedule,
}

impl NeuralBackend {
    pub fn new(model: NeuralDenoiser, schedule: NoiseSchedule) -> Self {
        NeuralBackend { model, schedule }
    }
}

impl EditBackend for NeuralBackend {
    fn denoiser(&self) -> &dyn Denoiser {
        &self.model
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_of_image(&self, img: &ToyImage) -> Result<Tensor> {
        Tensor::new(vec![img.to_latent().len()], img.to_latent())
    }

    fn decode_latent(&self, z0: &Tensor) -> Result<ToyImage> {
        ToyImage::from_latent_clamped(z0.data())
    }

    fn clean_bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }

    fn label(&self) -> String {
        self.model.config.variant.label().to_string()
    }
}

/// Constrained score-distillation settings.
#[derive(Clone, Debug, Serialize)]
pub struct CsdsConfig {
    pub lambda: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub iterations: usize,
    /// Guidance scale for the attribute prediction; `None` keeps it a raw
    /// conditional as in the default reading of the update rule.
    pub attr_guidance: Option<f64>,
}

impl Default for CsdsConfig {
    fn default() -> Self {
        CsdsConfig { lambda: 0.5, eta_start: 0.1, eta_end: 0.01, iterations: 50, attr_guidance: None }
    }
}

impl CsdsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Domain { context: "lambda", value: self.lambda });
        }
        if self.eta_start <= 0.0 || self.eta_end <= 0.0 || self.eta_end > self.eta_start {
            return Err(Error::Configuration {
                context: format!(
                    "eta schedule must be positive non-increasing: {} -> {}",
                    self.eta_start, self.eta_end
                ),
            });
        }
        Ok(())
    }

    fn eta_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.eta_start;
        }
        let f = iteration as f64 / (self.iterations - 1) as f64;
        self.eta_start + (self.eta_end - self.eta_start) * f
    }
}

/// Which manipulation runs first when both are allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EditOrder {
    TextFirst,
    CsdsFirst,
}

/// Whole-pipeline settings with the reference defaults: forward to 75% of
/// the timesteps, guidance 7.5, 50 sampling steps.
#[derive(Clone, Debug, Serialize)]
pub struct EmsConfig {
    pub forward_frac: f64,
    pub cfg_scale: f64,
    pub steps: usize,
    /// Success needs attribute_score >= success_margin * clamp(|degree|, 0, 1).
    pub success_margin: f64,
    pub order: EditOrder,
    pub csds: CsdsConfig,
    pub seed: u64,
}

impl Default for EmsConfig {
    fn default() -> Self {
        EmsConfig {
            forward_frac: 0.75,
            cfg_scale: 7.5,
            steps: 50,
            success_margin: 0.9,
            order: EditOrder::TextFirst,
            csds: CsdsConfig::default(),
            seed: 0,
        }
    }
}

/// One editing request. `targets` holds (attribute, value, degree); a single
/// entry is the ordinary case, several entries form a diagonal multi-edit.
/// `direction_override` replays a stored direction (bidirectional editing),
/// with the degree taken from the first target entry.
#[derive(Clone)]
pub struct EditRequest {
    pub source: ToyImage,
    pub targets: Vec<(usize, usize, f64)>,
    pub direction_override: Option<EditDirection>,
}

impl EditRequest {
    pub fn single(source: ToyImage, attr: usize, value: usize, degree: f64) -> Self {
        EditRequest { source, targets: vec![(attr, value, degree)], direction_override: None }
    }

    fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Contract { context: "edit request needs a target" });
        }
        for &(attr, value, degree) in &self.targets {
            if attr >= schema.attr_count() {
                return Err(Error::Configuration {
                    context: format!("attribute index {attr} out of range"),
                });
            }
            if value >= schema.value_count(attr) {
                return Err(Error::Configuration {
                    context: format!("value index {value} out of range"),
                });
            }
            if !degree.is_finite() {
                return Err(Error::Domain { context: "editing degree", value: degree });
            }
        }
        Ok(())
    }
}

/// Shared context for pipeline runs.
pub struct Pipeline<'a> {
    pub backend: &'a dyn EditBackend,
    pub schema: &'a AttributeSchema,
    pub table: &'a TokenTable,
    pub protos: &'a Prototypes,
}

/// Trace of one attempt (text-only or text plus latent updates).
#[derive(Clone, Debug, Serialize)]
pub struct AttemptTrace {
    pub path: &'static str,
    pub achieved_score: f64,
    pub csds_step_norms: Vec<f64>,
}

/// Full record of an edit, serialized next to every artifact.
#[derive(Clone, Debug, Serialize)]
pub struct EditTrace {
    pub backend: String,
    pub alpha: f64,
    pub lambda: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub iterations: usize,
    pub forward_t: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub success_threshold: f64,
    pub target_attribute: String,
    pub target_value: String,
    pub path_taken: &'static str,
    pub success: bool,
    pub scores_before: BTreeMap<String, f64>,
    pub scores_after: BTreeMap<String, f64>,
    pub attempts: Vec<AttemptTrace>,
    pub warnings: Vec<String>,
}

/// Edit result; failures are ordinary values carrying every attempt.
pub struct EditOutcome {
    pub image: ToyImage,
    pub success: bool,
    pub trace: EditTrace,
}

/// Extract the source prompt from the image and the edited prompt from the
/// request: same tokens everywhere except the target slot.
pub fn extract(
    protos: &Prototypes,
    schema: &AttributeSchema,
    img: &ToyImage,
    attr: usize,
    target_value: usize,
) -> (PromptTokens, PromptTokens, SemanticTuple, Vec<String>) {
    let (tuple, margin) = protos.classify_with_margin(img);
    let mut warnings = Vec::new();
    if margin == 0.0 {
        warnings.push("classification tie; lowest-index tuple used".to_string());
    }
    let t0 = describe(schema, &tuple);
    let t1 = t0.with_token(attr, schema.token_id(attr, target_value));
    (t0, t1, tuple, warnings)
}

/// Text-side manipulation: encode both prompts and move by alpha along the
/// prompt difference. Equal prompts are the identity edit.
pub fn manipulate_stage(
    table: &TokenTable,
    t0: &PromptTokens,
    t1: &PromptTokens,
    alpha: f64,
) -> Result<(TextEmbedding, Option<EditDirection>)> {
    let c0 = encode(table, t0)?;
    let c1 = encode(table, t1)?;
    if t0 == t1 {
        return Ok((c0, None));
    }
    let n = direction(&c0, &c1)?;
    let edited = manipulate(&c0, &n, alpha)?;
    Ok((edited, Some(n)))
}

/// One constrained score-distillation update:
/// `g = 2 (eps_edit(z') - eps_attr(z')) + 2 lambda (eps_edit(z') - eps_edit(z_t))`
/// with every prediction treated as a constant, then
/// `z' <- z' - (eta / (1 + lambda)) g`.
///
/// The step is normalized by the objective's total weight: a plain `eta g`
/// update multiplies the anchor deviation by roughly `eta (1 + lambda)` per
/// iteration and oscillates apart once lambda is large, while the normalized
/// step stays contractive for every constraint strength. At lambda = 0 the
/// two rules coincide.
#[allow(clippy::too_many_arguments)]
pub fn csds_step(
    den: &dyn Denoiser,
    z_prime: &Tensor,
    z_t: &Tensor,
    t: usize,
    c_edit: &TextEmbedding,
    c_attr: &TextEmbedding,
    cfg: &CsdsConfig,
    eta: f64,
    iteration: usize,
) -> Result<Tensor> {
    let eps_edit_prime = den.predict(z_prime, t, Some(c_edit))?;
    let eps_attr_prime = match cfg.attr_guidance {
        Some(w) => crate::diffusion::guided_eps(den, z_prime, t, c_attr, w)?,
        None => den.predict(z_prime, t, Some(c_attr))?,
    };
    let eps_edit_anchor = den.predict(z_t, t, Some(c_edit))?;

    let mut g = vec![0.0; z_prime.len()];
    for i in 0..g.len() {
        g[i] = 2.0 * (eps_edit_prime.data()[i] - eps_attr_prime.data()[i])
            + 2.0 * cfg.lambda * (eps_edit_prime.data()[i] - eps_edit_anchor.data()[i]);
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::OptimizationDiverged { iteration });
    }
    let step = eta / (1.0 + cfg.lambda);
    let updated: Vec<f64> = z_prime.data().iter().zip(&g).map(|(&z, &gv)| z - step * gv).collect();
    Tensor::new(z_prime.shape().to_vec(), updated)
}

/// Run the full update loop with the decaying step size; records
/// `|z' - z_t|` after every iteration.
pub fn sample_stage(
    den: &dyn Denoiser,
    state: &LatentState,
    c_edit: &TextEmbedding,
    c_attr: &TextEmbedding,
    cfg: &CsdsConfig,
) -> Result<(Tensor, Vec<f64>)> {
    if cfg.iterations == 0 {
        return Err(Error::Contract { context: "sample_stage needs at least one iteration" });
    }
    cfg.validate()?;
    let mut z_prime = state.z.clone();
    let mut norms = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        z_prime =
            csds_step(den, &z_prime, &state.z, state.t, c_edit, c_attr, cfg, cfg.eta_at(it), it)?;
        let dist: f64 = z_prime
            .data()
            .iter()
            .zip(state.z.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        norms.push(dist);
    }
    Ok((z_prime, norms))
}

fn attr_only_prompt(schema: &AttributeSchema, targets: &[(usize, usize, f64)]) -> PromptTokens {
    let pins: Vec<(usize, usize)> = targets.iter().map(|&(a, v, _)| (a, v)).collect();
    PromptTokens::partial(schema, &pins)
}

fn score_map(
    protos: &Prototypes,
    schema: &AttributeSchema,
    img: &ToyImage,
    expected: &SemanticTuple,
) -> BTreeMap<String, f64> {
    (0..schema.attr_count())
        .map(|a| {
            (schema.attr_name(a).to_string(), protos.attribute_score(img, a, expected.values[a]))
        })
        .collect()
}

/// Full pipeline: extract, encode, forward, manipulate, guided reverse, and
/// the latent-update fallback policy. Never builds a differentiation tape.
pub fn edit(pipe: &Pipeline, req: &EditRequest, cfg: &EmsConfig) -> Result<EditOutcome> {
    let builds_before = graph_build_count();
    req.validate(pipe.schema)?;
    if !(0.0..=1.0).contains(&cfg.forward_frac) {
        return Err(Error::Domain { context: "forward fraction", value: cfg.forward_frac });
    }
    let schedule = pipe.backend.schedule();
    let den = pipe.backend.denoiser();

    // Extract.
    let (primary_attr, primary_value, primary_degree) = req.targets[0];
    let (t0, _, source_tuple, warnings) =
        extract(pipe.protos, pipe.schema, &req.source, primary_attr, primary_value);
    let c0 = encode(pipe.table, &t0)?;

    // Manipulate: single direction, stored direction, or diagonal plan.
    let c_edit = match &req.direction_override {
        Some(n) => manipulate(&c0, n, primary_degree)?,
        None => {
            let entries: Result<Vec<(EditDirection, f64)>> = req
                .targets
                .iter()
                .map(|&(attr, value, degree)| {
                    let t1 = t0.with_token(attr, pipe.schema.token_id(attr, value));
                    if t1 == t0 {
                        // Identity move: a zero direction in the slot.
                        let d = pipe.table.dim();
                        Ok((
                            EditDirection::from_slot_row(attr, vec![0.0; d], false)
                                .with_attribute(pipe.schema.attr_name(attr)),
                            degree,
                        ))
                    } else {
                        let c1 = encode(pipe.table, &t1)?;
                        Ok((
                            direction(&c0, &c1)?.with_attribute(pipe.schema.attr_name(attr)),
                            degree,
                        ))
                    }
                })
                .collect();
            manipulate_multi(&c0, &EditPlan::new(entries?))?
        }
    };
    let c_attr = encode(pipe.table, &attr_only_prompt(pipe.schema, &req.targets))?;

    // Forward the source latent.
    let t_fwd = schedule.strength_to_t(cfg.forward_frac)?;
    let z0 = pipe.backend.latent_of_image(&req.source)?;
    let mut rng = RngStream::new(cfg.seed, 0xED17).substream(t_fwd as u64);
    let z_t = forward(schedule, &LatentState::clean(z0), t_fwd, &mut rng)?;

    // Expected tuple after the edit and the success bar.
    let mut expected = source_tuple.clone();
    for &(attr, value, _) in &req.targets {
        expected.values[attr] = value;
    }
    let degree_scale = primary_degree.abs().clamp(0.0, 1.0);
    let threshold = cfg.success_margin * degree_scale;
    let scores_before = score_map(pipe.protos, pipe.schema, &req.source, &expected);

    let reverse_to_image = |z: &LatentState| -> Result<ToyImage> {
        if z.t == 0 {
            return pipe.backend.decode_latent(&z.z);
        }
        let z0 = crate::diffusion::reverse_bounded(
            den,
            schedule,
            z,
            Some(&c_edit),
            cfg.steps,
            cfg.cfg_scale,
            pipe.backend.clean_bounds(),
            None,
        )?;
        pipe.backend.decode_latent(&z0.z)
    };
    let score_of = |img: &ToyImage| -> f64 {
        req.targets
            .iter()
            .map(|&(a, v, _)| pipe.protos.attribute_score(img, a, v))
            .fold(f64::INFINITY, f64::min)
    };

    let text_attempt = |attempts: &mut Vec<AttemptTrace>| -> Result<(ToyImage, f64)> {
        let img = reverse_to_image(&z_t)?;
        let score = score_of(&img);
        attempts.push(AttemptTrace {
            path: "text",
            achieved_score: score,
            csds_step_norms: Vec::new(),
        });
        Ok((img, score))
    };
    let csds_attempt = |attempts: &mut Vec<AttemptTrace>| -> Result<(ToyImage, f64)> {
        let (z_prime, norms) = sample_stage(den, &z_t, &c_edit, &c_attr, &cfg.csds)?;
        let img = reverse_to_image(&LatentState { z: z_prime, t: z_t.t })?;
        let score = score_of(&img);
        attempts.push(AttemptTrace {
            path: "text+csds",
            achieved_score: score,
            csds_step_norms: norms,
        });
        Ok((img, score))
    };

    let mut attempts = Vec::new();
    let ordered: [&dyn Fn(&mut Vec<AttemptTrace>) -> Result<(ToyImage, f64)>; 2] = match cfg.order
    {
        EditOrder::TextFirst => [&text_attempt, &csds_attempt],
        EditOrder::CsdsFirst => [&csds_attempt, &text_attempt],
    };

    let (first_img, first_score) = ordered[0](&mut attempts)?;
    let (image, success) = if first_score >= threshold {
        (first_img, true)
    } else {
        let (second_img, second_score) = ordered[1](&mut attempts)?;
        if second_score >= threshold {
            (second_img, true)
        } else if second_score >= first_score {
            (second_img, false)
        } else {
            (first_img, false)
        }
    };

    let scores_after = score_map(pipe.protos, pipe.schema, &image, &expected);
    let path_taken = attempts.last().map(|a| a.path).unwrap_or("text");
    let trace = EditTrace {
        backend: pipe.backend.label(),
        alpha: primary_degree,
        lambda: cfg.csds.lambda,
        eta_start: cfg.csds.eta_start,
        eta_end: cfg.csds.eta_end,
        iterations: cfg.csds.iterations,
        forward_t: t_fwd,
        cfg_scale: cfg.cfg_scale,
        steps: cfg.steps,
        success_threshold: threshold,
        target_attribute: pipe.schema.attr_name(primary_attr).to_string(),
        target_value: pipe.schema.value_name(primary_attr, primary_value).to_string(),
        path_taken,
        success,
        scores_before,
        scores_after,
        attempts,
        warnings,
    };
    debug_assert_eq!(
        graph_build_count(),
        builds_before,
        "editing must not build a differentiation tape"
    );
    Ok(EditOutcome { image, success, trace })
}

/// Preservation sweep over an alpha grid; flags the first degree at which a
/// non-target attribute changes under classification.
#[derive(Clone, Debug, Serialize)]
pub struct CollapseReport {
    pub alphas: Vec<f64>,
    pub preserved: Vec<bool>,
    pub target_scores: Vec<f64>,
    pub first_violation: Option<f64>,
}

pub fn collapse_sweep(
    pipe: &Pipeline,
    source: &SemanticTuple,
    attr: usize,
    target_value: usize,
    alphas: &[f64],
    cfg: &EmsConfig,
) -> Result<CollapseReport> {
    let (src_img, _) = crate::toyworld::render(pipe.schema, source);
    let mut preserved = Vec::with_capacity(alphas.len());
    let mut target_scores = Vec::with_capacity(alphas.len());
    let mut first_violation = None;
    for &alpha in alphas {
        let req = EditRequest::single(src_img.clone(), attr, target_value, alpha);
        let out = edit(pipe, &req, cfg)?;
        let decoded = pipe.protos.classify(&out.image);
        let ok = (0..pipe.schema.attr_count())
            .filter(|&a| a != attr)
            .all(|a| decoded.values[a] == source.values[a]);
        if !ok && first_violation.is_none() {
            first_violation = Some(alpha);
        }
        preserved.push(ok);
        target_scores.push(pipe.protos.attribute_score(&out.image, attr, target_value));
    }
    Ok(CollapseReport { alphas: alphas.to_vec(), preserved, target_scores, first_violation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::render;

    struct Lab {
        schema: AttributeSchema,
        table: Arc<TokenTable>,
        world: Arc<GmmWorld>,
        backend: OracleBackend,
        protos: Prototypes,
    }

    fn lab() -> Lab {
        let schema = AttributeSchema::default_schema();
        let table = Arc::new(TokenTable::for_schema(&schema, 16, 99).unwrap());
        let world = Arc::new(GmmWorld::default_world(&schema));
        let backend =
            OracleBackend::new(world.clone(), NoiseSchedule::default_schedule(), table.clone());
        let protos = Prototypes::new(&schema);
        Lab { schema, table, world, backend, protos }
    }

    fn pipeline(lab: &Lab) -> Pipeline<'_> {
        Pipeline {
            backend: &lab.backend,
            schema: &lab.schema,
            table: &lab.table,
            protos: &lab.protos,
        }
    }

    #[test]
    fn extract_is_exact_on_clean_renders() {
        let lab = lab();
        for s in lab.schema.tuples().into_iter().step_by(7) {
            let (img, _) = render(&lab.schema, &s);
            let (t0, t1, tuple, warnings) = extract(&lab.protos, &lab.schema, &img, 1, 2);
            assert_eq!(tuple, s);
            assert!(warnings.is_empty());
            assert_eq!(t0.invert(&lab.schema).unwrap(), s);
            let differing: Vec<usize> =
                (0..t0.len()).filter(|&i| t0.token(i) != t1.token(i)).collect();
            if s.values[1] == 2 {
                assert!(differing.is_empty());
            } else {
                assert_eq!(differing, vec![1]);
            }
        }
    }

    #[test]
    fn manipulate_stage_endpoints() {
        let lab = lab();
        let s = SemanticTuple::new(vec![0, 0, 1, 1]);
        let t0 = describe(&lab.schema, &s);
        let t1 = t0.with_token(1, lab.schema.token_id(1, 3));
        let c0 = encode(&lab.table, &t0).unwrap();
        let c1 = encode(&lab.table, &t1).unwrap();
        let (zero, n) = manipulate_stage(&lab.table, &t0, &t1, 0.0).unwrap();
        assert!(n.is_some());
        assert!(zero.bitwise_eq(&c0));
        let (one, _) = manipulate_stage(&lab.table, &t0, &t1, 1.0).unwrap();
        assert!(one.bitwise_eq(&c1));
        let (half, _) = manipulate_stage(&lab.table, &t0, &t1, 0.5).unwrap();
        for j in 0..half.dim() {
            let expect = 0.5 * (c0.row(1)[j] + c1.row(1)[j]);
            assert!((half.row(1)[j] - expect).abs() <= 1e-15);
        }
        // Identity prompts: no direction, embedding unchanged.
        let (same, none) = manipulate_stage(&lab.table, &t0, &t0, 0.7).unwrap();
        assert!(none.is_none());
        assert!(same.bitwise_eq(&c0));
    }

    #[test]
    fn csds_fixed_point_is_exact() {
        let lab = lab();
        let den = &lab.backend.denoiser;
        let s = SemanticTuple::new(vec![1, 1, 1, 1]);
        let c = encode(&lab.table, &describe(&lab.schema, &s)).unwrap();
        let mut rng = RngStream::new(3, 1);
        let z_t = rng.normal_tensor(&[lab.world.latent_dim()]);
        let cfg = CsdsConfig::default();
        // z' = z_t and c_attr = c_edit: both differences vanish identically.
        let out = csds_step(den, &z_t, &z_t, 500, &c, &c, &cfg, 0.1, 0).unwrap();
        for (a, b) in out.data().iter().zip(z_t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csds_lambda_zero_isolates_attraction() {
        let lab = lab();
        let den = &lab.backend.denoiser;
        let s = SemanticTuple::new(vec![0, 1, 2, 0]);
        let c_edit = encode(&lab.table, &describe(&lab.schema, &s)).unwrap();
        let c_attr = encode(&lab.table, &PromptTokens::partial(&lab.schema, &[(1, 3)])).unwrap();
        let mut rng = RngStream::new(5, 2);
        let z_t = rng.normal_tensor(&[lab.world.latent_dim()]);
        let z_prime = rng.normal_tensor(&[lab.world.latent_dim()]);
        let cfg = CsdsConfig { lambda: 0.0, ..CsdsConfig::default() };
        let eta = 0.05;
        let out = csds_step(den, &z_prime, &z_t, 400, &c_edit, &c_attr, &cfg, eta, 0).unwrap();
        let e_edit = den.predict(&z_prime, 400, Some(&c_edit)).unwrap();
        let e_attr = den.predict(&z_prime, 400, Some(&c_attr)).unwrap();
        for i in 0..out.len() {
            let g = 2.0 * (e_edit.data()[i] - e_attr.data()[i]);
            let expect = z_prime.data()[i] - eta * g;
            assert_eq!(out.data()[i].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn csds_single_step_matches_hand_formula() {
        // Small world, hand-evaluated update from the two oracle calls.
        let schema = AttributeSchema::new(vec![
            ("axis".into(), vec!["neg".into(), "pos".into()]),
            ("other".into(), vec!["a".into(), "b".into()]),
        ])
        .unwrap();
        let table = Arc::new(TokenTable::for_schema(&schema, 8, 4).unwrap());
        let world = Arc::new(GmmWorld::new(&schema, 1, 2.0, 0.1).unwrap());
        let backend =
            OracleBackend::new(world.clone(), NoiseSchedule::default_schedule(), table.clone());
        let den = &backend.denoiser;
        let c_edit = encode(&table, &describe(&schema, &SemanticTuple::new(vec![1, 0]))).unwrap();
        let c_attr = encode(&table, &PromptTokens::partial(&schema, &[(0, 1)])).unwrap();
        let z_t = Tensor::new(vec![2], vec![0.3, -0.4]).unwrap();
        let z_prime = Tensor::new(vec![2], vec![-0.2, 0.1]).unwrap();
        let lambda = 0.7;
        let eta = 0.03;
        let t = 600;
        let cfg = CsdsConfig { lambda, ..CsdsConfig::default() };
        let stepped = csds_step(den, &z_prime, &z_t, t, &c_edit, &c_attr, &cfg, eta, 0).unwrap();

        let e1 = den.predict(&z_prime, t, Some(&c_edit)).unwrap();
        let e2 = den.predict(&z_prime, t, Some(&c_attr)).unwrap();
        let e3 = den.predict(&z_t, t, Some(&c_edit)).unwrap();
        for i in 0..2 {
            let g =
                2.0 * (e1.data()[i] - e2.data()[i]) + 2.0 * lambda * (e1.data()[i] - e3.data()[i]);
            let expect = z_prime.data()[i] - eta / (1.0 + lambda) * g;
            assert!((stepped.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn sample_stage_rejects_zero_iterations() {
        let lab = lab();
        let c = encode(&lab.table, &describe(&lab.schema, &SemanticTuple::new(vec![0, 0, 0, 0])))
            .unwrap();
        let cfg = CsdsConfig { iterations: 0, ..CsdsConfig::default() };
        let state = LatentState { z: Tensor::zeros(&[4]), t: 500 };
        assert!(matches!(
            sample_stage(&lab.backend.denoiser, &state, &c, &c, &cfg),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn strong_anchor_stays_closer_to_start() {
        let lab = lab();
        let den = &lab.backend.denoiser;
        let s = SemanticTuple::new(vec![0, 0, 1, 1]);
        let c_edit = encode(&lab.table, &describe(&lab.schema, &s.with_value(1, 2))).unwrap();
        let c_attr = encode(&lab.table, &PromptTokens::partial(&lab.schema, &[(1, 2)])).unwrap();
        let z0 = Tensor::new(vec![4], lab.world.mean_of(&s).to_vec()).unwrap();
        let mut rng = RngStream::new(11, 0);
        let z_t = forward(lab.backend.schedule(), &LatentState::clean(z0), 750, &mut rng).unwrap();
        let strong = CsdsConfig { lambda: 1000.0, ..CsdsConfig::default() };
        let weak = CsdsConfig { lambda: 0.1, ..CsdsConfig::default() };
        let (_, strong_norms) = sample_stage(den, &z_t, &c_edit, &c_attr, &strong).unwrap();
        let (_, weak_norms) = sample_stage(den, &z_t, &c_edit, &c_attr, &weak).unwrap();
        assert!(strong_norms.last().unwrap() <= weak_norms.last().unwrap());
    }

    #[test]
    fn identity_edit_preserves_everything() {
        let lab = lab();
        let pipe = pipeline(&lab);
        let s = SemanticTuple::new(vec![2, 3, 1, 0]);
        let (img, _) = render(&lab.schema, &s);
        let req = EditRequest::single(img, 1, 0, 0.0);
        let out = edit(&pipe, &req, &EmsConfig::default()).unwrap();
        assert!(out.success);
        assert_eq!(lab.protos.classify(&out.image), s);
    }

    #[test]
    fn full_degree_edit_hits_target_and_preserves_rest() {
        let lab = lab();
        let pipe = pipeline(&lab);
        let s = SemanticTuple::new(vec![1, 0, 2, 2]);
        let (img, _) = render(&lab.schema, &s);
        let req = EditRequest::single(img, 1, 3, 1.0);
        let out = edit(&pipe, &req, &EmsConfig::default()).unwrap();
        assert!(out.success, "trace: {:?}", out.trace.attempts);
        assert_eq!(out.trace.path_taken, "text");
        let decoded = lab.protos.classify(&out.image);
        assert_eq!(decoded, s.with_value(1, 3));
    }

    #[test]
    fn multi_attribute_edit_applies_diagonal_plan() {
        let lab = lab();
        let pipe = pipeline(&lab);
        let s = SemanticTuple::new(vec![0, 0, 0, 0]);
        let (img, _) = render(&lab.schema, &s);
        let req = EditRequest {
            source: img,
            targets: vec![(1, 2, 1.0), (3, 2, 1.0)],
            direction_override: None,
        };
        let out = edit(&pipe, &req, &EmsConfig::default()).unwrap();
        assert!(out.success);
        let decoded = lab.protos.classify(&out.image);
        assert_eq!(decoded, s.with_value(1, 2).with_value(3, 2));
    }

    #[test]
    fn bidirectional_roundtrip_restores_source() {
        let lab = lab();
        let pipe = pipeline(&lab);
        let s = SemanticTuple::new(vec![2, 1, 1, 1]);
        let (img, _) = render(&lab.schema, &s);
        let fwd = EditRequest::single(img, 1, 3, 1.0);
        let out = edit(&pipe, &fwd, &EmsConfig::default()).unwrap();
        assert!(out.success);
        // Reverse along the stored direction with the opposite degree.
        let t0 = describe(&lab.schema, &s);
        let t1 = t0.with_token(1, lab.schema.token_id(1, 3));
        let c0 = encode(&lab.table, &t0).unwrap();
        let c1 = encode(&lab.table, &t1).unwrap();
        let n = direction(&c0, &c1).unwrap();
        let back = EditRequest {
            source: out.image,
            targets: vec![(1, s.values[1], -1.0)],
            direction_override: Some(n),
        };
        let out2 = edit(&pipe, &back, &EmsConfig::default()).unwrap();
        assert_eq!(lab.protos.classify(&out2.image), s);
        assert_eq!(out2.image, render(&lab.schema, &s).0);
    }

    #[test]
    fn editing_never_builds_a_tape() {
        let lab = lab();
        let pipe = pipeline(&lab);
        let (img, _) = render(&lab.schema, &SemanticTuple::new(vec![0, 1, 0, 1]));
        let before = graph_build_count();
        // Degree 0.3 misses the text-path threshold, so both attempts run.
        let req = EditRequest::single(img, 1, 2, 0.3);
        let _ = edit(&pipe, &req, &EmsConfig::default()).unwrap();
        assert_eq!(graph_build_count(), before);
    }

    #[test]
    fn collapse_sweep_flags_first_violation() {
        let lab = lab();
        let pipe = pipeline(&lab);
        let s = SemanticTuple::new(vec![0, 0, 1, 1]);
        let alphas: Vec<f64> = (1..=32).map(|k| k as f64 * 0.25).collect();
        let report = collapse_sweep(&pipe, &s, 1, 2, &alphas, &EmsConfig::default()).unwrap();
        let first = report.first_violation.expect("collapse must appear on the grid");
        assert!(first > 1.0, "collapse should only start past degree 1, got {first}");
        assert_eq!(first, 2.0, "projection window admits degrees through 1.75");
        // Below the threshold everything is preserved.
        for (a, p) in report.alphas.iter().zip(&report.preserved) {
            if *a < first {
                assert!(p, "alpha {a} unexpectedly violated preservation");
            }
        }
    }
}

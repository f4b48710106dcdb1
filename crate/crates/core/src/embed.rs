//! Text-encoder surrogate and the embedding manipulation algebra.
//!
//! Tokens map through a seeded orthonormal table, one row per prompt slot,
//! with the pooled embedding defined as the row mean. Editing directions are
//! differences of prompt embeddings and live in a single slot, which makes
//! the multi-attribute orthogonality claim constructively true and testable.
//!
//! Manipulations are tracked as (direction, coefficient) pairs on top of the
//! base rows, so applying a degree and then its negation restores the
//! original embedding bit for bit, and degree 1 from the source embedding
//! reproduces the target embedding exactly.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::toyworld::{AttributeSchema, PromptTokens, Slot};

/// Fixed orthonormal embedding table over the token vocabulary.
#[derive(Clone, Debug)]
pub struct TokenTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl TokenTable {
    /// Gram-Schmidt over seeded Gaussian draws, with one re-orthogonalization
    /// pass; requires `dim >= vocab`.
    pub fn build(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim < vocab {
            return Err(Error::Configuration {
                context: format!("embedding dim {dim} smaller than vocabulary {vocab}"),
            });
        }
        let mut rng = RngStream::new(seed, 0x7AB1E);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            let mut v = rng.normal_vec(dim);
            for _pass in 0..2 {
                for u in &vectors {
                    let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (x, &y) in v.iter_mut().zip(u) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                return Err(Error::Configuration { context: "degenerate token vector draw".into() });
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            vectors.push(v);
        }
        Ok(TokenTable { dim, vectors })
    }

    /// Table sized for a schema's vocabulary.
    pub fn for_schema(schema: &AttributeSchema, dim: usize, seed: u64) -> Result<Self> {
        TokenTable::build(schema.vocab_size(), dim, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, token: usize) -> Result<&[f64]> {
        self.vectors
            .get(token)
            .map(|v| v.as_slice())
            .ok_or(Error::Vocabulary { token_id: token })
    }

    /// Dot of a row against every token vector.
    pub fn projections(&self, row: &[f64]) -> Vec<f64> {
        self.vectors
            .iter()
            .map(|v| v.iter().zip(row).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Clone, Debug)]
struct AppliedEdit {
    slot: usize,
    delta: Vec<f64>,
    source_row: Option<Vec<f64>>,
    target_row: Option<Vec<f64>>,
    coeff: f64,
}

/// Token-aligned embedding `c` plus its pooled row mean.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    base: Vec<Vec<f64>>,
    edits: Vec<AppliedEdit>,
    tokens: Tensor,
    pooled: Vec<f64>,
}

impl TextEmbedding {
    fn materialize(base: &[Vec<f64>], edits: &[AppliedEdit]) -> (Tensor, Vec<f64>) {
        let l = base.len();
        let d = base[0].len();
        let mut rows: Vec<Vec<f64>> = base.to_vec();
        for e in edits {
            if e.coeff == 0.0 {
                continue;
            }
            let row = &mut rows[e.slot];
            let exact_endpoint = e.coeff == 1.0
                && e.source_row.as_ref().is_some_and(|s| bits_eq(s, row))
                && e.target_row.is_some();
            if exact_endpoint {
                *row = e.target_row.clone().expect("checked above");
            } else {
                for (x, &dv) in row.iter_mut().zip(&e.delta) {
                    *x += e.coeff * dv;
                }
            }
        }
        let mut pooled = vec![0.0; d];
        for row in &rows {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        for p in pooled.iter_mut() {
            *p /= l as f64;
        }
        let tokens = Tensor::from_rows(&rows).expect("embedding rows stay finite");
        (tokens, pooled)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    pub fn slot_count(&self) -> usize {
        self.base.len()
    }

    pub fn dim(&self) -> usize {
        self.base[0].len()
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        self.tokens.row(slot)
    }

    pub fn bitwise_eq(&self, other: &TextEmbedding) -> bool {
        self.tokens.shape() == other.tokens.shape()
            && bits_eq(self.tokens.data(), other.tokens.data())
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Encode a prompt through the table; pooled is the exact row mean.
pub fn encode(table: &TokenTable, prompt: &PromptTokens) -> Result<TextEmbedding> {
    let mut base = Vec::with_capacity(prompt.len());
    for slot in 0..prompt.len() {
        base.push(table.vector(prompt.token(slot))?.to_vec());
    }
    let (tokens, pooled) = TextEmbedding::materialize(&base, &[]);
    Ok(TextEmbedding { base, edits: Vec::new(), tokens, pooled })
}

/// Editing direction: nonzero in exactly one slot.
#[derive(Clone, Debug)]
pub struct EditDirection {
    pub slot: usize,
    pub attribute: String,
    delta: Vec<f64>,
    source_row: Option<Vec<f64>>,
    target_row: Option<Vec<f64>>,
    pub normalized: bool,
}

impl EditDirection {
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn with_attribute(mut self, name: &str) -> Self {
        self.attribute = name.to_string();
        self
    }

    /// Unit-norm copy; drops the exact endpoint shortcut.
    pub fn normalize(&self) -> Result<EditDirection> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::IllPosedDirection { differing_slots: 0 });
        }
        Ok(EditDirection {
            slot: self.slot,
            attribute: self.attribute.clone(),
            delta: self.delta.iter().map(|v| v / n).collect(),
            source_row: None,
            target_row: None,
            normalized: true,
        })
    }

    /// Direction from an explicit in-slot row (testing and analysis).
    pub fn from_slot_row(slot: usize, row: Vec<f64>, normalized: bool) -> Self {
        EditDirection {
            slot,
            attribute: String::new(),
            delta: row,
            source_row: None,
            target_row: None,
            normalized,
        }
    }

    pub fn negated(&self) -> EditDirection {
        EditDirection {
            slot: self.slot,
            attribute: self.attribute.clone(),
            delta: self.delta.iter().map(|v| -v).collect(),
            source_row: self.target_row.clone(),
            target_row: self.source_row.clone(),
            normalized: self.normalized,
        }
    }
}

/// `n = c1 - c0`; the prompts must differ in exactly one slot.
pub fn direction(c0: &TextEmbedding, c1: &TextEmbedding) -> Result<EditDirection> {
    if c0.slot_count() != c1.slot_count() || c0.dim() != c1.dim() {
        return Err(Error::Dimension {
            context: "direction",
            left: c0.tokens.shape().to_vec(),
            right: c1.tokens.shape().to_vec(),
        });
    }
    let mut differing = Vec::new();
    for slot in 0..c0.slot_count() {
        if c0.row(slot) != c1.row(slot) {
            differing.push(slot);
        }
    }
    if differing.len() != 1 {
        return Err(Error::IllPosedDirection { differing_slots: differing.len() });
    }
    let slot = differing[0];
    let delta: Vec<f64> =
        c1.row(slot).iter().zip(c0.row(slot)).map(|(a, b)| a - b).collect();
    Ok(EditDirection {
        slot,
        attribute: String::new(),
        delta,
        source_row: Some(c0.row(slot).to_vec()),
        target_row: Some(c1.row(slot).to_vec()),
        normalized: false,
    })
}

/// `c~ = c + alpha * n` on tokens, pooled kept as the exact row mean.
pub fn manipulate(c: &TextEmbedding, n: &EditDirection, alpha: f64) -> Result<TextEmbedding> {
    if !alpha.is_finite() {
        return Err(Error::Domain { context: "editing degree", value: alpha });
    }
    if n.slot >= c.slot_count() || n.delta.len() != c.dim() {
        return Err(Error::Dimension {
            context: "manipulate",
            left: c.tokens.shape().to_vec(),
            right: vec![n.slot, n.delta.len()],
        });
    }
    let mut edits = c.edits.clone();
    match edits
        .iter_mut()
        .find(|e| e.slot == n.slot && bits_eq(&e.delta, &n.delta))
    {
        Some(e) => e.coeff += alpha,
        None => edits.push(AppliedEdit {
            slot: n.slot,
            delta: n.delta.clone(),
            source_row: n.source_row.clone(),
            target_row: n.target_row.clone(),
            coeff: alpha,
        }),
    }
    let (tokens, pooled) = TextEmbedding::materialize(&c.base, &edits);
    Ok(TextEmbedding { base: c.base.clone(), edits, tokens, pooled })
}

/// Degrees paired with directions; at most one direction per slot.
#[derive(Clone, Debug, Default)]
pub struct EditPlan {
    pub entries: Vec<(EditDirection, f64)>,
}

impl EditPlan {
    pub fn new(entries: Vec<(EditDirection, f64)>) -> Self {
        EditPlan { entries }
    }
}

/// Diagonal multi-attribute manipulation; equals sequential single edits in
/// any order because each direction owns its slot.
pub fn manipulate_multi(c: &TextEmbedding, plan: &EditPlan) -> Result<TextEmbedding> {
    let mut seen = std::collections::BTreeSet::new();
    for (dir, degree) in &plan.entries {
        if !degree.is_finite() {
            return Err(Error::Domain { context: "editing degree", value: *degree });
        }
        if !seen.insert(dir.slot) {
            return Err(Error::SlotConflict { slot: dir.slot });
        }
    }
    let mut ordered: Vec<&(EditDirection, f64)> = plan.entries.iter().collect();
    ordered.sort_by_key(|(d, _)| d.slot);
    let mut out = c.clone();
    for (dir, degree) in ordered {
        out = manipulate(&out, dir, *degree)?;
    }
    Ok(out)
}

/// Signed distance `D = n . z` to the hyperplane of a unit direction.
pub fn signed_distance(z: &Tensor, n: &EditDirection) -> Result<f64> {
    if !n.normalized {
        return Err(Error::Contract { context: "signed_distance needs a normalized direction" });
    }
    let d = n.delta.len();
    if z.len() % d != 0 || n.slot >= z.len() / d {
        return Err(Error::Dimension {
            context: "signed_distance",
            left: z.shape().to_vec(),
            right: vec![n.slot, d],
        });
    }
    let start = n.slot * d;
    Ok(n.delta.iter().zip(&z.data()[start..start + d]).map(|(a, b)| a * b).sum())
}

/// One cell of the projection-concentration check.
#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationReport {
    pub m: usize,
    pub d: usize,
    pub alpha: f64,
    pub c: f64,
    pub trials: u64,
    pub threshold: f64,
    pub empirical: f64,
    pub exact: f64,
    pub bound: f64,
    pub std_error: f64,
}

fn concentration_bound(m: usize, d: usize, alpha: f64, c: f64) -> f64 {
    // Negative factors make the bound vacuous; clamp them to zero.
    let f1 = (1.0 - 3.0 * (-c * d as f64).exp()).max(0.0);
    let f2 = (1.0 - (2.0 / alpha) * (-alpha * alpha / 2.0).exp()).max(0.0);
    (f1 * f2).powi(m as i32)
}

fn concentration_threshold(d: usize, alpha: f64) -> f64 {
    2.0 * alpha * (d as f64 / (d as f64 - 2.0)).sqrt()
}

/// Probability that the summed slot projections of a standard normal stay
/// within the editing threshold, against the closed-form lower bound.
///
/// Draws `z ~ N(0, I_{m d})` per trial and projects onto actual unit
/// directions; the sum is distributed N(0, m), so the exact probability is
/// `erf(threshold / sqrt(2 m))`.
pub fn concentration_check(
    m: usize,
    d: usize,
    alpha: f64,
    c: f64,
    trials: u64,
    seed: u64,
) -> Result<ConcentrationReport> {
    let mut reports = concentration_grid(&[m], &[d], &[alpha], c, trials, seed)?;
    Ok(reports.remove(0))
}

/// Grid runner sharing the Monte-Carlo sample across alpha values for each
/// `(m, d)` cell. Trials are chunked with per-chunk substreams and reduced
/// in chunk order, so the result is independent of thread scheduling.
pub fn concentration_grid(
    ms: &[usize],
    ds: &[usize],
    alphas: &[f64],
    c: f64,
    trials: u64,
    seed: u64,
) -> Result<Vec<ConcentrationReport>> {
    for &alpha in alphas {
        if alpha < 1.0 {
            return Err(Error::Domain { context: "concentration alpha", value: alpha });
        }
    }
    for &d in ds {
        if d < 4 {
            return Err(Error::Domain { context: "concentration d", value: d as f64 });
        }
    }
    if trials < 100_000 {
        return Err(Error::Domain { context: "concentration trials", value: trials as f64 });
    }
    let mut out = Vec::new();
    for &m in ms {
        for &d in ds {
            let root = RngStream::new(seed, 0xC0_FFEE).substream((m * 10_000 + d) as u64);
            // Actual unit directions, one per attribute block.
            let mut dir_rng = root.substream(u64::MAX);
            let dirs: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let mut v = dir_rng.normal_vec(d);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|x| *x /= norm);
                    v
                })
                .collect();

            let thresholds: Vec<f64> =
                alphas.iter().map(|&a| concentration_threshold(d, a)).collect();
            let chunk: u64 = 20_000;
            let n_chunks = trials.div_ceil(chunk);
            let counts: Vec<Vec<u64>> = (0..n_chunks)
                .into_par_iter()
                .map(|ci| {
                    let mut rng = root.substream(ci);
                    let lo = ci * chunk;
                    let hi = ((ci + 1) * chunk).min(trials);
                    let mut local = vec![0u64; thresholds.len()];
                    for _ in lo..hi {
                        let mut s = 0.0;
                        for dir in &dirs {
                            let mut proj = 0.0;
                            for &w in dir {
                                proj += w * rng.next_normal();
                            }
                            s += proj;
                        }
                        let a = s.abs();
                        for (k, &t) in thresholds.iter().enumerate() {
                            if a <= t {
                                local[k] += 1;
                            }
                        }
                    }
                    local
                })
                .collect();
            let mut totals = vec![0u64; thresholds.len()];
            for chunk_counts in &counts {
                for (t, &v) in totals.iter_mut().zip(chunk_counts) {
                    *t += v;
                }
            }
            for (k, &alpha) in alphas.iter().enumerate() {
                let empirical = totals[k] as f64 / trials as f64;
                let exact = libm::erf(thresholds[k] / (2.0 * m as f64).sqrt());
                out.push(ConcentrationReport {
                    m,
                    d,
                    alpha,
                    c,
                    trials,
                    threshold: thresholds[k],
                    empirical,
                    exact,
                    bound: concentration_bound(m, d, alpha, c),
                    std_error: (empirical * (1.0 - empirical) / trials as f64).sqrt(),
                });
            }
        }
    }
    Ok(out)
}

/// Max |dot| between extended directions that each own a distinct slot.
/// The extended vectors live in R^{l d}; disjoint slots force exact zeros.
pub fn orthogonality_check(directions: &[EditDirection], slots: usize) -> Result<f64> {
    let mut seen = std::collections::BTreeSet::new();
    for dir in directions {
        if !seen.insert(dir.slot) {
            return Err(Error::SlotConflict { slot: dir.slot });
        }
        if (dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract { context: "orthogonality_check needs unit directions" });
        }
        if dir.slot >= slots {
            return Err(Error::Contract { context: "direction slot outside prompt" });
        }
    }
    let d = directions[0].delta.len();
    let extended: Vec<Vec<f64>> = directions
        .iter()
        .map(|dir| {
            let mut v = vec![0.0; slots * d];
            v[dir.slot * d..(dir.slot + 1) * d].copy_from_slice(&dir.delta);
            v
        })
        .collect();
    let mut max_dot: f64 = 0.0;
    for i in 0..extended.len() {
        for j in i + 1..extended.len() {
            let dot: f64 = extended[i].iter().zip(&extended[j]).map(|(a, b)| a * b).sum();
            max_dot = max_dot.max(dot.abs());
        }
    }
    Ok(max_dot)
}

/// All normalized value-pair directions of one attribute.
pub fn attribute_directions(
    schema: &AttributeSchema,
    table: &TokenTable,
    attr: usize,
) -> Result<Vec<EditDirection>> {
    let mut out = Vec::new();
    for a in 0..schema.value_count(attr) {
        for b in a + 1..schema.value_count(attr) {
            let va = table.vector(schema.token_id(attr, a))?;
            let vb = table.vector(schema.token_id(attr, b))?;
            let delta: Vec<f64> = vb.iter().zip(va).map(|(x, y)| x - y).collect();
            let dir = EditDirection {
                slot: attr,
                attribute: schema.attr_name(attr).to_string(),
                delta,
                source_row: Some(va.to_vec()),
                target_row: Some(vb.to_vec()),
                normalized: false,
            };
            out.push(dir.normalize()?);
        }
    }
    Ok(out)
}

/// CSV dump: slot, attribute, then the d components at 17 significant digits.
pub fn write_embedding_csv(
    emb: &TextEmbedding,
    prompt: &PromptTokens,
    schema: &AttributeSchema,
    path: &Path,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut header = String::from("slot,attribute");
    for j in 0..emb.dim() {
        header.push_str(&format!(",c{j}"));
    }
    writeln!(f, "{header}")?;
    for slot in 0..emb.slot_count() {
        let role = match prompt.slot_role(slot) {
            Slot::Attribute(a) => schema.attr_name(a).to_string(),
            Slot::Filler => "FILLER".to_string(),
        };
        let mut line = format!("{slot},{role}");
        for v in emb.row(slot) {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::SemanticTuple;
    use proptest::prelude::*;

    fn setup() -> (AttributeSchema, TokenTable) {
        let schema = AttributeSchema::default_schema();
        let table = TokenTable::for_schema(&schema, 16, 99).unwrap();
        (schema, table)
    }

    #[test]
    fn table_is_orthonormal() {
        let (_, table) = setup();
        for i in 0..table.vocab_size() {
            for j in 0..table.vocab_size() {
                let dot: f64 = table
                    .vector(i)
                    .unwrap()
                    .iter()
                    .zip(table.vector(j).unwrap())
                    .map(|(a, b)| a * b)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-12, "dot({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn encode_differs_in_one_row() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![0, 0, 0, 0]);
        let b = a.with_value(1, 3);
        let ca = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let cb = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
        let differing: Vec<usize> =
            (0..ca.slot_count()).filter(|&s| ca.row(s) != cb.row(s)).collect();
        assert_eq!(differing, vec![1]);
    }

    #[test]
    fn pooled_is_exact_row_mean() {
        let (schema, table) = setup();
        let c = encode(&table, &crate::toyworld::describe(&schema, &SemanticTuple::new(vec![1, 2, 0, 1]))).unwrap();
        for j in 0..c.dim() {
            let mean: f64 =
                (0..c.slot_count()).map(|s| c.row(s)[j]).sum::<f64>() / c.slot_count() as f64;
            assert_eq!(mean, c.pooled()[j]);
        }
    }

    #[test]
    fn unknown_token_is_vocabulary_error() {
        let (schema, table) = setup();
        let p = crate::toyworld::describe(&schema, &SemanticTuple::new(vec![0, 0, 0, 0]));
        let bad = p.with_token(0, table.vocab_size() + 5);
        assert!(matches!(encode(&table, &bad), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn zero_direction_rejected() {
        let (schema, table) = setup();
        let c = encode(&table, &crate::toyworld::describe(&schema, &SemanticTuple::new(vec![0, 0, 0, 0]))).unwrap();
        assert!(matches!(
            direction(&c, &c),
            Err(Error::IllPosedDirection { differing_slots: 0 })
        ));
    }

    #[test]
    fn direction_confined_to_slot_with_sqrt2_norm() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![0, 0, 0, 0]);
        let b = a.with_value(3, 2);
        let ca = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let cb = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
        let n = direction(&ca, &cb).unwrap();
        assert_eq!(n.slot, 3);
        // Orthonormal token swap: |e_b - e_a| = sqrt(2).
        assert!((n.norm() - std::f64::consts::SQRT_2).abs() <= 1e-12);
    }

    #[test]
    fn manipulate_zero_degree_is_identity() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![2, 1, 0, 0]);
        let b = a.with_value(0, 1);
        let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let c1 = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
        let n = direction(&c0, &c1).unwrap();
        let out = manipulate(&c0, &n, 0.0).unwrap();
        assert!(out.bitwise_eq(&c0));
    }

    #[test]
    fn manipulate_full_degree_hits_endpoint_exactly() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![2, 1, 0, 0]);
        let b = a.with_value(0, 1);
        let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let c1 = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
        let n = direction(&c0, &c1).unwrap();
        let out = manipulate(&c0, &n, 1.0).unwrap();
        assert!(out.bitwise_eq(&c1));
        for (p, q) in out.pooled().iter().zip(c1.pooled()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn manipulate_formula_case() {
        // c row [1, 0], n row [0, 1], alpha 0.5 -> [1, 0.5]
        let base = vec![vec![1.0, 0.0]];
        let (tokens, pooled) = TextEmbedding::materialize(&base, &[]);
        let c = TextEmbedding { base, edits: Vec::new(), tokens, pooled };
        let n = EditDirection::from_slot_row(0, vec![0.0, 1.0], false);
        let out = manipulate(&c, &n, 0.5).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.5]);
        assert_eq!(out.pooled(), &[1.0, 0.5]);
    }

    #[test]
    fn manipulate_rejects_non_finite_degree() {
        let (schema, table) = setup();
        let c = encode(&table, &crate::toyworld::describe(&schema, &SemanticTuple::new(vec![0, 0, 0, 0]))).unwrap();
        let n = EditDirection::from_slot_row(0, vec![0.0; 16], false);
        assert!(matches!(manipulate(&c, &n, f64::NAN), Err(Error::Domain { .. })));
    }

    #[test]
    fn slot_locality() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![0, 1, 2, 0]);
        let b = a.with_value(2, 0);
        let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let c1 = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
        let n = direction(&c0, &c1).unwrap();
        let out = manipulate(&c0, &n, 0.37).unwrap();
        for s in 0..c0.slot_count() {
            if s != 2 {
                assert!(bits_eq(out.row(s), c0.row(s)));
            }
        }
    }

    proptest! {
        #[test]
        fn reversal_is_bit_exact(alpha in -8.0f64..8.0, av in 0usize..4, bv in 0usize..4) {
            prop_assume!(av != bv);
            let (schema, table) = setup();
            let a = SemanticTuple::new(vec![0, av, 0, 0]);
            let b = a.with_value(1, bv);
            let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
            let c1 = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
            let n = direction(&c0, &c1).unwrap();
            let there = manipulate(&c0, &n, alpha).unwrap();
            let back = manipulate(&there, &n, -alpha).unwrap();
            prop_assert!(back.bitwise_eq(&c0));
        }

        #[test]
        fn pooled_mean_invariant(alpha in -4.0f64..4.0) {
            let (schema, table) = setup();
            let a = SemanticTuple::new(vec![1, 0, 1, 2]);
            let b = a.with_value(1, 1);
            let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
            let c1 = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
            let n = direction(&c0, &c1).unwrap();
            let out = manipulate(&c0, &n, alpha).unwrap();
            for j in 0..out.dim() {
                let mean: f64 = (0..out.slot_count()).map(|s| out.row(s)[j]).sum::<f64>()
                    / out.slot_count() as f64;
                prop_assert!((mean - out.pooled()[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn multi_edit_endpoints_and_midpoint() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![0, 0, 0, 0]);
        let b = SemanticTuple::new(vec![0, 2, 0, 2]);
        let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let c1 = encode(&table, &crate::toyworld::describe(&schema, &b)).unwrap();
        let mid0 = encode(&table, &crate::toyworld::describe(&schema, &a.with_value(1, 2))).unwrap();
        let n_color = direction(&c0, &mid0).unwrap();
        let mid1 = encode(&table, &crate::toyworld::describe(&schema, &a.with_value(3, 2))).unwrap();
        let n_bright = direction(&c0, &mid1).unwrap();

        let zero = manipulate_multi(
            &c0,
            &EditPlan::new(vec![(n_color.clone(), 0.0), (n_bright.clone(), 0.0)]),
        )
        .unwrap();
        assert!(zero.bitwise_eq(&c0));

        let full = manipulate_multi(
            &c0,
            &EditPlan::new(vec![(n_color.clone(), 1.0), (n_bright.clone(), 1.0)]),
        )
        .unwrap();
        assert!(full.bitwise_eq(&c1));

        let halfway = manipulate_multi(
            &c0,
            &EditPlan::new(vec![(n_color.clone(), 0.5), (n_bright.clone(), 1.0)]),
        )
        .unwrap();
        for j in 0..halfway.dim() {
            let expect = 0.5 * (c0.row(1)[j] + mid0.row(1)[j]);
            assert!((halfway.row(1)[j] - expect).abs() <= 1e-15);
        }
        assert!(bits_eq(halfway.row(3), mid1.row(3)));
        assert!(bits_eq(halfway.row(0), c0.row(0)));
        assert!(bits_eq(halfway.row(2), c0.row(2)));

        // Order independence, exactly.
        let swapped = manipulate_multi(
            &c0,
            &EditPlan::new(vec![(n_bright, 1.0), (n_color, 0.5)]),
        )
        .unwrap();
        assert!(swapped.bitwise_eq(&halfway));
    }

    #[test]
    fn multi_edit_rejects_overlap() {
        let (schema, table) = setup();
        let a = SemanticTuple::new(vec![0, 0, 0, 0]);
        let c0 = encode(&table, &crate::toyworld::describe(&schema, &a)).unwrap();
        let c1 = encode(&table, &crate::toyworld::describe(&schema, &a.with_value(1, 1))).unwrap();
        let c2 = encode(&table, &crate::toyworld::describe(&schema, &a.with_value(1, 2))).unwrap();
        let n1 = direction(&c0, &c1).unwrap();
        let n2 = direction(&c0, &c2).unwrap();
        assert!(matches!(
            manipulate_multi(&c0, &EditPlan::new(vec![(n1, 0.5), (n2, 0.5)])),
            Err(Error::SlotConflict { slot: 1 })
        ));
    }

    #[test]
    fn signed_distance_contract_and_values() {
        let (schema, table) = setup();
        let dirs = attribute_directions(&schema, &table, 1).unwrap();
        let n = &dirs[0];
        let l = schema.prompt_len();
        let zero = Tensor::zeros(&[l, 16]);
        assert_eq!(signed_distance(&zero, n).unwrap(), 0.0);

        let mut ext = vec![0.0; l * 16];
        ext[n.slot * 16..(n.slot + 1) * 16].copy_from_slice(n.delta());
        let zn = Tensor::new(vec![l, 16], ext).unwrap();
        assert!((signed_distance(&zn, n).unwrap() - 1.0).abs() <= 1e-12);

        // Unnormalized direction violates the contract.
        let raw = EditDirection::from_slot_row(1, vec![2.0; 16], false);
        assert!(matches!(signed_distance(&zero, &raw), Err(Error::Contract { .. })));

        // Linearity: D(z + alpha n) - D(z) = alpha.
        let mut rng = RngStream::new(5, 5);
        let z = rng.normal_tensor(&[l, 16]);
        let alpha = 1.7;
        let mut shifted = z.data().to_vec();
        for (j, &dv) in n.delta().iter().enumerate() {
            shifted[n.slot * 16 + j] += alpha * dv;
        }
        let zs = Tensor::new(vec![l, 16], shifted).unwrap();
        let diff = signed_distance(&zs, n).unwrap() - signed_distance(&z, n).unwrap();
        assert!((diff - alpha).abs() <= 1e-12);
    }

    #[test]
    fn concentration_small_cell_matches_exact() {
        let r = concentration_check(1, 4, 1.0, 0.05, 100_000, 7).unwrap();
        // threshold = 2 sqrt(2); exact = erf(2) ~ 0.9953
        assert!((r.threshold - 2.0 * std::f64::consts::SQRT_2).abs() <= 1e-12);
        assert!((r.exact - 0.9953222650189527).abs() <= 1e-12);
        assert!((r.empirical - r.exact).abs() <= 3.0 * r.std_error.max(1e-4));
        assert!(r.empirical >= r.bound - 3.0 * r.std_error);
    }

    #[test]
    fn concentration_bound_clamps_to_vacuous() {
        // 3 e^{-c d} >= 1 makes the first factor nonpositive.
        let r = concentration_check(4, 4, 2.0, 0.0, 100_000, 7).unwrap();
        assert_eq!(r.bound, 0.0);
        assert!(r.empirical >= r.bound);
    }

    #[test]
    fn concentration_rejects_bad_domain() {
        assert!(concentration_check(1, 4, 0.5, 0.05, 100_000, 7).is_err());
        assert!(concentration_check(1, 3, 1.0, 0.05, 100_000, 7).is_err());
        assert!(concentration_check(1, 4, 1.0, 0.05, 10, 7).is_err());
    }

    #[test]
    fn orthogonality_axis_pair() {
        let a = EditDirection::from_slot_row(0, vec![1.0, 0.0], true);
        let b = EditDirection::from_slot_row(1, vec![0.0, 1.0], true);
        assert_eq!(orthogonality_check(&[a, b], 4).unwrap(), 0.0);
    }

    #[test]
    fn orthogonality_random_slot_directions() {
        let mut rng = RngStream::new(31, 0);
        let d = 32;
        let dirs: Vec<EditDirection> = (0..4)
            .map(|slot| {
                let mut v = rng.normal_vec(d);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                EditDirection::from_slot_row(slot, v, true)
            })
            .collect();
        assert!(orthogonality_check(&dirs, 8).unwrap() <= 1e-12);
    }

    #[test]
    fn orthogonality_same_slot_is_conflict() {
        let a = EditDirection::from_slot_row(2, vec![1.0, 0.0], true);
        let b = EditDirection::from_slot_row(2, vec![0.0, 1.0], true);
        assert!(matches!(
            orthogonality_check(&[a, b], 4),
            Err(Error::SlotConflict { slot: 2 })
        ));
    }

    #[test]
    fn embedding_csv_roundtrips_17_digits() {
        let (schema, table) = setup();
        let p = crate::toyworld::describe(&schema, &SemanticTuple::new(vec![1, 1, 1, 1]));
        let c = encode(&table, &p).unwrap();
        let dir = std::env::temp_dir().join("editlab_embed_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.csv");
        write_embedding_csv(&c, &p, &schema, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("slot,attribute,c0"));
        let first = lines.next().unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        assert_eq!(fields[1], "shape");
        for (j, f) in fields[2..].iter().enumerate() {
            let parsed: f64 = f.parse().unwrap();
            assert_eq!(parsed.to_bits(), c.row(0)[j].to_bits(), "column {j}");
        }
    }
}

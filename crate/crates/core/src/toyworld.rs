//! Ground-truth semantic universe: factored attributes, a deterministic
//! renderer, masks, prompt surrogates, and dataset records.
//!
//! Attributes act on disjoint visual factors by construction: the first
//! attribute draws the silhouette, the second fills it with a palette color,
//! the third scales it, and the fourth sets the background luminance. That
//! makes decomposability a property of the world itself, so every editing
//! claim downstream has an exact oracle to compare against.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image side length. 16x16 keeps masks and SSIM windows meaningful while
/// the full schema still enumerates in milliseconds.
pub const IMAGE_SIDE: usize = 16;
/// Fixed prompt length; attribute slots first, filler padding after.
pub const PROMPT_LEN: usize = 8;

const CENTER: f64 = (IMAGE_SIDE as f64 - 1.0) / 2.0;
const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0], // red
    [0.0, 1.0, 0.0], // green
    [0.0, 0.0, 1.0], // blue
    [1.0, 1.0, 0.0], // yellow
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

/// Ordered attribute list; `m = attributes.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<(String, Vec<String>)>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<(String, Vec<String>)>) -> Result<Self> {
        if attributes.len() < 2 {
            return Err(Error::Configuration { context: "schema needs at least 2 attributes".into() });
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, values) in &attributes {
            if values.len() < 2 {
                return Err(Error::Configuration {
                    context: format!("attribute {name} needs at least 2 values"),
                });
            }
            for v in values {
                if !seen.insert(v.clone()) {
                    return Err(Error::Configuration {
                        context: format!("value name {v} reused across attributes"),
                    });
                }
            }
        }
        Ok(AttributeSchema { attributes })
    }

    /// shape x color x size x brightness; every value set small enough that
    /// exhaustive checks stay in test budgets.
    pub fn default_schema() -> Self {
        AttributeSchema::new(vec![
            ("shape".into(), vec!["square".into(), "circle".into(), "triangle".into(), "cross".into()]),
            ("color".into(), vec!["red".into(), "green".into(), "blue".into(), "yellow".into()]),
            ("size".into(), vec!["1".into(), "2".into(), "3".into()]),
            ("brightness".into(), vec!["dim".into(), "normal".into(), "bright".into()]),
        ])
        .expect("default schema is valid")
    }

    pub fn attr_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn attr_name(&self, i: usize) -> &str {
        &self.attributes[i].0
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|(n, _)| n == name)
    }

    pub fn value_count(&self, attr: usize) -> usize {
        self.attributes[attr].1.len()
    }

    pub fn value_name(&self, attr: usize, value: usize) -> &str {
        &self.attributes[attr].1[value]
    }

    pub fn value_index(&self, attr: usize, name: &str) -> Option<usize> {
        self.attributes[attr].1.iter().position(|v| v == name)
    }

    /// Token ids: attribute values in schema order, then the filler token.
    pub fn token_id(&self, attr: usize, value: usize) -> usize {
        let mut id = 0;
        for a in 0..attr {
            id += self.value_count(a);
        }
        id + value
    }

    pub fn filler_token(&self) -> usize {
        self.attributes.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.filler_token() + 1
    }

    /// Which (attribute, value) owns a token id; `None` for the filler.
    pub fn token_owner(&self, token: usize) -> Option<(usize, usize)> {
        let mut base = 0;
        for (a, (_, values)) in self.attributes.iter().enumerate() {
            if token < base + values.len() {
                return Some((a, token - base));
            }
            base += values.len();
        }
        None
    }

    pub fn prompt_len(&self) -> usize {
        PROMPT_LEN.max(self.attr_count())
    }

    /// All tuples in lexicographic order (attribute 0 slowest).
    pub fn tuples(&self) -> Vec<SemanticTuple> {
        let mut out = vec![SemanticTuple { values: vec![0; self.attr_count()] }];
        for attr in 0..self.attr_count() {
            let mut next = Vec::new();
            for t in &out {
                for v in 0..self.value_count(attr) {
                    let mut values = t.values.clone();
                    values[attr] = v;
                    next.push(SemanticTuple { values });
                }
            }
            out = next;
        }
        out
    }

    pub fn tuple_count(&self) -> usize {
        self.attributes.iter().map(|(_, v)| v.len()).product()
    }
}

/// One point of the factored semantic space: a value index per attribute.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticTuple {
    pub values: Vec<usize>,
}

impl SemanticTuple {
    pub fn new(values: Vec<usize>) -> Self {
        SemanticTuple { values }
    }

    pub fn with_value(&self, attr: usize, value: usize) -> SemanticTuple {
        let mut values = self.values.clone();
        values[attr] = value;
        SemanticTuple { values }
    }

    pub fn is_valid(&self, schema: &AttributeSchema) -> bool {
        self.values.len() == schema.attr_count()
            && self.values.iter().enumerate().all(|(a, &v)| v < schema.value_count(a))
    }
}

/// H x W x 3 image with channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pixels: Vec<f64>,
}

impl ToyImage {
    pub fn from_pixels(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != IMAGE_SIDE * IMAGE_SIDE * 3 {
            return Err(Error::DataLength { expected: IMAGE_SIDE * IMAGE_SIDE * 3, got: pixels.len() });
        }
        if !pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Domain { context: "pixel out of [0,1]", value: f64::NAN });
        }
        Ok(ToyImage { pixels })
    }

    /// Clamp arbitrary latent values into a valid image.
    pub fn from_latent_clamped(latent: &[f64]) -> Result<Self> {
        if latent.len() != IMAGE_SIDE * IMAGE_SIDE * 3 {
            return Err(Error::DataLength { expected: IMAGE_SIDE * IMAGE_SIDE * 3, got: latent.len() });
        }
        Ok(ToyImage { pixels: latent.iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    pub fn zeros() -> Self {
        ToyImage { pixels: vec![0.0; IMAGE_SIDE * IMAGE_SIDE * 3] }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * IMAGE_SIDE + x) * 3 + c]
    }

    /// Flattened copy for use as a diffusion latent.
    pub fn to_latent(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    /// P6 PPM bytes, maxval 255, round-half-even quantization.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", IMAGE_SIDE, IMAGE_SIDE).into_bytes();
        for &v in &self.pixels {
            out.push((v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut parts = bytes.splitn(4, |&b| b == b'\n');
        let magic = parts.next().unwrap_or(&[]);
        if magic != b"P6" {
            return Err(Error::Format { context: "ppm magic".into() });
        }
        let dims = String::from_utf8_lossy(parts.next().unwrap_or(&[])).to_string();
        let maxval = parts.next().unwrap_or(&[]);
        if maxval != b"255" {
            return Err(Error::Format { context: "ppm maxval".into() });
        }
        let payload = parts.next().unwrap_or(&[]);
        let mut it = dims.split_whitespace();
        let w: usize = it.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        let h: usize = it.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        if w != IMAGE_SIDE || h != IMAGE_SIDE || payload.len() != w * h * 3 {
            return Err(Error::Format { context: "ppm dimensions".into() });
        }
        ToyImage::from_pixels(payload.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Tile images side by side into one wide PPM (sweep grids).
    pub fn row_ppm(images: &[ToyImage]) -> Vec<u8> {
        let k = images.len();
        let width = IMAGE_SIDE * k;
        let mut out = format!("P6\n{} {}\n255\n", width, IMAGE_SIDE).into_bytes();
        for y in 0..IMAGE_SIDE {
            for img in images {
                for x in 0..IMAGE_SIDE {
                    for c in 0..3 {
                        out.push((img.get(y, x, c) * 255.0).round_ties_even().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        out
    }
}

/// Object region and background; disjoint and jointly covering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub roi: Vec<bool>,
    pub background: Vec<bool>,
}

impl MaskPair {
    fn from_roi(roi: Vec<bool>) -> Self {
        let background = roi.iter().map(|r| !r).collect();
        MaskPair { roi, background }
    }

    pub fn roi_count(&self) -> usize {
        self.roi.iter().filter(|&&b| b).count()
    }

    pub fn roi_rows(&self) -> Vec<Vec<bool>> {
        (0..IMAGE_SIDE).map(|y| self.roi[y * IMAGE_SIDE..(y + 1) * IMAGE_SIDE].to_vec()).collect()
    }

    pub fn background_rows(&self) -> Vec<Vec<bool>> {
        (0..IMAGE_SIDE)
            .map(|y| self.background[y * IMAGE_SIDE..(y + 1) * IMAGE_SIDE].to_vec())
            .collect()
    }

    pub fn from_rows(roi: &[Vec<bool>]) -> Self {
        MaskPair::from_roi(roi.concat())
    }
}

/// Slot role inside a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Attribute(usize),
    Filler,
}

/// Fixed-layout prompt: one slot per attribute, filler padding after.
/// An attribute slot may carry the filler token, which leaves that
/// attribute unconditioned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTokens {
    slots: Vec<(Slot, usize)>,
}

impl PromptTokens {
    /// Prompt pinning every attribute of `s`.
    pub fn full(schema: &AttributeSchema, s: &SemanticTuple) -> PromptTokens {
        let mut slots = Vec::with_capacity(schema.prompt_len());
        for (a, &v) in s.values.iter().enumerate() {
            slots.push((Slot::Attribute(a), schema.token_id(a, v)));
        }
        while slots.len() < schema.prompt_len() {
            slots.push((Slot::Filler, schema.filler_token()));
        }
        PromptTokens { slots }
    }

    /// Prompt pinning only the given (attribute, value) pairs.
    pub fn partial(schema: &AttributeSchema, pins: &[(usize, usize)]) -> PromptTokens {
        let mut slots = Vec::with_capacity(schema.prompt_len());
        for a in 0..schema.attr_count() {
            match pins.iter().find(|(attr, _)| *attr == a) {
                Some(&(_, v)) => slots.push((Slot::Attribute(a), schema.token_id(a, v))),
                None => slots.push((Slot::Attribute(a), schema.filler_token())),
            }
        }
        while slots.len() < schema.prompt_len() {
            slots.push((Slot::Filler, schema.filler_token()));
        }
        PromptTokens { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn token(&self, slot: usize) -> usize {
        self.slots[slot].1
    }

    pub fn slot_role(&self, slot: usize) -> Slot {
        self.slots[slot].0
    }

    pub fn with_token(&self, slot: usize, token: usize) -> PromptTokens {
        let mut slots = self.slots.clone();
        slots[slot].1 = token;
        PromptTokens { slots }
    }

    /// Word form for manifests; filler renders as ".".
    pub fn to_words(&self, schema: &AttributeSchema) -> Vec<String> {
        self.slots
            .iter()
            .map(|&(_, tok)| match schema.token_owner(tok) {
                Some((a, v)) => schema.value_name(a, v).to_string(),
                None => ".".to_string(),
            })
            .collect()
    }

    /// Invert a fully pinned prompt back to its tuple.
    pub fn invert(&self, schema: &AttributeSchema) -> Result<SemanticTuple> {
        let mut values = vec![0usize; schema.attr_count()];
        for &(slot, token) in &self.slots {
            if let Slot::Attribute(a) = slot {
                match schema.token_owner(token) {
                    Some((owner, v)) if owner == a => values[a] = v,
                    _ => {
                        return Err(Error::Contract { context: "prompt slot does not pin its attribute" })
                    }
                }
            }
        }
        Ok(SemanticTuple { values })
    }
}

/// Describe a tuple as a prompt; exact inverse of [`PromptTokens::invert`].
pub fn describe(schema: &AttributeSchema, s: &SemanticTuple) -> PromptTokens {
    PromptTokens::full(schema, s)
}

fn silhouette(shape: usize, size: usize) -> Vec<bool> {
    let h = size as f64 + 3.0; // half-extent: sizes 0,1,2 -> 3,4,5
    let mut mask = vec![false; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let dx = x as f64 - CENTER;
            let dy = y as f64 - CENTER;
            let inside = match shape % 4 {
                0 => dx.abs() <= h && dy.abs() <= h,
                1 => dx * dx + dy * dy <= h * h,
                2 => {
                    // upward triangle: base at the bottom
                    let top = -h;
                    dy >= top && dy <= h && dx.abs() <= (dy - top) / 2.0
                }
                _ => {
                    let arm = (h / 3.0).max(1.0);
                    (dx.abs() <= arm && dy.abs() <= h) || (dy.abs() <= arm && dx.abs() <= h)
                }
            };
            if inside {
                mask[y * IMAGE_SIDE + x] = true;
            }
        }
    }
    mask
}

/// Analytic pixel count of the square silhouette at a given size index.
pub fn square_area(size: usize) -> usize {
    let h = size + 3;
    (2 * h) * (2 * h)
}

/// Deterministic renderer. Attribute roles by position: 0 silhouette,
/// 1 fill color, 2 size, 3 background luminance; missing attributes fall
/// back to defaults so small test schemas render too.
pub fn render(schema: &AttributeSchema, s: &SemanticTuple) -> (ToyImage, MaskPair) {
    assert!(s.is_valid(schema), "tuple not valid under schema");
    let shape = *s.values.first().unwrap_or(&0);
    let color = if s.values.len() > 1 { s.values[1] } else { 0 };
    let size = if s.values.len() > 2 { s.values[2] } else { 1 };
    let lum_idx = if s.values.len() > 3 { s.values[3] } else { 1 };

    let roi = silhouette(shape, size);
    let fill = PALETTE[color % PALETTE.len()];
    let bg = 0.25 + 0.25 * lum_idx as f64;

    let mut pixels = vec![0.0; IMAGE_SIDE * IMAGE_SIDE * 3];
    for p in 0..IMAGE_SIDE * IMAGE_SIDE {
        for c in 0..3 {
            pixels[p * 3 + c] = if roi[p] { fill[c] } else { bg };
        }
    }
    (ToyImage { pixels }, MaskPair::from_roi(roi))
}

/// Cached renders of every tuple; the template-matching decoder.
pub struct Prototypes {
    schema: AttributeSchema,
    tuples: Vec<SemanticTuple>,
    renders: Vec<ToyImage>,
    norms: Vec<f64>,
}

impl Prototypes {
    pub fn new(schema: &AttributeSchema) -> Self {
        let tuples = schema.tuples();
        let renders: Vec<ToyImage> = tuples.iter().map(|t| render(schema, t).0).collect();
        let norms = renders
            .iter()
            .map(|r| r.pixels.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Prototypes { schema: schema.clone(), tuples, renders, norms }
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    /// Nearest tuple by normalized template correlation. A zero image ties
    /// every template at score 0 and falls to the lowest-index tuple.
    pub fn classify(&self, img: &ToyImage) -> SemanticTuple {
        self.classify_with_margin(img).0
    }

    /// Classification plus the score margin to the runner-up; a zero margin
    /// marks a tie resolved by the lowest-index rule.
    pub fn classify_with_margin(&self, img: &ToyImage) -> (SemanticTuple, f64) {
        let img_norm = img.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        let mut runner_up = f64::NEG_INFINITY;
        for (i, proto) in self.renders.iter().enumerate() {
            let score = if img_norm == 0.0 {
                0.0
            } else {
                let dot: f64 = img.pixels.iter().zip(&proto.pixels).map(|(a, b)| a * b).sum();
                dot / (img_norm * self.norms[i])
            };
            if score > best_score {
                runner_up = best_score;
                best_score = score;
                best = i;
            } else if score > runner_up {
                runner_up = score;
            }
        }
        (self.tuples[best].clone(), best_score - runner_up)
    }

    /// Template-matching score for "attribute takes this value", in [0, 1].
    /// Ratio of the nearest other-value distance against the sum of both
    /// nearest distances, so self-matches score 1 and wrong values score 0,
    /// with convex blends in between.
    pub fn attribute_score(&self, img: &ToyImage, attr: usize, value: usize) -> f64 {
        assert!(attr < self.schema.attr_count() && value < self.schema.value_count(attr));
        let mut d_target = f64::INFINITY;
        let mut d_other = f64::INFINITY;
        for (i, proto) in self.renders.iter().enumerate() {
            let mse: f64 = img
                .pixels
                .iter()
                .zip(&proto.pixels)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / img.pixels.len() as f64;
            let d = mse.sqrt();
            if self.tuples[i].values[attr] == value {
                d_target = d_target.min(d);
            } else {
                d_other = d_other.min(d);
            }
        }
        if d_target == 0.0 && d_other == 0.0 {
            return 0.5;
        }
        d_other / (d_target + d_other)
    }

    pub fn render_of(&self, s: &SemanticTuple) -> &ToyImage {
        let idx = self.tuples.iter().position(|t| t == s).expect("tuple in schema");
        &self.renders[idx]
    }
}

/// One benchmark element: prompts, editing feature, object class, masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: String,
    pub source_prompt: Vec<String>,
    pub edit_prompt: Vec<String>,
    pub editing_feature: String,
    pub feature_value: String,
    pub object_class: String,
    pub roi: Vec<Vec<bool>>,
    pub background: Vec<Vec<bool>>,
}

impl EditRecord {
    pub fn build(
        schema: &AttributeSchema,
        id: String,
        source: &SemanticTuple,
        attr: usize,
        target_value: usize,
    ) -> Self {
        let (_, masks) = render(schema, source);
        let source_prompt = describe(schema, source).to_words(schema);
        let edited = source.with_value(attr, target_value);
        let edit_prompt = describe(schema, &edited).to_words(schema);
        EditRecord {
            id,
            source_prompt,
            edit_prompt,
            editing_feature: schema.attr_name(attr).to_string(),
            feature_value: schema.value_name(attr, target_value).to_string(),
            object_class: schema.value_name(0, source.values[0]).to_string(),
            roi: masks.roi_rows(),
            background: masks.background_rows(),
        }
    }

    pub fn source_tuple(&self, schema: &AttributeSchema) -> Result<SemanticTuple> {
        words_to_tuple(schema, &self.source_prompt)
    }

    pub fn feature(&self, schema: &AttributeSchema) -> Result<(usize, usize)> {
        let attr = schema
            .attr_index(&self.editing_feature)
            .ok_or_else(|| Error::Configuration { context: format!("unknown attribute {}", self.editing_feature) })?;
        let value = schema
            .value_index(attr, &self.feature_value)
            .ok_or_else(|| Error::Configuration { context: format!("unknown value {}", self.feature_value) })?;
        Ok((attr, value))
    }
}

fn words_to_tuple(schema: &AttributeSchema, words: &[String]) -> Result<SemanticTuple> {
    let mut values = vec![0usize; schema.attr_count()];
    for (a, value) in values.iter_mut().enumerate() {
        let word = words.get(a).ok_or(Error::Contract { context: "prompt too short" })?;
        *value = schema
            .value_index(a, word)
            .ok_or_else(|| Error::Configuration { context: format!("word {word} not a value of attribute {a}") })?;
    }
    Ok(SemanticTuple { values })
}

/// JSON-lines manifest, one record per line.
pub fn write_manifest(records: &[EditRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format { context: format!("manifest serialize: {e}") })?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<EditRecord>> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format { context: format!("manifest parse: {e}") })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> AttributeSchema {
        AttributeSchema::default_schema()
    }

    #[test]
    fn render_is_deterministic() {
        let s = SemanticTuple::new(vec![2, 1, 0, 2]);
        let (a, _) = render(&schema(), &s);
        let (b, _) = render(&schema(), &s);
        assert_eq!(a, b);
    }

    #[test]
    fn color_change_confined_to_roi() {
        let sch = schema();
        let a = SemanticTuple::new(vec![0, 0, 1, 1]);
        let b = a.with_value(1, 2);
        let (ia, masks) = render(&sch, &a);
        let (ib, _) = render(&sch, &b);
        for p in 0..IMAGE_SIDE * IMAGE_SIDE {
            for c in 0..3 {
                let diff = (ia.pixels()[p * 3 + c] - ib.pixels()[p * 3 + c]).abs() > 0.0;
                if diff {
                    assert!(masks.roi[p], "color diff outside roi at {p}");
                }
            }
        }
    }

    #[test]
    fn brightness_change_confined_to_background() {
        let sch = schema();
        let a = SemanticTuple::new(vec![1, 2, 2, 0]);
        let b = a.with_value(3, 2);
        let (ia, masks) = render(&sch, &a);
        let (ib, _) = render(&sch, &b);
        for p in 0..IMAGE_SIDE * IMAGE_SIDE {
            for c in 0..3 {
                if (ia.pixels()[p * 3 + c] - ib.pixels()[p * 3 + c]).abs() > 0.0 {
                    assert!(masks.background[p], "brightness diff inside roi at {p}");
                }
            }
        }
    }

    #[test]
    fn shape_or_size_change_confined_to_silhouette_union() {
        let sch = schema();
        let a = SemanticTuple::new(vec![0, 0, 0, 1]);
        for (attr, v) in [(0usize, 3usize), (2, 2)] {
            let b = a.with_value(attr, v);
            let (ia, ma) = render(&sch, &a);
            let (ib, mb) = render(&sch, &b);
            for p in 0..IMAGE_SIDE * IMAGE_SIDE {
                for c in 0..3 {
                    if (ia.pixels()[p * 3 + c] - ib.pixels()[p * 3 + c]).abs() > 0.0 {
                        assert!(ma.roi[p] || mb.roi[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn square_roi_count_is_analytic() {
        let sch = schema();
        // (square, red, size "2", brightness "normal")
        let s = SemanticTuple::new(vec![0, 0, 1, 1]);
        let (_, masks) = render(&sch, &s);
        assert_eq!(masks.roi_count(), square_area(1));
    }

    #[test]
    fn masks_partition_image() {
        let sch = schema();
        for t in sch.tuples() {
            let (_, m) = render(&sch, &t);
            for p in 0..IMAGE_SIDE * IMAGE_SIDE {
                assert!(m.roi[p] ^ m.background[p]);
            }
        }
    }

    #[test]
    fn describe_invert_roundtrip_and_distinct() {
        let sch = schema();
        let mut seen = std::collections::BTreeSet::new();
        for t in sch.tuples() {
            let p = describe(&sch, &t);
            assert_eq!(p.len(), PROMPT_LEN);
            assert_eq!(p.invert(&sch).unwrap(), t);
            assert!(seen.insert(p.to_words(&sch)), "duplicate prompt");
        }
    }

    #[test]
    fn single_attribute_change_moves_one_slot() {
        let sch = schema();
        let a = SemanticTuple::new(vec![1, 1, 1, 1]);
        let b = a.with_value(2, 0);
        let pa = describe(&sch, &a);
        let pb = describe(&sch, &b);
        let differing: Vec<usize> =
            (0..pa.len()).filter(|&i| pa.token(i) != pb.token(i)).collect();
        assert_eq!(differing, vec![2]);
    }

    #[test]
    fn classify_inverts_render_everywhere() {
        let sch = schema();
        let protos = Prototypes::new(&sch);
        for t in sch.tuples() {
            let (img, _) = render(&sch, &t);
            assert_eq!(protos.classify(&img), t);
        }
    }

    #[test]
    fn classify_survives_uniform_noise() {
        let sch = schema();
        let protos = Prototypes::new(&sch);
        let mut rng = crate::rng::RngStream::new(2024, 0);
        let tuples = sch.tuples();
        let mut hits = 0;
        let trials = 1000;
        for k in 0..trials {
            let t = &tuples[(rng.next_u64() % tuples.len() as u64) as usize];
            let (img, _) = render(&sch, t);
            let noisy: Vec<f64> = img
                .pixels()
                .iter()
                .map(|v| (v + 0.05 * (2.0 * rng.next_uniform() - 1.0)).clamp(0.0, 1.0))
                .collect();
            let noisy = ToyImage::from_pixels(noisy).unwrap();
            if protos.classify(&noisy) == *t {
                hits += 1;
            }
            let _ = k;
        }
        assert!(hits as f64 / trials as f64 >= 0.99, "hits {hits}/{trials}");
    }

    #[test]
    fn zero_image_ties_to_lowest_index() {
        let sch = schema();
        let protos = Prototypes::new(&sch);
        let (t, margin) = protos.classify_with_margin(&ToyImage::zeros());
        assert_eq!(t, sch.tuples()[0]);
        assert_eq!(margin, 0.0);
    }

    #[test]
    fn attribute_score_self_and_cross() {
        let sch = schema();
        let protos = Prototypes::new(&sch);
        let mut max_cross: f64 = 0.0;
        for t in sch.tuples() {
            let (img, _) = render(&sch, &t);
            for attr in 0..sch.attr_count() {
                let own = protos.attribute_score(&img, attr, t.values[attr]);
                assert!(own >= 0.99, "self score {own}");
                for v in 0..sch.value_count(attr) {
                    if v != t.values[attr] {
                        max_cross = max_cross.max(protos.attribute_score(&img, attr, v));
                    }
                }
            }
        }
        assert!(max_cross <= 0.5, "max cross-value score {max_cross}");
    }

    #[test]
    fn attribute_score_blend_sits_between() {
        let sch = schema();
        let protos = Prototypes::new(&sch);
        let a = SemanticTuple::new(vec![0, 0, 1, 1]);
        let b = a.with_value(1, 2);
        let (ia, _) = render(&sch, &a);
        let (ib, _) = render(&sch, &b);
        let blended: Vec<f64> =
            ia.pixels().iter().zip(ib.pixels()).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        let blend = ToyImage::from_pixels(blended).unwrap();
        let lo = protos.attribute_score(&ia, 1, 2);
        let hi = protos.attribute_score(&ib, 1, 2);
        let mid = protos.attribute_score(&blend, 1, 2);
        assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
    }

    #[test]
    fn ppm_roundtrip_bit_exact() {
        let sch = schema();
        let (img, _) = render(&sch, &SemanticTuple::new(vec![3, 3, 2, 0]));
        let bytes = img.to_ppm();
        let back = ToyImage::from_ppm(&bytes).unwrap();
        assert_eq!(back.to_ppm(), bytes);
    }

    #[test]
    fn manifest_roundtrip() {
        let sch = schema();
        let records: Vec<EditRecord> = sch
            .tuples()
            .into_iter()
            .take(5)
            .enumerate()
            .map(|(i, t)| EditRecord::build(&sch, format!("r{i}"), &t, 1, (t.values[1] + 1) % 4))
            .collect();
        let dir = std::env::temp_dir().join("editlab_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.jsonl");
        write_manifest(&records, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(records, back);
    }
}

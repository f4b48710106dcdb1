//! Tiny trainable epsilon predictors over toy-world pixels.
//!
//! Two variants share every setting except the conditioning mechanism:
//! `Joint` concatenates text rows with the patch tokens and runs plain
//! self-attention (in-context conditioning), `Cross` keeps text out of the
//! stream and injects it through dedicated cross-attention sublayers.
//! Patch tokens carry a learned position row (high-noise tokens are pure
//! noise, so painting centered content requires it); relabeling patches
//! together with their position rows is an exact symmetry, which the
//! attention-capture checks exercise. Conditioning uses the token rows plus
//! a pooled projection added to every token alongside the sinusoidal
//! timestep features.
//!
//! Inference runs on plain slices; the tape in [`crate::graph`] is used by
//! training only, and both paths execute the same primitive loops so their
//! outputs agree bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_given, Denoiser, NoiseSchedule};
use crate::embed::{encode, TextEmbedding, TokenTable};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::RngStream;
use crate::tensor::{matmul_nn, matmul_nt, Tensor};
use crate::toyworld::{describe, render, AttributeSchema, IMAGE_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Joint,
    Cross,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::Cross => "cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch: usize,
    pub text_len: usize,
    pub text_dim: usize,
}

impl DenoiserConfig {
    pub fn joint_default(text_len: usize, text_dim: usize) -> Self {
        DenoiserConfig { variant: Variant::Joint, layers: 2, heads: 4, width: 64, patch: 4, text_len, text_dim }
    }

    pub fn cross_default(text_len: usize, text_dim: usize) -> Self {
        DenoiserConfig { variant: Variant::Cross, ..Self::joint_default(text_len, text_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Configuration {
                context: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        if self.patch == 0 || IMAGE_SIDE % self.patch != 0 {
            return Err(Error::Configuration {
                context: format!("patch {} does not divide image side {}", self.patch, IMAGE_SIDE),
            });
        }
        if self.layers == 0 {
            return Err(Error::Configuration { context: "at least one layer".into() });
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (IMAGE_SIDE / self.patch) * (IMAGE_SIDE / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn latent_dim(&self) -> usize {
        IMAGE_SIDE * IMAGE_SIDE * 3
    }
}

const LN_EPS: f64 = 1e-5;

/// Trained (or freshly initialized) denoiser with named parameters.
///
/// The network paints a clean-image estimate; the epsilon prediction is
/// derived from it analytically, `eps = (z - sqrt(abar) x0) / sqrt(1 - abar)`,
/// so the noise component of the output carries the exact timestep gain
/// instead of asking the network to reproduce it.
#[derive(Clone)]
pub struct NeuralDenoiser {
    pub config: DenoiserConfig,
    schedule: NoiseSchedule,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub steps_trained: usize,
    pub seed: u64,
}

fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, f64)> {
    let w = cfg.width;
    let h = cfg.heads;
    let dh = cfg.head_dim();
    let hidden = 4 * w;
    let mut specs: Vec<(String, Vec<usize>, f64)> = vec![
        ("patch_w".into(), vec![cfg.patch_dim(), w], 0.02),
        ("patch_b".into(), vec![1, w], 0.0),
        ("patch_pos".into(), vec![cfg.patches(), w], 0.02),
        ("text_w".into(), vec![cfg.text_dim, w], 0.02),
        ("text_b".into(), vec![1, w], 0.0),
        ("pooled_w".into(), vec![cfg.text_dim, w], 0.02),
        ("null_text".into(), vec![1, cfg.text_dim], 0.02),
    ];
    for l in 0..cfg.layers {
        let attn = |prefix: &str, specs: &mut Vec<(String, Vec<usize>, f64)>| {
            specs.push((format!("{prefix}.ln.g"), vec![1, w], -1.0)); // -1 marks ones-init
            specs.push((format!("{prefix}.ln.b"), vec![1, w], 0.0));
            // Zero-initialized context modulation: gamma/beta from the
            // timestep-plus-pooled row, starting as a plain layer norm.
            specs.push((format!("{prefix}.film.g"), vec![w, w], 0.0));
            specs.push((format!("{prefix}.film.b"), vec![w, w], 0.0));
            for head in 0..h {
                specs.push((format!("{prefix}.q{head}"), vec![w, dh], 0.02));
                specs.push((format!("{prefix}.k{head}"), vec![w, dh], 0.02));
                specs.push((format!("{prefix}.v{head}"), vec![w, dh], 0.02));
            }
            specs.push((format!("{prefix}.o"), vec![w, w], 0.02));
        };
        attn(&format!("l{l}.self"), &mut specs);
        if cfg.variant == Variant::Cross {
            attn(&format!("l{l}.cross"), &mut specs);
        }
        specs.push((format!("l{l}.mlp.ln.g"), vec![1, w], -1.0));
        specs.push((format!("l{l}.mlp.ln.b"), vec![1, w], 0.0));
        specs.push((format!("l{l}.mlp.film.g"), vec![w, w], 0.0));
        specs.push((format!("l{l}.mlp.film.b"), vec![w, w], 0.0));
        specs.push((format!("l{l}.mlp.w1"), vec![w, hidden], 0.02));
        specs.push((format!("l{l}.mlp.b1"), vec![1, hidden], 0.0));
        specs.push((format!("l{l}.mlp.w2"), vec![hidden, w], 0.02));
        specs.push((format!("l{l}.mlp.b2"), vec![1, w], 0.0));
    }
    specs.push(("final.ln.g".into(), vec![1, w], -1.0));
    specs.push(("final.ln.b".into(), vec![1, w], 0.0));
    specs.push(("final.film.g".into(), vec![w, w], 0.0));
    specs.push(("final.film.b".into(), vec![w, w], 0.0));
    // Zero-initialized head: the first clean estimates are flat and the
    // early epsilon residual carries no amplified network noise.
    specs.push(("out_w".into(), vec![w, cfg.patch_dim()], 0.0));
    specs.push(("out_b".into(), vec![1, cfg.patch_dim()], 0.0));
    specs
}

impl NeuralDenoiser {
    pub fn init(config: &DenoiserConfig, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0x11_0DE1);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, scale) in param_specs(config) {
            let t = if scale == 0.0 {
                Tensor::zeros(&shape)
            } else if scale < 0.0 {
                Tensor::filled(&shape, 1.0)?
            } else {
                rng.normal_tensor(&shape).scale(scale)?
            };
            names.push(name);
            params.push(t);
        }
        Ok(NeuralDenoiser {
            config: config.clone(),
            schedule: schedule.clone(),
            names,
            params,
            steps_trained: 0,
            seed,
        })
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn p(&self, name: &str) -> &Tensor {
        &self.params[self.index(name)]
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn time_context(&self, t: usize, pooled: &[f64]) -> Vec<f64> {
        let w = self.config.width;
        let mut ctx = vec![0.0; w];
        let half = w / 2;
        for k in 0..half {
            let freq = (-(k as f64) * (10_000f64).ln() / half as f64).exp();
            ctx[2 * k] = (t as f64 * freq).sin();
            ctx[2 * k + 1] = (t as f64 * freq).cos();
        }
        // Pooled conditioning joins the timestep signal.
        let pw = self.p("pooled_w");
        let mut proj = vec![0.0; w];
        matmul_nn(pooled, pw.data(), &mut proj, 1, self.config.text_dim, w);
        for (c, p) in ctx.iter_mut().zip(&proj) {
            *c += p;
        }
        ctx
    }

    fn text_inputs(&self, cond: Option<&TextEmbedding>) -> Result<(Vec<f64>, Vec<f64>)> {
        let l = self.config.text_len;
        let d = self.config.text_dim;
        match cond {
            Some(c) => {
                if c.slot_count() != l || c.dim() != d {
                    return Err(Error::Dimension {
                        context: "text embedding shape",
                        left: vec![c.slot_count(), c.dim()],
                        right: vec![l, d],
                    });
                }
                Ok((c.tokens().data().to_vec(), c.pooled().to_vec()))
            }
            None => {
                let null = self.p("null_text").data();
                let mut rows = Vec::with_capacity(l * d);
                for _ in 0..l {
                    rows.extend_from_slice(null);
                }
                Ok((rows, null.to_vec()))
            }
        }
    }

    /// Tape-free forward pass; optionally records attention maps at one layer.
    fn forward_infer(
        &self,
        latent: &[f64],
        t: usize,
        cond: Option<&TextEmbedding>,
        mut capture: Option<(usize, &mut Vec<Vec<Vec<f64>>>)>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if latent.len() != cfg.latent_dim() {
            return Err(Error::DataLength { expected: cfg.latent_dim(), got: latent.len() });
        }
        let np = cfg.patches();
        let pd = cfg.patch_dim();
        let w = cfg.width;
        let l = cfg.text_len;
        let (text_rows, pooled) = self.text_inputs(cond)?;
        let ctx = self.time_context(t, &pooled);

        // Patch tokens: content embedding plus learned position row.
        let patches = patchify(latent, cfg.patch);
        let mut xp = vec![0.0; np * w];
        matmul_nn(&patches, self.p("patch_w").data(), &mut xp, np, pd, w);
        add_row_inplace(&mut xp, self.p("patch_b").data(), np, w);
        for (a, b) in xp.iter_mut().zip(self.p("patch_pos").data()) {
            *a += b;
        }
        add_row_inplace(&mut xp, &ctx, np, w);

        // Text tokens.
        let mut tx = vec![0.0; l * w];
        matmul_nn(&text_rows, self.p("text_w").data(), &mut tx, l, cfg.text_dim, w);
        add_row_inplace(&mut tx, self.p("text_b").data(), l, w);
        add_row_inplace(&mut tx, &ctx, l, w);

        let mut x: Vec<f64>;
        let n: usize;
        match cfg.variant {
            Variant::Joint => {
                n = np + l;
                x = Vec::with_capacity(n * w);
                x.extend_from_slice(&xp);
                x.extend_from_slice(&tx);
            }
            Variant::Cross => {
                n = np;
                x = xp;
            }
        }

        for layer in 0..cfg.layers {
            let want = capture.as_ref().map(|(lw, _)| *lw == layer).unwrap_or(false);
            // Self-attention sublayer.
            let maps = self.attn_infer(
                &mut x,
                n,
                &format!("l{layer}.self"),
                &ctx,
                None,
                want && cfg.variant == Variant::Joint,
                np,
                l,
            );
            if let (Some(m), Some((_, out))) = (maps, capture.as_mut()) {
                out.extend(m);
            }
            if cfg.variant == Variant::Cross {
                let maps = self.attn_infer(
                    &mut x,
                    n,
                    &format!("l{layer}.cross"),
                    &ctx,
                    Some((&tx, l)),
                    want,
                    np,
                    l,
                );
                if let (Some(m), Some((_, out))) = (maps, capture.as_mut()) {
                    out.extend(m);
                }
            }
            // MLP sublayer.
            let h = self.ln_affine(&x, n, &format!("l{layer}.mlp"), &ctx);
            let hidden = 4 * w;
            let mut h1 = vec![0.0; n * hidden];
            matmul_nn(&h, self.p(&format!("l{layer}.mlp.w1")).data(), &mut h1, n, w, hidden);
            add_row_inplace(&mut h1, self.p(&format!("l{layer}.mlp.b1")).data(), n, hidden);
            for v in h1.iter_mut() {
                *v = gelu(*v);
            }
            let mut h2 = vec![0.0; n * w];
            matmul_nn(&h1, self.p(&format!("l{layer}.mlp.w2")).data(), &mut h2, n, hidden, w);
            add_row_inplace(&mut h2, self.p(&format!("l{layer}.mlp.b2")).data(), n, w);
            for (a, b) in x.iter_mut().zip(&h2) {
                *a += b;
            }
        }

        let y = self.ln_affine(&x[..np * w], np, "final", &ctx);
        let mut out = vec![0.0; np * pd];
        matmul_nn(&y, self.p("out_w").data(), &mut out, np, w, pd);
        add_row_inplace(&mut out, self.p("out_b").data(), np, pd);
        Ok(unpatchify(&out, cfg.patch))
    }

    /// Layer norm with context modulation: scale `g + ctx Wg`, shift
    /// `b + ctx Wb`. The modulation matrices start at zero, so a fresh
    /// model behaves like a plain affine layer norm.
    fn ln_affine(&self, x: &[f64], rows: usize, prefix: &str, ctx: &[f64]) -> Vec<f64> {
        let w = x.len() / rows;
        let g = self.p(&format!("{prefix}.ln.g")).data();
        let b = self.p(&format!("{prefix}.ln.b")).data();
        let mut scale = vec![0.0; w];
        matmul_nn(ctx, self.p(&format!("{prefix}.film.g")).data(), &mut scale, 1, w, w);
        let mut shift = vec![0.0; w];
        matmul_nn(ctx, self.p(&format!("{prefix}.film.b")).data(), &mut shift, 1, w, w);
        for j in 0..w {
            scale[j] += g[j];
            shift[j] += b[j];
        }
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            let row = &x[i * w..(i + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..w {
                out[i * w + j] = (row[j] - mean) * inv * scale[j] + shift[j];
            }
        }
        out
    }

    /// Shared self/cross attention sublayer. `kv` carries the external
    /// key/value rows for cross-attention; queries always come from `x`.
    /// Returns per-head text-slot maps when `want_capture` is set.
    #[allow(clippy::too_many_arguments)]
    fn attn_infer(
        &self,
        x: &mut Vec<f64>,
        n: usize,
        prefix: &str,
        ctx: &[f64],
        kv: Option<(&[f64], usize)>,
        want_capture: bool,
        np: usize,
        l: usize,
    ) -> Option<Vec<Vec<Vec<f64>>>> {
        let cfg = &self.config;
        let w = cfg.width;
        let dh = cfg.head_dim();
        let h = self.ln_affine(x, n, prefix, ctx);
        let (keys_src, kn) = match kv {
            Some((rows, kn)) => (rows.to_vec(), kn),
            None => (h.clone(), n),
        };
        let mut heads_out: Vec<Vec<f64>> = Vec::with_capacity(cfg.heads);
        let mut captured: Vec<Vec<Vec<f64>>> = Vec::new();
        for head in 0..cfg.heads {
            let wq = self.p(&format!("{prefix}.q{head}")).data();
            let wk = self.p(&format!("{prefix}.k{head}")).data();
            let wv = self.p(&format!("{prefix}.v{head}")).data();
            let mut q = vec![0.0; n * dh];
            matmul_nn(&h, wq, &mut q, n, w, dh);
            let mut k = vec![0.0; kn * dh];
            matmul_nn(&keys_src, wk, &mut k, kn, w, dh);
            let mut v = vec![0.0; kn * dh];
            matmul_nn(&keys_src, wv, &mut v, kn, w, dh);
            let mut scores = vec![0.0; n * kn];
            matmul_nt(&q, &k, &mut scores, n, dh, kn);
            let scale = 1.0 / (dh as f64).sqrt();
            for s in scores.iter_mut() {
                *s *= scale;
            }
            softmax_rows(&mut scores, n, kn);
            if want_capture {
                captured.push(slice_text_maps(&scores, kn, np, l));
            }
            let mut o = vec![0.0; n * dh];
            matmul_nn(&scores, &v, &mut o, n, kn, dh);
            heads_out.push(o);
        }
        // Concat head outputs, project, residual.
        let mut concat = vec![0.0; n * w];
        for (head, o) in heads_out.iter().enumerate() {
            for i in 0..n {
                concat[i * w + head * dh..i * w + (head + 1) * dh]
                    .copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
        }
        let mut proj = vec![0.0; n * w];
        matmul_nn(&concat, self.p(&format!("{prefix}.o")).data(), &mut proj, n, w, w);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }
        if want_capture {
            Some(captured)
        } else {
            None
        }
    }

    /// Training forward on the tape; mirrors `forward_infer` op for op.
    fn forward_graph(
        &self,
        g: &mut Graph,
        params: &BTreeMap<usize, crate::graph::NodeId>,
        latent: &[f64],
        t: usize,
        text_rows: &Tensor,
        pooled: &Tensor,
    ) -> Result<crate::graph::NodeId> {
        let cfg = &self.config;
        let np = cfg.patches();
        let pd = cfg.patch_dim();
        let w = cfg.width;
        let pid = |name: &str| params[&self.index(name)];

        // Sinusoidal part of the context row is a constant input.
        let mut sin = vec![0.0; w];
        let half = w / 2;
        for k in 0..half {
            let freq = (-(k as f64) * (10_000f64).ln() / half as f64).exp();
            sin[2 * k] = (t as f64 * freq).sin();
            sin[2 * k + 1] = (t as f64 * freq).cos();
        }
        let sin_node = g.input(&Tensor::new(vec![1, w], sin)?);
        let pooled_node = g.input(pooled);
        let pooled_proj = g.matmul(pooled_node, pid("pooled_w"))?;
        let ctx = g.add(sin_node, pooled_proj)?;

        let patches = Tensor::new(vec![np, pd], patchify(latent, cfg.patch))?;
        let pn = g.input(&patches);
        let mut xp = g.matmul(pn, pid("patch_w"))?;
        xp = g.add_row(xp, pid("patch_b"))?;
        xp = g.add(xp, pid("patch_pos"))?;
        xp = g.add_row(xp, ctx)?;

        let tn = g.input(text_rows);
        let mut tx = g.matmul(tn, pid("text_w"))?;
        tx = g.add_row(tx, pid("text_b"))?;
        tx = g.add_row(tx, ctx)?;

        let mut x = match cfg.variant {
            Variant::Joint => g.concat_rows(&[xp, tx])?,
            Variant::Cross => xp,
        };

        for layer in 0..cfg.layers {
            x = self.attn_graph(g, &pid, x, ctx, &format!("l{layer}.self"), None)?;
            if cfg.variant == Variant::Cross {
                x = self.attn_graph(g, &pid, x, ctx, &format!("l{layer}.cross"), Some(tx))?;
            }
            let ln = self.ln_graph(g, &pid, x, ctx, &format!("l{layer}.mlp"))?;
            let h1 = g.matmul(ln, pid(&format!("l{layer}.mlp.w1")))?;
            let h1 = g.add_row(h1, pid(&format!("l{layer}.mlp.b1")))?;
            let h1 = g.gelu(h1);
            let h2 = g.matmul(h1, pid(&format!("l{layer}.mlp.w2")))?;
            let h2 = g.add_row(h2, pid(&format!("l{layer}.mlp.b2")))?;
            x = g.add(x, h2)?;
        }

        let xpatch = if cfg.variant == Variant::Joint { g.slice_rows(x, 0, np)? } else { x };
        let ln = self.ln_graph(g, &pid, xpatch, ctx, "final")?;
        let out = g.matmul(ln, pid("out_w"))?;
        let x0 = g.add_row(out, pid("out_b"))?;

        // eps = (z - sqrt(abar) x0) / sqrt(1 - abar), on patch layout.
        let abar = self.schedule.alpha_bar(t);
        let denom = (1.0 - abar).sqrt();
        let zscaled = g.scale(pn, 1.0 / denom);
        let xscaled = g.scale(x0, -abar.sqrt() / denom);
        g.add(zscaled, xscaled)
    }

    /// Modulated layer norm on the tape, mirroring `ln_affine`.
    fn ln_graph(
        &self,
        g: &mut Graph,
        pid: &dyn Fn(&str) -> crate::graph::NodeId,
        x: crate::graph::NodeId,
        ctx: crate::graph::NodeId,
        prefix: &str,
    ) -> Result<crate::graph::NodeId> {
        let gamma = g.matmul(ctx, pid(&format!("{prefix}.film.g")))?;
        let scale = g.add(gamma, pid(&format!("{prefix}.ln.g")))?;
        let beta = g.matmul(ctx, pid(&format!("{prefix}.film.b")))?;
        let shift = g.add(beta, pid(&format!("{prefix}.ln.b")))?;
        let ln = g.layer_norm(x, LN_EPS);
        let ln = g.mul_row(ln, scale)?;
        g.add_row(ln, shift)
    }

    fn attn_graph(
        &self,
        g: &mut Graph,
        pid: &dyn Fn(&str) -> crate::graph::NodeId,
        x: crate::graph::NodeId,
        ctx: crate::graph::NodeId,
        prefix: &str,
        kv: Option<crate::graph::NodeId>,
    ) -> Result<crate::graph::NodeId> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let h = self.ln_graph(g, pid, x, ctx, prefix)?;
        let keys = kv.unwrap_or(h);
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = g.matmul(h, pid(&format!("{prefix}.q{head}")))?;
            let k = g.matmul(keys, pid(&format!("{prefix}.k{head}")))?;
            let v = g.matmul(keys, pid(&format!("{prefix}.v{head}")))?;
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax(scaled);
            heads.push(g.matmul(attn, v)?);
        }
        let concat = g.concat_cols(&heads)?;
        let proj = g.matmul(concat, pid(&format!("{prefix}.o")))?;
        g.add(x, proj)
    }

    /// Save parameters (tensor blocks in name order) plus a JSON sidecar.
    pub fn save(&self, base: &Path) -> Result<()> {
        let ckpt = base.with_extension("ckpt");
        let mut f = std::fs::File::create(&ckpt)?;
        for p in &self.params {
            p.write_block(&mut f)?;
        }
        let sidecar = serde_json::json!({
            "config": self.config,
            "schedule": self.schedule,
            "names": self.names,
            "steps_trained": self.steps_trained,
            "seed": self.seed,
        });
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)
                .map_err(|e| Error::Format { context: e.to_string() })?,
        )?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
            base.with_extension("json"),
        )?)
        .map_err(|e| Error::Format { context: e.to_string() })?;
        let config: DenoiserConfig = serde_json::from_value(sidecar["config"].clone())
            .map_err(|e| Error::Format { context: e.to_string() })?;
        let schedule: NoiseSchedule = serde_json::from_value(sidecar["schedule"].clone())
            .map_err(|e| Error::Format { context: e.to_string() })?;
        let names: Vec<String> = serde_json::from_value(sidecar["names"].clone())
            .map_err(|e| Error::Format { context: e.to_string() })?;
        let steps_trained = sidecar["steps_trained"].as_u64().unwrap_or(0) as usize;
        let seed = sidecar["seed"].as_u64().unwrap_or(0);
        let mut f = std::fs::File::open(base.with_extension("ckpt"))?;
        let mut params = Vec::with_capacity(names.len());
        for _ in 0..names.len() {
            params.push(Tensor::read_block(&mut f)?);
        }
        Ok(NeuralDenoiser { config, schedule, names, params, steps_trained, seed })
    }
}

impl Denoiser for NeuralDenoiser {
    fn predict(&self, z: &Tensor, t: usize, cond: Option<&TextEmbedding>) -> Result<Tensor> {
        if t == 0 || t > self.schedule.t_max() {
            return Err(Error::Domain { context: "neural predict timestep", value: t as f64 });
        }
        let x0 = self.forward_infer(z.data(), t, cond, None)?;
        let abar = self.schedule.alpha_bar(t);
        // Same multiply-then-add arithmetic as the training graph so both
        // paths agree bit for bit.
        let zc = 1.0 / (1.0 - abar).sqrt();
        let xc = -abar.sqrt() / (1.0 - abar).sqrt();
        let eps: Vec<f64> =
            z.data().iter().zip(&x0).map(|(&zt, &x)| zt * zc + x * xc).collect();
        Tensor::new(z.shape().to_vec(), eps)
    }
}

/// Per-head attention maps: for each text slot, weights over image patches.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub layer: usize,
    pub variant: Variant,
    /// heads x text-slots x patches, each slot row normalized to sum 1.
    pub maps: Vec<Vec<Vec<f64>>>,
}

/// Capture text-slot attention at one layer; a pure read of the forward pass.
pub fn capture_attention(
    model: &NeuralDenoiser,
    z: &Tensor,
    t: usize,
    cond: &TextEmbedding,
    layer: usize,
) -> Result<AttentionCapture> {
    if layer >= model.config.layers {
        return Err(Error::Domain { context: "capture layer", value: layer as f64 });
    }
    let mut maps = Vec::new();
    model.forward_infer(z.data(), t, Some(cond), Some((layer, &mut maps)))?;
    Ok(AttentionCapture { layer, variant: model.config.variant, maps })
}

/// How much each patch attends to a text slot, normalized over patches.
/// For joint attention the text columns are sliced out of the full matrix;
/// cross-attention provides them directly.
fn slice_text_maps(scores: &[f64], kn: usize, np: usize, l: usize) -> Vec<Vec<f64>> {
    let text_col0 = kn - l;
    let mut out = Vec::with_capacity(l);
    for slot in 0..l {
        let col = text_col0 + slot;
        let mut weights: Vec<f64> = (0..np).map(|p| scores[p * kn + col]).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            for w in weights.iter_mut() {
                *w /= total;
            }
        }
        out.push(weights);
    }
    out
}

fn patchify(latent: &[f64], patch: usize) -> Vec<f64> {
    let per_side = IMAGE_SIDE / patch;
    let pd = patch * patch * 3;
    let mut out = vec![0.0; per_side * per_side * pd];
    for py in 0..per_side {
        for px in 0..per_side {
            let p = py * per_side + px;
            let mut o = p * pd;
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..3 {
                        out[o] = latent[((py * patch + dy) * IMAGE_SIDE + px * patch + dx) * 3 + c];
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

fn unpatchify(patches: &[f64], patch: usize) -> Vec<f64> {
    let per_side = IMAGE_SIDE / patch;
    let pd = patch * patch * 3;
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE * 3];
    for py in 0..per_side {
        for px in 0..per_side {
            let p = py * per_side + px;
            let mut i = p * pd;
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..3 {
                        out[((py * patch + dy) * IMAGE_SIDE + px * patch + dx) * 3 + c] = patches[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Permute whole patches of a flat latent (capture equivariance checks).
pub fn permute_patches(latent: &[f64], patch: usize, perm: &[usize]) -> Vec<f64> {
    let patches = patchify(latent, patch);
    let pd = patch * patch * 3;
    let mut shuffled = vec![0.0; patches.len()];
    for (dst, &src) in perm.iter().enumerate() {
        shuffled[dst * pd..(dst + 1) * pd].copy_from_slice(&patches[src * pd..(src + 1) * pd]);
    }
    unpatchify(&shuffled, patch)
}

fn add_row_inplace(x: &mut [f64], row: &[f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            x[i * cols + j] += row[j];
        }
    }
}

fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Training settings for the epsilon objective.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch: 8, lr: 1e-3, cond_dropout: 0.1, seed: 0 }
    }
}

/// Completed run: the model, its loss curve, and dropout accounting.
pub struct TrainRun {
    pub model: NeuralDenoiser,
    pub curve: Vec<(usize, f64)>,
    pub dropout_events: u64,
    pub samples_seen: u64,
}

/// (clean pixel latent, prompt embedding) pairs over the whole schema.
pub fn pixel_dataset(
    schema: &AttributeSchema,
    table: &TokenTable,
) -> Result<Vec<(Vec<f64>, TextEmbedding)>> {
    schema
        .tuples()
        .into_iter()
        .map(|t| {
            let img = render(schema, &t).0;
            let emb = encode(table, &describe(schema, &t))?;
            Ok((img.to_latent(), emb))
        })
        .collect()
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &BTreeMap<usize, Tensor>, lr: f64) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, g) in grads {
            let shape = params[*idx].shape().to_vec();
            let mut pd = params[*idx].data().to_vec();
            let mut md = self.m[*idx].data().to_vec();
            let mut vd = self.v[*idx].data().to_vec();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / b1t;
                let vhat = vd[i] / b2t;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            params[*idx] = Tensor::new(shape.clone(), pd).expect("update stays finite");
            self.m[*idx] = Tensor::new(shape.clone(), md).expect("moment stays finite");
            self.v[*idx] = Tensor::new(shape, vd).expect("moment stays finite");
        }
    }
}

/// Minimize the epsilon-prediction loss with random timesteps and 10%
/// condition dropout; fully deterministic given the seed.
pub fn train(
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    dataset: &[(Vec<f64>, TextEmbedding)],
    tc: &TrainConfig,
) -> Result<TrainRun> {
    if dataset.is_empty() || tc.steps == 0 || tc.batch == 0 {
        return Err(Error::Configuration { context: "empty dataset or zero steps/batch".into() });
    }
    let mut model = NeuralDenoiser::init(config, schedule, tc.seed)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = RngStream::new(tc.seed, 0x5F0F_F1E);
    let mut draw_rng = RngStream::new(tc.seed, 0xD4A_05);
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut adam = Adam::new(&model.params);
    let mut curve = Vec::with_capacity(tc.steps);
    let mut dropout_events = 0u64;
    let mut samples_seen = 0u64;

    for step in 0..tc.steps {
        // Draw every piece of batch randomness sequentially, then run the
        // per-sample tapes in parallel and reduce gradients in sample order:
        // the result is identical for any thread layout.
        let mut batch = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            let (latent, emb) = &dataset[order[cursor]];
            cursor += 1;
            samples_seen += 1;
            let t = 1 + (draw_rng.next_below(schedule.t_max() as u64) as usize);
            let eps = draw_rng.normal_tensor(&[latent.len()]);
            let clean =
                crate::diffusion::LatentState::clean(Tensor::new(vec![latent.len()], latent.clone())?);
            let zt = forward_given(schedule, &clean, t, &eps)?;
            let dropped = draw_rng.next_uniform() < tc.cond_dropout;
            if dropped {
                dropout_events += 1;
            }
            let (text_rows, pooled) = if dropped {
                let null = model.p("null_text").data().to_vec();
                let mut rows = Vec::new();
                for _ in 0..config.text_len {
                    rows.extend_from_slice(&null);
                }
                (
                    Tensor::new(vec![config.text_len, config.text_dim], rows)?,
                    Tensor::new(vec![1, config.text_dim], null)?,
                )
            } else {
                (
                    emb.tokens().clone(),
                    Tensor::new(vec![1, config.text_dim], emb.pooled().to_vec())?,
                )
            };
            batch.push((zt, t, eps, text_rows, pooled));
        }

        let per_sample: Vec<Result<(f64, BTreeMap<usize, Tensor>)>> = batch
            .par_iter()
            .map(|(zt, t, eps, text_rows, pooled)| {
                let mut g = Graph::new();
                let mut param_nodes = BTreeMap::new();
                for (idx, p) in model.params.iter().enumerate() {
                    param_nodes.insert(idx, g.param(idx, p));
                }
                let pred =
                    model.forward_graph(&mut g, &param_nodes, zt.z.data(), *t, text_rows, pooled)?;
                let target = Tensor::new(
                    vec![config.patches(), config.patch_dim()],
                    patchify(eps.data(), config.patch),
                )?;
                let tnode = g.input(&target);
                let loss_i = g.mse(pred, tnode)?;
                let grads = g.backward(loss_i)?;
                Ok((g.scalar_value(loss_i), grads))
            })
            .collect();

        let mut loss = 0.0;
        let mut grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        for result in per_sample {
            let (sample_loss, sample_grads) =
                result.map_err(|_| Error::TrainingDiverged { step })?;
            loss += sample_loss;
            for (idx, g) in sample_grads {
                match grads.get_mut(&idx) {
                    Some(acc) => *acc = acc.add(&g).map_err(|_| Error::TrainingDiverged { step })?,
                    None => {
                        grads.insert(idx, g);
                    }
                }
            }
        }
        loss /= tc.batch as f64;
        let inv_batch = 1.0 / tc.batch as f64;
        for g in grads.values_mut() {
            *g = g.scale(inv_batch).map_err(|_| Error::TrainingDiverged { step })?;
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        curve.push((step, loss));
        // Small timesteps weight the clean-image error by abar/(1-abar),
        // which makes per-batch gradients heavy-tailed; a global norm clip
        // keeps those spikes from saturating the optimizer's second moment.
        let total_sq: f64 =
            grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
        let norm = total_sq.sqrt();
        let max_norm = 1.0;
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in grads.values_mut() {
                *g = g.scale(scale).map_err(|_| Error::TrainingDiverged { step })?;
            }
        }
        adam.update(&mut model.params, &grads, tc.lr);
    }
    model.steps_trained = tc.steps;
    model.seed = tc.seed;
    Ok(TrainRun { model, curve, dropout_events, samples_seen })
}

/// Loss curve CSV: step, loss.
pub fn write_loss_csv(curve: &[(usize, f64)], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,loss")?;
    for (s, l) in curve {
        writeln!(f, "{s},{l:.17e}")?;
    }
    Ok(())
}

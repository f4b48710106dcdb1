//! Semantic-disentanglement metric.
//!
//! For an image labeled with one of two values of an attribute, reconstruct
//! it from the noised latent under the matching prompt and under the prompt
//! with that one slot flipped, then combine effectiveness (reconstruction
//! ratio) and decomposability (edited distance):
//!
//! `SDE = |x - h(f(x,t), c, t)| / |x - h(f(x,t), c~, t)| + |x - h(f(x,t), c~, t)|`
//!
//! Distances are root-mean-square so the additive term is comparable to the
//! ratio; both the norm domain and the forward timestep are recorded in the
//! report. Lower is more disentangled.

use serde::Serialize;

use crate::diffusion::{forward, reverse_bounded, LatentState};
use crate::embed::encode;
use crate::ems::Pipeline;
use crate::error::Result;
use crate::rng::RngStream;
use crate::toyworld::{describe, render, SemanticTuple, ToyImage};

#[derive(Clone, Debug, Serialize)]
pub struct SdeConfig {
    pub t_frac: f64,
    pub cfg_scale: f64,
    pub steps: usize,
    /// Distances over decoded pixels when true, over clean latents when false.
    pub pixel_domain: bool,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        SdeConfig { t_frac: 0.75, cfg_scale: 7.5, steps: 50, pixel_domain: true, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SdeReport {
    pub attribute: String,
    pub value_pair: (String, String),
    pub backend: String,
    pub forward_t: usize,
    pub norm_domain: &'static str,
    pub values: Vec<f64>,
    pub average: f64,
    pub excluded_zero_denominator: usize,
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

/// Run the metric for one attribute over tuples labeled with `v0` or `v1`.
pub fn sde_for_attribute(
    pipe: &Pipeline,
    dataset: &[SemanticTuple],
    attr: usize,
    v0: usize,
    v1: usize,
    cfg: &SdeConfig,
) -> Result<SdeReport> {
    let schedule = pipe.backend.schedule();
    let den = pipe.backend.denoiser();
    let t = schedule.strength_to_t(cfg.t_frac)?;
    let mut values = Vec::new();
    let mut excluded = 0usize;

    for (i, tuple) in dataset.iter().enumerate() {
        let y = tuple.values[attr];
        assert!(y == v0 || y == v1, "dataset tuple not labeled with the value pair");
        let flipped_value = if y == v0 { v1 } else { v0 };
        let (x, _) = render(pipe.schema, tuple);
        let c = encode(pipe.table, &describe(pipe.schema, tuple))?;
        let c_flip =
            encode(pipe.table, &describe(pipe.schema, &tuple.with_value(attr, flipped_value)))?;

        let z0 = pipe.backend.latent_of_image(&x)?;
        let mut rng = RngStream::new(cfg.seed, 0x5DE).substream(i as u64);
        let z_t = forward(schedule, &LatentState::clean(z0), t, &mut rng)?;

        let bounds = pipe.backend.clean_bounds();
        let recon =
            reverse_bounded(den, schedule, &z_t, Some(&c), cfg.steps, cfg.cfg_scale, bounds, None)?;
        let edited = reverse_bounded(
            den, schedule, &z_t, Some(&c_flip), cfg.steps, cfg.cfg_scale, bounds, None,
        )?;

        let (num, den_dist) = if cfg.pixel_domain {
            let recon_img = pipe.backend.decode_latent(&recon.z)?;
            let edited_img = pipe.backend.decode_latent(&edited.z)?;
            (pixel_rms(&x, &recon_img), pixel_rms(&x, &edited_img))
        } else {
            let z_clean = pipe.backend.latent_of_image(&x)?;
            (rms(z_clean.data(), recon.z.data()), rms(z_clean.data(), edited.z.data()))
        };
        if den_dist == 0.0 {
            excluded += 1;
            continue;
        }
        values.push(num / den_dist + den_dist);
    }

    let average = if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(SdeReport {
        attribute: pipe.schema.attr_name(attr).to_string(),
        value_pair: (
            pipe.schema.value_name(attr, v0).to_string(),
            pipe.schema.value_name(attr, v1).to_string(),
        ),
        backend: pipe.backend.label(),
        forward_t: t,
        norm_domain: if cfg.pixel_domain { "pixel-rms" } else { "latent-rms" },
        values,
        average,
        excluded_zero_denominator: excluded,
    })
}

fn pixel_rms(a: &ToyImage, b: &ToyImage) -> f64 {
    rms(a.pixels(), b.pixels())
}

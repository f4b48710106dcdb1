//! Semantic-loss experiment: how fast an unconditioned attribute's value is
//! randomized along the forward strength ladder.
//!
//! One base tuple is noised to a fraction of the schedule and reversed with
//! every attribute pinned except the probed one; the decoded value's
//! frequency over seeded trials is compared to the uniform prior by total
//! variation. Fraction zero leaves the value degenerate at the truth
//! (score 1 - 1/V); full noising recovers the prior (score near 0).

use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{forward, reverse_bounded, LatentState};
use crate::embed::encode;
use crate::ems::Pipeline;
use crate::error::Result;
use crate::eval::metrics::tv_distance_from_uniform;
use crate::rng::RngStream;
use crate::toyworld::{render, PromptTokens, SemanticTuple};

#[derive(Clone, Debug, Serialize)]
pub struct SemanticLossPoint {
    pub fraction: f64,
    pub forward_t: usize,
    pub randomness_score: f64,
    pub counts: Vec<u64>,
}

/// Randomness score per forward fraction for one attribute of a base tuple.
#[allow(clippy::too_many_arguments)]
pub fn semantic_loss_curve(
    pipe: &Pipeline,
    base: &SemanticTuple,
    attr: usize,
    fractions: &[f64],
    trials: usize,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Vec<SemanticLossPoint>> {
    let schedule = pipe.backend.schedule();
    let den = pipe.backend.denoiser();
    let pins: Vec<(usize, usize)> = (0..pipe.schema.attr_count())
        .filter(|&a| a != attr)
        .map(|a| (a, base.values[a]))
        .collect();
    let prompt = PromptTokens::partial(pipe.schema, &pins);
    let cond = encode(pipe.table, &prompt)?;
    let bounds = pipe.backend.clean_bounds();
    let (src_img, _) = render(pipe.schema, base);
    let z0 = pipe.backend.latent_of_image(&src_img)?;

    let mut out = Vec::with_capacity(fractions.len());
    for (fi, &fraction) in fractions.iter().enumerate() {
        let t = schedule.strength_to_t(fraction)?;
        let values = pipe.schema.value_count(attr);
        let counts: Vec<u64> = if t == 0 {
            // No noise: the decoded value is the truth, deterministically.
            let img = pipe.backend.decode_latent(&z0)?;
            let decoded = pipe.protos.classify(&img);
            let mut c = vec![0u64; values];
            c[decoded.values[attr]] = trials as u64;
            c
        } else {
            let per_trial: Result<Vec<usize>> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = RngStream::new(seed, 0x10_55)
                        .substream(fi as u64)
                        .substream(trial as u64);
                    let z_t = forward(schedule, &LatentState::clean(z0.clone()), t, &mut rng)?;
                    let z_back = reverse_bounded(
                        den, schedule, &z_t, Some(&cond), steps, cfg_scale, bounds, None,
                    )?;
                    let img = pipe.backend.decode_latent(&z_back.z)?;
                    Ok(pipe.protos.classify(&img).values[attr])
                })
                .collect();
            let mut c = vec![0u64; values];
            for v in per_trial? {
                c[v] += 1;
            }
            c
        };
        out.push(SemanticLossPoint {
            fraction,
            forward_t: t,
            randomness_score: tv_distance_from_uniform(&counts),
            counts,
        });
    }
    Ok(out)
}

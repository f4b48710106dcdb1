use editlab::diffusion::{forward, reverse_bounded, LatentState, NoiseSchedule, Denoiser};
use editlab::embed::{encode, TokenTable};
use editlab::neural::NeuralDenoiser;
use editlab::rng::RngStream;
use editlab::tensor::Tensor;
use editlab::toyworld::{describe, render, AttributeSchema, Prototypes, SemanticTuple, ToyImage};
use std::path::Path;

fn main() {
    let schema = AttributeSchema::default_schema();
    let table = TokenTable::for_schema(&schema, 16, 99).unwrap();
    let schedule = NoiseSchedule::default_schedule();
    let protos = Prototypes::new(&schema);
    let model = NeuralDenoiser::load(Path::new(&std::env::args().nth(1).unwrap())).unwrap();

    // Prompt sensitivity of predictions at high noise.
    let mut rng = RngStream::new(5, 5);
    let z = rng.normal_tensor(&[768]);
    let a = SemanticTuple::new(vec![0, 0, 1, 1]);
    let b = SemanticTuple::new(vec![2, 3, 1, 1]);
    let ca = encode(&table, &describe(&schema, &a)).unwrap();
    let cb = encode(&table, &describe(&schema, &b)).unwrap();
    for t in [900usize, 600, 300] {
        let ea = model.predict(&z, t, Some(&ca)).unwrap();
        let eb = model.predict(&z, t, Some(&cb)).unwrap();
        let eu = model.predict(&z, t, None).unwrap();
        let d_ab: f64 = ea.data().iter().zip(eb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let d_au: f64 = ea.data().iter().zip(eu.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        println!("t={t}: |eps_a - eps_b| = {d_ab:.3}, |eps_a - eps_uncond| = {d_au:.3}, |eps| = {:.3}", ea.norm());
    }

    // Reconstruction from gentler forward strengths.
    for frac in [0.15, 0.35, 0.55, 0.75] {
        let t = schedule.strength_to_t(frac).unwrap();
        let mut exact = 0usize;
        let mut rng = RngStream::new(99, 0);
        let tuples: Vec<_> = schema.tuples().into_iter().step_by(7).collect();
        for tuple in &tuples {
            let (img, _) = render(&schema, tuple);
            let c = encode(&table, &describe(&schema, tuple)).unwrap();
            let z0 = Tensor::new(vec![768], img.to_latent()).unwrap();
            let zt = forward(&schedule, &LatentState::clean(z0), t, &mut rng).unwrap();
            let back = reverse_bounded(&model, &schedule, &zt, Some(&c), 50, 7.5, Some((0.0, 1.0)), None).unwrap();
            let out = ToyImage::from_latent_clamped(back.z.data()).unwrap();
            if protos.classify(&out) == *tuple { exact += 1; }
        }
        println!("recon at frac {frac}: {exact}/{}", tuples.len());
    }
}

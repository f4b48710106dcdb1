use editlab::diffusion::{forward, predict_clean, LatentState, NoiseSchedule, Denoiser};
use editlab::embed::{encode, TokenTable};
use editlab::neural::NeuralDenoiser;
use editlab::rng::RngStream;
use editlab::tensor::Tensor;
use editlab::toyworld::{describe, render, AttributeSchema, Prototypes, ToyImage};
use std::path::Path;

fn main() {
    let schema = AttributeSchema::default_schema();
    let table = TokenTable::for_schema(&schema, 16, 99).unwrap();
    let schedule = NoiseSchedule::default_schedule();
    let protos = Prototypes::new(&schema);
    let model = NeuralDenoiser::load(Path::new(&std::env::args().nth(1).unwrap())).unwrap();
    for t in [300usize, 500, 750, 900, 980] {
        let mut rng = RngStream::new(11, t as u64);
        let mut rms_sum = 0.0;
        let mut hits = 0;
        let tuples: Vec<_> = schema.tuples().into_iter().step_by(11).collect();
        for tuple in &tuples {
            let (img, _) = render(&schema, tuple);
            let c = encode(&table, &describe(&schema, tuple)).unwrap();
            let z0 = Tensor::new(vec![768], img.to_latent()).unwrap();
            let zt = forward(&schedule, &LatentState::clean(z0), t, &mut rng).unwrap();
            let eps = model.predict(&zt.z, t, Some(&c)).unwrap();
            let x0 = predict_clean(&schedule, &zt.z, t, &eps).unwrap();
            let out = ToyImage::from_latent_clamped(x0.data()).unwrap();
            let rms: f64 = (out.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 768.0).sqrt();
            rms_sum += rms;
            if protos.classify(&out) == *tuple { hits += 1; }
        }
        println!("t={t}: x0 rms {:.3}, classify {hits}/{}", rms_sum / tuples.len() as f64, tuples.len());
    }
}

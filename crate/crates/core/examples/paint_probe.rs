use editlab::diffusion::{predict_clean, NoiseSchedule, Denoiser};
use editlab::embed::{encode, TokenTable};
use editlab::neural::NeuralDenoiser;
use editlab::rng::RngStream;
use editlab::toyworld::{describe, render, AttributeSchema, Prototypes, SemanticTuple, ToyImage};
use std::path::Path;

fn main() {
    let schema = AttributeSchema::default_schema();
    let table = TokenTable::for_schema(&schema, 16, 99).unwrap();
    let schedule = NoiseSchedule::default_schedule();
    let protos = Prototypes::new(&schema);
    let model = NeuralDenoiser::load(Path::new(&std::env::args().nth(1).unwrap())).unwrap();
    let mut rng = RngStream::new(31, 7);
    for t in [950usize, 750, 400] {
        let mut hits = 0usize;
        let mut rms_sum = 0.0;
        let tuples: Vec<_> = schema.tuples().into_iter().step_by(11).collect();
        for tuple in &tuples {
            let (img, _) = render(&schema, tuple);
            let c = encode(&table, &describe(&schema, tuple)).unwrap();
            let z = rng.normal_tensor(&[768]);
            let eps = model.predict(&z, t, Some(&c)).unwrap();
            let x0 = predict_clean(&schedule, &z, t, &eps).unwrap();
            let out = ToyImage::from_latent_clamped(x0.data()).unwrap();
            let rms: f64 = (out.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 768.0).sqrt();
            rms_sum += rms;
            if protos.classify(&out) == *tuple { hits += 1; }
        }
        println!("paint-from-noise t={t}: classify {hits}/{}, mean rms vs prompt render {:.3}", tuples.len(), rms_sum / tuples.len() as f64);
    }
    // What does it paint? dump pixel stats of one case
    let tuple = SemanticTuple::new(vec![2, 2, 1, 1]);
    let c = encode(&table, &describe(&schema, &tuple)).unwrap();
    let z = rng.normal_tensor(&[768]);
    let eps = model.predict(&z, 900, Some(&c)).unwrap();
    let x0 = predict_clean(&schedule, &z, 900, &eps).unwrap();
    let mn = x0.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = x0.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = x0.data().iter().sum::<f64>() / 768.0;
    println!("x0 stats at t=900: min {mn:.3} max {mx:.3} mean {mean:.3}");
}

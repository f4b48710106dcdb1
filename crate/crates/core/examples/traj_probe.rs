use editlab::diffusion::{forward, predict_clean, reverse_bounded, LatentState, NoiseSchedule, Denoiser};
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
    let t = 150usize;
    let tuples: Vec<_> = schema.tuples().into_iter().step_by(7).collect();

    // One-shot x0 estimate from the raw conditional prediction.
    let mut rng = RngStream::new(99, 0);
    let mut exact = 0usize;
    let mut rms_sum = 0.0;
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
        if protos.classify(&out) == *tuple { exact += 1; }
    }
    println!("one-shot x0 at t={t}: exact {exact}/{}, mean rms {:.4}", tuples.len(), rms_sum / tuples.len() as f64);

    // Full reverse at several guidance scales with step counts.
    for (w, steps) in [(1.0, 50usize), (1.0, 10), (2.0, 50), (7.5, 50)] {
        let mut rng = RngStream::new(99, 0);
        let mut exact = 0usize;
        let mut rms_sum = 0.0;
        for tuple in &tuples {
            let (img, _) = render(&schema, tuple);
            let c = encode(&table, &describe(&schema, tuple)).unwrap();
            let z0 = Tensor::new(vec![768], img.to_latent()).unwrap();
            let zt = forward(&schedule, &LatentState::clean(z0), t, &mut rng).unwrap();
            let back = reverse_bounded(&model, &schedule, &zt, Some(&c), steps, w, Some((0.0, 1.0)), None).unwrap();
            let out = ToyImage::from_latent_clamped(back.z.data()).unwrap();
            let rms: f64 = (out.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 768.0).sqrt();
            rms_sum += rms;
            if protos.classify(&out) == *tuple { exact += 1; }
        }
        println!("reverse w={w} steps={steps}: exact {exact}/{}, mean rms {:.4}", tuples.len(), rms_sum / tuples.len() as f64);
    }
}

use editlab::diffusion::{forward, reverse_bounded, LatentState, NoiseSchedule};
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
    let t = 750usize;
    for w in [1.0, 2.0, 4.0, 7.5, 12.0] {
        let mut exact = 0usize;
        let mut attrs_ok = 0usize;
        let mut total = 0usize;
        let mut rng = RngStream::new(99, 0);
        for tuple in schema.tuples().into_iter().step_by(7) {
            let (img, _) = render(&schema, &tuple);
            let c = encode(&table, &describe(&schema, &tuple)).unwrap();
            let z0 = Tensor::new(vec![768], img.to_latent()).unwrap();
            let zt = forward(&schedule, &LatentState::clean(z0), t, &mut rng).unwrap();
            let back = reverse_bounded(&model, &schedule, &zt, Some(&c), 50, w, Some((0.0, 1.0)), None).unwrap();
            let out = ToyImage::from_latent_clamped(back.z.data()).unwrap();
            let decoded = protos.classify(&out);
            if decoded == tuple { exact += 1; }
            attrs_ok += (0..4).filter(|&a| decoded.values[a] == tuple.values[a]).count();
            total += 1;
        }
        println!("w={w}: exact {exact}/{total}, attr accuracy {:.3}", attrs_ok as f64 / (4 * total) as f64);
    }
}

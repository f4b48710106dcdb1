use editlab::diffusion::{forward_given, LatentState, NoiseSchedule, Denoiser};
use editlab::embed::TokenTable;
use editlab::neural::{pixel_dataset, NeuralDenoiser};
use editlab::rng::RngStream;
use editlab::tensor::Tensor;
use editlab::toyworld::AttributeSchema;
use std::path::Path;

fn main() {
    let schema = AttributeSchema::default_schema();
    let table = TokenTable::for_schema(&schema, 16, 99).unwrap();
    let schedule = NoiseSchedule::default_schedule();
    let model = NeuralDenoiser::load(Path::new("/tmp/lab_smoke/joint8k/model")).unwrap();
    let data = pixel_dataset(&schema, &table).unwrap();
    let mut rng = RngStream::new(123, 0);
    for &t in &[50usize, 150, 300, 500, 750, 950] {
        let mut mse_c = 0.0;
        let mut mse_u = 0.0;
        let mut n = 0.0;
        for (latent, emb) in data.iter().step_by(9) {
            let eps = rng.normal_tensor(&[latent.len()]);
            let clean = LatentState::clean(Tensor::new(vec![latent.len()], latent.clone()).unwrap());
            let zt = forward_given(&schedule, &clean, t, &eps).unwrap();
            for cond in [Some(emb), None] {
                let pred = model.predict(&zt.z, t, cond).unwrap();
                let m: f64 = pred.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / latent.len() as f64;
                if cond.is_some() { mse_c += m } else { mse_u += m }
            }
            n += 1.0;
        }
        println!("t={t}: cond mse {:.4}  uncond mse {:.4}", mse_c / n, mse_u / n);
    }
}

use mrlb_core::encoder::EncoderConfig;
use mrlb_core::mococore::{init_state, train_step, SgdHyper, TrainBatch};
use mrlb_core::rng::StreamKey;
use mrlb_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let config = EncoderConfig::toy();
    for &b in &[8usize, 16, 32] {
        let mut state = init_state(&config, 4096, 0.99, 0.07, b, 1).unwrap();
        let (h, w, c) = config.input_size;
        let mut rng = StreamKey::from_seed(9).stream();
        let n = b * c * h * w;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f32> = (0..n).map(|_| mrlb_core::rng::uniform_f32(rng, -1.0, 1.0)).collect();
            Tensor::new(vec![b, c, h, w], data).unwrap()
        };
        let batch = TrainBatch { view1: mk(&mut rng), view2: mk(&mut rng), sample_ids: (0..b as u64).collect() };
        // warmup
        train_step(&mut state, &batch, 0.05, &SgdHyper::default()).unwrap();
        let t0 = Instant::now();
        let iters = 12;
        for _ in 0..iters {
            train_step(&mut state, &batch, 0.05, &SgdHyper::default()).unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / iters as f64;
        println!("batch {b}: {:.1} ms/step -> 2000 steps = {:.1} min", per * 1e3, per * 2000.0 / 60.0);
    }
}

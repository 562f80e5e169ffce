use mrlb_core::autodiff::{apply_layer, backward, LayerSpec, Mode, Tape};
use mrlb_core::encoder::{encode, init_params, EncoderConfig};
use mrlb_core::mococore::infonce_loss;
use mrlb_core::rng::StreamKey;
use mrlb_core::tensor::Tensor;
use std::time::Instant;

fn timeit<F: FnMut()>(label: &str, iters: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..iters { f(); }
    println!("{label}: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

fn main() {
    let config = EncoderConfig::toy();
    let b = 16usize;
    let (h, w, c) = config.input_size;
    let mut rng = StreamKey::from_seed(9).stream();
    let data: Vec<f32> = (0..b*c*h*w).map(|_| mrlb_core::rng::uniform_f32(&mut rng, -1.0, 1.0)).collect();
    let batch = Tensor::new(vec![b, c, h, w], data).unwrap();
    let mut params = init_params::<f32>(&config, StreamKey::from_seed(1)).unwrap();

    timeit("encode fwd (no tape)", 10, || {
        let _ = encode(&config, &mut params, &batch, Mode::Train, None).unwrap();
    });
    timeit("encode fwd+tape", 10, || {
        let mut tape = Tape::new();
        let _ = encode(&config, &mut params, &batch, Mode::Train, Some(&mut tape)).unwrap();
    });
    timeit("fwd+tape+backward", 10, || {
        let mut tape = Tape::new();
        let q = encode(&config, &mut params, &batch, Mode::Train, Some(&mut tape)).unwrap();
        let d = q.shape()[1];
        let g = Tensor::ones(vec![b, d]);
        let loss = tape.record_scalar_loss(&q, 1.0, g).unwrap();
        let _ = backward(&tape, &loss).unwrap();
    });
    // infonce cost
    let qrows = {
        let mut t = Tensor::<f32>::zeros(vec![b, 64]);
        for r in 0..b { t.data_mut()[r*64] = 1.0; }
        t
    };
    let queue = {
        let mut t = Tensor::<f32>::zeros(vec![4096, 64]);
        for r in 0..4096 { t.data_mut()[r*64+1] = 1.0; }
        t
    };
    timeit("infonce 16x4096", 10, || {
        let _ = infonce_loss(&qrows, &qrows, &queue, 0.07).unwrap();
    });
    // single conv layer fwd
    let mut p2 = mrlb_core::autodiff::ParameterSet::<f32>::new();
    let wt = Tensor::new(vec![32, 16, 3, 3], vec![0.01f32; 32*16*9]).unwrap().with_grad(true);
    p2.set("c.weight", wt);
    let x2 = Tensor::new(vec![b, 16, 32, 16], vec![0.1f32; b*16*32*16]).unwrap();
    timeit("conv2 16->32 @32x16 fwd", 10, || {
        let _ = apply_layer(&LayerSpec::Conv2d{stride:1,padding:1}, &x2, &mut p2, "c", Mode::Train, None).unwrap();
    });
}

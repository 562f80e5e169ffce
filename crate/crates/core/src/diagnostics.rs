//! Gradient-check battery: every layer type individually plus the composed
//! encoder + InfoNCE path, all at f64 against central finite differences.

use crate::autodiff::{
    apply_layer, grad_check, BnKind, GradCheckReport, LayerSpec, Mode, ParameterSet, Tape,
};
use crate::encoder::{encode, init_params, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::mococore::infonce_loss;
use crate::rng::{standard_normal, StreamKey};
use crate::tensor::Tensor;

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn random_tensor(shape: Vec<usize>, key: StreamKey, scale: f64) -> Tensor<f64> {
    let mut rng = key.stream();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(&mut rng) * scale).collect();
    Tensor::new(shape, data).expect("diagnostic tensor shape")
}

fn unit_rows(rows: usize, d: usize, key: StreamKey) -> Tensor<f64> {
    let mut t = random_tensor(vec![rows, d], key, 1.0);
    let data = t.data_mut();
    for row in data.chunks_exact_mut(d) {
        let n = crate::tensor::l2_norm(row);
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Deterministic scalar head: a fixed weighted sum over the final tensor,
/// recorded on the tape with its closed-form gradient.
fn weighted_sum_loss(
    z: &Tensor<f64>,
    tape: Option<&mut Tape<f64>>,
) -> Result<Tensor<f64>> {
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(z.shape().to_vec());
    for (i, (&v, g)) in z.data().iter().zip(grad.data_mut().iter_mut()).enumerate() {
        let w = ((i % 7) as f64) * 0.25 - 0.75;
        loss += w * v;
        *g = w;
    }
    match tape {
        Some(t) => t.record_scalar_loss(z, loss, grad),
        None => Ok(Tensor::scalar(loss)),
    }
}

type LayerChain = Vec<(LayerSpec, &'static str)>;

/// Grad-check a chain of layers applied in sequence under the weighted-sum
/// head. Parameters flow through every layer's backward rule.
fn check_chain(
    name: &str,
    chain: LayerChain,
    params: ParameterSet<f64>,
    input: Tensor<f64>,
    mode: Mode,
) -> Result<(String, GradCheckReport)> {
    let program = move |p: &mut ParameterSet<f64>,
                        x: &Tensor<f64>,
                        mut tape: Option<&mut Tape<f64>>|
          -> Result<Tensor<f64>> {
        let mut z = x.clone();
        for (spec, prefix) in &chain {
            z = apply_layer(spec, &z, p, prefix, mode, tape.as_deref_mut())?;
        }
        weighted_sum_loss(&z, tape)
    };
    let report = grad_check(&program, &params, &input, GRAD_CHECK_TOLERANCE)?;
    Ok((name.to_string(), report))
}

fn dense_params(key: StreamKey, inp: usize, out: usize, prefix: &str) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.set(format!("{prefix}.weight"), random_tensor(vec![inp, out], key.child(0), 0.6).with_grad(true));
    p.set(format!("{prefix}.bias"), random_tensor(vec![out], key.child(1), 0.2).with_grad(true));
    p
}

fn conv_params(key: StreamKey, ci: usize, co: usize, prefix: &str) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.set(
        format!("{prefix}.weight"),
        random_tensor(vec![co, ci, 3, 3], key.child(0), 0.4).with_grad(true),
    );
    p.set(format!("{prefix}.bias"), random_tensor(vec![co], key.child(1), 0.2).with_grad(true));
    p
}

fn bn_params(key: StreamKey, channels: usize, prefix: &str) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.set(
        format!("{prefix}.gamma"),
        random_tensor(vec![channels], key.child(0), 0.3)
            .with_grad(true),
    );
    // Shift gamma away from zero so relative errors stay well-conditioned.
    if let Some(g) = p.get_mut(&format!("{prefix}.gamma")) {
        g.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    p.set(format!("{prefix}.beta"), random_tensor(vec![channels], key.child(1), 0.2).with_grad(true));
    p.set(format!("{prefix}.running_mean"), random_tensor(vec![channels], key.child(2), 0.1));
    p.set(format!("{prefix}.running_var"), {
        let mut v = random_tensor(vec![channels], key.child(3), 0.1);
        v.data_mut().iter_mut().for_each(|x| *x = 1.0 + x.abs());
        v
    });
    p
}

/// Per-layer checks. Layers without parameters are sandwiched behind a dense
/// or conv layer so their backward rule sits on the gradient path.
pub fn layer_grad_checks() -> Result<Vec<(String, GradCheckReport)>> {
    let key = StreamKey::from_seed(0xd1a6);
    let mut out = Vec::new();

    out.push(check_chain(
        "dense",
        vec![(LayerSpec::Dense, "fc")],
        dense_params(key.child(0), 5, 4, "fc"),
        random_tensor(vec![3, 5], key.child(100), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "conv2d_s1_p1",
        vec![(LayerSpec::Conv2d { stride: 1, padding: 1 }, "conv")],
        conv_params(key.child(1), 2, 3, "conv"),
        random_tensor(vec![2, 2, 5, 4], key.child(101), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "conv2d_s2_p0",
        vec![(LayerSpec::Conv2d { stride: 2, padding: 0 }, "conv")],
        conv_params(key.child(2), 2, 3, "conv"),
        random_tensor(vec![2, 2, 7, 5], key.child(102), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "relu",
        vec![(LayerSpec::Dense, "fc"), (LayerSpec::Relu, "")],
        dense_params(key.child(3), 6, 5, "fc"),
        random_tensor(vec![3, 6], key.child(103), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "batchnorm2d_train",
        vec![
            (LayerSpec::Conv2d { stride: 1, padding: 1 }, "conv"),
            (LayerSpec::BatchNorm2d { kind: BnKind::Batch }, "bn"),
        ],
        {
            let mut p = conv_params(key.child(4), 2, 3, "conv");
            for (name, tensor) in bn_params(key.child(5), 3, "bn").iter() {
                p.set(name.to_string(), tensor.clone());
            }
            p
        },
        random_tensor(vec![3, 2, 4, 4], key.child(104), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "batchnorm2d_eval",
        vec![
            (LayerSpec::Conv2d { stride: 1, padding: 1 }, "conv"),
            (LayerSpec::BatchNorm2d { kind: BnKind::Batch }, "bn"),
        ],
        {
            let mut p = conv_params(key.child(6), 2, 3, "conv");
            for (name, tensor) in bn_params(key.child(7), 3, "bn").iter() {
                p.set(name.to_string(), tensor.clone());
            }
            p
        },
        random_tensor(vec![3, 2, 4, 4], key.child(105), 1.0),
        Mode::Eval,
    )?);

    out.push(check_chain(
        "batchnorm2d_instance",
        vec![
            (LayerSpec::Conv2d { stride: 1, padding: 1 }, "conv"),
            (LayerSpec::BatchNorm2d { kind: BnKind::Instance }, "bn"),
        ],
        {
            let mut p = conv_params(key.child(8), 2, 3, "conv");
            for (name, tensor) in bn_params(key.child(9), 3, "bn").iter() {
                p.set(name.to_string(), tensor.clone());
            }
            p
        },
        random_tensor(vec![2, 2, 4, 4], key.child(106), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "avg_pool2d",
        vec![
            (LayerSpec::Conv2d { stride: 1, padding: 1 }, "conv"),
            (LayerSpec::AvgPool2d, ""),
        ],
        conv_params(key.child(10), 2, 3, "conv"),
        random_tensor(vec![2, 2, 6, 4], key.child(107), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "global_avg_pool",
        vec![
            (LayerSpec::Conv2d { stride: 1, padding: 1 }, "conv"),
            (LayerSpec::GlobalAvgPool, ""),
        ],
        conv_params(key.child(11), 2, 3, "conv"),
        random_tensor(vec![2, 2, 4, 4], key.child(108), 1.0),
        Mode::Train,
    )?);

    out.push(check_chain(
        "l2_normalize",
        vec![(LayerSpec::Dense, "fc"), (LayerSpec::L2Normalize, "")],
        dense_params(key.child(12), 6, 5, "fc"),
        random_tensor(vec![3, 6], key.child(109), 1.0),
        Mode::Train,
    )?);

    Ok(out)
}

/// Reduced encoder exercising every layer type, small enough to
/// finite-difference in seconds.
pub fn gradcheck_encoder_config() -> EncoderConfig {
    EncoderConfig {
        input_size: (16, 8, 3),
        block_channels: vec![4, 6],
        feature_dim: 6,
        embed_dim: 6,
        bn_kind: BnKind::Batch,
    }
}

/// Composed check: full encoder forward (with an inserted re-calibration BN)
/// into the InfoNCE loss against fixed keys and queue.
pub fn composed_encoder_infonce_check() -> Result<(String, GradCheckReport)> {
    let config = gradcheck_encoder_config();
    let key = StreamKey::from_seed(0xc0ffe);
    let params64: EncoderParams<f64> = {
        let mut p = init_params::<f64>(&config, key.child(0))?;
        crate::encoder::insert_recalibration_bn(&mut p, config.feature_dim)?;
        p
    };
    let flat = params64.flatten();
    let (h, w, c) = config.input_size;
    let batch = random_tensor(vec![2, c, h, w], key.child(1), 0.5);
    let k_pos = unit_rows(2, config.embed_dim, key.child(2));
    let queue = unit_rows(12, config.embed_dim, key.child(3));
    let tau = 0.07f64;

    let cfg = config.clone();
    let program = move |p: &mut ParameterSet<f64>,
                        x: &Tensor<f64>,
                        mut tape: Option<&mut Tape<f64>>|
          -> Result<Tensor<f64>> {
        let mut enc = EncoderParams::from_flat(p);
        let q = encode(&cfg, &mut enc, x, Mode::Train, tape.as_deref_mut())?;
        let out = infonce_loss(&q, &k_pos, &queue, tau)?;
        match tape {
            Some(t) => t.record_scalar_loss(&q, out.loss, out.grad_q),
            None => Ok(Tensor::scalar(out.loss)),
        }
    };
    // Exercise once to make sure the forward is well-formed.
    let _ = program(&mut params64.flatten(), &batch, None)?;
    let report = grad_check(&program, &flat, &batch, GRAD_CHECK_TOLERANCE)?;
    Ok(("encoder_infonce_composed".to_string(), report))
}

/// The full battery: per-layer checks plus the composed check.
pub fn run_gradcheck_suite() -> Result<Vec<(String, GradCheckReport)>> {
    let mut all = layer_grad_checks()?;
    all.push(composed_encoder_infonce_check()?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for (name, report) in layer_grad_checks().unwrap() {
            assert!(
                report.pass,
                "{name}: max rel err {} at {:?}",
                report.max_relative_error, report.worst_parameter
            );
        }
    }

    #[test]
    fn composed_encoder_infonce_passes() {
        let (name, report) = composed_encoder_infonce_check().unwrap();
        assert!(
            report.pass,
            "{name}: max rel err {} at {:?}",
            report.max_relative_error, report.worst_parameter
        );
        assert!(report.num_elements_checked > 400);
    }
}

//! Momentum-contrast state machine: InfoNCE loss against a negative-key
//! queue, EMA key-encoder updates, FIFO queue maintenance, and the
//! end-to-end training step.

use crate::autodiff::{backward, sgd_update, Mode, ParameterSet, Tape};
use crate::encoder::{encode, init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamKey};
use crate::tensor::{dot, l2_norm, Scalar, Tensor};

/// Row-norm guard for loss inputs; unit-norm rows drift by at most f32
/// rounding, anything beyond this is a caller bug.
pub const UNIT_ROW_TOL: f64 = 1e-3;

/// Complete learner state.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub config: EncoderConfig,
    pub query_params: EncoderParams<f32>,
    pub key_params: EncoderParams<f32>,
    /// Negative-key queue, `[K, embed_dim]`, unit-norm rows.
    pub queue: Tensor<f32>,
    /// Next write position; always `< K` and a multiple of `batch_size`.
    pub cursor: usize,
    pub momentum: f32,
    pub temperature: f32,
    pub step: u64,
    pub batch_size: usize,
    /// SGD momentum buffers for the query encoder.
    pub optimizer_state: ParameterSet<f32>,
}

/// One training batch: two augmented views of the same samples.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub sample_ids: Vec<u64>,
}

impl TrainBatch {
    pub fn validate(&self) -> Result<()> {
        if self.view1.shape() != self.view2.shape() {
            return Err(Error::shape(
                "train batch",
                format!("view1 {:?} vs view2 {:?}", self.view1.shape(), self.view2.shape()),
            ));
        }
        if self.view1.ndim() != 4 || self.view1.shape()[0] < 2 {
            return Err(Error::invalid("train batch", "batch size must be >= 2"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.view1.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdHyper {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper { momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss: f32,
    pub positive_logit_mean: f32,
    pub negative_logit_mean: f32,
}

/// Fresh state: key encoder is an exact copy of the query encoder, the
/// queue holds random unit-norm rows, cursor at zero.
pub fn init_state(
    config: &EncoderConfig,
    k: usize,
    momentum: f32,
    temperature: f32,
    batch_size: usize,
    seed: u64,
) -> Result<MoCoState> {
    config.validate()?;
    if batch_size < 2 {
        return Err(Error::invalid("init_state", "batch size must be >= 2"));
    }
    if k < batch_size || k % batch_size != 0 {
        return Err(Error::QueueDivisibility { queue: k, batch: batch_size });
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid("init_state", format!("momentum {momentum} outside [0, 1]")));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("init_state", format!("temperature {temperature} must be > 0")));
    }
    let key = StreamKey::from_seed(seed);
    let query_params = init_params::<f32>(config, key.child(0))?;
    let key_params = query_params.clone();

    let d = config.embed_dim;
    let mut rng = key.child(1).stream();
    let mut queue = vec![0.0f32; k * d];
    for row in queue.chunks_exact_mut(d) {
        for v in row.iter_mut() {
            *v = standard_normal(&mut rng) as f32;
        }
        let norm = l2_norm(row).max(f32::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v /= norm);
    }

    Ok(MoCoState {
        config: config.clone(),
        query_params,
        key_params,
        queue: Tensor::new(vec![k, d], queue)?,
        cursor: 0,
        momentum,
        temperature,
        step: 0,
        batch_size,
        optimizer_state: ParameterSet::new(),
    })
}

fn check_unit_rows<F: Scalar>(t: &Tensor<F>, what: &str) -> Result<()> {
    let d = t.shape()[1];
    for (i, row) in t.data().chunks_exact(d).enumerate() {
        let norm = l2_norm(row).to_real();
        if (norm - 1.0).abs() > UNIT_ROW_TOL {
            return Err(Error::invalid(
                "infonce_loss",
                format!("{what} row {i} has norm {norm}, expected 1"),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput<F: Scalar> {
    pub loss: F,
    /// Gradient of the mean loss with respect to `q`; the positive keys and
    /// the queue are constants for the gradient.
    pub grad_q: Tensor<F>,
    pub positive_logit_mean: F,
    pub negative_logit_mean: F,
}

/// InfoNCE over unit-norm rows: softmax of `q.k/tau` with the positive key
/// in slot 0 and the queue as negatives, averaged over the batch. Logits are
/// max-subtracted before exponentiation.
pub fn infonce_loss<F: Scalar>(
    q: &Tensor<F>,
    k_pos: &Tensor<F>,
    queue: &Tensor<F>,
    temperature: F,
) -> Result<InfoNceOutput<F>> {
    if temperature <= F::zero() {
        return Err(Error::invalid("infonce_loss", "temperature must be > 0"));
    }
    if q.ndim() != 2 || q.shape() != k_pos.shape() {
        return Err(Error::shape(
            "infonce_loss",
            format!("q {:?} vs k_pos {:?}", q.shape(), k_pos.shape()),
        ));
    }
    if queue.ndim() != 2 || queue.shape()[1] != q.shape()[1] {
        return Err(Error::shape(
            "infonce_loss",
            format!("queue {:?} vs embeddings dim {}", queue.shape(), q.shape()[1]),
        ));
    }
    check_unit_rows(q, "q")?;
    check_unit_rows(k_pos, "k_pos")?;
    check_unit_rows(queue, "queue")?;

    let (b, d) = (q.shape()[0], q.shape()[1]);
    let k_n = queue.shape()[0];
    let inv_tau = temperature.recip();
    let inv_b = F::from_real(1.0 / b as f64);

    let mut total_loss = F::zero();
    let mut pos_logit_sum = F::zero();
    let mut neg_logit_sum = F::zero();
    let mut grad = vec![F::zero(); b * d];
    let mut neg_logits = vec![F::zero(); k_n];

    for i in 0..b {
        let q_row = q.row(i);
        let l_pos = dot(q_row, k_pos.row(i)) * inv_tau;
        let mut max_logit = l_pos;
        for (j, slot) in neg_logits.iter_mut().enumerate() {
            let l = dot(q_row, queue.row(j)) * inv_tau;
            *slot = l;
            if l > max_logit {
                max_logit = l;
            }
            neg_logit_sum = neg_logit_sum + l;
        }
        pos_logit_sum = pos_logit_sum + l_pos;

        let e_pos = (l_pos - max_logit).exp();
        let mut denom = e_pos;
        for &l in neg_logits.iter() {
            denom = denom + (l - max_logit).exp();
        }
        total_loss = total_loss - (l_pos - max_logit - denom.ln());

        // dL_i/dq = [(p_pos - 1) k+ + sum_j p_j k_j^-] / (tau * B)
        let scale = inv_tau * inv_b;
        let p_pos = e_pos / denom;
        let g_row = &mut grad[i * d..(i + 1) * d];
        let w_pos = (p_pos - F::one()) * scale;
        for (g, &kv) in g_row.iter_mut().zip(k_pos.row(i)) {
            *g = w_pos * kv;
        }
        for (j, &l) in neg_logits.iter().enumerate() {
            let w = (l - max_logit).exp() / denom * scale;
            for (g, &nv) in g_row.iter_mut().zip(queue.row(j)) {
                *g = *g + w * nv;
            }
        }
    }

    Ok(InfoNceOutput {
        loss: total_loss * inv_b,
        grad_q: Tensor::new(vec![b, d], grad)?,
        positive_logit_mean: pos_logit_sum * inv_b,
        negative_logit_mean: neg_logit_sum * F::from_real(1.0 / (b * k_n) as f64),
    })
}

/// EMA update `theta_k <- m * theta_k + (1 - m) * theta_q`, elementwise over
/// matching names.
pub fn momentum_update<F: Scalar>(
    theta_k: &mut ParameterSet<F>,
    theta_q: &ParameterSet<F>,
    m: F,
) -> Result<()> {
    if m < F::zero() || m > F::one() {
        return Err(Error::invalid("momentum_update", format!("momentum {m:?} outside [0, 1]")));
    }
    theta_k.check_aligned(theta_q, "momentum_update")?;
    let one_minus = F::one() - m;
    for ((_, k_t), (_, q_t)) in theta_k.iter_mut().zip(theta_q.iter()) {
        for (kv, &qv) in k_t.data_mut().iter_mut().zip(q_t.data()) {
            *kv = m * *kv + one_minus * qv;
        }
    }
    Ok(())
}

fn momentum_update_encoder(
    theta_k: &mut EncoderParams<f32>,
    theta_q: &EncoderParams<f32>,
    m: f32,
) -> Result<()> {
    let mut flat_k = theta_k.flatten();
    momentum_update(&mut flat_k, &theta_q.flatten(), m)?;
    *theta_k = EncoderParams::from_flat(&flat_k);
    Ok(())
}

/// Replace queue rows `[cursor, cursor + B)` with `keys` and advance the
/// cursor modulo K. Rows are replaced FIFO over whole epochs because K is a
/// multiple of the batch size.
pub fn enqueue(state: &mut MoCoState, keys: &Tensor<f32>) -> Result<()> {
    let d = state.config.embed_dim;
    if keys.ndim() != 2 || keys.shape()[1] != d {
        return Err(Error::shape("enqueue", format!("keys {:?}, want [B, {d}]", keys.shape())));
    }
    let b = keys.shape()[0];
    if b != state.batch_size {
        return Err(Error::invalid(
            "enqueue",
            format!("keys batch {b} != configured batch size {}", state.batch_size),
        ));
    }
    check_unit_rows(keys, "keys")?;
    let k_n = state.queue.shape()[0];
    let start = state.cursor * d;
    state.queue.data_mut()[start..start + b * d].copy_from_slice(keys.data());
    state.cursor = (state.cursor + b) % k_n;
    Ok(())
}

/// One end-to-end training step. Order of effects is fixed:
/// query forward (taped) -> key forward (detached) -> InfoNCE against the
/// current queue -> backward + SGD on the query encoder -> EMA of the key
/// encoder -> enqueue keys -> step counter.
pub fn train_step(
    state: &mut MoCoState,
    batch: &TrainBatch,
    lr: f32,
    sgd: &SgdHyper,
) -> Result<StepMetrics> {
    batch.validate()?;
    if batch.batch_size() != state.batch_size {
        return Err(Error::invalid(
            "train_step",
            format!("batch size {} != configured {}", batch.batch_size(), state.batch_size),
        ));
    }

    // (1) Query forward with tape.
    let mut tape = Tape::new();
    let q = encode(&state.config, &mut state.query_params, &batch.view1, Mode::Train, Some(&mut tape))?;

    // (2) Key forward, detached: no tape, and batch-norm running-stat
    // updates land in a discarded clone (key stats track the query encoder
    // through the EMA instead).
    let k = {
        let mut key_params = state.key_params.clone();
        encode(&state.config, &mut key_params, &batch.view2, Mode::Train, None)?
    };

    // (3) Loss against the current queue.
    let out = infonce_loss(&q, &k, &state.queue, state.temperature)?;
    let loss_node = tape.record_scalar_loss(&q, out.loss, out.grad_q.clone())?;

    // (4) Backward + SGD on the query encoder.
    let grads = backward(&tape, &loss_node)?;
    let mut flat_q = state.query_params.flatten();
    sgd_update(&mut flat_q, &grads, lr, sgd.weight_decay, sgd.momentum, &mut state.optimizer_state)?;
    state.query_params = EncoderParams::from_flat(&flat_q);

    // (5) EMA key-encoder update.
    momentum_update_encoder(&mut state.key_params, &state.query_params, state.momentum)?;

    // (6) Enqueue the new keys; (7) advance the step counter.
    enqueue(state, &k)?;
    state.step += 1;

    Ok(StepMetrics {
        loss: out.loss,
        positive_logit_mean: out.positive_logit_mean,
        negative_logit_mean: out.negative_logit_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BnKind;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            input_size: (8, 4, 3),
            block_channels: vec![4],
            feature_dim: 4,
            embed_dim: 8,
            bn_kind: BnKind::Batch,
        }
    }

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = StreamKey::from_seed(seed).stream();
        let mut data = vec![0.0f64; rows * d];
        for row in data.chunks_exact_mut(d) {
            for v in row.iter_mut() {
                *v = standard_normal(&mut rng);
            }
            let n = l2_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Tensor::new(vec![rows, d], data).unwrap()
    }

    #[test]
    fn init_copies_key_from_query_and_normalizes_queue() {
        let config = tiny_config();
        let state = init_state(&config, 8, 0.99, 0.07, 2, 7).unwrap();
        assert_eq!(state.query_params, state.key_params);
        for row in state.queue.data().chunks_exact(config.embed_dim) {
            assert!((l2_norm(row) - 1.0).abs() < 1e-5);
        }
        assert_eq!(state.cursor, 0);
        let again = init_state(&config, 8, 0.99, 0.07, 2, 7).unwrap();
        assert_eq!(state.queue.data(), again.queue.data());
    }

    #[test]
    fn init_enforces_divisibility() {
        let config = tiny_config();
        let err = init_state(&config, 7, 0.99, 0.07, 2, 7).unwrap_err();
        assert!(err.to_string().contains('7') && err.to_string().contains('2'));
        assert!(init_state(&config, 2, 0.99, 0.07, 4, 7).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k_plus_one() {
        // q.k+ equal to every negative dot: all logits coincide.
        let d = 4;
        let q = Tensor::new(vec![1, d], vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let k_pos = Tensor::new(vec![1, d], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut queuecols = vec![0.0f64; 5 * d];
        for row in queuecols_rows(&mut queuecols, d) {
            row[1] = 1.0;
        }
        let queue = Tensor::new(vec![5, d], queuecols).unwrap();
        for tau in [0.07f64, 1.0, 3.0] {
            let out = infonce_loss(&q, &k_pos, &queue, tau).unwrap();
            assert!((out.loss - 6.0f64.ln()).abs() < 1e-12, "tau {tau}: {}", out.loss);
        }
    }

    fn queuecols_rows(data: &mut [f64], d: usize) -> impl Iterator<Item = &mut [f64]> {
        data.chunks_exact_mut(d)
    }

    #[test]
    fn orthogonal_negatives_frozen_value() {
        // B=1, q = k+, two negatives orthogonal to q, tau = 1:
        // loss = -log(e / (e + 2)) = 0.551444713932051 (30-digit softmax).
        let q = Tensor::new(vec![1, 3], vec![1.0f64, 0.0, 0.0]).unwrap();
        let k_pos = q.clone();
        let queue =
            Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = infonce_loss(&q, &k_pos, &queue, 1.0).unwrap();
        assert!((out.loss - 0.551444713932051).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn sharp_temperature_frozen_value() {
        // q.k+ = 1, one negative at 0, tau = 0.07:
        // loss = log(1 + exp(-1/0.07)) = 6.24874755712038e-7.
        let q = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let k_pos = q.clone();
        let queue = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let out = infonce_loss(&q, &k_pos, &queue, 0.07).unwrap();
        assert!((out.loss - 6.24874755712038e-7).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let q = unit_rows(2, 4, 1);
        let k = unit_rows(2, 4, 2);
        let queue = unit_rows(3, 4, 3);
        assert!(infonce_loss(&q, &k, &queue, 0.0).is_err());
        assert!(infonce_loss(&q, &k, &queue, -0.1).is_err());
        let mut bad = q.clone();
        bad.data_mut()[0] += 0.5;
        assert!(infonce_loss(&bad, &k, &queue, 0.1).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (b, d, k_n) = (3, 6, 10);
        let q = unit_rows(b, d, 4);
        let k_pos = unit_rows(b, d, 5);
        let queue = unit_rows(k_n, d, 6);
        let tau = 0.2f64;
        let out = infonce_loss(&q, &k_pos, &queue, tau).unwrap();
        let h = 1e-6;
        let mut max_err = 0.0f64;
        for i in 0..b * d {
            let mut plus = q.clone();
            plus.data_mut()[i] += h;
            let mut minus = q.clone();
            minus.data_mut()[i] -= h;
            let lp = infonce_loss(&plus, &k_pos, &queue, tau).unwrap().loss;
            let lm = infonce_loss(&minus, &k_pos, &queue, tau).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let ad = out.grad_q.data()[i];
            let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-4, "max rel err {max_err}");
    }

    #[test]
    fn loss_is_queue_permutation_invariant() {
        let q = unit_rows(2, 5, 7);
        let k_pos = unit_rows(2, 5, 8);
        let queue = unit_rows(6, 5, 9);
        let base = infonce_loss(&q, &k_pos, &queue, 0.1).unwrap().loss;
        // Reverse the queue rows.
        let d = 5;
        let mut rev = vec![0.0f64; 6 * d];
        for i in 0..6 {
            rev[i * d..(i + 1) * d].copy_from_slice(queue.row(5 - i));
        }
        let permuted = Tensor::new(vec![6, d], rev).unwrap();
        let loss = infonce_loss(&q, &k_pos, &permuted, 0.1).unwrap().loss;
        assert!((base - loss).abs() < 1e-12);
    }

    #[test]
    fn loss_monotone_in_positive_and_negative_similarity() {
        let d = 3;
        let neg = Tensor::new(vec![1, d], vec![0.0f64, 0.0, 1.0]).unwrap();
        let q = Tensor::new(vec![1, d], vec![1.0f64, 0.0, 0.0]).unwrap();
        let mut prev = f64::INFINITY;
        for ang in [1.2f64, 0.8, 0.4, 0.0] {
            let k = Tensor::new(vec![1, d], vec![ang.cos(), ang.sin(), 0.0]).unwrap();
            let loss = infonce_loss(&q, &k, &neg, 0.3).unwrap().loss;
            assert!(loss < prev, "loss must strictly decrease as q.k+ grows");
            prev = loss;
        }
        // Raising a negative similarity raises the loss.
        let k = Tensor::new(vec![1, d], vec![1.0f64, 0.0, 0.0]).unwrap();
        let mut prev = -f64::INFINITY;
        for ang in [1.2f64, 0.8, 0.4, 0.0] {
            let n = Tensor::new(vec![1, d], vec![ang.cos(), 0.0, ang.sin()]).unwrap();
            let loss = infonce_loss(&q, &k, &n, 0.3).unwrap().loss;
            assert!(loss > prev, "loss must strictly increase as q.k- grows");
            prev = loss;
        }
    }

    #[test]
    fn huge_temperature_approaches_uniform() {
        let q = unit_rows(2, 8, 10);
        let k_pos = unit_rows(2, 8, 11);
        let queue = unit_rows(16, 8, 12);
        let out = infonce_loss(&q, &k_pos, &queue, 1e3).unwrap();
        assert!((out.loss - 17.0f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn momentum_update_boundaries_and_recursion() {
        let mut k = ParameterSet::<f64>::new();
        k.set("w", Tensor::scalar(0.0));
        let mut q = ParameterSet::<f64>::new();
        q.set("w", Tensor::scalar(1.0));

        let mut frozen = k.clone();
        momentum_update(&mut frozen, &q, 1.0).unwrap();
        assert_eq!(frozen.get("w").unwrap().item().unwrap(), 0.0);

        let mut copied = k.clone();
        momentum_update(&mut copied, &q, 0.0).unwrap();
        assert_eq!(copied.get("w").unwrap().item().unwrap(), 1.0);

        momentum_update(&mut k, &q, 0.9).unwrap();
        momentum_update(&mut k, &q, 0.9).unwrap();
        assert!((k.get("w").unwrap().item().unwrap() - 0.19).abs() < 1e-12);
    }

    #[test]
    fn momentum_update_rejects_mismatch() {
        let mut k = ParameterSet::<f64>::new();
        k.set("w", Tensor::scalar(0.0));
        let mut q = ParameterSet::<f64>::new();
        q.set("other", Tensor::scalar(1.0));
        assert!(momentum_update(&mut k, &q, 0.9).is_err());
    }

    #[test]
    fn enqueue_fifo_and_wraparound() {
        let config = tiny_config();
        let mut state = init_state(&config, 4, 0.9, 0.1, 2, 20).unwrap();
        let original = state.queue.clone();
        let d = config.embed_dim;
        let keys = unit_rows(2, d, 21).cast::<f32>();
        enqueue(&mut state, &keys).unwrap();
        assert_eq!(state.cursor, 2);
        assert_eq!(&state.queue.data()[..2 * d], keys.data());
        assert_eq!(&state.queue.data()[2 * d..], &original.data()[2 * d..]);
        // One more enqueue replaces the tail and wraps the cursor.
        let keys2 = unit_rows(2, d, 22).cast::<f32>();
        enqueue(&mut state, &keys2).unwrap();
        assert_eq!(state.cursor, 0);
        assert_eq!(&state.queue.data()[2 * d..], keys2.data());
        // Wrong batch size is rejected.
        let bad = unit_rows(3, d, 23).cast::<f32>();
        assert!(enqueue(&mut state, &bad).is_err());
    }

    fn synthetic_batch(config: &EncoderConfig, b: usize, seed: u64) -> TrainBatch {
        let (h, w, c) = config.input_size;
        let mut rng = StreamKey::from_seed(seed).stream();
        let n = b * c * h * w;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f32> =
                (0..n).map(|_| crate::rng::uniform_f32(rng, -1.0, 1.0)).collect();
            Tensor::new(vec![b, c, h, w], data).unwrap()
        };
        TrainBatch { view1: mk(&mut rng), view2: mk(&mut rng), sample_ids: (0..b as u64).collect() }
    }

    #[test]
    fn train_step_applies_ema_exactly() {
        let config = tiny_config();
        let mut state = init_state(&config, 8, 0.95, 0.07, 2, 30).unwrap();
        let batch = synthetic_batch(&config, 2, 31);
        let k_old = state.key_params.flatten();
        let metrics = train_step(&mut state, &batch, 0.05, &SgdHyper::default()).unwrap();
        assert!(metrics.loss.is_finite() && metrics.loss > 0.0);
        let q_new = state.query_params.flatten();
        let k_new = state.key_params.flatten();
        for ((name, old), (_, new)) in k_old.iter().zip(k_new.iter()) {
            let q = q_new.get(name).unwrap();
            for ((&o, &n), &qv) in old.data().iter().zip(new.data()).zip(q.data()) {
                let expect = 0.95f64 * o as f64 + 0.05f64 * qv as f64;
                assert!((n as f64 - expect).abs() < 1e-6, "{name}");
            }
        }
        assert_eq!(state.step, 1);
        assert_eq!(state.cursor, 2);
    }

    #[test]
    fn train_is_deterministic_over_ten_steps() {
        let config = tiny_config();
        let run = || {
            let mut state = init_state(&config, 8, 0.9, 0.07, 2, 40).unwrap();
            for s in 0..10 {
                let batch = synthetic_batch(&config, 2, 100 + s);
                train_step(&mut state, &batch, 0.05, &SgdHyper::default()).unwrap();
            }
            state
        };
        let a = run();
        let b = run();
        assert_eq!(a.query_params.flatten(), b.query_params.flatten());
        assert_eq!(a.key_params.flatten(), b.key_params.flatten());
        assert_eq!(a.queue.data(), b.queue.data());
        assert_eq!(a.cursor, b.cursor);
        assert_eq!(a.step, b.step);
    }

    #[test]
    fn queue_rows_stay_unit_norm_across_steps() {
        let config = tiny_config();
        let mut state = init_state(&config, 4, 0.9, 0.07, 2, 50).unwrap();
        for s in 0..6 {
            let batch = synthetic_batch(&config, 2, 200 + s);
            train_step(&mut state, &batch, 0.05, &SgdHyper::default()).unwrap();
        }
        for row in state.queue.data().chunks_exact(config.embed_dim) {
            assert!((l2_norm(row) - 1.0).abs() < 1e-5);
        }
    }
}

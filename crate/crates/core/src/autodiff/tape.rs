//! Wengert tape: operations recorded during the forward pass are replayed in
//! reverse to accumulate gradients.
//!
//! Values (inputs, parameter snapshots, intermediates) live in an arena;
//! parameters are registered by name on first use and their gradients are
//! collected into a [`ParameterSet`] by [`backward`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::layers::{self, BnCtx, BnKind, LayerSpec, Mode};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

pub(crate) enum RecordedOp<F: Scalar> {
    Dense { input: usize, weight: usize, bias: Option<usize> },
    Conv2d { input: usize, weight: usize, bias: Option<usize>, stride: usize, padding: usize },
    Relu { input: usize },
    BatchNorm { input: usize, gamma: usize, beta: usize, ctx: BnCtx<F> },
    AvgPool2d { input: usize },
    GlobalAvgPool { input: usize },
    L2Normalize { input: usize, norms: Vec<F>, clamped: Vec<bool> },
    /// Scalar produced from one input with a precomputed input gradient
    /// (used by loss heads whose gradient is known in closed form).
    ScalarLoss { input: usize, grad: Tensor<F> },
}

struct TapeEntry<F: Scalar> {
    op: RecordedOp<F>,
    output: usize,
}

/// Append-only record of executed differentiable operations. Entries are in
/// execution order, which is a valid topological order by construction.
pub struct Tape<F: Scalar> {
    uid: u64,
    values: Vec<Tensor<F>>,
    wants_grad: Vec<bool>,
    entries: Vec<TapeEntry<F>>,
    params: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            wants_grad: Vec::new(),
            entries: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    fn push_value(&mut self, value: Tensor<F>, wants_grad: bool) -> usize {
        self.values.push(value);
        self.wants_grad.push(wants_grad);
        self.values.len() - 1
    }

    /// Arena slot for an input tensor: reuse its node when it came from this
    /// tape, otherwise intern a detached snapshot as a leaf.
    fn resolve_input(&mut self, t: &Tensor<F>) -> usize {
        match t.node {
            Some(id) if id.tape == self.uid => id.index,
            _ => self.push_value(t.detached(), t.grad_enabled()),
        }
    }

    /// Register a named parameter, snapshotting its current value on first
    /// use within this tape.
    fn resolve_param(&mut self, name: &str, t: &Tensor<F>) -> usize {
        if let Some(&idx) = self.params.get(name) {
            return idx;
        }
        let idx = self.push_value(t.detached(), t.grad_enabled());
        self.params.insert(name.to_string(), idx);
        idx
    }

    fn record(&mut self, op: RecordedOp<F>, mut output: Tensor<F>) -> Tensor<F> {
        let idx = self.push_value(output.detached(), true);
        self.entries.push(TapeEntry { op, output: idx });
        output.node = Some(NodeId { tape: self.uid, index: idx });
        output
    }

    /// Record a scalar loss whose gradient with respect to `input` was
    /// computed in closed form during the forward pass.
    pub fn record_scalar_loss(
        &mut self,
        input: &Tensor<F>,
        loss: F,
        grad_wrt_input: Tensor<F>,
    ) -> Result<Tensor<F>> {
        if grad_wrt_input.shape() != input.shape() {
            return Err(Error::shape(
                "scalar loss",
                format!("grad {:?} vs input {:?}", grad_wrt_input.shape(), input.shape()),
            ));
        }
        let input_idx = self.resolve_input(input);
        let out = Tensor::scalar(loss);
        Ok(self.record(RecordedOp::ScalarLoss { input: input_idx, grad: grad_wrt_input }, out))
    }
}

fn pname(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Apply one layer. Parameters are looked up under `prefix` in `params`
/// (`weight`, `bias`, `gamma`, ...). When `tape` is provided the operation is
/// recorded for [`backward`]; the input tensor itself is never mutated, but
/// batch normalization updates its running statistics in `Train` mode.
pub fn apply_layer<F: Scalar>(
    spec: &LayerSpec,
    input: &Tensor<F>,
    params: &mut ParameterSet<F>,
    prefix: &str,
    mode: Mode,
    tape: Option<&mut Tape<F>>,
) -> Result<Tensor<F>> {
    if input.is_empty() {
        return Err(Error::shape(spec.name(), "empty input tensor".to_string()));
    }
    input.ensure_finite(spec.name())?;

    let output = match *spec {
        LayerSpec::Dense => {
            let wname = pname(prefix, "weight");
            let bname = pname(prefix, "bias");
            let w = params.require(&wname, "dense")?.clone();
            let b = params.get(&bname).cloned();
            let out = layers::dense_forward(input, &w, b.as_ref())?;
            match tape {
                Some(tape) => {
                    let i = tape.resolve_input(input);
                    let wi = tape.resolve_param(&wname, &w);
                    let bi = b.as_ref().map(|b| tape.resolve_param(&bname, b));
                    tape.record(RecordedOp::Dense { input: i, weight: wi, bias: bi }, out)
                }
                None => out,
            }
        }
        LayerSpec::Conv2d { stride, padding } => {
            let wname = pname(prefix, "weight");
            let bname = pname(prefix, "bias");
            let w = params.require(&wname, "conv2d")?.clone();
            let b = params.get(&bname).cloned();
            let out = layers::conv2d_forward(input, &w, b.as_ref(), stride, padding)?;
            match tape {
                Some(tape) => {
                    let i = tape.resolve_input(input);
                    let wi = tape.resolve_param(&wname, &w);
                    let bi = b.as_ref().map(|b| tape.resolve_param(&bname, b));
                    tape.record(
                        RecordedOp::Conv2d { input: i, weight: wi, bias: bi, stride, padding },
                        out,
                    )
                }
                None => out,
            }
        }
        LayerSpec::Relu => {
            let out = layers::relu_forward(input);
            match tape {
                Some(tape) => {
                    let i = tape.resolve_input(input);
                    tape.record(RecordedOp::Relu { input: i }, out)
                }
                None => out,
            }
        }
        LayerSpec::BatchNorm2d { kind } => {
            apply_batchnorm(input, params, prefix, mode, kind, tape)?
        }
        LayerSpec::AvgPool2d => {
            let out = layers::avg_pool2d_forward(input)?;
            match tape {
                Some(tape) => {
                    let i = tape.resolve_input(input);
                    tape.record(RecordedOp::AvgPool2d { input: i }, out)
                }
                None => out,
            }
        }
        LayerSpec::GlobalAvgPool => {
            let out = layers::global_avg_pool_forward(input)?;
            match tape {
                Some(tape) => {
                    let i = tape.resolve_input(input);
                    tape.record(RecordedOp::GlobalAvgPool { input: i }, out)
                }
                None => out,
            }
        }
        LayerSpec::L2Normalize => {
            let fwd = layers::l2_normalize_forward(input)?;
            match tape {
                Some(tape) => {
                    let i = tape.resolve_input(input);
                    tape.record(
                        RecordedOp::L2Normalize { input: i, norms: fwd.norms, clamped: fwd.clamped },
                        fwd.output,
                    )
                }
                None => fwd.output,
            }
        }
    };

    output.ensure_finite(spec.name())?;
    Ok(output)
}

fn apply_batchnorm<F: Scalar>(
    input: &Tensor<F>,
    params: &mut ParameterSet<F>,
    prefix: &str,
    mode: Mode,
    kind: BnKind,
    tape: Option<&mut Tape<F>>,
) -> Result<Tensor<F>> {
    let gname = pname(prefix, "gamma");
    let bname = pname(prefix, "beta");
    let rmname = pname(prefix, "running_mean");
    let rvname = pname(prefix, "running_var");
    let gamma = params.require(&gname, "batchnorm2d")?.clone();
    let beta = params.require(&bname, "batchnorm2d")?.clone();
    let rm = params.require(&rmname, "batchnorm2d")?.clone();
    let rv = params.require(&rvname, "batchnorm2d")?.clone();

    let fwd = layers::batchnorm_forward(input, &gamma, &beta, &rm, &rv, mode, kind)?;

    if let Some((new_mean, new_var)) = fwd.new_running {
        let shape = vec![gamma.len()];
        let was_grad = rm.grad_enabled();
        params.set(&rmname, Tensor::new(shape.clone(), new_mean)?.with_grad(was_grad));
        params.set(&rvname, Tensor::new(shape, new_var)?.with_grad(rv.grad_enabled()));
    }

    match tape {
        Some(tape) => {
            let i = tape.resolve_input(input);
            let gi = tape.resolve_param(&gname, &gamma);
            let bi = tape.resolve_param(&bname, &beta);
            Ok(tape.record(
                RecordedOp::BatchNorm { input: i, gamma: gi, beta: bi, ctx: fwd.ctx },
                fwd.output,
            ))
        }
        None => Ok(fwd.output),
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, grad: Tensor<F>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Reverse pass. `loss` must be a scalar produced through operations recorded
/// on `tape`. Returns a gradient for every grad-enabled registered parameter;
/// parameters not on the path to the loss receive zero gradients.
pub fn backward<F: Scalar>(tape: &Tape<F>, loss: &Tensor<F>) -> Result<ParameterSet<F>> {
    if tape.entries.is_empty() {
        return Err(Error::Tape("empty tape".into()));
    }
    let loss_idx = match loss.node {
        Some(id) if id.tape == tape.uid => id.index,
        _ => return Err(Error::Tape("loss was not produced by this tape".into())),
    };
    if loss.len() != 1 {
        return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", loss.shape())));
    }

    let mut grads: Vec<Option<Tensor<F>>> = (0..tape.values.len()).map(|_| None).collect();
    grads[loss_idx] = Some({
        let mut seed = Tensor::zeros(tape.values[loss_idx].shape().to_vec());
        seed.data_mut()[0] = F::one();
        seed
    });

    for entry in tape.entries.iter().rev() {
        let dy = match grads[entry.output].take() {
            Some(g) => g,
            None => continue,
        };
        let values = &tape.values;
        let wants = |idx: usize| tape.wants_grad[idx];
        match &entry.op {
            RecordedOp::Dense { input, weight, bias } => {
                let g = layers::dense_backward(
                    &dy,
                    &values[*input],
                    &values[*weight],
                    bias.is_some(),
                    wants(*input),
                    wants(*weight) || bias.map(wants).unwrap_or(false),
                );
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[*input], dx);
                }
                if let (Some(dw), true) = (g.dw, wants(*weight)) {
                    accumulate(&mut grads[*weight], dw);
                }
                if let (Some(db), Some(bi)) = (g.db, *bias) {
                    if wants(bi) {
                        accumulate(&mut grads[bi], db);
                    }
                }
            }
            RecordedOp::Conv2d { input, weight, bias, stride, padding } => {
                let g = layers::conv2d_backward(
                    &dy,
                    &values[*input],
                    &values[*weight],
                    bias.is_some(),
                    *stride,
                    *padding,
                    wants(*input),
                    wants(*weight) || bias.map(wants).unwrap_or(false),
                );
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[*input], dx);
                }
                if let (Some(dw), true) = (g.dw, wants(*weight)) {
                    accumulate(&mut grads[*weight], dw);
                }
                if let (Some(db), Some(bi)) = (g.db, *bias) {
                    if wants(bi) {
                        accumulate(&mut grads[bi], db);
                    }
                }
            }
            RecordedOp::Relu { input } => {
                if wants(*input) {
                    accumulate(&mut grads[*input], layers::relu_backward(&dy, &values[*input]));
                }
            }
            RecordedOp::BatchNorm { input, gamma, beta, ctx } => {
                let g = layers::batchnorm_backward(
                    &dy,
                    &values[*input],
                    &values[*gamma],
                    ctx,
                    wants(*input),
                );
                if let Some(dx) = g.dx {
                    accumulate(&mut grads[*input], dx);
                }
                if wants(*gamma) {
                    accumulate(&mut grads[*gamma], g.dgamma);
                }
                if wants(*beta) {
                    accumulate(&mut grads[*beta], g.dbeta);
                }
            }
            RecordedOp::AvgPool2d { input } => {
                if wants(*input) {
                    accumulate(
                        &mut grads[*input],
                        layers::avg_pool2d_backward(&dy, values[*input].shape()),
                    );
                }
            }
            RecordedOp::GlobalAvgPool { input } => {
                if wants(*input) {
                    accumulate(
                        &mut grads[*input],
                        layers::global_avg_pool_backward(&dy, values[*input].shape()),
                    );
                }
            }
            RecordedOp::L2Normalize { input, norms, clamped } => {
                if wants(*input) {
                    accumulate(
                        &mut grads[*input],
                        layers::l2_normalize_backward(&dy, &values[*input], norms, clamped),
                    );
                }
            }
            RecordedOp::ScalarLoss { input, grad } => {
                if wants(*input) {
                    let scale = dy.data()[0];
                    let mut scaled = grad.clone();
                    if scale != F::one() {
                        scaled.data_mut().iter_mut().for_each(|v| *v = *v * scale);
                    }
                    accumulate(&mut grads[*input], scaled);
                }
            }
        }
    }

    let mut out = ParameterSet::new();
    for (name, &idx) in &tape.params {
        if !tape.values[idx].grad_enabled() {
            continue;
        }
        let grad = grads[idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.values[idx].shape().to_vec()));
        out.set(name.clone(), grad);
    }
    Ok(out)
}

//! SGD with momentum buffers and decoupled weight decay.

use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One optimizer step, in place:
///
/// ```text
/// v <- momentum * v + g
/// p <- p - lr * v - lr * weight_decay * p
/// ```
///
/// Updates exactly the parameters named in `grads`; missing momentum buffers
/// are created as zeros. Deterministic given identical inputs.
pub fn sgd_update<F: Scalar>(
    params: &mut ParameterSet<F>,
    grads: &ParameterSet<F>,
    lr: F,
    weight_decay: F,
    momentum: F,
    momentum_buffers: &mut ParameterSet<F>,
) -> Result<()> {
    for (name, grad) in grads.iter() {
        let param = params.get_mut(name).ok_or_else(|| Error::UnknownParameter {
            name: name.into(),
            context: "sgd_update".into(),
        })?;
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "sgd_update",
                format!("`{name}` param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        if !momentum_buffers.contains(name) {
            momentum_buffers.set(name, Tensor::zeros(grad.shape().to_vec()));
        }
        let buffer = momentum_buffers.get_mut(name).expect("buffer just ensured");
        let decay = lr * weight_decay;
        for ((p, &g), v) in
            param.data_mut().iter_mut().zip(grad.data()).zip(buffer.data_mut().iter_mut())
        {
            *v = momentum * *v + g;
            *p = *p - lr * *v - decay * *p;
        }
    }
    Ok(())
}

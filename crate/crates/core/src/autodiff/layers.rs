//! Forward and backward rules for the fixed layer set.
//!
//! Every function here is pure over its arguments; saved context needed by
//! the backward pass is returned explicitly so the tape can own it. Inner
//! loops are arranged so the innermost axis walks contiguous storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Variance floor for batch normalization. The denominator is
/// `sqrt(max(var, EPS))`, so unit-variance inputs normalize exactly and
/// constant channels stay finite.
pub const BN_VAR_EPS: f64 = 1e-5;

/// Norm floor for row-wise L2 normalization.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Forward-pass mode. Batch normalization uses batch statistics (and updates
/// running statistics) in `Train`, running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics grouping for normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnKind {
    /// Per-channel statistics over the whole batch; running stats tracked.
    Batch,
    /// Per-sample per-channel statistics over spatial positions only.
    /// Mode-independent; breaks batch-statistics coupling between samples.
    Instance,
}

/// One layer application. Parameter names are resolved relative to a prefix
/// by [`super::apply_layer`]: `weight`/`bias` for dense and conv,
/// `gamma`/`beta`/`running_mean`/`running_var` for batch norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense,
    Conv2d { stride: usize, padding: usize },
    Relu,
    BatchNorm2d { kind: BnKind },
    /// 2x2 mean pooling with stride 2; trailing odd row/column dropped.
    AvgPool2d,
    GlobalAvgPool,
    L2Normalize,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::AvgPool2d => "avg_pool2d",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::L2Normalize => "l2_normalize",
        }
    }
}

// ---------------------------------------------------------------- dense

pub fn dense_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shape(
            "dense",
            format!("input {:?} x weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (rows, inner) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[1];
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(Error::shape("dense", format!("bias {:?}, want [{out}]", b.shape())));
        }
    }
    let mut y = vec![F::zero(); rows * out];
    for r in 0..rows {
        let y_row = &mut y[r * out..(r + 1) * out];
        if let Some(b) = b {
            y_row.copy_from_slice(b.data());
        }
        let x_row = &x.data()[r * inner..(r + 1) * inner];
        for (i, &xv) in x_row.iter().enumerate() {
            let w_row = &w.data()[i * out..(i + 1) * out];
            for (yv, &wv) in y_row.iter_mut().zip(w_row) {
                *yv = *yv + xv * wv;
            }
        }
    }
    Tensor::new(vec![rows, out], y)
}

pub struct DenseGrads<F: Scalar> {
    pub dx: Option<Tensor<F>>,
    pub dw: Option<Tensor<F>>,
    pub db: Option<Tensor<F>>,
}

pub fn dense_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    need_dx: bool,
    need_dw: bool,
) -> DenseGrads<F> {
    let (rows, inner) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[1];
    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); rows * inner];
        for r in 0..rows {
            let dy_row = &dy.data()[r * out..(r + 1) * out];
            let dx_row = &mut dx[r * inner..(r + 1) * inner];
            for i in 0..inner {
                let w_row = &w.data()[i * out..(i + 1) * out];
                dx_row[i] = crate::tensor::dot(dy_row, w_row);
            }
        }
        Tensor::new(vec![rows, inner], dx).expect("dense dx shape")
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![F::zero(); inner * out];
        for r in 0..rows {
            let dy_row = &dy.data()[r * out..(r + 1) * out];
            let x_row = &x.data()[r * inner..(r + 1) * inner];
            for (i, &xv) in x_row.iter().enumerate() {
                let dw_row = &mut dw[i * out..(i + 1) * out];
                for (dwv, &dyv) in dw_row.iter_mut().zip(dy_row) {
                    *dwv = *dwv + xv * dyv;
                }
            }
        }
        Tensor::new(vec![inner, out], dw).expect("dense dw shape")
    });
    let db = (need_dw && has_bias).then(|| {
        let mut db = vec![F::zero(); out];
        for r in 0..rows {
            let dy_row = &dy.data()[r * out..(r + 1) * out];
            for (dbv, &dyv) in db.iter_mut().zip(dy_row) {
                *dbv = *dbv + dyv;
            }
        }
        Tensor::new(vec![out], db).expect("dense db shape")
    });
    DenseGrads { dx, dw, db }
}

// ---------------------------------------------------------------- conv2d

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Output-column range for a kernel column `kw`: all `ow` with
/// `0 <= ow*stride + kw - padding < width`.
fn valid_cols(ow_n: usize, width: usize, stride: usize, padding: usize, kw: usize) -> (usize, usize) {
    let lo = if kw >= padding { 0 } else { (padding - kw).div_ceil(stride) };
    let hi = if width + padding > kw {
        ((width + padding - kw).div_ceil(stride)).min(ow_n)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} x weight {:?}", x.shape(), w.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let (bs, ci_n, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, _, kh_n, kw_n) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh_n, ow_n) = match (
        conv_out_dim(h, kh_n, stride, padding),
        conv_out_dim(wid, kw_n, stride, padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} too large for input {:?} with padding {padding}", w.shape(), x.shape()),
            ))
        }
    };
    if let Some(b) = b {
        if b.shape() != [co_n] {
            return Err(Error::shape("conv2d", format!("bias {:?}, want [{co_n}]", b.shape())));
        }
    }

    let mut y = vec![F::zero(); bs * co_n * oh_n * ow_n];
    let x_d = x.data();
    let w_d = w.data();
    for bi in 0..bs {
        for co in 0..co_n {
            let y_plane = &mut y[(bi * co_n + co) * oh_n * ow_n..(bi * co_n + co + 1) * oh_n * ow_n];
            if let Some(b) = b {
                let bv = b.data()[co];
                y_plane.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..ci_n {
                let x_plane = &x_d[(bi * ci_n + ci) * h * wid..(bi * ci_n + ci + 1) * h * wid];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w_d[((co * ci_n + ci) * kh_n + kh) * kw_n + kw];
                        let (ow_lo, ow_hi) = valid_cols(ow_n, wid, stride, padding, kw);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ih = oh * stride + kh;
                            if ih < padding || ih - padding >= h {
                                continue;
                            }
                            let x_row = &x_plane[(ih - padding) * wid..(ih - padding + 1) * wid];
                            let y_row = &mut y_plane[oh * ow_n..(oh + 1) * ow_n];
                            if stride == 1 {
                                // iw = ow + kw - padding, in range by construction.
                                let iw_lo = ow_lo + kw - padding;
                                let xs = &x_row[iw_lo..iw_lo + (ow_hi - ow_lo)];
                                let ys = &mut y_row[ow_lo..ow_hi];
                                for (y, &x) in ys.iter_mut().zip(xs) {
                                    *y = *y + wv * x;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    y_row[ow] = y_row[ow] + wv * x_row[ow * stride + kw - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, co_n, oh_n, ow_n], y)
}

pub struct ConvGrads<F: Scalar> {
    pub dx: Option<Tensor<F>>,
    pub dw: Option<Tensor<F>>,
    pub db: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<F> {
    let (bs, ci_n, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, _, kh_n, kw_n) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh_n, ow_n) = (dy.shape()[2], dy.shape()[3]);
    let dy_d = dy.data();
    let x_d = x.data();
    let w_d = w.data();

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); bs * ci_n * h * wid];
        for bi in 0..bs {
            for co in 0..co_n {
                let dy_plane = &dy_d[(bi * co_n + co) * oh_n * ow_n..(bi * co_n + co + 1) * oh_n * ow_n];
                for ci in 0..ci_n {
                    let dx_plane =
                        &mut dx[(bi * ci_n + ci) * h * wid..(bi * ci_n + ci + 1) * h * wid];
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let wv = w_d[((co * ci_n + ci) * kh_n + kh) * kw_n + kw];
                            let (ow_lo, ow_hi) = valid_cols(ow_n, wid, stride, padding, kw);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            for oh in 0..oh_n {
                                let ih = oh * stride + kh;
                                if ih < padding || ih - padding >= h {
                                    continue;
                                }
                                let dy_row = &dy_plane[oh * ow_n..(oh + 1) * ow_n];
                                let dx_row =
                                    &mut dx_plane[(ih - padding) * wid..(ih - padding + 1) * wid];
                                if stride == 1 {
                                    let iw_lo = ow_lo + kw - padding;
                                    let dxs = &mut dx_row[iw_lo..iw_lo + (ow_hi - ow_lo)];
                                    let dys = &dy_row[ow_lo..ow_hi];
                                    for (dx_v, &dy_v) in dxs.iter_mut().zip(dys) {
                                        *dx_v = *dx_v + wv * dy_v;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + kw - padding;
                                        dx_row[iw] = dx_row[iw] + wv * dy_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![bs, ci_n, h, wid], dx).expect("conv dx shape")
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![F::zero(); co_n * ci_n * kh_n * kw_n];
        for bi in 0..bs {
            for co in 0..co_n {
                let dy_plane = &dy_d[(bi * co_n + co) * oh_n * ow_n..(bi * co_n + co + 1) * oh_n * ow_n];
                for ci in 0..ci_n {
                    let x_plane = &x_d[(bi * ci_n + ci) * h * wid..(bi * ci_n + ci + 1) * h * wid];
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let (ow_lo, ow_hi) = valid_cols(ow_n, wid, stride, padding, kw);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            let mut acc = F::zero();
                            for oh in 0..oh_n {
                                let ih = oh * stride + kh;
                                if ih < padding || ih - padding >= h {
                                    continue;
                                }
                                let dy_row = &dy_plane[oh * ow_n..(oh + 1) * ow_n];
                                let x_row = &x_plane[(ih - padding) * wid..(ih - padding + 1) * wid];
                                if stride == 1 {
                                    let iw_lo = ow_lo + kw - padding;
                                    acc = acc
                                        + crate::tensor::dot(
                                            &dy_row[ow_lo..ow_hi],
                                            &x_row[iw_lo..iw_lo + (ow_hi - ow_lo)],
                                        );
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        acc = acc + dy_row[ow] * x_row[ow * stride + kw - padding];
                                    }
                                }
                            }
                            let slot = ((co * ci_n + ci) * kh_n + kh) * kw_n + kw;
                            dw[slot] = dw[slot] + acc;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![co_n, ci_n, kh_n, kw_n], dw).expect("conv dw shape")
    });

    let db = (need_dw && has_bias).then(|| {
        let mut db = vec![F::zero(); co_n];
        for bi in 0..bs {
            for co in 0..co_n {
                let dy_plane = &dy_d[(bi * co_n + co) * oh_n * ow_n..(bi * co_n + co + 1) * oh_n * ow_n];
                db[co] = db[co] + dy_plane.iter().copied().sum();
            }
        }
        Tensor::new(vec![co_n], db).expect("conv db shape")
    });

    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------- relu

pub fn relu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let data = x.data().iter().map(|&v| v.max(F::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu shape")
}

pub fn relu_backward<F: Scalar>(dy: &Tensor<F>, x: &Tensor<F>) -> Tensor<F> {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu grad shape")
}

// ---------------------------------------------------------------- batchnorm

/// Saved normalization context: one entry per statistics group (channel for
/// batch/running, sample x channel for instance).
#[derive(Debug, Clone)]
pub struct BnCtx<F: Scalar> {
    pub kind: BnKind,
    /// Statistics came from the batch (true) or from frozen running/eval
    /// stats (false); decides whether gradients flow through the stats.
    pub stats_from_batch: bool,
    pub mean: Vec<F>,
    pub inv_std: Vec<F>,
    pub clamped: Vec<bool>,
}

/// Resolved shape info: `[B, C, H, W]` or `[B, C]` as `spatial == 1`.
struct BnShape {
    batch: usize,
    spatial: usize,
}

fn bn_shape<F: Scalar>(x: &Tensor<F>, channels: usize) -> Result<BnShape> {
    let s = x.shape();
    match s.len() {
        2 if s[1] == channels => Ok(BnShape { batch: s[0], spatial: 1 }),
        4 if s[1] == channels => Ok(BnShape { batch: s[0], spatial: s[2] * s[3] }),
        _ => Err(Error::shape(
            "batchnorm2d",
            format!("input {:?} incompatible with {channels} channels", s),
        )),
    }
}

pub struct BnForward<F: Scalar> {
    pub output: Tensor<F>,
    pub ctx: BnCtx<F>,
    /// Updated running statistics (present only for Train + Batch).
    pub new_running: Option<(Vec<F>, Vec<F>)>,
}

/// Running-average momentum for batch-norm statistics.
pub const BN_RUNNING_MOMENTUM: f64 = 0.1;

pub fn batchnorm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &Tensor<F>,
    running_var: &Tensor<F>,
    mode: Mode,
    kind: BnKind,
) -> Result<BnForward<F>> {
    let channels = gamma.len();
    if beta.len() != channels || running_mean.len() != channels || running_var.len() != channels {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "gamma {:?} / beta {:?} / running {:?},{:?}",
                gamma.shape(),
                beta.shape(),
                running_mean.shape(),
                running_var.shape()
            ),
        ));
    }
    let shape = bn_shape(x, channels)?;
    let eps = F::from_real(BN_VAR_EPS);

    // Group layout: batch stats index by channel, instance stats by (b, c).
    let per_sample = kind == BnKind::Instance;
    let groups = if per_sample { shape.batch * channels } else { channels };
    let group_len = if per_sample { shape.spatial } else { shape.batch * shape.spatial };
    if group_len == 0 {
        return Err(Error::invalid("batchnorm2d", "empty statistics group"));
    }

    let use_batch_stats = per_sample || mode == Mode::Train;
    let mut mean = vec![F::zero(); groups];
    let mut var = vec![F::zero(); groups];

    let for_each_group = |f: &mut dyn FnMut(usize, &[F])| {
        for b in 0..shape.batch {
            for c in 0..channels {
                let plane =
                    &x.data()[(b * channels + c) * shape.spatial..(b * channels + c + 1) * shape.spatial];
                let g = if per_sample { b * channels + c } else { c };
                f(g, plane);
            }
        }
    };

    if use_batch_stats {
        let n = F::from_real(group_len as f64);
        for_each_group(&mut |g, plane| {
            mean[g] = mean[g] + plane.iter().copied().sum::<F>();
        });
        mean.iter_mut().for_each(|m| *m = *m / n);
        for_each_group(&mut |g, plane| {
            let m = mean[g];
            var[g] = var[g] + plane.iter().map(|&v| (v - m) * (v - m)).sum::<F>();
        });
        var.iter_mut().for_each(|v| *v = *v / n);
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }

    let clamped: Vec<bool> = var.iter().map(|&v| v < eps).collect();
    let inv_std: Vec<F> = var.iter().map(|&v| v.max(eps).sqrt().recip()).collect();

    let mut y = vec![F::zero(); x.len()];
    for b in 0..shape.batch {
        for c in 0..channels {
            let g = if per_sample { b * channels + c } else { c };
            let (m, is) = (mean[g], inv_std[g]);
            let (ga, be) = (gamma.data()[c], beta.data()[c]);
            let scale = ga * is;
            let start = (b * channels + c) * shape.spatial;
            let x_plane = &x.data()[start..start + shape.spatial];
            let y_plane = &mut y[start..start + shape.spatial];
            for (yv, &xv) in y_plane.iter_mut().zip(x_plane) {
                *yv = (xv - m) * scale + be;
            }
        }
    }

    let new_running = (mode == Mode::Train && !per_sample).then(|| {
        let mom = F::from_real(BN_RUNNING_MOMENTUM);
        let keep = F::one() - mom;
        let rm = running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(&old, &new)| keep * old + mom * new)
            .collect();
        let rv = running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&old, &new)| keep * old + mom * new)
            .collect();
        (rm, rv)
    });

    Ok(BnForward {
        output: Tensor::new(x.shape().to_vec(), y)?,
        ctx: BnCtx { kind, stats_from_batch: use_batch_stats, mean, inv_std, clamped },
        new_running,
    })
}

pub struct BnGrads<F: Scalar> {
    pub dx: Option<Tensor<F>>,
    pub dgamma: Tensor<F>,
    pub dbeta: Tensor<F>,
}

pub fn batchnorm_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    ctx: &BnCtx<F>,
    need_dx: bool,
) -> BnGrads<F> {
    let channels = gamma.len();
    let shape = bn_shape(x, channels).expect("bn backward shape");
    let per_sample = ctx.kind == BnKind::Instance;
    let groups = ctx.mean.len();
    let group_len = if per_sample { shape.spatial } else { shape.batch * shape.spatial };
    let n = F::from_real(group_len as f64);

    // Per-group sums of dy and dy * xhat.
    let mut sum_dy = vec![F::zero(); groups];
    let mut sum_dy_xhat = vec![F::zero(); groups];
    let mut dgamma = vec![F::zero(); channels];
    let mut dbeta = vec![F::zero(); channels];

    for b in 0..shape.batch {
        for c in 0..channels {
            let g = if per_sample { b * channels + c } else { c };
            let (m, is) = (ctx.mean[g], ctx.inv_std[g]);
            let start = (b * channels + c) * shape.spatial;
            let dy_plane = &dy.data()[start..start + shape.spatial];
            let x_plane = &x.data()[start..start + shape.spatial];
            let mut s_dy = F::zero();
            let mut s_dyx = F::zero();
            for (&g_v, &x_v) in dy_plane.iter().zip(x_plane) {
                s_dy = s_dy + g_v;
                s_dyx = s_dyx + g_v * (x_v - m) * is;
            }
            sum_dy[g] = sum_dy[g] + s_dy;
            sum_dy_xhat[g] = sum_dy_xhat[g] + s_dyx;
            dbeta[c] = dbeta[c] + s_dy;
            dgamma[c] = dgamma[c] + s_dyx;
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); x.len()];
        for b in 0..shape.batch {
            for c in 0..channels {
                let g = if per_sample { b * channels + c } else { c };
                let (m, is) = (ctx.mean[g], ctx.inv_std[g]);
                let scale = gamma.data()[c] * is;
                let start = (b * channels + c) * shape.spatial;
                let dy_plane = &dy.data()[start..start + shape.spatial];
                let x_plane = &x.data()[start..start + shape.spatial];
                let dx_plane = &mut dx[start..start + shape.spatial];
                if ctx.stats_from_batch {
                    let mean_dy = sum_dy[g] / n;
                    // Clamped groups hold the denominator constant, so the
                    // variance term drops out of the gradient.
                    let mean_dy_xhat =
                        if ctx.clamped[g] { F::zero() } else { sum_dy_xhat[g] / n };
                    for ((dxv, &gv), &xv) in dx_plane.iter_mut().zip(dy_plane).zip(x_plane) {
                        let xhat = (xv - m) * is;
                        *dxv = scale * (gv - mean_dy - xhat * mean_dy_xhat);
                    }
                } else {
                    for (dxv, &gv) in dx_plane.iter_mut().zip(dy_plane) {
                        *dxv = scale * gv;
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), dx).expect("bn dx shape")
    });

    BnGrads {
        dx,
        dgamma: Tensor::new(vec![channels], dgamma).expect("bn dgamma shape"),
        dbeta: Tensor::new(vec![channels], dbeta).expect("bn dbeta shape"),
    }
}

// ---------------------------------------------------------------- pooling

pub fn avg_pool2d_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.ndim() != 4 {
        return Err(Error::shape("avg_pool2d", format!("input {:?}, want 4-d", x.shape())));
    }
    let (bs, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh_n, ow_n) = (h / 2, w / 2);
    if oh_n == 0 || ow_n == 0 {
        return Err(Error::shape("avg_pool2d", format!("input {:?} too small to pool", x.shape())));
    }
    let quarter = F::from_real(0.25);
    let mut y = vec![F::zero(); bs * c_n * oh_n * ow_n];
    for p in 0..bs * c_n {
        let x_plane = &x.data()[p * h * w..(p + 1) * h * w];
        let y_plane = &mut y[p * oh_n * ow_n..(p + 1) * oh_n * ow_n];
        for oh in 0..oh_n {
            let r0 = &x_plane[(2 * oh) * w..(2 * oh) * w + w];
            let r1 = &x_plane[(2 * oh + 1) * w..(2 * oh + 1) * w + w];
            let y_row = &mut y_plane[oh * ow_n..(oh + 1) * ow_n];
            for ow in 0..ow_n {
                y_row[ow] = (r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]) * quarter;
            }
        }
    }
    Tensor::new(vec![bs, c_n, oh_n, ow_n], y)
}

pub fn avg_pool2d_backward<F: Scalar>(dy: &Tensor<F>, x_shape: &[usize]) -> Tensor<F> {
    let (bs, c_n, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh_n, ow_n) = (dy.shape()[2], dy.shape()[3]);
    let quarter = F::from_real(0.25);
    let mut dx = vec![F::zero(); bs * c_n * h * w];
    for p in 0..bs * c_n {
        let dy_plane = &dy.data()[p * oh_n * ow_n..(p + 1) * oh_n * ow_n];
        let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
        for oh in 0..oh_n {
            let dy_row = &dy_plane[oh * ow_n..(oh + 1) * ow_n];
            for ow in 0..ow_n {
                let g = dy_row[ow] * quarter;
                dx_plane[(2 * oh) * w + 2 * ow] = g;
                dx_plane[(2 * oh) * w + 2 * ow + 1] = g;
                dx_plane[(2 * oh + 1) * w + 2 * ow] = g;
                dx_plane[(2 * oh + 1) * w + 2 * ow + 1] = g;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).expect("avg_pool dx shape")
}

pub fn global_avg_pool_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.ndim() != 4 {
        return Err(Error::shape("global_avg_pool", format!("input {:?}, want 4-d", x.shape())));
    }
    let (bs, c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = F::from_real(1.0 / (h * w) as f64);
    let mut y = vec![F::zero(); bs * c_n];
    for (p, yv) in y.iter_mut().enumerate() {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        *yv = plane.iter().copied().sum::<F>() * inv;
    }
    Tensor::new(vec![bs, c_n], y)
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &Tensor<F>, x_shape: &[usize]) -> Tensor<F> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = F::from_real(1.0 / (h * w) as f64);
    let mut dx = vec![F::zero(); x_shape.iter().product()];
    for (p, &g) in dy.data().iter().enumerate() {
        let v = g * inv;
        dx[p * h * w..(p + 1) * h * w].iter_mut().for_each(|d| *d = v);
    }
    Tensor::new(x_shape.to_vec(), dx).expect("gap dx shape")
}

// ---------------------------------------------------------------- l2 norm

pub struct L2Forward<F: Scalar> {
    pub output: Tensor<F>,
    pub norms: Vec<F>,
    pub clamped: Vec<bool>,
}

pub fn l2_normalize_forward<F: Scalar>(x: &Tensor<F>) -> Result<L2Forward<F>> {
    if x.ndim() != 2 {
        return Err(Error::shape("l2_normalize", format!("input {:?}, want 2-d", x.shape())));
    }
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let eps = F::from_real(L2_NORM_EPS);
    let mut y = vec![F::zero(); rows * d];
    let mut norms = Vec::with_capacity(rows);
    let mut clamped = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let raw = crate::tensor::l2_norm(row);
        let n = raw.max(eps);
        norms.push(n);
        clamped.push(raw < eps);
        let inv = n.recip();
        for (yv, &xv) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
            *yv = xv * inv;
        }
    }
    Ok(L2Forward { output: Tensor::new(vec![rows, d], y)?, norms, clamped })
}

pub fn l2_normalize_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    norms: &[F],
    clamped: &[bool],
) -> Tensor<F> {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let mut dx = vec![F::zero(); rows * d];
    for r in 0..rows {
        let x_row = &x.data()[r * d..(r + 1) * d];
        let dy_row = &dy.data()[r * d..(r + 1) * d];
        let dx_row = &mut dx[r * d..(r + 1) * d];
        let n = norms[r];
        let inv = n.recip();
        if clamped[r] {
            // Denominator pinned at the floor: y = x / eps.
            for (dxv, &gv) in dx_row.iter_mut().zip(dy_row) {
                *dxv = gv * inv;
            }
        } else {
            let proj = crate::tensor::dot(x_row, dy_row) * inv * inv * inv;
            for ((dxv, &gv), &xv) in dx_row.iter_mut().zip(dy_row).zip(x_row) {
                *dxv = gv * inv - xv * proj;
            }
        }
    }
    Tensor::new(vec![rows, d], dx).expect("l2 dx shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<F: Scalar>(shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let x = t(vec![3], vec![-1.0f32, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = t(vec![1, 2], vec![3.0f64, 4.0]);
        let out = l2_normalize_forward(&x).unwrap();
        assert!((out.output.data()[0] - 0.6).abs() < 1e-12);
        assert!((out.output.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_clamps_zero_row() {
        let x = t(vec![1, 3], vec![0.0f64, 0.0, 0.0]);
        let out = l2_normalize_forward(&x).unwrap();
        assert!(out.output.all_finite());
        assert!(out.clamped[0]);
    }

    #[test]
    fn dense_identity_weight_is_identity() {
        let x = t(vec![2, 3], vec![1.0f32, -2.0, 0.5, 4.0, 0.0, -1.0]);
        let mut w = vec![0.0f32; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let y = dense_forward(&x, &t(vec![3, 3], w), Some(&Tensor::zeros(vec![3]))).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batchnorm_identity_statistics() {
        // Batch with per-channel mean 0 and variance exactly 1.
        let x = t(vec![2, 1, 1, 2], vec![1.0f64, -1.0, 1.0, -1.0]);
        let gamma = Tensor::ones(vec![1]);
        let beta = Tensor::zeros(vec![1]);
        let rm = Tensor::zeros(vec![1]);
        let rv = Tensor::ones(vec![1]);
        let out = batchnorm_forward(&x, &gamma, &beta, &rm, &rv, Mode::Train, BnKind::Batch).unwrap();
        for (a, b) in out.output.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_constant_channel_stays_finite() {
        let x = t(vec![2, 1, 1, 2], vec![3.0f32; 4]);
        let out = batchnorm_forward(
            &x,
            &Tensor::ones(vec![1]),
            &Tensor::zeros(vec![1]),
            &Tensor::zeros(vec![1]),
            &Tensor::ones(vec![1]),
            Mode::Train,
            BnKind::Batch,
        )
        .unwrap();
        assert!(out.output.all_finite());
        assert!(out.ctx.clamped[0]);
        assert!(out.output.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn conv_shapes_and_identity_kernel() {
        // 1x1 kernel with unit weight passes input through.
        let x = t(vec![1, 1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(vec![1, 1, 1, 1], vec![1.0f32]);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = t(vec![1, 2, 4, 4], vec![0.0f32; 32]);
        let w = t(vec![1, 3, 3, 3], vec![0.0f32; 27]);
        assert!(conv2d_forward(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn avg_pool_halves_dims() {
        let x = t(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let y = avg_pool2d_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn global_avg_pool_means() {
        let x = t(vec![1, 2, 1, 2], vec![1.0f32, 3.0, 10.0, 20.0]);
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.0, 15.0]);
    }
}

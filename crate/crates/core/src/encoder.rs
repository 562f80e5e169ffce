//! Toy convolutional encoder: conv/BN/ReLU/pool backbone, global average
//! pooling, two-layer projection head with row L2 normalization, and the
//! re-calibration batch-norm transfer mechanism.

use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_layer, BnKind, LayerSpec, Mode, ParameterSet, Tape};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamKey};
use crate::tensor::{Scalar, Tensor};

/// Backbone + head description. Each block is conv3x3 (stride 1, pad 1, no
/// bias) + batch norm + ReLU + 2x2 average pool; blocks are followed by
/// global average pooling, so `feature_dim` must equal the last block's
/// channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input size as (height, width, channels).
    pub input_size: (usize, usize, usize),
    /// Output channels of each conv block.
    pub block_channels: Vec<usize>,
    /// Backbone output dimension (after global average pooling).
    pub feature_dim: usize,
    /// Projection head output dimension.
    pub embed_dim: usize,
    /// Statistics mode for the backbone batch-norm layers.
    #[serde(default = "default_bn_kind")]
    pub bn_kind: BnKind,
}

fn default_bn_kind() -> BnKind {
    BnKind::Batch
}

impl EncoderConfig {
    /// Default desk-scale encoder: 64x32 RGB input, three conv blocks
    /// (16 -> 32 -> 64 channels), 64-d feature, 64-d embedding.
    pub fn toy() -> Self {
        EncoderConfig {
            input_size: (64, 32, 3),
            block_channels: vec![16, 32, 64],
            feature_dim: 64,
            embed_dim: 64,
            bn_kind: BnKind::Batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("encoder config", "input_size dims must be positive"));
        }
        if self.block_channels.is_empty() {
            return Err(Error::invalid("encoder config", "at least one conv block required"));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("encoder config", "embed_dim must be >= 2"));
        }
        if *self.block_channels.last().expect("non-empty") != self.feature_dim {
            return Err(Error::invalid(
                "encoder config",
                format!(
                    "feature_dim {} must equal last block channels {}",
                    self.feature_dim,
                    self.block_channels.last().expect("non-empty")
                ),
            ));
        }
        let (mut sh, mut sw) = (h, w);
        for (i, _) in self.block_channels.iter().enumerate() {
            sh /= 2;
            sw /= 2;
            if sh == 0 || sw == 0 {
                return Err(Error::invalid(
                    "encoder config",
                    format!("spatial size collapses to zero at block {i}"),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of one encoder instance. Names are globally qualified
/// (`backbone.block0.conv.weight`, `head.fc1.bias`, `recalib.bn.gamma`) so
/// the three sets merge without collision.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F: Scalar> {
    pub backbone: ParameterSet<F>,
    pub head: ParameterSet<F>,
    pub recalibration_bn: Option<ParameterSet<F>>,
}

impl<F: Scalar> EncoderParams<F> {
    /// Merge all sets into one flat `ParameterSet` (names stay unchanged).
    pub fn flatten(&self) -> ParameterSet<F> {
        let mut out = ParameterSet::new();
        for set in [Some(&self.backbone), Some(&self.head), self.recalibration_bn.as_ref()]
            .into_iter()
            .flatten()
        {
            for (name, tensor) in set.iter() {
                out.set(name.to_string(), tensor.clone());
            }
        }
        out
    }

    /// Rebuild from a flat set produced by [`Self::flatten`].
    pub fn from_flat(flat: &ParameterSet<F>) -> Self {
        let mut backbone = ParameterSet::new();
        let mut head = ParameterSet::new();
        let mut recalib = ParameterSet::new();
        for (name, tensor) in flat.iter() {
            if name.starts_with("backbone.") {
                backbone.set(name.to_string(), tensor.clone());
            } else if name.starts_with("head.") {
                head.set(name.to_string(), tensor.clone());
            } else if name.starts_with("recalib.") {
                recalib.set(name.to_string(), tensor.clone());
            }
        }
        EncoderParams {
            backbone,
            head,
            recalibration_bn: (!recalib.is_empty()).then_some(recalib),
        }
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        EncoderParams {
            backbone: self.backbone.cast(),
            head: self.head.cast(),
            recalibration_bn: self.recalibration_bn.as_ref().map(|s| s.cast()),
        }
    }
}

fn he_normal<F: Scalar>(shape: Vec<usize>, fan_in: usize, key: StreamKey) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = key.stream();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_real(standard_normal(&mut rng) * std)).collect();
    Tensor::new(shape, data).expect("init shape").with_grad(true)
}

fn bn_params<F: Scalar>(set: &mut ParameterSet<F>, prefix: &str, channels: usize) {
    set.set(format!("{prefix}.gamma"), Tensor::ones(vec![channels]).with_grad(true));
    set.set(format!("{prefix}.beta"), Tensor::zeros(vec![channels]).with_grad(true));
    set.set(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]));
    set.set(format!("{prefix}.running_var"), Tensor::ones(vec![channels]));
}

/// Fresh He-initialized parameters for `config`, deterministic in `key`.
pub fn init_params<F: Scalar>(config: &EncoderConfig, key: StreamKey) -> Result<EncoderParams<F>> {
    config.validate()?;
    let mut backbone = ParameterSet::new();
    let mut in_ch = config.input_size.2;
    for (i, &out_ch) in config.block_channels.iter().enumerate() {
        let fan_in = in_ch * 9;
        backbone.set(
            format!("backbone.block{i}.conv.weight"),
            he_normal(vec![out_ch, in_ch, 3, 3], fan_in, key.child(i as u64)),
        );
        bn_params(&mut backbone, &format!("backbone.block{i}.bn"), out_ch);
        in_ch = out_ch;
    }

    let mut head = ParameterSet::new();
    let hidden = config.feature_dim;
    head.set(
        "head.fc1.weight",
        he_normal(vec![config.feature_dim, hidden], config.feature_dim, key.child(100)),
    );
    head.set("head.fc1.bias", Tensor::zeros(vec![hidden]).with_grad(true));
    head.set("head.fc2.weight", he_normal(vec![hidden, config.embed_dim], hidden, key.child(101)));
    head.set("head.fc2.bias", Tensor::zeros(vec![config.embed_dim]).with_grad(true));

    Ok(EncoderParams { backbone, head, recalibration_bn: None })
}

fn check_batch<F: Scalar>(config: &EncoderConfig, batch: &Tensor<F>) -> Result<()> {
    let (h, w, c) = config.input_size;
    let s = batch.shape();
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
        return Err(Error::shape(
            "encode",
            format!("batch {:?} incompatible with input size ({h}, {w}, {c})", s),
        ));
    }
    Ok(())
}

/// Backbone features `[B, feature_dim]` (global-average-pooled conv output),
/// passed through the re-calibration BN when present and `apply_recalib`.
pub fn encode_backbone<F: Scalar>(
    config: &EncoderConfig,
    params: &mut EncoderParams<F>,
    batch: &Tensor<F>,
    mode: Mode,
    apply_recalib: bool,
    mut tape: Option<&mut Tape<F>>,
) -> Result<Tensor<F>> {
    check_batch(config, batch)?;
    let mut x = batch.clone();
    for i in 0..config.block_channels.len() {
        x = apply_layer(
            &LayerSpec::Conv2d { stride: 1, padding: 1 },
            &x,
            &mut params.backbone,
            &format!("backbone.block{i}.conv"),
            mode,
            tape.as_deref_mut(),
        )?;
        x = apply_layer(
            &LayerSpec::BatchNorm2d { kind: config.bn_kind },
            &x,
            &mut params.backbone,
            &format!("backbone.block{i}.bn"),
            mode,
            tape.as_deref_mut(),
        )?;
        x = apply_layer(&LayerSpec::Relu, &x, &mut params.backbone, "", mode, tape.as_deref_mut())?;
        x = apply_layer(
            &LayerSpec::AvgPool2d,
            &x,
            &mut params.backbone,
            "",
            mode,
            tape.as_deref_mut(),
        )?;
    }
    x = apply_layer(&LayerSpec::GlobalAvgPool, &x, &mut params.backbone, "", mode, tape.as_deref_mut())?;
    if apply_recalib {
        if let Some(recalib) = params.recalibration_bn.as_mut() {
            x = apply_layer(
                &LayerSpec::BatchNorm2d { kind: BnKind::Batch },
                &x,
                recalib,
                "recalib.bn",
                mode,
                tape.as_deref_mut(),
            )?;
        }
    }
    Ok(x)
}

/// Full encoder forward: backbone, optional re-calibration BN, projection
/// head, row L2 normalization. Every output row has unit norm.
pub fn encode<F: Scalar>(
    config: &EncoderConfig,
    params: &mut EncoderParams<F>,
    batch: &Tensor<F>,
    mode: Mode,
    mut tape: Option<&mut Tape<F>>,
) -> Result<Tensor<F>> {
    let mut x = encode_backbone(config, params, batch, mode, true, tape.as_deref_mut())?;
    x = apply_layer(&LayerSpec::Dense, &x, &mut params.head, "head.fc1", mode, tape.as_deref_mut())?;
    x = apply_layer(&LayerSpec::Relu, &x, &mut params.head, "", mode, tape.as_deref_mut())?;
    x = apply_layer(&LayerSpec::Dense, &x, &mut params.head, "head.fc2", mode, tape.as_deref_mut())?;
    apply_layer(&LayerSpec::L2Normalize, &x, &mut params.head, "", mode, tape.as_deref_mut())
}

/// Append an identity-initialized batch-norm layer after the backbone
/// feature. In eval mode the freshly inserted layer is an exact identity, so
/// embeddings and retrieval rankings are unchanged until [`calibrate_bn`]
/// rewrites its running statistics.
pub fn insert_recalibration_bn<F: Scalar>(
    params: &mut EncoderParams<F>,
    feature_dim: usize,
) -> Result<()> {
    if params.recalibration_bn.is_some() {
        return Err(Error::invalid("insert_recalibration_bn", "already inserted"));
    }
    let mut set = ParameterSet::new();
    bn_params(&mut set, "recalib.bn", feature_dim);
    params.recalibration_bn = Some(set);
    Ok(())
}

/// Set the re-calibration BN running statistics to the pooled empirical
/// mean/variance (biased) of the backbone features over all calibration
/// batches. Accumulation runs in f64 regardless of `F`.
pub fn calibrate_bn<F: Scalar>(
    config: &EncoderConfig,
    params: &mut EncoderParams<F>,
    calibration_batches: &[Tensor<F>],
) -> Result<()> {
    if params.recalibration_bn.is_none() {
        return Err(Error::invalid("calibrate_bn", "recalibration BN not inserted"));
    }
    if calibration_batches.is_empty() {
        return Err(Error::invalid("calibrate_bn", "at least one calibration batch required"));
    }
    let d = config.feature_dim;
    let mut count = 0usize;
    let mut sum = vec![0.0f64; d];
    let mut sumsq = vec![0.0f64; d];
    for batch in calibration_batches {
        let feats = encode_backbone(config, params, batch, Mode::Eval, false, None)?;
        let rows = feats.shape()[0];
        for r in 0..rows {
            for (c, &v) in feats.row(r).iter().enumerate() {
                let v = v.to_real();
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        count += rows;
    }
    let n = count as f64;
    let mean: Vec<F> = sum.iter().map(|&s| F::from_real(s / n)).collect();
    let var: Vec<F> = sum
        .iter()
        .zip(&sumsq)
        .map(|(&s, &sq)| {
            let m = s / n;
            F::from_real((sq / n - m * m).max(0.0))
        })
        .collect();
    let set = params.recalibration_bn.as_mut().expect("presence checked");
    set.set("recalib.bn.running_mean", Tensor::new(vec![d], mean)?);
    set.set("recalib.bn.running_var", Tensor::new(vec![d], var)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_size: (8, 8, 3),
            block_channels: vec![4, 6],
            feature_dim: 6,
            embed_dim: 4,
            bn_kind: BnKind::Batch,
        }
    }

    fn random_batch(config: &EncoderConfig, rows: usize, seed: u64) -> Tensor<f32> {
        let (h, w, c) = config.input_size;
        let mut rng = StreamKey::from_seed(seed).stream();
        let data = (0..rows * c * h * w)
            .map(|_| crate::rng::uniform_f32(&mut rng, 0.0, 1.0))
            .collect();
        Tensor::new(vec![rows, c, h, w], data).unwrap()
    }

    #[test]
    fn output_shape_and_unit_norm() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(3)).unwrap();
        let batch = random_batch(&config, 5, 10);
        for mode in [Mode::Train, Mode::Eval] {
            let out = encode(&config, &mut params, &batch, mode, None).unwrap();
            assert_eq!(out.shape(), &[5, config.embed_dim]);
            for r in 0..5 {
                let norm = crate::tensor::l2_norm(out.row(r));
                assert!((norm - 1.0).abs() < 1e-5, "row {r} norm {norm}");
            }
        }
    }

    #[test]
    fn duplicate_rows_give_identical_embeddings_in_eval() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(4)).unwrap();
        let one = random_batch(&config, 1, 11);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let (h, w, c) = config.input_size;
        let batch = Tensor::new(vec![2, c, h, w], data).unwrap();
        let out = encode(&config, &mut params, &batch, Mode::Eval, None).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(5)).unwrap();
        let batch = Tensor::<f32>::zeros(vec![2, 3, 4, 4]);
        assert!(encode(&config, &mut params, &batch, Mode::Eval, None).is_err());
    }

    #[test]
    fn identity_bn_insertion_is_bit_exact_in_eval() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(6)).unwrap();
        let batch = random_batch(&config, 4, 12);
        let before = encode(&config, &mut params, &batch, Mode::Eval, None).unwrap();
        insert_recalibration_bn(&mut params, config.feature_dim).unwrap();
        let after = encode(&config, &mut params, &batch, Mode::Eval, None).unwrap();
        assert_eq!(before.data(), after.data());
        assert_eq!(before.shape(), after.shape());
        // Double insertion is rejected.
        assert!(insert_recalibration_bn(&mut params, config.feature_dim).is_err());
    }

    #[test]
    fn calibrate_requires_insertion_and_batches() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(7)).unwrap();
        let batch = random_batch(&config, 4, 13);
        assert!(calibrate_bn(&config, &mut params, &[batch.clone()]).is_err());
        insert_recalibration_bn(&mut params, config.feature_dim).unwrap();
        assert!(calibrate_bn(&config, &mut params, &[]).is_err());
        calibrate_bn(&config, &mut params, &[batch]).unwrap();
    }

    #[test]
    fn calibration_standardizes_features() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(8)).unwrap();
        insert_recalibration_bn(&mut params, config.feature_dim).unwrap();
        let batches: Vec<Tensor<f32>> =
            (0..3).map(|i| random_batch(&config, 6, 20 + i)).collect();
        calibrate_bn(&config, &mut params, &batches).unwrap();
        // Post-BN features over the calibration set: per-channel mean ~ 0,
        // variance ~ 1 (f64 accumulation over f32 outputs).
        let d = config.feature_dim;
        let mut count = 0usize;
        let mut sum = vec![0.0f64; d];
        let mut sumsq = vec![0.0f64; d];
        for batch in &batches {
            let feats =
                encode_backbone(&config, &mut params, batch, Mode::Eval, true, None).unwrap();
            for r in 0..feats.shape()[0] {
                for (c, &v) in feats.row(r).iter().enumerate() {
                    sum[c] += v as f64;
                    sumsq[c] += (v as f64) * (v as f64);
                }
            }
            count += feats.shape()[0];
        }
        let n = count as f64;
        for c in 0..d {
            let mean = sum[c] / n;
            let var = sumsq[c] / n - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn two_batch_calibration_equals_concatenated() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(9)).unwrap();
        insert_recalibration_bn(&mut params, config.feature_dim).unwrap();
        let a = random_batch(&config, 3, 30);
        let b = random_batch(&config, 5, 31);
        let mut concat_data = a.data().to_vec();
        concat_data.extend_from_slice(b.data());
        let (h, w, c) = config.input_size;
        let concat = Tensor::new(vec![8, c, h, w], concat_data).unwrap();

        let mut params_two = params.clone();
        calibrate_bn(&config, &mut params_two, &[a, b]).unwrap();
        calibrate_bn(&config, &mut params, &[concat]).unwrap();
        let set_two = params_two.recalibration_bn.unwrap();
        let set_one = params.recalibration_bn.unwrap();
        for name in ["recalib.bn.running_mean", "recalib.bn.running_var"] {
            for (x, y) in set_two.get(name).unwrap().data().iter().zip(set_one.get(name).unwrap().data())
            {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_feature_channel_stays_finite() {
        let config = small_config();
        let mut params = init_params::<f32>(&config, StreamKey::from_seed(14)).unwrap();
        insert_recalibration_bn(&mut params, config.feature_dim).unwrap();
        // All-zero batches produce constant backbone features on every
        // channel; calibration must clamp variance rather than divide by 0.
        let (h, w, c) = config.input_size;
        let batch = Tensor::<f32>::zeros(vec![4, c, h, w]);
        calibrate_bn(&config, &mut params, &[batch.clone()]).unwrap();
        let out = encode_backbone(&config, &mut params, &batch, Mode::Eval, true, None).unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn config_validation_catches_collapsing_spatial_dims() {
        let mut config = small_config();
        config.block_channels = vec![4, 4, 4, 4, 6];
        assert!(config.validate().is_err());
    }
}

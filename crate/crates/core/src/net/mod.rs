//! The localization network: a small 3D convolutional encoder-decoder with
//! deep supervision, trained from scratch with hand-written backprop.
//!
//! Architecture, for `L = widths.len()` levels:
//!
//! * encoder level `l`: 3x3x3 conv (width `widths[l]`) + ReLU, then 2x2x2
//!   max pooling;
//! * bottleneck: 3x3x3 conv + ReLU at resolution `/2^L`;
//! * decoder level `l` (deepest first): upsample x2, concatenate the encoder
//!   skip at that level, 3x3x3 conv + ReLU;
//! * one supervision branch per decoder level: 1x1x1 conv to the output
//!   channel count, upsampled to full resolution;
//! * final output: 1x1x1 conv over the ReLU-activated concatenation of all
//!   branch outputs (deepest branch first).
//!
//! Each branch output and the final output are regression targets; the total
//! loss is the sum of their per-voxel mean squared errors.
//!
//! Spatial dims must be divisible by `2^L`. All convs are stride 1 with zero
//! padding, so every branch output matches the input resolution exactly.

pub mod ops;
pub mod train;

use rand::Rng;
use thiserror::Error;

use crate::rng;
use ops::{
    concat, concat_backward, maxpool2, maxpool2_backward, relu, relu_backward, upsample2,
    upsample2_backward, Conv3d, FeatureMap,
};

/// Errors from network construction, inference, and training.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bad network spec: {0}")]
    BadSpec(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model payload holds {got} parameters, expected {expect}")]
    ParamCountMismatch { got: usize, expect: usize },
}

/// Architecture description; `widths[l]` is the channel width of encoder and
/// decoder level `l` (level 0 is full resolution).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(in_channels: usize, out_channels: usize, widths: Vec<usize>) -> Result<NetworkSpec, NetError> {
        let spec = NetworkSpec {
            in_channels,
            out_channels,
            widths,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NetError::BadSpec("channel counts must be nonzero".into()));
        }
        if self.widths.is_empty() {
            return Err(NetError::BadSpec("need at least one level".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NetError::BadSpec("level widths must be nonzero".into()));
        }
        Ok(())
    }

    /// Number of encoder/decoder levels.
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Channel count of the map entering decoder level `l` from below.
    fn deeper_width(&self, l: usize) -> usize {
        if l + 1 == self.levels() {
            self.widths[self.levels() - 1] // bottleneck output
        } else {
            self.widths[l + 1]
        }
    }

    /// Checks that spatial dims support `levels()` rounds of 2x pooling.
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<(), NetError> {
        let div = 1usize << self.levels();
        if dims.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(NetError::Shape(format!(
                "dims {dims:?} must be divisible by 2^{} = {div}",
                self.levels()
            )));
        }
        Ok(())
    }

    /// All-zero parameter set with this architecture.
    pub fn zero_params(&self) -> NetworkParams {
        let levels = self.levels();
        let enc = (0..levels)
            .map(|l| {
                let cin = if l == 0 { self.in_channels } else { self.widths[l - 1] };
                Conv3d::zeros(cin, self.widths[l], 3).expect("odd kernel")
            })
            .collect();
        let bottleneck =
            Conv3d::zeros(self.widths[levels - 1], self.widths[levels - 1], 3).expect("odd kernel");
        let dec = (0..levels)
            .map(|l| {
                Conv3d::zeros(self.deeper_width(l) + self.widths[l], self.widths[l], 3)
                    .expect("odd kernel")
            })
            .collect();
        let branches = (0..levels)
            .map(|l| Conv3d::zeros(self.widths[l], self.out_channels, 1).expect("odd kernel"))
            .collect();
        let final_conv =
            Conv3d::zeros(self.widths.iter().sum(), self.out_channels, 1).expect("odd kernel");
        NetworkParams {
            spec: self.clone(),
            enc,
            bottleneck,
            dec,
            branches,
            final_conv,
        }
    }

    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)` drawn in
    /// declared layer order, biases zero.
    pub fn init_params(&self, seed: u64) -> NetworkParams {
        let mut params = self.zero_params();
        let mut r = rng::stream(seed, rng::tag::NET_INIT, 0);
        for conv in params.convs_mut() {
            let bound = 1.0 / (conv.fan_in() as f64).sqrt();
            for w in &mut conv.weights {
                *w = r.random_range(-bound..bound);
            }
        }
        params
    }
}

/// All learnable tensors of a network. Also used as the gradient container,
/// since gradients mirror the parameter structure exactly.
///
/// Declared layer order (model payload order, init draw order): encoder convs
/// shallow to deep, bottleneck, decoder convs deep to shallow, branch convs
/// deep to shallow, final conv; per conv: weights then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    /// Indexed by level, level 0 at full resolution.
    pub enc: Vec<Conv3d>,
    pub bottleneck: Conv3d,
    /// Indexed by level, like `enc`.
    pub dec: Vec<Conv3d>,
    /// Indexed by decoder level.
    pub branches: Vec<Conv3d>,
    pub final_conv: Conv3d,
}

impl NetworkParams {
    /// Convs in declared layer order.
    pub fn convs(&self) -> Vec<&Conv3d> {
        let mut v: Vec<&Conv3d> = self.enc.iter().collect();
        v.push(&self.bottleneck);
        v.extend(self.dec.iter().rev());
        v.extend(self.branches.iter().rev());
        v.push(&self.final_conv);
        v
    }

    /// Convs in declared layer order, mutable.
    pub fn convs_mut(&mut self) -> Vec<&mut Conv3d> {
        let mut v: Vec<&mut Conv3d> = self.enc.iter_mut().collect();
        v.push(&mut self.bottleneck);
        v.extend(self.dec.iter_mut().rev());
        v.extend(self.branches.iter_mut().rev());
        v.push(&mut self.final_conv);
        v
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.convs()
            .iter()
            .map(|c| c.weights.len() + c.bias.len())
            .sum()
    }

    /// Parameters flattened in declared layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in self.convs() {
            out.extend_from_slice(&c.weights);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    /// Assigns parameters from the declared-layer-order flat vector.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::ParamCountMismatch {
                got: flat.len(),
                expect: self.param_count(),
            });
        }
        let mut off = 0;
        for c in self.convs_mut() {
            let nw = c.weights.len();
            c.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = c.bias.len();
            c.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// `self += scale * other`, element-wise over all tensors.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        let other_convs: Vec<*const Conv3d> = other.convs().iter().map(|c| *c as *const _).collect();
        for (dst, src) in self.convs_mut().into_iter().zip(other_convs) {
            // Safety: `other` is a distinct immutable borrow; raw pointers only
            // bridge the two Vec collections.
            let src = unsafe { &*src };
            for (d, s) in dst.weights.iter_mut().zip(&src.weights) {
                *d += scale * s;
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += scale * s;
            }
        }
    }

    /// `self *= scale`, element-wise.
    pub fn scale(&mut self, scale: f64) {
        for c in self.convs_mut() {
            for w in &mut c.weights {
                *w *= scale;
            }
            for b in &mut c.bias {
                *b *= scale;
            }
        }
    }
}

/// A trained network bundled with the landmark labels its output channels
/// stand for and the target peak width it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub labels: Vec<String>,
    pub sigma_mm: f64,
    pub params: NetworkParams,
}

impl TrainedModel {
    pub fn new(labels: Vec<String>, sigma_mm: f64, params: NetworkParams) -> Result<TrainedModel, NetError> {
        if labels.len() != params.spec.out_channels {
            return Err(NetError::BadSpec(format!(
                "{} labels for {} output channels",
                labels.len(),
                params.spec.out_channels
            )));
        }
        if !(sigma_mm.is_finite() && sigma_mm > 0.0) {
            return Err(NetError::BadSpec(format!("bad sigma_mm {sigma_mm}")));
        }
        Ok(TrainedModel {
            labels,
            sigma_mm,
            params,
        })
    }
}

/// Saved activations from one forward pass, enough to run [`backward`].
pub struct ForwardPass {
    input_dims: [usize; 3],
    enc_pre: Vec<FeatureMap>,
    pooled: Vec<FeatureMap>,
    pool_idx: Vec<Vec<u32>>,
    bott_pre: FeatureMap,
    dec_concat: Vec<FeatureMap>,
    dec_pre: Vec<FeatureMap>,
    dec_act: Vec<FeatureMap>,
    /// Multi-scale decoder hypercolumn: the final head's input.
    hyper: FeatureMap,
    /// Full-resolution deep supervision outputs, indexed by decoder level.
    pub branches: Vec<FeatureMap>,
    /// Full-resolution network output.
    pub final_out: FeatureMap,
}

fn dims_at(dims: [usize; 3], level: usize) -> [usize; 3] {
    [dims[0] >> level, dims[1] >> level, dims[2] >> level]
}

/// Runs the network forward, keeping every intermediate needed for backprop.
pub fn forward(params: &NetworkParams, input: &FeatureMap) -> Result<ForwardPass, NetError> {
    let spec = &params.spec;
    if input.channels != spec.in_channels {
        return Err(NetError::Shape(format!(
            "input has {} channels, spec wants {}",
            input.channels, spec.in_channels
        )));
    }
    spec.check_dims(input.dims)?;
    let levels = spec.levels();

    let mut enc_pre = Vec::with_capacity(levels);
    let mut enc_act = Vec::with_capacity(levels);
    let mut pooled = Vec::with_capacity(levels);
    let mut pool_idx = Vec::with_capacity(levels);
    for l in 0..levels {
        let src = if l == 0 { input } else { &pooled[l - 1] };
        let pre = params.enc[l].forward(src)?;
        let act = relu(&pre);
        let (p, idx) = maxpool2(&act)?;
        enc_pre.push(pre);
        enc_act.push(act);
        pooled.push(p);
        pool_idx.push(idx);
    }

    let bott_pre = params.bottleneck.forward(&pooled[levels - 1])?;
    let bott_act = relu(&bott_pre);

    // Decoder runs deepest level first; caches are stored indexed by level.
    let mut dec_concat: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
    let mut dec_pre: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
    let mut dec_act: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
    for l in (0..levels).rev() {
        let deeper = if l + 1 == levels {
            &bott_act
        } else {
            dec_act[l + 1].as_ref().expect("deeper level already run")
        };
        let up = upsample2(deeper);
        let cat = concat(&up, &enc_act[l])?;
        let pre = params.dec[l].forward(&cat)?;
        let act = relu(&pre);
        dec_concat[l] = Some(cat);
        dec_pre[l] = Some(pre);
        dec_act[l] = Some(act);
    }
    let dec_concat: Vec<FeatureMap> = dec_concat.into_iter().map(Option::unwrap).collect();
    let dec_pre: Vec<FeatureMap> = dec_pre.into_iter().map(Option::unwrap).collect();
    let dec_act: Vec<FeatureMap> = dec_act.into_iter().map(Option::unwrap).collect();

    // Supervision branches, upsampled back to full resolution.
    let mut branches = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut b = params.branches[l].forward(&dec_act[l])?;
        for _ in 0..l {
            b = upsample2(&b);
        }
        branches.push(b);
    }

    // Final head over the decoder hypercolumn: level-0 activations
    // concatenated with every deeper activation upsampled to full
    // resolution. Reading the features directly keeps the head's input rank
    // at the full decoder width instead of the branch outputs' channel
    // count, which is what lets a linear readout separate more landmarks
    // than any single level carries.
    let mut hyper = dec_act[0].clone();
    for (l, act) in dec_act.iter().enumerate().skip(1) {
        let mut up = act.clone();
        for _ in 0..l {
            up = upsample2(&up);
        }
        hyper = concat(&hyper, &up)?;
    }
    let final_out = params.final_conv.forward(&hyper)?;

    Ok(ForwardPass {
        input_dims: input.dims,
        enc_pre,
        pooled,
        pool_idx,
        bott_pre,
        dec_concat,
        dec_pre,
        dec_act,
        hyper,
        branches,
        final_out,
    })
}

/// Mean squared error over all channels and voxels.
pub fn mse(pred: &FeatureMap, target: &FeatureMap) -> f64 {
    debug_assert_eq!(pred.data.len(), target.data.len());
    let n = pred.data.len() as f64;
    pred.data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

fn mse_grad(pred: &FeatureMap, target: &FeatureMap) -> FeatureMap {
    let n = pred.data.len() as f64;
    FeatureMap {
        channels: pred.channels,
        dims: pred.dims,
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| 2.0 * (p - t) / n)
            .collect(),
    }
}

/// Deep supervision loss: the sum over branch outputs and the final output of
/// the per-voxel mean squared error against `target`.
pub fn loss_total(pass: &ForwardPass, target: &FeatureMap) -> f64 {
    pass.branches
        .iter()
        .map(|b| mse(b, target))
        .sum::<f64>()
        + mse(&pass.final_out, target)
}

fn add_into(dst: &mut FeatureMap, src: &FeatureMap) {
    debug_assert_eq!(dst.data.len(), src.data.len());
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

/// Backpropagates [`loss_total`] through a cached forward pass.
///
/// Returns the loss value and the gradient of every parameter, in a
/// [`NetworkParams`]-shaped container.
pub fn backward(
    params: &NetworkParams,
    pass: &ForwardPass,
    input: &FeatureMap,
    target: &FeatureMap,
) -> Result<(f64, NetworkParams), NetError> {
    let spec = &params.spec;
    let levels = spec.levels();
    let m = spec.out_channels;
    if target.channels != m || target.dims != pass.input_dims {
        return Err(NetError::Shape(
            "target shape does not match network output".to_string(),
        ));
    }
    let loss = loss_total(pass, target);
    let mut grads = spec.zero_params();

    // Direct supervision gradients on each branch output.
    let g_branches: Vec<FeatureMap> = pass
        .branches
        .iter()
        .map(|b| mse_grad(b, target))
        .collect();

    // Final head: conv gradient, then the hypercolumn gradient split into
    // per-level channel blocks (level 0 first).
    let g_final_out = mse_grad(&pass.final_out, target);
    let (g_hyper, g_final_conv) = params.final_conv.backward(&pass.hyper, &g_final_out)?;
    grads.final_conv = g_final_conv;
    let voxels = g_hyper.voxels();
    let mut g_head_blocks: Vec<FeatureMap> = Vec::with_capacity(levels);
    let mut offset = 0;
    for l in 0..levels {
        let w = spec.widths[l];
        g_head_blocks.push(FeatureMap {
            channels: w,
            dims: g_hyper.dims,
            data: g_hyper.data[offset * voxels..(offset + w) * voxels].to_vec(),
        });
        offset += w;
    }

    // Per level: branch and head gradients ride the same upsample chain back
    // down, the branch through its 1x1 conv, the head block directly onto
    // the decoder activation.
    let mut g_dec: Vec<FeatureMap> = Vec::with_capacity(levels);
    for (l, mut g_head) in g_head_blocks.into_iter().enumerate() {
        let mut g = g_branches[l].clone();
        for j in 1..=l {
            g = upsample2_backward(&g, dims_at(pass.input_dims, j));
            g_head = upsample2_backward(&g_head, dims_at(pass.input_dims, j));
        }
        let (mut g_act, g_conv) = params.branches[l].backward(&pass.dec_act[l], &g)?;
        grads.branches[l] = g_conv;
        add_into(&mut g_act, &g_head);
        g_dec.push(g_act);
    }

    // Decoder, shallow to deep so each level's gradient is complete before
    // it is consumed.
    let mut g_bott_act: Option<FeatureMap> = None;
    let mut g_enc_skip: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
    for l in 0..levels {
        let g_pre = relu_backward(&pass.dec_pre[l], &g_dec[l]);
        let (g_cat, g_conv) = params.dec[l].backward(&pass.dec_concat[l], &g_pre)?;
        grads.dec[l] = g_conv;
        let (g_up, g_skip) = concat_backward(&g_cat, spec.deeper_width(l));
        g_enc_skip[l] = Some(g_skip);
        let g_deeper = upsample2_backward(&g_up, dims_at(pass.input_dims, l + 1));
        if l + 1 < levels {
            add_into(&mut g_dec[l + 1], &g_deeper);
        } else {
            g_bott_act = Some(g_deeper);
        }
    }

    // Bottleneck.
    let g_bott_pre = relu_backward(&pass.bott_pre, &g_bott_act.expect("decoder ran"));
    let (mut g_pooled, g_bott_conv) = params
        .bottleneck
        .backward(&pass.pooled[levels - 1], &g_bott_pre)?;
    grads.bottleneck = g_bott_conv;

    // Encoder, deep to shallow.
    for l in (0..levels).rev() {
        let mut g_act = maxpool2_backward(&pass.pool_idx[l], &g_pooled, dims_at(pass.input_dims, l));
        add_into(&mut g_act, g_enc_skip[l].as_ref().expect("skip grad set"));
        let g_pre = relu_backward(&pass.enc_pre[l], &g_act);
        let src = if l == 0 { input } else { &pass.pooled[l - 1] };
        let (g_src, g_conv) = params.enc[l].backward(src, &g_pre)?;
        grads.enc[l] = g_conv;
        g_pooled = g_src;
    }

    Ok((loss, grads))
}

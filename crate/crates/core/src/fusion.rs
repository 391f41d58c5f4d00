//! Cross-directional fusion (CDF) of a pre-/post-event feature pair.
//!
//! A channel gate is computed from the pooled concatenation of both branches
//! and each branch receives the *other* branch, gated, on top of its own
//! residual. A spatial gate computed by a 1×1 convolution over the channel-fused
//! pair then repeats the cross exchange per pixel, with residuals taken from the
//! original inputs:
//!
//! ```text
//! i_cha      = σ(reduce(gap([u_pre, u_post])))            [C]
//! u_pre_cha  = i_cha ∗ u_post + u_pre
//! u_post_cha = i_cha ∗ u_pre  + u_post
//! i_spa      = σ(conv1x1([u_pre_cha, u_post_cha]))        [1, H, W]
//! u_pre_spa  = i_spa · u_post_cha + u_pre
//! u_post_spa = i_spa · u_pre_cha  + u_post
//! ```
//!
//! One parameter set serves both directions.

use rand::Rng;

use crate::tensor::{Bindings, ParamStore, Scalar, Tape, Tensor, TensorError, Var};

/// Learnable weights of one fusion block for `C` feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T: Scalar = f32> {
    /// `[C, 2C]`: pooled `2C` features to `C` gate logits.
    pub reduce_w: Tensor<T>,
    /// `[C]`
    pub reduce_b: Tensor<T>,
    /// `[1, 2C, 1, 1]`: 1×1 convolution to a single gate map.
    pub spatial_w: Tensor<T>,
    /// `[1]`
    pub spatial_b: Tensor<T>,
}

/// Checkpoint names of the four tensors of the block at `level`.
pub fn param_names(level: usize) -> [String; 4] {
    [
        format!("cdf{level}.reduce.w"),
        format!("cdf{level}.reduce.b"),
        format!("cdf{level}.spatial.w"),
        format!("cdf{level}.spatial.b"),
    ]
}

impl<T: Scalar> FusionParams<T> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            reduce_w: Tensor::zeros(&[channels, 2 * channels]),
            reduce_b: Tensor::zeros(&[channels]),
            spatial_w: Tensor::zeros(&[1, 2 * channels, 1, 1]),
            spatial_b: Tensor::zeros(&[1]),
        }
    }

    /// Weights uniform in `±1/√fan_in` (fan-in `2C` for both maps), biases zero.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((2 * channels) as f64).sqrt();
        let mut draw = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        };
        let reduce_w = draw(&[channels, 2 * channels]);
        let spatial_w = draw(&[1, 2 * channels, 1, 1]);
        Self {
            reduce_w,
            reduce_b: Tensor::zeros(&[channels]),
            spatial_w,
            spatial_b: Tensor::zeros(&[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce_b.len()
    }

    pub fn num_elements(&self) -> usize {
        self.reduce_w.len() + self.reduce_b.len() + self.spatial_w.len() + self.spatial_b.len()
    }

    pub fn insert_into(self, level: usize, store: &mut ParamStore<T>) {
        let [rw, rb, sw, sb] = param_names(level);
        store.insert(rw, self.reduce_w);
        store.insert(rb, self.reduce_b);
        store.insert(sw, self.spatial_w);
        store.insert(sb, self.spatial_b);
    }

    pub fn from_store(level: usize, store: &ParamStore<T>) -> Result<Self, TensorError> {
        let [rw, rb, sw, sb] = param_names(level);
        let get = |n: &str| {
            store
                .get(n)
                .cloned()
                .ok_or_else(|| TensorError::UnknownParam(n.to_string()))
        };
        Ok(Self {
            reduce_w: get(&rw)?,
            reduce_b: get(&rb)?,
            spatial_w: get(&sw)?,
            spatial_b: get(&sb)?,
        })
    }

    /// Pushes the weights onto `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> FusionVars {
        FusionVars {
            reduce_w: tape.leaf(self.reduce_w.clone(), requires_grad),
            reduce_b: tape.leaf(self.reduce_b.clone(), requires_grad),
            spatial_w: tape.leaf(self.spatial_w.clone(), requires_grad),
            spatial_b: tape.leaf(self.spatial_b.clone(), requires_grad),
        }
    }
}

/// Tape handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub reduce_w: Var,
    pub reduce_b: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
}

impl FusionVars {
    pub fn from_bindings(level: usize, b: &Bindings) -> Result<Self, TensorError> {
        let [rw, rb, sw, sb] = param_names(level);
        Ok(Self {
            reduce_w: b.get(&rw)?,
            reduce_b: b.get(&rb)?,
            spatial_w: b.get(&sw)?,
            spatial_b: b.get(&sb)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelFused {
    pub u_pre_cha: Var,
    pub u_post_cha: Var,
    pub i_cha: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialFused {
    pub u_pre_spa: Var,
    pub u_post_spa: Var,
    pub i_spa: Var,
}

/// Every intermediate of one block evaluation, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct FusionTrace {
    pub u_pre: Var,
    pub u_post: Var,
    pub channel: ChannelFused,
    pub spatial: SpatialFused,
}

/// Materialized intermediates of one block evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionIO<T: Scalar = f32> {
    pub u_pre: Tensor<T>,
    pub u_post: Tensor<T>,
    pub u_pre_cha: Tensor<T>,
    pub u_post_cha: Tensor<T>,
    pub i_cha: Tensor<T>,
    pub i_spa: Tensor<T>,
    pub u_pre_spa: Tensor<T>,
    pub u_post_spa: Tensor<T>,
}

fn check_pair<T: Scalar>(
    op: &'static str,
    tape: &Tape<T>,
    a: Var,
    b: Var,
) -> Result<usize, TensorError> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb || sa.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(sa[0])
}

/// Channel-wise cross recalibration.
pub fn channel_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    u_pre: Var,
    u_post: Var,
    p: &FusionVars,
) -> Result<ChannelFused, TensorError> {
    let c = check_pair("channel_fuse", tape, u_pre, u_post)?;
    let ws = tape.value(p.reduce_w).shape();
    if ws != [c, 2 * c] {
        return Err(TensorError::ShapeMismatch {
            op: "channel_fuse reduce",
            lhs: vec![c, 2 * c],
            rhs: ws.to_vec(),
        });
    }
    let both = tape.concat_channels(u_pre, u_post)?;
    let pooled = tape.global_avg_pool(both)?;
    let logits = tape.linear(pooled, p.reduce_w, Some(p.reduce_b))?;
    let i_cha = tape.sigmoid(logits);
    let post_gated = tape.channelwise_scale(u_post, i_cha)?;
    let u_pre_cha = tape.add(post_gated, u_pre)?;
    let pre_gated = tape.channelwise_scale(u_pre, i_cha)?;
    let u_post_cha = tape.add(pre_gated, u_post)?;
    Ok(ChannelFused {
        u_pre_cha,
        u_post_cha,
        i_cha,
    })
}

/// Spatial-wise cross recalibration. Residuals come from the original inputs.
pub fn spatial_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    u_pre_cha: Var,
    u_post_cha: Var,
    u_pre: Var,
    u_post: Var,
    p: &FusionVars,
) -> Result<SpatialFused, TensorError> {
    check_pair("spatial_fuse", tape, u_pre_cha, u_post_cha)?;
    check_pair("spatial_fuse", tape, u_pre_cha, u_pre)?;
    check_pair("spatial_fuse", tape, u_pre_cha, u_post)?;
    let both = tape.concat_channels(u_pre_cha, u_post_cha)?;
    let logits = tape.conv2d(both, p.spatial_w, Some(p.spatial_b))?;
    if tape.value(logits).shape()[0] != 1 {
        return Err(TensorError::InvalidShape {
            op: "spatial_fuse",
            shape: tape.value(p.spatial_w).shape().to_vec(),
            expected: "[1, 2C, 1, 1]",
        });
    }
    let i_spa = tape.sigmoid(logits);
    let post_gated = tape.spatialwise_scale(u_post_cha, i_spa)?;
    let u_pre_spa = tape.add(post_gated, u_pre)?;
    let pre_gated = tape.spatialwise_scale(u_pre_cha, i_spa)?;
    let u_post_spa = tape.add(pre_gated, u_post)?;
    Ok(SpatialFused {
        u_pre_spa,
        u_post_spa,
        i_spa,
    })
}

/// Full block: channel fusion followed by spatial fusion.
pub fn cdf_block<T: Scalar>(
    tape: &mut Tape<T>,
    u_pre: Var,
    u_post: Var,
    p: &FusionVars,
) -> Result<FusionTrace, TensorError> {
    let channel = channel_fuse(tape, u_pre, u_post, p)?;
    let spatial = spatial_fuse(
        tape,
        channel.u_pre_cha,
        channel.u_post_cha,
        u_pre,
        u_post,
        p,
    )?;
    Ok(FusionTrace {
        u_pre,
        u_post,
        channel,
        spatial,
    })
}

impl FusionTrace {
    pub fn materialize<T: Scalar>(&self, tape: &Tape<T>) -> FusionIO<T> {
        let v = |x: Var| tape.value(x).clone();
        FusionIO {
            u_pre: v(self.u_pre),
            u_post: v(self.u_post),
            u_pre_cha: v(self.channel.u_pre_cha),
            u_post_cha: v(self.channel.u_post_cha),
            i_cha: v(self.channel.i_cha),
            i_spa: v(self.spatial.i_spa),
            u_pre_spa: v(self.spatial.u_pre_spa),
            u_post_spa: v(self.spatial.u_post_spa),
        }
    }
}

/// Evaluates the block without gradient tracking.
pub fn evaluate<T: Scalar>(
    params: &FusionParams<T>,
    u_pre: &Tensor<T>,
    u_post: &Tensor<T>,
) -> Result<FusionIO<T>, TensorError> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let a = tape.constant(u_pre.clone());
    let b = tape.constant(u_post.clone());
    Ok(cdf_block(&mut tape, a, b, &pv)?.materialize(&tape))
}

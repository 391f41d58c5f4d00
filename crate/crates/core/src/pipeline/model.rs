use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, Stage, UNetConfig};
use crate::data::SamplePair;
use crate::fusion::{self, cdf_block, FusionParams, FusionTrace, FusionVars};
use crate::tensor::{Bindings, ParamStore, Tape, Tensor, Var, IGNORE_INDEX};

/// A U-Net parameter set plus the stage it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: UNetConfig,
    pub stage: Stage,
    pub params: ParamStore<f32>,
    /// Set once stage-1 weights have been transferred into a stage-2 model.
    pub initialized_from_stage1: bool,
}

fn head_name(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "head1",
        Stage::Two => "head2",
    }
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("enc") || name.starts_with("bott") || name.starts_with("dec")
}

fn conv_shapes(
    out: &mut Vec<(String, Vec<usize>)>,
    name: String,
    cout: usize,
    cin: usize,
    k: usize,
) {
    out.push((format!("{name}.w"), vec![cout, cin, k, k]));
    out.push((format!("{name}.b"), vec![cout]));
}

/// Shared encoder/decoder tensors in construction order.
fn backbone_shapes(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    let mut cin = cfg.in_channels;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        conv_shapes(&mut v, format!("enc{l}.conv1"), c, cin, 3);
        conv_shapes(&mut v, format!("enc{l}.conv2"), c, c, 3);
        cin = c;
    }
    let c = cfg.channels(cfg.depth);
    conv_shapes(&mut v, "bott.conv1".into(), c, cin, 3);
    conv_shapes(&mut v, "bott.conv2".into(), c, c, 3);
    for l in (0..cfg.depth).rev() {
        let c = cfg.channels(l);
        conv_shapes(
            &mut v,
            format!("dec{l}.conv1"),
            c,
            cfg.channels(l + 1) + c,
            3,
        );
        conv_shapes(&mut v, format!("dec{l}.conv2"), c, c, 3);
    }
    v
}

/// Every tensor a model of `stage` must carry, in construction order.
pub fn expected_shapes(cfg: &UNetConfig, stage: Stage) -> Vec<(String, Vec<usize>)> {
    let mut v = backbone_shapes(cfg);
    conv_shapes(
        &mut v,
        head_name(stage).into(),
        stage.num_classes(),
        cfg.base_channels,
        1,
    );
    if stage == Stage::Two {
        for l in cfg.fusion_levels() {
            let c = cfg.channels(l);
            let shapes = [vec![c, 2 * c], vec![c], vec![1, 2 * c, 1, 1], vec![1]];
            v.extend(fusion::param_names(l).into_iter().zip(shapes));
        }
    }
    v
}

/// Fresh parameters: He-uniform convolutions with zero biases, fusion blocks
/// from [`FusionParams::init`].
pub fn build_model(config: &UNetConfig, stage: Stage, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut shapes = backbone_shapes(config);
    conv_shapes(
        &mut shapes,
        head_name(stage).into(),
        stage.num_classes(),
        config.base_channels,
        1,
    );
    for (name, shape) in shapes {
        let t = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            // Heads feed the softmax directly and get the smaller 1/sqrt(fan_in) range.
            let gain = if name.starts_with("head") { 1.0 } else { 6.0 };
            let bound = (gain / fan_in).sqrt();
            Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    if stage == Stage::Two {
        for l in config.fusion_levels() {
            FusionParams::init(config.channels(l), &mut rng).insert_into(l, &mut params);
        }
    }
    Ok(Model {
        config: config.clone(),
        stage,
        params,
        initialized_from_stage1: false,
    })
}

fn conv(tape: &mut Tape, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(bias))?)
}

fn double_conv(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(tape, b, &format!("{prefix}.conv1"), x)?;
    let h = tape.relu(h);
    let h = conv(tape, b, &format!("{prefix}.conv2"), h)?;
    Ok(tape.relu(h))
}

/// Encoder outputs: one skip feature per level plus the bottleneck.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl Encoded {
    /// Skips then bottleneck, materialized.
    pub fn values(&self, tape: &Tape) -> Vec<Tensor> {
        self.skips
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .map(|&v| tape.value(v).clone())
            .collect()
    }
}

pub fn encode(tape: &mut Tape, cfg: &UNetConfig, b: &Bindings, x: Var) -> Result<Encoded> {
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for l in 0..cfg.depth {
        let f = double_conv(tape, b, &format!("enc{l}"), h)?;
        skips.push(f);
        h = tape.max_pool2(f)?;
    }
    let bottleneck = double_conv(tape, b, "bott", h)?;
    Ok(Encoded { skips, bottleneck })
}

/// Decoder from `bottom` and the per-level skips to level-0 features.
pub fn decode(
    tape: &mut Tape,
    cfg: &UNetConfig,
    b: &Bindings,
    bottom: Var,
    skips: &[Var],
) -> Result<Var> {
    let mut h = bottom;
    for l in (0..cfg.depth).rev() {
        let up = tape.upsample2(h)?;
        let cat = tape.concat_channels(up, skips[l])?;
        h = double_conv(tape, b, &format!("dec{l}"), cat)?;
    }
    Ok(h)
}

pub fn forward_stage1(tape: &mut Tape, cfg: &UNetConfig, b: &Bindings, x: Var) -> Result<Var> {
    let enc = encode(tape, cfg, b, x)?;
    let feats = decode(tape, cfg, b, enc.bottleneck, &enc.skips)?;
    conv(tape, b, "head1", feats)
}

/// Handles into one stage-2 forward pass.
#[derive(Debug, Clone)]
pub struct Stage2Trace {
    pub logits: Var,
    pub pre: Encoded,
    pub post: Encoded,
    /// `(level, block)` for each configured fusion level.
    pub fusions: Vec<(usize, FusionTrace)>,
}

pub fn forward_stage2(
    tape: &mut Tape,
    cfg: &UNetConfig,
    b: &Bindings,
    pre: Var,
    post: Var,
) -> Result<Stage2Trace> {
    let enc_pre = encode(tape, cfg, b, pre)?;
    let enc_post = encode(tape, cfg, b, post)?;
    let mut skips = enc_post.skips.clone();
    let mut bottom = enc_post.bottleneck;
    let mut fusions = Vec::new();
    for l in cfg.fusion_levels() {
        let vars = FusionVars::from_bindings(l, b)?;
        let (a, p) = if l == cfg.depth {
            (enc_pre.bottleneck, enc_post.bottleneck)
        } else {
            (enc_pre.skips[l], enc_post.skips[l])
        };
        let trace = cdf_block(tape, a, p, &vars)?;
        if l == cfg.depth {
            bottom = trace.spatial.u_post_spa;
        } else {
            skips[l] = trace.spatial.u_post_spa;
        }
        fusions.push((l, trace));
    }
    let feats = decode(tape, cfg, b, bottom, &skips)?;
    let logits = conv(tape, b, "head2", feats)?;
    Ok(Stage2Trace {
        logits,
        pre: enc_pre,
        post: enc_post,
        fusions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub stage: Stage,
    pub total_params: usize,
    /// Shared encoder/decoder weights, counted once.
    pub backbone_params: usize,
    pub head_params: usize,
    pub fusion_params: usize,
    /// Multiply-accumulates of one forward pass at the given size.
    pub macs: u64,
    pub height: usize,
    pub width: usize,
}

impl Model {
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bindings {
        self.params.bind(tape, requires_grad)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let (c, h, w) = img.chw().ok_or_else(|| {
            PipelineError::Config(format!("image shape {:?} is not [c, H, W]", img.shape()))
        })?;
        if c != self.config.in_channels {
            return Err(PipelineError::Channels {
                expected: self.config.in_channels,
                found: c,
            });
        }
        self.config.check_size(h, w)
    }

    /// Class logits `[K, H, W]` for one input. Stage 2 needs `post`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        pre: Var,
        post: Option<Var>,
    ) -> Result<Var> {
        match (self.stage, post) {
            (Stage::One, _) => forward_stage1(tape, &self.config, b, pre),
            (Stage::Two, Some(post)) => {
                Ok(forward_stage2(tape, &self.config, b, pre, post)?.logits)
            }
            (Stage::Two, None) => Err(PipelineError::Config(
                "stage-2 model needs a post-disaster image".into(),
            )),
        }
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, pre: &Tensor, post: Option<&Tensor>) -> Result<Tensor> {
        self.check_image(pre)?;
        if let Some(p) = post {
            self.check_image(p)?;
            if p.shape() != pre.shape() {
                return Err(PipelineError::Config(format!(
                    "pre {:?} and post {:?} differ",
                    pre.shape(),
                    p.shape()
                )));
            }
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(pre.clone());
        let y = post.map(|p| tape.constant(p.clone()));
        let out = self.forward(&mut tape, &b, x, y)?;
        Ok(tape.value(out).clone())
    }

    /// Encoder skips and bottleneck for one image.
    pub fn encoder_features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        self.check_image(img)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        Ok(encode(&mut tape, &self.config, &b, x)?.values(&tape))
    }

    /// Per-pixel cross-entropy of one sample and the gradients of every
    /// parameter. Stage 1 trains on the pre-image against the building mask.
    pub fn loss_and_grads(&self, sample: &SamplePair) -> Result<(f64, BTreeMap<String, Tensor>)> {
        self.check_image(&sample.pre)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, true);
        let pre = tape.constant(sample.pre.clone());
        let (post, target) = match self.stage {
            Stage::One => (None, sample.mask.to_building()),
            Stage::Two => {
                self.check_image(&sample.post)?;
                (
                    Some(tape.constant(sample.post.clone())),
                    sample.mask.clone(),
                )
            }
        };
        let logits = self.forward(&mut tape, &b, pre, post)?;
        let loss = tape.softmax_cross_entropy(logits, target.data(), Some(IGNORE_INDEX))?;
        let value = tape.value(loss).item().expect("scalar loss") as f64;
        let mut grads = tape.backward(loss)?;
        Ok((value, self.params.collect_grads(&b, &mut grads)))
    }

    /// Parameter and multiply-accumulate accounting at `height × width`.
    pub fn summary(&self, height: usize, width: usize) -> ModelSummary {
        let mut s = ModelSummary {
            stage: self.stage,
            total_params: self.num_params(),
            backbone_params: 0,
            head_params: 0,
            fusion_params: 0,
            macs: 0,
            height,
            width,
        };
        for (name, p) in self.params.iter() {
            let n = p.value.len();
            if is_backbone(name) {
                s.backbone_params += n;
            } else if name.starts_with("head") {
                s.head_params += n;
            } else {
                s.fusion_params += n;
            }
        }
        s.macs = count_macs(&self.config, self.stage, height, width);
        s
    }
}

/// Convolution and fusion multiply-accumulates of one forward pass.
pub fn count_macs(cfg: &UNetConfig, stage: Stage, height: usize, width: usize) -> u64 {
    let conv = |cout: usize, cin: usize, k: usize, level: usize| -> u64 {
        let px = (height >> level) * (width >> level);
        (cout * cin * k * k * px) as u64
    };
    let mut enc = 0;
    let mut cin = cfg.in_channels;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        enc += conv(c, cin, 3, l) + conv(c, c, 3, l);
        cin = c;
    }
    let cb = cfg.channels(cfg.depth);
    enc += conv(cb, cin, 3, cfg.depth) + conv(cb, cb, 3, cfg.depth);
    let mut dec = 0;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        dec += conv(c, cfg.channels(l + 1) + c, 3, l) + conv(c, c, 3, l);
    }
    let head = conv(stage.num_classes(), cfg.base_channels, 1, 0);
    match stage {
        Stage::One => enc + dec + head,
        Stage::Two => {
            let fuse: u64 = cfg
                .fusion_levels()
                .into_iter()
                .map(|l| {
                    let c = cfg.channels(l);
                    (2 * c * c) as u64 + conv(1, 2 * c, 1, l)
                })
                .sum();
            2 * enc + dec + head + fuse
        }
    }
}

/// Which stage-2 tensors came from the stage-1 checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransferManifest {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    /// Stage-1 tensors with no stage-2 counterpart (the 2-class head).
    pub ignored: Vec<String>,
}

/// Copies every shared backbone tensor from `stage1` into `stage2`. The
/// 5-class head and the fusion blocks keep their fresh initialization.
pub fn transfer_stage1_weights(
    stage1: &ParamStore,
    stage2: &mut Model,
) -> Result<TransferManifest> {
    if stage2.stage != Stage::Two {
        return Err(PipelineError::Config(
            "transfer target must be a stage-2 model".into(),
        ));
    }
    let mut manifest = TransferManifest::default();
    let names: Vec<String> = stage2.params.names().map(str::to_string).collect();
    for name in names {
        if !is_backbone(&name) {
            manifest.fresh.push(name);
            continue;
        }
        let src = stage1
            .get(&name)
            .ok_or_else(|| PipelineError::MissingParam(name.clone()))?;
        let dst = stage2.params.param_mut(&name).expect("listed name");
        if src.shape() != dst.value.shape() {
            return Err(PipelineError::ParamShape {
                name,
                expected: dst.value.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        dst.value = src.clone();
        manifest.copied.push(name);
    }
    manifest.ignored = stage1
        .names()
        .filter(|n| !stage2.params.contains(n))
        .map(str::to_string)
        .collect();
    stage2.initialized_from_stage1 = true;
    Ok(manifest)
}

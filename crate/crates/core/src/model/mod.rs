//! Encoder–decoder network with a shared backbone and two output heads.
//!
//! All trainable scalars live in one flat vector whose layout is split into
//! three named segments (backbone, segmentation head, regression head), so
//! that teacher/student weight averaging is plain vector arithmetic.

mod checkpoint;
pub(crate) mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{ParamLayout, ParamVector, Segment, SegmentKind, TensorSpec};

use layers::{Conv, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// 2 or 3.
    pub dims: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    1
}
fn default_base_channels() -> usize {
    8
}
fn default_depth() -> usize {
    3
}
fn default_num_classes() -> usize {
    2
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            num_classes: 2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.depth < 1 || self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config(
                "depth, base_channels and in_channels must be at least 1".into(),
            ));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "only foreground/background segmentation is supported, got {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Patch sides must be divisible by this.
    pub fn side_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_patch_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.dims {
            return Err(Error::Shape(format!(
                "{}-axis patch for a {}D network",
                shape.len(),
                self.dims
            )));
        }
        let m = self.side_multiple();
        if let Some(bad) = shape.iter().find(|&&s| s % m != 0 || s == 0) {
            return Err(Error::Shape(format!(
                "patch side {bad} in {shape:?} is not a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    fn kernel(&self) -> [usize; 3] {
        if self.dims == 3 {
            [3, 3, 3]
        } else {
            [3, 3, 1]
        }
    }

    fn pool_factor(&self) -> [usize; 3] {
        if self.dims == 3 {
            [2, 2, 2]
        } else {
            [2, 2, 1]
        }
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Which output branches a network evaluates and trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActiveHead {
    Seg,
    Reg,
    Both,
}

impl ActiveHead {
    fn seg(self) -> bool {
        matches!(self, ActiveHead::Seg | ActiveHead::Both)
    }

    fn reg(self) -> bool {
        matches!(self, ActiveHead::Reg | ActiveHead::Both)
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub shape: Vec<usize>,
    /// Class-major probabilities, `[background..., foreground...]`.
    pub seg: Option<Vec<f64>>,
    /// Regression output in (-1, 1).
    pub sdf: Option<Vec<f64>>,
}

impl HeadOutputs {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Foreground probability channel.
    pub fn foreground(&self) -> Option<&[f64]> {
        let n = self.voxels();
        self.seg.as_deref().map(|p| &p[n..2 * n])
    }

    /// Per-class probability volumes.
    pub fn seg_volumes(&self) -> Option<Vec<Volume>> {
        let n = self.voxels();
        self.seg.as_ref().map(|p| {
            p.chunks(n)
                .map(|c| {
                    Volume::new(&self.shape, VolumeKind::Probability, c.to_vec())
                        .expect("head output matches its shape")
                })
                .collect()
        })
    }

    pub fn sdf_volume(&self) -> Option<Volume> {
        self.sdf.as_ref().map(|s| {
            Volume::new(&self.shape, VolumeKind::Sdf, s.clone()).expect("head output matches its shape")
        })
    }
}

enum Step {
    Conv { layer: usize, input: layers::Lowered },
    Relu { active: Vec<bool> },
    Pool { argmax: Vec<usize>, input_ext: [usize; 3] },
    Upsample { input_ext: [usize; 3] },
    SaveSkip { level: usize },
    AddSkip { level: usize },
}

/// Intermediate values recorded by [`DualHeadNetwork::forward_cached`].
pub struct ForwardCache {
    tape: Vec<Step>,
    feature: Tensor,
    seg: Option<Vec<f64>>,
    sdf: Option<Vec<f64>>,
}

/// Network instance. The three models of a run share one layout.
#[derive(Debug, Clone)]
pub struct DualHeadNetwork {
    config: NetworkConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    encoder: Vec<[usize; 2]>,
    up: Vec<usize>,
    decoder: Vec<[usize; 2]>,
    seg_head: usize,
    reg_head: usize,
    convs: Vec<Conv>,
    active: ActiveHead,
    trainable: bool,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    convs: Vec<Conv>,
    offset: usize,
}

impl LayoutBuilder {
    fn conv(&mut self, name: String, segment: SegmentKind, cin: usize, cout: usize, kernel: [usize; 3]) -> usize {
        let taps: usize = kernel.iter().product();
        let weight = self.offset;
        let wlen = cout * cin * taps;
        self.specs.push(TensorSpec {
            name: format!("{name}.weight"),
            segment,
            shape: vec![cout, cin, kernel[0], kernel[1], kernel[2]],
            offset: weight,
        });
        let bias = weight + wlen;
        self.specs.push(TensorSpec {
            name: format!("{name}.bias"),
            segment,
            shape: vec![cout],
            offset: bias,
        });
        self.offset = bias + cout;
        self.convs.push(Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
        });
        self.convs.len() - 1
    }
}

/// Builds a network with fan-in scaled normal weights and zero biases,
/// deterministic in `seed`. The network starts with both heads active.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<DualHeadNetwork> {
    config.validate()?;
    let kernel = config.kernel();
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        convs: Vec::new(),
        offset: 0,
    };
    let bb = SegmentKind::Backbone;
    let mut encoder = Vec::new();
    let mut cin = config.in_channels;
    for level in 0..config.depth {
        let c = config.channels_at(level);
        let a = b.conv(format!("enc{level}.0"), bb, cin, c, kernel);
        let z = b.conv(format!("enc{level}.1"), bb, c, c, kernel);
        encoder.push([a, z]);
        cin = c;
    }
    let mut up = vec![usize::MAX; config.depth.saturating_sub(1)];
    let mut decoder = vec![[usize::MAX; 2]; config.depth.saturating_sub(1)];
    for level in (0..config.depth - 1).rev() {
        let c = config.channels_at(level);
        up[level] = b.conv(format!("up{level}"), bb, config.channels_at(level + 1), c, [1, 1, 1]);
        let a = b.conv(format!("dec{level}.0"), bb, c, c, kernel);
        let z = b.conv(format!("dec{level}.1"), bb, c, c, kernel);
        decoder[level] = [a, z];
    }
    let base = config.base_channels;
    let backbone_len = b.offset;
    let seg_head = b.conv("seg_head".into(), SegmentKind::SegHead, base, config.num_classes, [1, 1, 1]);
    let seg_len = b.offset - backbone_len;
    let reg_head = b.conv("reg_head".into(), SegmentKind::RegHead, base, 1, kernel);
    let reg_len = b.offset - backbone_len - seg_len;

    let layout = ParamLayout {
        segments: vec![
            Segment {
                kind: SegmentKind::Backbone,
                offset: 0,
                len: backbone_len,
            },
            Segment {
                kind: SegmentKind::SegHead,
                offset: backbone_len,
                len: seg_len,
            },
            Segment {
                kind: SegmentKind::RegHead,
                offset: backbone_len + seg_len,
                len: reg_len,
            },
        ],
        tensors: b.specs,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.len()];
    for conv in &b.convs {
        let std = (2.0 / conv.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        for w in &mut params[conv.weight..conv.weight + conv.weight_len()] {
            *w = normal.sample(&mut rng);
        }
    }

    Ok(DualHeadNetwork {
        config: config.clone(),
        layout,
        params,
        encoder,
        up,
        decoder,
        seg_head,
        reg_head,
        convs: b.convs,
        active: ActiveHead::Both,
        trainable: true,
    })
}

impl DualHeadNetwork {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn active_head(&self) -> ActiveHead {
        self.active
    }

    pub fn set_active_head(&mut self, head: ActiveHead) {
        self.active = head;
    }

    pub fn with_active_head(mut self, head: ActiveHead) -> Self {
        self.active = head;
        self
    }

    /// Marks the network as updated only through weight averaging; calls to
    /// [`backward`](Self::backward) are then rejected.
    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn get_params(&self) -> ParamVector {
        ParamVector {
            values: self.params.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<()> {
        self.layout.ensure_matches(&p.layout)?;
        self.params.copy_from_slice(&p.values);
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replaces every scalar in place; `values` must follow this network's layout.
    pub fn copy_params_from(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    pub fn forward(&self, patch: &Volume) -> Result<HeadOutputs> {
        Ok(self.forward_cached(patch)?.0)
    }

    /// Forward pass that also records what [`backward`](Self::backward) needs.
    pub fn forward_cached(&self, patch: &Volume) -> Result<(HeadOutputs, ForwardCache)> {
        if self.config.in_channels != 1 {
            return Err(Error::Shape(format!(
                "single-volume input given to a {}-channel network",
                self.config.in_channels
            )));
        }
        self.config.check_patch_shape(patch.shape())?;
        let input = Tensor {
            channels: 1,
            ext: patch.extent3(),
            data: patch.data().to_vec(),
        };
        let cache = self.run(input);
        let outputs = HeadOutputs {
            shape: patch.shape().to_vec(),
            seg: cache.seg.clone(),
            sdf: cache.sdf.clone(),
        };
        Ok((outputs, cache))
    }

    fn conv_relu(&self, layer: usize, input: Tensor, tape: &mut Vec<Step>) -> Tensor {
        let input = self.convs[layer].lower(input);
        let mut out = self.convs[layer].forward_lowered(&self.params, &input);
        tape.push(Step::Conv { layer, input });
        let active = layers::relu_inplace(&mut out);
        tape.push(Step::Relu { active });
        out
    }

    fn run(&self, input: Tensor) -> ForwardCache {
        let mut tape = Vec::new();
        let mut h = input;
        let mut skips: Vec<Tensor> = Vec::with_capacity(self.config.depth);
        let pool = self.config.pool_factor();
        for (level, pair) in self.encoder.iter().enumerate() {
            if level > 0 {
                let input_ext = h.ext;
                let (pooled, argmax) = layers::max_pool(&h, pool);
                tape.push(Step::Pool { argmax, input_ext });
                h = pooled;
            }
            h = self.conv_relu(pair[0], h, &mut tape);
            h = self.conv_relu(pair[1], h, &mut tape);
            if level + 1 < self.config.depth {
                skips.push(h.clone());
                tape.push(Step::SaveSkip { level });
            }
        }
        for level in (0..self.config.depth - 1).rev() {
            let input_ext = h.ext;
            let u = layers::upsample(&h, pool);
            tape.push(Step::Upsample { input_ext });
            let u = self.convs[self.up[level]].lower(u);
            let mut s = self.convs[self.up[level]].forward_lowered(&self.params, &u);
            tape.push(Step::Conv {
                layer: self.up[level],
                input: u,
            });
            for (a, b) in s.data.iter_mut().zip(&skips[level].data) {
                *a += b;
            }
            tape.push(Step::AddSkip { level });
            h = self.conv_relu(self.decoder[level][0], s, &mut tape);
            h = self.conv_relu(self.decoder[level][1], h, &mut tape);
        }
        let feature = h;
        let n = feature.voxels();
        let seg = self.active.seg().then(|| {
            let logits = self.convs[self.seg_head].forward(&self.params, &feature);
            softmax_channels(&logits.data, self.config.num_classes, n)
        });
        let sdf = self.active.reg().then(|| {
            let pre = self.convs[self.reg_head].forward(&self.params, &feature);
            pre.data.into_iter().map(f64::tanh).collect()
        });
        ForwardCache {
            tape,
            feature,
            seg,
            sdf,
        }
    }

    /// Accumulates parameter gradients into `grads` given the gradients of a
    /// loss with respect to the head outputs. Heads without an incoming
    /// gradient receive none.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_seg: Option<&[f64]>,
        grad_sdf: Option<&[f64]>,
        grads: &mut [f64],
    ) -> Result<()> {
        if !self.trainable {
            return Err(Error::Config(
                "backward called on a network that is updated only by averaging".into(),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::LayoutMismatch(format!(
                "gradient buffer of {} for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        let n = cache.feature.voxels();
        let mut grad = Tensor::zeros(cache.feature.channels, cache.feature.ext);
        if let Some(g) = grad_seg {
            let probs = cache
                .seg
                .as_ref()
                .ok_or_else(|| Error::Config("segmentation head was not evaluated".into()))?;
            if g.len() != probs.len() {
                return Err(Error::Shape(format!("{} seg gradients for {} outputs", g.len(), probs.len())));
            }
            let classes = self.config.num_classes;
            let mut dlogits = Tensor::zeros(classes, cache.feature.ext);
            for v in 0..n {
                let dot: f64 = (0..classes).map(|c| probs[c * n + v] * g[c * n + v]).sum();
                for c in 0..classes {
                    dlogits.data[c * n + v] = probs[c * n + v] * (g[c * n + v] - dot);
                }
            }
            let dfeat = self.convs[self.seg_head]
                .backward(&self.params, &cache.feature, &dlogits, grads, true)
                .expect("input gradient requested");
            add_into(&mut grad, &dfeat);
        }
        if let Some(g) = grad_sdf {
            let out = cache
                .sdf
                .as_ref()
                .ok_or_else(|| Error::Config("regression head was not evaluated".into()))?;
            if g.len() != out.len() {
                return Err(Error::Shape(format!("{} sdf gradients for {} outputs", g.len(), out.len())));
            }
            let dpre = Tensor {
                channels: 1,
                ext: cache.feature.ext,
                data: out.iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect(),
            };
            let dfeat = self.convs[self.reg_head]
                .backward(&self.params, &cache.feature, &dpre, grads, true)
                .expect("input gradient requested");
            add_into(&mut grad, &dfeat);
        }

        let mut skip_grads: Vec<Option<Tensor>> = (0..self.config.depth).map(|_| None).collect();
        let pool = self.config.pool_factor();
        let first_conv = match cache.tape.first() {
            Some(Step::Conv { layer, .. }) => *layer,
            _ => usize::MAX,
        };
        for step in cache.tape.iter().rev() {
            match step {
                Step::Relu { active } => layers::relu_backward(&mut grad, active),
                Step::Conv { layer, input } => {
                    let want_input = *layer != first_conv;
                    match self.convs[*layer].backward_lowered(&self.params, input, &grad, grads, want_input) {
                        Some(g) => grad = g,
                        None => break,
                    }
                }
                Step::Pool { argmax, input_ext } => {
                    grad = layers::max_pool_backward(&grad, argmax, *input_ext);
                }
                Step::Upsample { input_ext } => {
                    grad = layers::upsample_backward(&grad, pool, *input_ext);
                }
                Step::AddSkip { level } => skip_grads[*level] = Some(grad.clone()),
                Step::SaveSkip { level } => {
                    if let Some(g) = skip_grads[*level].take() {
                        add_into(&mut grad, &g);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

fn softmax_channels(logits: &[f64], classes: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for v in 0..n {
        let max = (0..classes)
            .map(|c| logits[c * n + v])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..classes {
            let e = (logits[c * n + v] - max).exp();
            out[c * n + v] = e;
            sum += e;
        }
        for c in 0..classes {
            out[c * n + v] /= sum;
        }
    }
    out
}

//! Micro anchor-grid detector.
//!
//! A stack of 3x3 convolutions brings the image to a stride-`s` feature map
//! (the local feature). Two heads read it: a classification head with `K+1`
//! logits per cell and a regression head with 4 box deltas per cell. Each head
//! is `1x1 conv -> relu -> dropout -> 1x1 conv`; dropout lives only in the
//! heads. The global feature is the spatial mean of the local feature.

mod anchors;
mod mc;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use anchors::{
    apply_deltas, decode, encode, nms, AnchorGrid, Detection, HeadOutputs, DELTA_CLIP,
};
pub use mc::{mc_predict, mc_predict_all};

use crate::error::{Error, Result};
use crate::numerics::{
    derive_seed, forward as eval_graph, rng_for, Graph, NodeId, ParamSet, Tensor,
};
use crate::scenes::ImageSample;

pub const ARCH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub stride: usize,
    /// Output channels of each 3x3 stem convolution. The first `log2(stride)`
    /// layers have stride 2, the rest stride 1.
    pub stem_channels: Vec<usize>,
    pub head_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            height: 64,
            width: 64,
            channels: 1,
            num_classes: 3,
            stride: 8,
            stem_channels: vec![8, 16, 16, 32],
            head_hidden: 32,
            dropout_rate: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("detector.{key}"),
                msg,
            })
        };
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return bad(
                "stride",
                format!("{} is not a power of two >= 2", self.stride),
            );
        }
        let downsamples = self.stride.trailing_zeros() as usize;
        if self.stem_channels.len() < downsamples {
            return bad(
                "stem_channels",
                format!(
                    "need at least {downsamples} layers for stride {}",
                    self.stride
                ),
            );
        }
        if !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return bad(
                "stride",
                "image size must be a multiple of the stride".into(),
            );
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must lie in [0, 1)".into());
        }
        if self.num_classes < 2 || self.channels == 0 || self.head_hidden == 0 {
            return bad("num_classes", "need K >= 2 and non-empty layers".into());
        }
        Ok(())
    }

    pub fn anchors(&self) -> AnchorGrid {
        AnchorGrid::new(self.height, self.width, self.stride)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stem_channels.last().expect("validated non-empty stem")
    }

    fn layer_strides(&self) -> Vec<usize> {
        let downsamples = self.stride.trailing_zeros() as usize;
        (0..self.stem_channels.len())
            .map(|i| if i < downsamples { 2 } else { 1 })
            .collect()
    }
}

fn conv_param<R: Rng + ?Sized>(rng: &mut R, out: usize, inp: usize, k: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(&[out, inp, k, k], |_| normal.sample(rng))
}

/// He-initialized detector parameters.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0xde7]);
    let mut p = ParamSet::new();
    let mut inp = cfg.channels;
    for (i, &out) in cfg.stem_channels.iter().enumerate() {
        let std = (2.0 / (inp * 9) as f64).sqrt();
        p.insert(
            format!("stem.{i}.w"),
            conv_param(&mut rng, out, inp, 3, std),
        );
        p.insert(format!("stem.{i}.b"), Tensor::zeros(&[out]));
        inp = out;
    }
    let feat = cfg.feature_channels();
    for (head, outputs) in [("cls", cfg.num_classes + 1), ("reg", 4)] {
        let std = (2.0 / feat as f64).sqrt();
        p.insert(
            format!("{head}.hidden.w"),
            conv_param(&mut rng, cfg.head_hidden, feat, 1, std),
        );
        p.insert(
            format!("{head}.hidden.b"),
            Tensor::zeros(&[cfg.head_hidden]),
        );
        p.insert(
            format!("{head}.out.w"),
            conv_param(&mut rng, outputs, cfg.head_hidden, 1, 0.01),
        );
        p.insert(format!("{head}.out.b"), Tensor::zeros(&[outputs]));
    }
    Ok(p)
}

/// Inference mode: dropout off, or on with masks drawn from a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    Stochastic(u64),
}

/// Graph nodes exposed by [`build_graph`].
#[derive(Clone, Copy, Debug)]
pub struct DetectorNodes {
    pub cls: NodeId,
    pub reg: NodeId,
    /// Stride-`s` feature map, `[N, C, H/s, W/s]`.
    pub local: NodeId,
    /// Spatial mean of `local`, `[N, C]`.
    pub global: NodeId,
}

pub fn build_stem(g: &mut Graph, cfg: &DetectorConfig, input: NodeId) -> NodeId {
    let mut x = input;
    for (i, stride) in cfg.layer_strides().into_iter().enumerate() {
        let w = g.param(format!("stem.{i}.w"));
        let b = g.param(format!("stem.{i}.b"));
        let y = g.conv2d(x, w, b, stride, 1);
        x = g.relu(y);
    }
    x
}

/// Both heads on top of `local`; returns `(cls, reg)`.
pub fn build_heads(
    g: &mut Graph,
    cfg: &DetectorConfig,
    local: NodeId,
    mode: Mode,
) -> (NodeId, NodeId) {
    let mut head = |name: &str, tag: u64| {
        let w = g.param(format!("{name}.hidden.w"));
        let b = g.param(format!("{name}.hidden.b"));
        let h = g.conv2d(local, w, b, 1, 0);
        let mut h = g.relu(h);
        if let Mode::Stochastic(seed) = mode {
            if cfg.dropout_rate > 0.0 {
                h = g.dropout(h, cfg.dropout_rate, derive_seed(seed, &[tag]));
            }
        }
        let w = g.param(format!("{name}.out.w"));
        let b = g.param(format!("{name}.out.b"));
        g.conv2d(h, w, b, 1, 0)
    };
    let cls = head("cls", 1);
    let reg = head("reg", 2);
    (cls, reg)
}

pub fn build_graph(
    g: &mut Graph,
    cfg: &DetectorConfig,
    input: NodeId,
    mode: Mode,
) -> DetectorNodes {
    let local = build_stem(g, cfg, input);
    let global = g.mean_pool(local);
    let (cls, reg) = build_heads(g, cfg, local, mode);
    DetectorNodes {
        cls,
        reg,
        local,
        global,
    }
}

/// Output of one detector forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub cls: Tensor,
    pub reg: Tensor,
    pub local: Tensor,
    pub global: Tensor,
}

impl ForwardOutput {
    pub fn heads(&self) -> Vec<HeadOutputs> {
        HeadOutputs::split_batch(&self.cls, &self.reg)
    }
}

pub(crate) fn check_images(cfg: &DetectorConfig, images: &[&ImageSample]) -> Result<()> {
    for img in images {
        if (img.height, img.width, img.channels) != (cfg.height, cfg.width, cfg.channels) {
            return Err(Error::shape(
                format!("detector input (image {})", img.id),
                format!(
                    "{}x{}x{} but the detector expects {}x{}x{}",
                    img.height, img.width, img.channels, cfg.height, cfg.width, cfg.channels
                ),
            ));
        }
    }
    Ok(())
}

/// Runs the detector on a batch of images.
pub fn forward(
    params: &ParamSet,
    cfg: &DetectorConfig,
    images: &[&ImageSample],
    mode: Mode,
) -> Result<ForwardOutput> {
    check_images(cfg, images)?;
    let mut g = Graph::new();
    let x = g.input(0);
    let nodes = build_graph(&mut g, cfg, x, mode);
    let batch = ImageSample::batch_tensor(images)?;
    let eval = eval_graph(&g, params, &[batch])?;
    Ok(ForwardOutput {
        cls: eval.value(nodes.cls).clone(),
        reg: eval.value(nodes.reg).clone(),
        local: eval.value(nodes.local).clone(),
        global: eval.value(nodes.global).clone(),
    })
}

/// Deterministic forward, decode at `conf_thresh`, then class-wise NMS.
pub fn detect(
    params: &ParamSet,
    cfg: &DetectorConfig,
    image: &ImageSample,
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let out = forward(params, cfg, &[image], Mode::Deterministic)?;
    let head = &out.heads()[0];
    let dets = decode(
        head,
        &cfg.anchors(),
        cfg.width as f64,
        cfg.height as f64,
        conf_thresh,
    );
    Ok(nms(dets, nms_iou))
}

/// [`detect`] over many images in parallel, batched, results in input order.
pub fn detect_all(
    params: &ParamSet,
    cfg: &DetectorConfig,
    images: &[ImageSample],
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let anchors = cfg.anchors();
    let chunks: Vec<Vec<Vec<Detection>>> = images
        .par_chunks(16)
        .map(|chunk| {
            let refs: Vec<&ImageSample> = chunk.iter().collect();
            let out = forward(params, cfg, &refs, Mode::Deterministic)?;
            Ok(out
                .heads()
                .iter()
                .map(|head| {
                    let dets = decode(
                        head,
                        &anchors,
                        cfg.width as f64,
                        cfg.height as f64,
                        conf_thresh,
                    );
                    nms(dets, nms_iou)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch_version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub stride: usize,
    pub dropout_rate: f64,
    pub stem_channels: Vec<usize>,
    pub head_hidden: usize,
}

/// Detector parameters plus the architecture header needed to rebuild the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(cfg: &DetectorConfig, params: ParamSet) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                arch_version: ARCH_VERSION,
                height: cfg.height,
                width: cfg.width,
                channels: cfg.channels,
                num_classes: cfg.num_classes,
                stride: cfg.stride,
                dropout_rate: cfg.dropout_rate,
                stem_channels: cfg.stem_channels.clone(),
                head_hidden: cfg.head_hidden,
            },
            params,
        }
    }

    pub fn config(&self) -> DetectorConfig {
        let h = &self.header;
        DetectorConfig {
            height: h.height,
            width: h.width,
            channels: h.channels,
            num_classes: h.num_classes,
            stride: h.stride,
            stem_channels: h.stem_channels.clone(),
            head_hidden: h.head_hidden,
            dropout_rate: h.dropout_rate,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.params.is_finite() {
            return Err(Error::Contract(
                "refusing to save non-finite parameters".into(),
            ));
        }
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.header.arch_version != ARCH_VERSION {
            return Err(Error::Contract(format!(
                "{}: checkpoint arch version {} (expected {ARCH_VERSION})",
                path.display(),
                ck.header.arch_version
            )));
        }
        init_params(&ck.config(), 0)?.check_same_layout(&ck.params)?;
        Ok(ck)
    }
}

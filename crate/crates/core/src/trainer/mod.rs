//! Source pretraining, mean-teacher alignment against the self-divided target
//! set, and mosaic fine-tuning.

mod augment;
mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{
    augment, hflip_image, mosaic_box, mosaic_box_inverse, mosaic_compose, quadrant_offsets,
    BoxTransform, MosaicLabel, Strength, StrongAug, MOSAIC_MIN_AREA,
};
pub use optim::Sgd;

use crate::detector::{decode, forward as det_forward, nms, DetectorConfig, Mode};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{
    assign_anchors, fused_graph, init_discriminators, Adversarial, AnchorAssignment,
    DetectionTargets,
};
use crate::numerics::{backward, derive_seed, forward, rng_for, ParamSet};
use crate::scenes::{GtBox, ImageSample};

const AUG_SIMILAR: u64 = 1;
const AUG_DISSIMILAR: u64 = 2;
const DROPOUT: u64 = 3;
const AUG_MOSAIC: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate of the adaptation stages.
    pub lr: f64,
    /// Learning rate of source pretraining.
    pub pretrain_lr: f64,
    pub momentum: f64,
    pub pretrain_iters: usize,
    pub pretrain_batch: usize,
    pub align_iters: usize,
    /// Images drawn from each subset per alignment step.
    pub align_batch: usize,
    pub finetune_iters: usize,
    /// Mosaics per fine-tuning step.
    pub finetune_batch: usize,
    pub ema_alpha: f64,
    pub ema_period: usize,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub strong_aug: StrongAug,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            pretrain_lr: 0.05,
            momentum: 0.9,
            pretrain_iters: 3000,
            pretrain_batch: 8,
            align_iters: 2000,
            align_batch: 2,
            finetune_iters: 2000,
            finetune_batch: 1,
            ema_alpha: 0.9,
            ema_period: 100,
            tau: 0.7,
            nms_iou: 0.5,
            match_iou: 0.5,
            lambda: 1.0,
            gamma: 5.0,
            strong_aug: StrongAug::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                msg: msg.into(),
            })
        };
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.lr >= 0.0) || !(self.pretrain_lr >= 0.0) {
            return bad("lr", "learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !unit(self.ema_alpha) {
            return bad("ema_alpha", "must lie in [0, 1]");
        }
        if self.ema_period == 0 {
            return bad("ema_period", "must be positive");
        }
        if !unit(self.tau) {
            return bad("tau", "must lie in [0, 1]");
        }
        if !unit(self.nms_iou) || !unit(self.match_iou) {
            return bad("nms_iou", "IoU thresholds must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", "must be >= 0");
        }
        if self.pretrain_batch == 0 || self.align_batch == 0 || self.finetune_batch == 0 {
            return bad("align_batch", "batch sizes must be positive");
        }
        if !unit(self.strong_aug.flip_prob)
            || self.strong_aug.brightness < 0.0
            || self.strong_aug.noise_std < 0.0
        {
            return bad(
                "strong_aug",
                "flip_prob in [0, 1], brightness and noise_std >= 0",
            );
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub iter: u64,
    #[serde(rename = "L_mt")]
    pub l_mt: f64,
    #[serde(rename = "L_local")]
    pub l_local: Option<f64>,
    #[serde(rename = "L_global")]
    pub l_global: Option<f64>,
    pub lr: f64,
    /// Set when no image of the step had a pseudo label.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub background_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub teacher: ParamSet,
    pub student: ParamSet,
    pub disc: ParamSet,
    pub opt: Sgd,
    pub iter: u64,
}

impl TrainerState {
    /// Teacher and student both start from `init`.
    pub fn new(init: ParamSet, det: &DetectorConfig, momentum: f64, seed: u64) -> Self {
        TrainerState {
            teacher: init.clone(),
            student: init,
            disc: init_discriminators(det.feature_channels(), seed),
            opt: Sgd::new(momentum),
            iter: 0,
        }
    }
}

/// `teacher = alpha * teacher + (1 - alpha) * student`, coordinate-wise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain {
            name: "alpha",
            value: alpha,
            expected: "0 <= alpha <= 1",
        });
    }
    teacher.check_same_layout(student)?;
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("same layout");
        for (ti, si) in t.data_mut().iter_mut().zip(s.data()) {
            *ti = alpha * *ti + (1.0 - alpha) * si;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

impl PseudoLabel {
    pub fn gt(&self) -> GtBox {
        GtBox {
            bbox: self.bbox,
            class: self.class,
        }
    }
}

/// Deterministic teacher pass, decode at `tau`, class-wise NMS.
pub fn pseudo_label_batch(
    teacher: &ParamSet,
    det: &DetectorConfig,
    images: &[&ImageSample],
    tau: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<PseudoLabel>>> {
    let out = det_forward(teacher, det, images, Mode::Deterministic)?;
    let anchors = det.anchors();
    Ok(out
        .heads()
        .iter()
        .map(|head| {
            let dets = decode(head, &anchors, det.width as f64, det.height as f64, tau);
            nms(dets, nms_iou)
                .into_iter()
                .map(|d| PseudoLabel {
                    bbox: d.bbox,
                    class: d.class(),
                    confidence: d.confidence,
                })
                .collect()
        })
        .collect())
}

pub fn make_pseudo_labels(
    teacher: &ParamSet,
    det: &DetectorConfig,
    image: &ImageSample,
    tau: f64,
    nms_iou: f64,
) -> Result<Vec<PseudoLabel>> {
    Ok(pseudo_label_batch(teacher, det, &[image], tau, nms_iou)?.remove(0))
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_mt: f64,
    pub l_local: Option<f64>,
    pub l_global: Option<f64>,
    pub background_only: bool,
}

fn is_disc(name: &str) -> bool {
    name.starts_with("disc.")
}

/// One SGD step of the student (and the discriminators when `adversarial` is
/// set) on `batch`, whose first `labels.len()` images are supervised.
fn supervised_step(
    state: &mut TrainerState,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    lr: f64,
    batch: &[&ImageSample],
    labels: &[Vec<GtBox>],
    adversarial: Option<&Adversarial>,
    dropout_seed: u64,
) -> Result<StepLosses> {
    let anchors = det.anchors();
    let assignments: Vec<AnchorAssignment> = labels
        .iter()
        .map(|l| assign_anchors(&anchors, l, cfg.match_iou))
        .collect();
    let slots: Vec<Option<&AnchorAssignment>> =
        (0..batch.len()).map(|i| assignments.get(i)).collect();
    let targets = DetectionTargets::new(&slots, det.num_classes, &anchors)?;
    let (graph, nodes) = fused_graph(
        det,
        batch.len(),
        Mode::Stochastic(dropout_seed),
        &targets,
        adversarial,
    )?;
    let mut params = state.student.clone();
    if adversarial.is_some() {
        params.extend(state.disc.clone())?;
    }
    let input = ImageSample::batch_tensor(batch)?;
    let eval = forward(&graph, &params, &[input])?;
    let grads = backward(&graph, &eval, &params)?;
    state
        .opt
        .step(&mut state.student, &grads, lr, |n| !is_disc(n))?;
    if adversarial.is_some() {
        state.opt.step(&mut state.disc, &grads, lr, is_disc)?;
    }
    let value = |id| eval.value(id).data()[0];
    Ok(StepLosses {
        l_mt: value(nodes.l_cls) + value(nodes.l_reg),
        l_local: nodes.l_local.map(value),
        l_global: nodes.l_global.map(value),
        background_only: labels.iter().all(Vec::is_empty),
    })
}

fn finish_step(state: &mut TrainerState, cfg: &TrainConfig) -> Result<()> {
    state.iter += 1;
    if state.iter.is_multiple_of(cfg.ema_period as u64) {
        ema_update(&mut state.teacher, &state.student, cfg.ema_alpha)?;
    }
    Ok(())
}

/// Source pretraining step: flipped ground truth, dropout on, no teacher.
pub fn pretrain_step(
    state: &mut TrainerState,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    batch: &[&ImageSample],
    step_seed: u64,
) -> Result<StepLosses> {
    let flip_only = StrongAug {
        flip_prob: cfg.strong_aug.flip_prob,
        brightness: 0.0,
        noise_std: 0.0,
    };
    let augmented: Vec<ImageSample> = batch
        .iter()
        .enumerate()
        .map(|(i, img)| {
            augment(
                img,
                &mut rng_for(step_seed, &[AUG_SIMILAR, i as u64]),
                Strength::Strong,
                &flip_only,
            )
            .0
        })
        .collect();
    let refs: Vec<&ImageSample> = augmented.iter().collect();
    let labels: Vec<Vec<GtBox>> = augmented.iter().map(|a| a.boxes.clone()).collect();
    let losses = supervised_step(
        state,
        det,
        cfg,
        cfg.pretrain_lr,
        &refs,
        &labels,
        None,
        derive_seed(step_seed, &[DROPOUT]),
    )?;
    state.iter += 1;
    Ok(losses)
}

/// Teacher labels on the clean images, strong augmentation for the student
/// with the labels carried along.
fn teach(
    state: &TrainerState,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    images: &[&ImageSample],
    step_seed: u64,
    stream: u64,
) -> Result<(Vec<ImageSample>, Vec<Vec<GtBox>>)> {
    let pseudo = pseudo_label_batch(&state.teacher, det, images, cfg.tau, cfg.nms_iou)?;
    let mut augmented = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for (i, (img, pl)) in images.iter().zip(&pseudo).enumerate() {
        let mut rng = rng_for(step_seed, &[stream, i as u64]);
        let (aug, t) = augment(img, &mut rng, Strength::Strong, &cfg.strong_aug);
        labels.push(
            pl.iter()
                .map(|p| GtBox {
                    bbox: t.apply(&p.bbox),
                    class: p.class,
                })
                .collect(),
        );
        augmented.push(aug);
    }
    Ok((augmented, labels))
}

/// Plain mean-teacher step on the source-similar batch.
pub fn mean_teacher_step(
    state: &mut TrainerState,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    similar: &[&ImageSample],
    step_seed: u64,
) -> Result<StepLosses> {
    let (aug, labels) = teach(state, det, cfg, similar, step_seed, AUG_SIMILAR)?;
    let refs: Vec<&ImageSample> = aug.iter().collect();
    let losses = supervised_step(
        state,
        det,
        cfg,
        cfg.lr,
        &refs,
        &labels,
        None,
        derive_seed(step_seed, &[DROPOUT]),
    )?;
    finish_step(state, cfg)?;
    Ok(losses)
}

/// Mean-teacher loss on the similar batch plus the adversarial losses on
/// similar and dissimilar features, trained through gradient reversal.
pub fn align_step(
    state: &mut TrainerState,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    similar: &[&ImageSample],
    dissimilar: &[&ImageSample],
    lambda: f64,
    step_seed: u64,
) -> Result<StepLosses> {
    if similar.is_empty() || dissimilar.is_empty() {
        return Err(Error::Contract(
            "alignment needs both subsets in every step".into(),
        ));
    }
    let (mut aug, labels) = teach(state, det, cfg, similar, step_seed, AUG_SIMILAR)?;
    for (i, img) in dissimilar.iter().enumerate() {
        let mut rng = rng_for(step_seed, &[AUG_DISSIMILAR, i as u64]);
        aug.push(augment(img, &mut rng, Strength::Strong, &cfg.strong_aug).0);
    }
    let refs: Vec<&ImageSample> = aug.iter().collect();
    let adv = Adversarial {
        similar: (0..refs.len()).map(|i| i < similar.len()).collect(),
        lambda,
        gamma: cfg.gamma,
    };
    let losses = supervised_step(
        state,
        det,
        cfg,
        cfg.lr,
        &refs,
        &labels,
        Some(&adv),
        derive_seed(step_seed, &[DROPOUT]),
    )?;
    finish_step(state, cfg)?;
    Ok(losses)
}

/// Fine-tuning step: the teacher labels each group of four images, the
/// student learns from their mosaics.
pub fn finetune_step(
    state: &mut TrainerState,
    det: &DetectorConfig,
    cfg: &TrainConfig,
    groups: &[[&ImageSample; 4]],
    step_seed: u64,
) -> Result<StepLosses> {
    let mut mosaics = Vec::with_capacity(groups.len());
    let mut labels = Vec::with_capacity(groups.len());
    for (gi, four) in groups.iter().enumerate() {
        let pseudo = pseudo_label_batch(&state.teacher, det, four, cfg.tau, cfg.nms_iou)?;
        let sets: Vec<Vec<GtBox>> = pseudo
            .iter()
            .map(|p| p.iter().map(PseudoLabel::gt).collect())
            .collect();
        let (canvas, _) = mosaic_compose(*four, [&sets[0], &sets[1], &sets[2], &sets[3]])?;
        let mut rng = rng_for(step_seed, &[AUG_MOSAIC, gi as u64]);
        let (aug, t) = augment(&canvas, &mut rng, Strength::Strong, &cfg.strong_aug);
        labels.push(t.apply_all(&canvas.boxes));
        mosaics.push(aug);
    }
    let refs: Vec<&ImageSample> = mosaics.iter().collect();
    let losses = supervised_step(
        state,
        det,
        cfg,
        cfg.lr,
        &refs,
        &labels,
        None,
        derive_seed(step_seed, &[DROPOUT]),
    )?;
    finish_step(state, cfg)?;
    Ok(losses)
}

/// Endless shuffled passes over `0..n`; each pass is reshuffled from its own
/// seed so the order never depends on how far other samplers have advanced.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = EpochSampler {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng_for(self.seed, &[self.epoch]));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.n {
                    self.epoch += 1;
                    self.shuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

const STAGE_PRETRAIN: u64 = 1;
const STAGE_ALIGN: u64 = 3;
const STAGE_FINETUNE: u64 = 4;
const SAMPLER: u64 = 0x5a;

fn log_step(
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
    stage: &str,
    iter: u64,
    lr: f64,
    l: StepLosses,
) -> Result<()> {
    log(LogRecord {
        stage: stage.into(),
        iter,
        l_mt: l.l_mt,
        l_local: l.l_local,
        l_global: l.l_global,
        lr,
        background_only: l.background_only,
    })
}

/// Stage 1 from freshly initialized parameters.
pub fn run_pretrain(
    det: &DetectorConfig,
    cfg: &TrainConfig,
    init: ParamSet,
    source: &[ImageSample],
    seed: u64,
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
) -> Result<ParamSet> {
    if source.is_empty() {
        return Err(Error::Contract("pretraining needs source images".into()));
    }
    let mut state = TrainerState::new(init, det, cfg.momentum, seed);
    let mut sampler =
        EpochSampler::new(source.len(), derive_seed(seed, &[STAGE_PRETRAIN, SAMPLER]));
    for it in 0..cfg.pretrain_iters as u64 {
        let batch: Vec<&ImageSample> = sampler
            .next_batch(cfg.pretrain_batch)
            .into_iter()
            .map(|i| &source[i])
            .collect();
        let l = pretrain_step(
            &mut state,
            det,
            cfg,
            &batch,
            derive_seed(seed, &[STAGE_PRETRAIN, it]),
        )?;
        log_step(log, "pretrain", it, cfg.pretrain_lr, l)?;
    }
    Ok(state.student)
}

/// Stage 3: teacher and student start from `theta_s`; each step takes
/// `align_batch` images from each subset, round-robin over shuffled passes.
/// With `adversarial` off the dissimilar subset is unused and the stage is
/// plain mean teaching on the similar images.
pub fn run_align(
    det: &DetectorConfig,
    cfg: &TrainConfig,
    theta_s: ParamSet,
    similar: &[&ImageSample],
    dissimilar: &[&ImageSample],
    adversarial: bool,
    seed: u64,
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
) -> Result<TrainerState> {
    if similar.is_empty() || (adversarial && dissimilar.is_empty()) {
        return Err(Error::Contract("alignment needs non-empty subsets".into()));
    }
    let mut state = TrainerState::new(
        theta_s,
        det,
        cfg.momentum,
        derive_seed(seed, &[STAGE_ALIGN]),
    );
    let mut sim = EpochSampler::new(similar.len(), derive_seed(seed, &[STAGE_ALIGN, SAMPLER, 0]));
    let mut dis = EpochSampler::new(
        dissimilar.len().max(1),
        derive_seed(seed, &[STAGE_ALIGN, SAMPLER, 1]),
    );
    for it in 0..cfg.align_iters as u64 {
        let step_seed = derive_seed(seed, &[STAGE_ALIGN, it]);
        let s: Vec<&ImageSample> = sim
            .next_batch(cfg.align_batch)
            .into_iter()
            .map(|i| similar[i])
            .collect();
        let l = if adversarial {
            let d: Vec<&ImageSample> = dis
                .next_batch(cfg.align_batch)
                .into_iter()
                .map(|i| dissimilar[i])
                .collect();
            align_step(&mut state, det, cfg, &s, &d, cfg.lambda, step_seed)?
        } else {
            mean_teacher_step(&mut state, det, cfg, &s, step_seed)?
        };
        log_step(log, "align", it, cfg.lr, l)?;
    }
    Ok(state)
}

/// Stage 4: teacher and student start from `init`; groups of four images are
/// drawn from the whole target set.
pub fn run_finetune(
    det: &DetectorConfig,
    cfg: &TrainConfig,
    init: ParamSet,
    target: &[ImageSample],
    seed: u64,
    log: &mut dyn FnMut(LogRecord) -> Result<()>,
) -> Result<TrainerState> {
    if target.is_empty() {
        return Err(Error::Contract("fine-tuning needs target images".into()));
    }
    let mut state = TrainerState::new(
        init,
        det,
        cfg.momentum,
        derive_seed(seed, &[STAGE_FINETUNE]),
    );
    let mut sampler =
        EpochSampler::new(target.len(), derive_seed(seed, &[STAGE_FINETUNE, SAMPLER]));
    for it in 0..cfg.finetune_iters as u64 {
        let groups: Vec<[&ImageSample; 4]> = (0..cfg.finetune_batch)
            .map(|_| {
                let idx = sampler.next_batch(4);
                [
                    &target[idx[0]],
                    &target[idx[1]],
                    &target[idx[2]],
                    &target[idx[3]],
                ]
            })
            .collect();
        let l = finetune_step(
            &mut state,
            det,
            cfg,
            &groups,
            derive_seed(seed, &[STAGE_FINETUNE, it]),
        )?;
        log_step(log, "finetune", it, cfg.lr, l)?;
    }
    Ok(state)
}

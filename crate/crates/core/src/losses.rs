//! Detection losses, the two adversarial losses with their discriminators, and
//! the fused objective trained through gradient reversal.

use rand_distr::{Distribution, Normal};

use crate::detector::{build_heads, build_stem, encode, AnchorGrid, DetectorConfig, Mode};
use crate::error::{Error, Result};
use crate::numerics::{evaluate, rng_for, Graph, NodeId, ParamSet, Tensor};
use crate::scenes::GtBox;

/// Clamp applied to discriminator outputs before taking logs.
pub const LOG_EPS: f64 = 1e-7;

/// Per-anchor training targets of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    /// Foreground class in `[0, K)`, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// Regression target per anchor; zeros for background.
    pub targets: Vec<[f64; 4]>,
}

impl AnchorAssignment {
    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Matches every anchor to its highest-IoU label; foreground when that IoU is
/// at least `match_iou`. Each label also claims its single best anchor.
pub fn assign_anchors(anchors: &AnchorGrid, labels: &[GtBox], match_iou: f64) -> AnchorAssignment {
    let n = anchors.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; n];
    for (li, label) in labels.iter().enumerate() {
        let mut top: Option<(usize, f64)> = None;
        for (a, abox) in anchors.iter() {
            let iou = abox.iou(&label.bbox);
            if best[a].is_none_or(|(_, b)| iou > b) {
                best[a] = Some((li, iou));
            }
            if top.is_none_or(|(_, t)| iou > t) {
                top = Some((a, iou));
            }
        }
        if let Some((a, iou)) = top {
            if forced[a].is_none_or(|(_, f)| iou > f) {
                forced[a] = Some((li, iou));
            }
        }
    }
    let mut out = AnchorAssignment {
        labels: vec![None; n],
        targets: vec![[0.0; 4]; n],
    };
    for a in 0..n {
        let matched = match (forced[a], best[a]) {
            (Some((li, _)), _) => Some(li),
            (None, Some((li, iou))) if iou >= match_iou => Some(li),
            _ => None,
        };
        if let Some(li) = matched {
            out.labels[a] = Some(labels[li].class);
            out.targets[a] = encode(&labels[li].bbox, &anchors.anchor(a));
        }
    }
    out
}

/// Constant tensors that turn head outputs of a batch into the two detection
/// losses. Images without an assignment contribute nothing.
#[derive(Clone, Debug)]
pub struct DetectionTargets {
    /// `-onehot / (N_labeled * A)`, shape `[N, K+1, r, c]`.
    pub cls_weights: Tensor,
    /// `-target` on foreground coordinates, zero elsewhere, shape `[N, 4, r, c]`.
    pub neg_reg_target: Tensor,
    /// `1 / (4 * n_fg)` on foreground coordinates, shape `[N, 4, r, c]`.
    pub reg_weights: Tensor,
}

impl DetectionTargets {
    pub fn new(
        assignments: &[Option<&AnchorAssignment>],
        num_classes: usize,
        anchors: &AnchorGrid,
    ) -> Result<Self> {
        let n = assignments.len();
        let a = anchors.len();
        let k1 = num_classes + 1;
        let labeled = assignments.iter().filter(|x| x.is_some()).count();
        if n == 0 || labeled == 0 {
            return Err(Error::Contract(
                "detection loss needs at least one labeled image".into(),
            ));
        }
        let n_fg: usize = assignments
            .iter()
            .flatten()
            .map(|x| x.num_foreground())
            .sum();
        let cls_w = -1.0 / (labeled * a) as f64;
        let reg_w = if n_fg == 0 {
            0.0
        } else {
            1.0 / (4 * n_fg) as f64
        };
        let (rows, cols) = (anchors.rows, anchors.cols);
        let mut cls_weights = Tensor::zeros(&[n, k1, rows, cols]);
        let mut neg_reg_target = Tensor::zeros(&[n, 4, rows, cols]);
        let mut reg_weights = Tensor::zeros(&[n, 4, rows, cols]);
        for (i, asg) in assignments.iter().enumerate() {
            let Some(asg) = asg else { continue };
            if asg.labels.len() != a {
                return Err(Error::shape(
                    "anchor assignment",
                    format!("{} anchors, grid has {a}", asg.labels.len()),
                ));
            }
            for (anchor, label) in asg.labels.iter().enumerate() {
                let class = label.map_or(0, |c| c + 1);
                if class >= k1 {
                    return Err(Error::shape(
                        "anchor assignment",
                        format!("class {} >= K", class - 1),
                    ));
                }
                cls_weights.data_mut()[(i * k1 + class) * a + anchor] = cls_w;
                if label.is_some() {
                    for c in 0..4 {
                        let idx = (i * 4 + c) * a + anchor;
                        neg_reg_target.data_mut()[idx] = -asg.targets[anchor][c];
                        reg_weights.data_mut()[idx] = reg_w;
                    }
                }
            }
        }
        Ok(DetectionTargets {
            cls_weights,
            neg_reg_target,
            reg_weights,
        })
    }
}

/// `(L_cls, L_reg)` nodes over head outputs `cls` `[N, K+1, r, c]` and `reg` `[N, 4, r, c]`.
pub fn detection_loss_nodes(
    g: &mut Graph,
    cls: NodeId,
    reg: NodeId,
    targets: &DetectionTargets,
) -> (NodeId, NodeId) {
    let probs = g.softmax(cls, 1);
    let probs = g.clamp(probs, f64::MIN_POSITIVE, 1.0);
    let logp = g.log(probs);
    let l_cls = g.weighted_sum(logp, targets.cls_weights.clone());
    let t = g.constant(targets.neg_reg_target.clone());
    let diff = g.add(reg, t);
    let sl1 = g.smooth_l1(diff);
    let l_reg = g.weighted_sum(sl1, targets.reg_weights.clone());
    (l_cls, l_reg)
}

/// Eager `(L_cls, L_reg)` for one batch of head outputs.
pub fn detection_loss(
    cls: &Tensor,
    reg: &Tensor,
    assignments: &[&AnchorAssignment],
    num_classes: usize,
    anchors: &AnchorGrid,
) -> Result<(f64, f64)> {
    let asg: Vec<_> = assignments.iter().map(|a| Some(*a)).collect();
    let targets = DetectionTargets::new(&asg, num_classes, anchors)?;
    let mut g = Graph::new();
    let c = g.constant(cls.clone());
    let r = g.constant(reg.clone());
    let (l_cls, l_reg) = detection_loss_nodes(&mut g, c, r, &targets);
    g.set_output(l_cls);
    let vc = evaluate(&g, &ParamSet::new(), &[])?.item()?;
    g.set_output(l_reg);
    let vr = evaluate(&g, &ParamSet::new(), &[])?.item()?;
    Ok((vc, vr))
}

/// Fresh discriminator parameters for `channels`-wide features.
pub fn init_discriminators(channels: usize, seed: u64) -> ParamSet {
    let mut rng = rng_for(seed, &[0xd15c]);
    let normal = Normal::new(0.0, 0.01).expect("positive std");
    let mut p = ParamSet::new();
    p.insert(
        "disc.local.w",
        Tensor::from_fn(&[1, channels, 1, 1], |_| normal.sample(&mut rng)),
    );
    p.insert("disc.local.b", Tensor::zeros(&[1]));
    p.insert(
        "disc.global.w",
        Tensor::from_fn(&[channels, 1], |_| normal.sample(&mut rng)),
    );
    p.insert("disc.global.b", Tensor::zeros(&[1]));
    p
}

/// Per-cell local discriminator: `[N, C, h, w]` -> `[N, 1, h, w]` in (0, 1).
pub fn local_disc(g: &mut Graph, local: NodeId) -> NodeId {
    let w = g.param("disc.local.w");
    let b = g.param("disc.local.b");
    let z = g.conv2d(local, w, b, 1, 0);
    g.sigmoid(z)
}

/// Global discriminator: `[N, C]` -> `[N, 1]` in (0, 1).
pub fn global_disc(g: &mut Graph, global: NodeId) -> NodeId {
    let w = g.param("disc.global.w");
    let b = g.param("disc.global.b");
    let z = g.affine(global, w, b);
    g.sigmoid(z)
}

/// Which images of a batch are source-similar.
fn subset_counts(similar: &[bool]) -> Result<(usize, usize)> {
    let n_s = similar.iter().filter(|&&s| s).count();
    let n_d = similar.len() - n_s;
    if n_s == 0 || n_d == 0 {
        return Err(Error::Contract(format!(
            "adversarial loss needs both subsets (got {n_s} similar, {n_d} dissimilar)"
        )));
    }
    Ok((n_s, n_d))
}

/// Per-image weights broadcast over `per_image` trailing elements.
fn subset_weights(
    similar: &[bool],
    per_image: usize,
    shape: &[usize],
    w_sim: f64,
    w_dis: f64,
) -> Tensor {
    let data = similar
        .iter()
        .flat_map(|&s| std::iter::repeat_n(if s { w_sim } else { w_dis }, per_image))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape covers the batch")
}

/// Least-squares local loss over discriminator maps `d` of shape `[N, 1, h, w]`:
/// similar cells are pushed to 0, dissimilar cells to 1.
pub fn local_adv_nodes(
    g: &mut Graph,
    d: NodeId,
    shape: &[usize],
    similar: &[bool],
) -> Result<NodeId> {
    let (n_s, n_d) = subset_counts(similar)?;
    if shape[0] != similar.len() {
        return Err(Error::shape(
            "local adversarial loss",
            "batch size and subset labels differ",
        ));
    }
    let cells: usize = shape[1..].iter().product();
    let sq = g.pow(d, 2.0);
    let inv = g.one_minus(d);
    let sq_inv = g.pow(inv, 2.0);
    let sim = subset_weights(similar, cells, shape, 1.0 / (cells * n_s) as f64, 0.0);
    let dis = subset_weights(similar, cells, shape, 0.0, 1.0 / (cells * n_d) as f64);
    let a = g.weighted_sum(sq, sim);
    let b = g.weighted_sum(sq_inv, dis);
    Ok(g.add(a, b))
}

/// Focal global loss over outputs `d` of shape `[N, 1]`.
pub fn global_adv_nodes(
    g: &mut Graph,
    d: NodeId,
    n: usize,
    similar: &[bool],
    gamma: f64,
) -> Result<NodeId> {
    let (n_s, n_d) = subset_counts(similar)?;
    if gamma < 0.0 || gamma.is_nan() {
        return Err(Error::Domain {
            name: "gamma",
            value: gamma,
            expected: "gamma >= 0",
        });
    }
    if n != similar.len() {
        return Err(Error::shape(
            "global adversarial loss",
            "batch size and subset labels differ",
        ));
    }
    let dc = g.clamp(d, LOG_EPS, 1.0 - LOG_EPS);
    let inv = g.one_minus(dc);
    let log_d = g.log(dc);
    let log_inv = g.log(inv);
    let focal_s = g.pow(inv, gamma);
    let focal_d = g.pow(dc, gamma);
    let ts = g.mul(focal_s, log_d);
    let td = g.mul(focal_d, log_inv);
    let shape = [n, 1];
    let ws = subset_weights(similar, 1, &shape, -1.0 / n_s as f64, 0.0);
    let wd = subset_weights(similar, 1, &shape, 0.0, -1.0 / n_d as f64);
    let a = g.weighted_sum(ts, ws);
    let b = g.weighted_sum(td, wd);
    Ok(g.add(a, b))
}

fn eager(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    g.set_output(out);
    evaluate(&g, &ParamSet::new(), &[])?.item()
}

fn stack(similar: &[f64], dissimilar: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let data = similar.iter().chain(dissimilar).copied().collect();
    let labels = std::iter::repeat_n(true, similar.len())
        .chain(std::iter::repeat_n(false, dissimilar.len()))
        .collect();
    (data, labels)
}

/// Eager local loss over per-image maps of `cells` discriminator outputs each.
pub fn local_adv_loss(similar: &[Vec<f64>], dissimilar: &[Vec<f64>]) -> Result<f64> {
    let cells = similar.first().or(dissimilar.first()).map_or(0, Vec::len);
    if similar.iter().chain(dissimilar).any(|m| m.len() != cells) || cells == 0 {
        return Err(Error::shape(
            "local adversarial loss",
            "maps must be non-empty and equal-sized",
        ));
    }
    let data: Vec<f64> = similar
        .iter()
        .chain(dissimilar)
        .flatten()
        .copied()
        .collect();
    let labels: Vec<bool> = std::iter::repeat_n(true, similar.len())
        .chain(std::iter::repeat_n(false, dissimilar.len()))
        .collect();
    subset_counts(&labels)?;
    let shape = [labels.len(), 1, 1, cells];
    eager(|g| {
        let d = g.constant(Tensor::new(shape.to_vec(), data)?);
        local_adv_nodes(g, d, &shape, &labels)
    })
}

/// Eager global loss over scalar discriminator outputs.
pub fn global_adv_loss(similar: &[f64], dissimilar: &[f64], gamma: f64) -> Result<f64> {
    let (data, labels) = stack(similar, dissimilar);
    subset_counts(&labels)?;
    let n = labels.len();
    eager(|g| {
        let d = g.constant(Tensor::new(vec![n, 1], data)?);
        global_adv_nodes(g, d, n, &labels, gamma)
    })
}

/// Nodes of the fused training graph.
#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    pub total: NodeId,
    pub l_cls: NodeId,
    pub l_reg: NodeId,
    pub l_local: Option<NodeId>,
    pub l_global: Option<NodeId>,
    pub d_local: Option<NodeId>,
    pub d_global: Option<NodeId>,
}

/// Adversarial part of a fused objective.
#[derive(Clone, Debug)]
pub struct Adversarial {
    /// Subset label per batch image.
    pub similar: Vec<bool>,
    pub lambda: f64,
    pub gamma: f64,
}

/// How the adversarial branch meets the student features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Gradient reversal scaled by `lambda`: the training objective.
    Reversed,
    /// Plain connection; `total` is then the ordinary sum `L_mt + L_adv`.
    Plain,
}

/// Student detector on input 0 (a `[N, C, H, W]` batch), detection loss
/// against `targets`, and optionally the two adversarial losses fed through
/// gradient reversal of strength `lambda`.
///
/// Backpropagating `total` gives the discriminators `dL_adv` and the student
/// `dL_mt - lambda * dL_adv`.
pub fn fused_graph(
    cfg: &DetectorConfig,
    batch: usize,
    mode: Mode,
    targets: &DetectionTargets,
    adversarial: Option<&Adversarial>,
) -> Result<(Graph, FusedNodes)> {
    objective_graph(cfg, batch, mode, targets, adversarial, Coupling::Reversed)
}

pub fn objective_graph(
    cfg: &DetectorConfig,
    batch: usize,
    mode: Mode,
    targets: &DetectionTargets,
    adversarial: Option<&Adversarial>,
    coupling: Coupling,
) -> Result<(Graph, FusedNodes)> {
    let mut g = Graph::new();
    let x = g.input(0);
    let local = build_stem(&mut g, cfg, x);
    let (cls, reg) = build_heads(&mut g, cfg, local, mode);
    let (l_cls, l_reg) = detection_loss_nodes(&mut g, cls, reg, targets);
    let l_mt = g.add(l_cls, l_reg);
    let mut nodes = FusedNodes {
        total: l_mt,
        l_cls,
        l_reg,
        l_local: None,
        l_global: None,
        d_local: None,
        d_global: None,
    };
    if let Some(adv) = adversarial {
        if adv.lambda < 0.0 || adv.lambda.is_nan() {
            return Err(Error::Domain {
                name: "lambda",
                value: adv.lambda,
                expected: "lambda >= 0",
            });
        }
        let couple = |g: &mut Graph, x| match coupling {
            Coupling::Reversed => g.grad_reverse(x, adv.lambda),
            Coupling::Plain => x,
        };
        let rev = couple(&mut g, local);
        let d_l = local_disc(&mut g, rev);
        let grid = cfg.anchors();
        let l_local =
            local_adv_nodes(&mut g, d_l, &[batch, 1, grid.rows, grid.cols], &adv.similar)?;
        let pooled = g.mean_pool(local);
        let rev_g = couple(&mut g, pooled);
        let d_g = global_disc(&mut g, rev_g);
        let l_global = global_adv_nodes(&mut g, d_g, batch, &adv.similar, adv.gamma)?;
        let l_adv = g.add(l_local, l_global);
        nodes.total = g.add(l_mt, l_adv);
        nodes.l_local = Some(l_local);
        nodes.l_global = Some(l_global);
        nodes.d_local = Some(d_l);
        nodes.d_global = Some(d_g);
    }
    g.set_output(nodes.total);
    Ok((g, nodes))
}

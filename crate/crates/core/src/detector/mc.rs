use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, forward, Graph, ParamSet};
use crate::scenes::ImageSample;
use crate::variance::{AlignedPasses, PassEntry};

use super::{build_heads, build_stem, check_images, decode, DetectorConfig, HeadOutputs, Mode};

/// `m` stochastic passes over the anchors the deterministic pass keeps at
/// `tau_det` (before NMS). Pass `k` uses dropout seed
/// `derive_seed(master_seed, [image id, k])`, so results do not depend on
/// which other images are processed alongside.
pub fn mc_predict(
    params: &ParamSet,
    cfg: &DetectorConfig,
    image: &ImageSample,
    m: usize,
    master_seed: u64,
    tau_det: f64,
) -> Result<AlignedPasses> {
    if m < 2 {
        return Err(Error::Domain {
            name: "M",
            value: m as f64,
            expected: "at least 2 passes",
        });
    }
    check_images(cfg, &[image])?;
    // The stem is shared: one graph, one stem evaluation, m + 1 head pairs.
    let mut g = Graph::new();
    let x = g.input(0);
    let local = build_stem(&mut g, cfg, x);
    let det = build_heads(&mut g, cfg, local, Mode::Deterministic);
    let stochastic: Vec<_> = (0..m as u64)
        .map(|k| {
            build_heads(
                &mut g,
                cfg,
                local,
                Mode::Stochastic(derive_seed(master_seed, &[image.id, k])),
            )
        })
        .collect();
    let eval = forward(&g, params, &[image.to_tensor()])?;

    let anchors = cfg.anchors();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let head = |(cls, reg): (_, _)| HeadOutputs {
        cls: eval
            .value(cls)
            .clone()
            .reshape(&eval.value(cls).shape()[1..])
            .expect("batch of one"),
        reg: eval
            .value(reg)
            .clone()
            .reshape(&eval.value(reg).shape()[1..])
            .expect("batch of one"),
    };
    let reference: Vec<usize> = decode(&head(det), &anchors, w, h, tau_det)
        .into_iter()
        .map(|d| d.anchor_id)
        .collect();
    let passes = stochastic
        .into_iter()
        .map(|nodes| {
            let out = head(nodes);
            reference
                .iter()
                .map(|&a| PassEntry {
                    anchor_id: Some(a),
                    bbox: out.decode_box(&anchors, a, w, h).as_array(),
                    scores: out.scores(a),
                })
                .collect()
        })
        .collect();
    Ok(AlignedPasses {
        id: image.id,
        passes,
    })
}

/// [`mc_predict`] over many images in parallel, results in input order.
pub fn mc_predict_all(
    params: &ParamSet,
    cfg: &DetectorConfig,
    images: &[ImageSample],
    m: usize,
    master_seed: u64,
    tau_det: f64,
) -> Result<Vec<AlignedPasses>> {
    images
        .par_iter()
        .map(|img| mc_predict(params, cfg, img, m, master_seed, tau_det))
        .collect()
}

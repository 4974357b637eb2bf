//! Detection variance from stochastic passes, ranking and the similar /
//! dissimilar split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One detection of one stochastic pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_id: Option<usize>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scores: Vec<f64>,
}

/// `M` passes over the same `N_i` reference detections of one image; entry
/// `j` of every pass refers to the same detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedPasses {
    pub id: u64,
    pub passes: Vec<Vec<PassEntry>>,
}

impl AlignedPasses {
    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    /// Reference detection count, after checking every pass has it.
    pub fn num_detections(&self) -> Result<usize> {
        let n = self.passes.first().map_or(0, Vec::len);
        for (m, pass) in self.passes.iter().enumerate() {
            if pass.len() != n {
                return Err(Error::shape(
                    format!("passes of image {}", self.id),
                    format!("pass {m} has {} entries, pass 0 has {n}", pass.len()),
                ));
            }
        }
        Ok(n)
    }
}

/// Mean over detections of the summed squared deviation from the per-detection
/// mean across passes, divided by `M * N_i`.
fn spread<'a>(
    passes: &'a AlignedPasses,
    vector: impl Fn(&'a PassEntry) -> &'a [f64],
) -> Result<f64> {
    let m = passes.num_passes();
    if m < 2 {
        return Err(Error::Domain {
            name: "M",
            value: m as f64,
            expected: "at least 2 passes",
        });
    }
    let n = passes.num_detections()?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..n {
        let dim = vector(&passes.passes[0][j]).len();
        let mut mean = vec![0.0; dim];
        for pass in &passes.passes {
            let v = vector(&pass[j]);
            if v.len() != dim {
                return Err(Error::shape(
                    format!("detection {j} of image {}", passes.id),
                    format!("vector length {} vs {dim}", v.len()),
                ));
            }
            for (acc, x) in mean.iter_mut().zip(v) {
                *acc += x;
            }
        }
        for acc in mean.iter_mut() {
            *acc /= m as f64;
        }
        for pass in &passes.passes {
            total += vector(&pass[j])
                .iter()
                .zip(&mean)
                .map(|(x, mu)| (x - mu).powi(2))
                .sum::<f64>();
        }
    }
    Ok(total / (m * n) as f64)
}

/// Box localization variance in squared pixels.
pub fn box_variance(passes: &AlignedPasses) -> Result<f64> {
    spread(passes, |e| &e.bbox[..])
}

/// Classification score variance.
pub fn class_variance(passes: &AlignedPasses) -> Result<f64> {
    spread(passes, |e| &e.scores[..])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Product,
    /// `v_b + v_c`, kept only for sensitivity checks.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageVariance {
    pub id: u64,
    pub v_b: f64,
    pub v_c: f64,
    pub v: f64,
    pub n_det: usize,
}

pub fn image_variance(passes: &AlignedPasses, combine: Combine) -> Result<ImageVariance> {
    let v_b = box_variance(passes)?;
    let v_c = class_variance(passes)?;
    let v = match combine {
        Combine::Product => v_b * v_c,
        Combine::Sum => v_b + v_c,
    };
    Ok(ImageVariance {
        id: passes.id,
        v_b,
        v_c,
        v,
        n_det: passes.num_detections()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Similar,
    Dissimilar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub id: u64,
    pub v_b: f64,
    pub v_c: f64,
    pub v: f64,
    pub n_det: usize,
    pub rank: usize,
    pub vl: f64,
    pub subset: Subset,
}

/// Records in ascending-variance order (ties by id) with rank, level and subset.
pub fn rank_and_divide(images: &[ImageVariance], sigma: f64) -> Result<Vec<VarianceRecord>> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Domain {
            name: "sigma",
            value: sigma,
            expected: "0 < sigma < 1",
        });
    }
    if images.is_empty() {
        return Err(Error::Contract("cannot divide an empty target set".into()));
    }
    let mut order: Vec<&ImageVariance> = images.iter().collect();
    order.sort_by(|a, b| a.v.total_cmp(&b.v).then(a.id.cmp(&b.id)));
    let n = order.len() as f64;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, iv)| {
            let rank = i + 1;
            let vl = rank as f64 / n;
            VarianceRecord {
                id: iv.id,
                v_b: iv.v_b,
                v_c: iv.v_c,
                v: iv.v,
                n_det: iv.n_det,
                rank,
                vl,
                subset: if vl >= sigma {
                    Subset::Similar
                } else {
                    Subset::Dissimilar
                },
            }
        })
        .collect())
}

/// Ids of each subset, ascending.
pub fn split_ids(records: &[VarianceRecord]) -> (Vec<u64>, Vec<u64>) {
    let mut similar = Vec::new();
    let mut dissimilar = Vec::new();
    for r in records {
        match r.subset {
            Subset::Similar => similar.push(r.id),
            Subset::Dissimilar => dissimilar.push(r.id),
        }
    }
    similar.sort_unstable();
    dissimilar.sort_unstable();
    (similar, dissimilar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(bbox: [f64; 4], scores: &[f64]) -> PassEntry {
        PassEntry {
            anchor_id: Some(0),
            bbox,
            scores: scores.to_vec(),
        }
    }

    fn hand() -> AlignedPasses {
        AlignedPasses {
            id: 0,
            passes: vec![
                vec![entry([0.0, 0.0, 10.0, 10.0], &[0.8, 0.2])],
                vec![entry([2.0, 0.0, 10.0, 10.0], &[0.6, 0.4])],
            ],
        }
    }

    // Straight double loop over the textbook definition.
    fn brute(p: &AlignedPasses) -> (f64, f64) {
        let m = p.passes.len() as f64;
        let n = p.passes[0].len();
        if n == 0 {
            return (0.0, 0.0);
        }
        let (mut vb, mut vc) = (0.0, 0.0);
        for j in 0..n {
            for c in 0..4 {
                let mean = p.passes.iter().map(|q| q[j].bbox[c]).sum::<f64>() / m;
                vb += p
                    .passes
                    .iter()
                    .map(|q| (q[j].bbox[c] - mean).powi(2))
                    .sum::<f64>();
            }
            for c in 0..p.passes[0][j].scores.len() {
                let mean = p.passes.iter().map(|q| q[j].scores[c]).sum::<f64>() / m;
                vc += p
                    .passes
                    .iter()
                    .map(|q| (q[j].scores[c] - mean).powi(2))
                    .sum::<f64>();
            }
        }
        (vb / (m * n as f64), vc / (m * n as f64))
    }

    #[test]
    fn hand_examples() {
        let p = hand();
        assert_eq!(box_variance(&p).unwrap(), 1.0);
        assert!((class_variance(&p).unwrap() - 0.02).abs() < 1e-15);
        let iv = image_variance(&p, Combine::Product).unwrap();
        assert!((iv.v - 0.02).abs() < 1e-15);
        assert_eq!(iv.v, iv.v_b * iv.v_c);
    }

    #[test]
    fn scaling_coordinates_by_three() {
        let mut p = hand();
        for pass in p.passes.iter_mut() {
            for e in pass.iter_mut() {
                e.bbox = e.bbox.map(|x| 3.0 * x);
            }
        }
        assert!((box_variance(&p).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_set_is_zero() {
        let p = AlignedPasses {
            id: 3,
            passes: vec![vec![]; 5],
        };
        let iv = image_variance(&p, Combine::Product).unwrap();
        assert_eq!((iv.v_b, iv.v_c, iv.v, iv.n_det), (0.0, 0.0, 0.0, 0));
    }

    #[test]
    fn ragged_passes_are_structural_errors() {
        let mut p = hand();
        p.passes[1].push(entry([0.0; 4], &[0.5, 0.5]));
        assert!(matches!(box_variance(&p), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_pass_is_rejected() {
        let mut p = hand();
        p.passes.pop();
        assert!(box_variance(&p).is_err());
    }

    fn distinct(n: usize) -> Vec<ImageVariance> {
        (0..n as u64)
            .map(|id| ImageVariance {
                id,
                v_b: 0.0,
                v_c: 0.0,
                // scrambled but distinct
                v: ((id * 7919) % n as u64) as f64,
                n_det: 1,
            })
            .collect()
    }

    #[test]
    fn ten_images_four_similar() {
        let recs = rank_and_divide(&distinct(10), 0.7).unwrap();
        let ranks: Vec<usize> = recs
            .iter()
            .filter(|r| r.subset == Subset::Similar)
            .map(|r| r.rank)
            .collect();
        assert_eq!(ranks, vec![7, 8, 9, 10]);
    }

    #[test]
    fn thousand_images_301_similar() {
        let recs = rank_and_divide(&distinct(1000), 0.7).unwrap();
        assert_eq!(split_ids(&recs).0.len(), 301);
    }

    #[test]
    fn ties_break_by_id() {
        let flat: Vec<ImageVariance> = (0..10)
            .map(|id| ImageVariance {
                id,
                v_b: 1.0,
                v_c: 1.0,
                v: 1.0,
                n_det: 1,
            })
            .collect();
        let recs = rank_and_divide(&flat, 0.7).unwrap();
        assert_eq!(split_ids(&recs).0, vec![6, 7, 8, 9]);
    }

    #[test]
    fn sigma_domain() {
        for s in [0.0, 1.0, 1.5, -0.2, f64::NAN] {
            assert!(matches!(
                rank_and_divide(&distinct(3), s),
                Err(Error::Domain { name: "sigma", .. })
            ));
        }
    }

    fn passes_strategy() -> impl Strategy<Value = AlignedPasses> {
        (2usize..6, 0usize..5).prop_flat_map(|(m, n)| {
            prop::collection::vec(
                prop::collection::vec(
                    (
                        prop::array::uniform4(-50.0f64..50.0),
                        prop::collection::vec(0.0f64..1.0, 3),
                    ),
                    n,
                ),
                m,
            )
            .prop_map(|raw| AlignedPasses {
                id: 1,
                passes: raw
                    .into_iter()
                    .map(|pass| pass.into_iter().map(|(b, s)| entry(b, &s)).collect())
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(p in passes_strategy()) {
            let (vb, vc) = brute(&p);
            let iv = image_variance(&p, Combine::Product).unwrap();
            prop_assert!((iv.v_b - vb).abs() <= 1e-12 * vb.abs().max(1.0));
            prop_assert!((iv.v_c - vc).abs() <= 1e-12 * vc.abs().max(1.0));
            prop_assert!(iv.v_b >= 0.0 && iv.v_c >= 0.0);
        }

        #[test]
        fn pass_permutation_and_duplication(p in passes_strategy(), shift in 0usize..6) {
            let base = image_variance(&p, Combine::Product).unwrap();
            let mut rotated = p.clone();
            let k = shift % rotated.passes.len();
            rotated.passes.rotate_left(k);
            let r = image_variance(&rotated, Combine::Product).unwrap();
            prop_assert!((r.v - base.v).abs() <= 1e-12 * base.v.max(1.0));
            let mut doubled = p.clone();
            doubled.passes.extend(p.passes.clone());
            let d = image_variance(&doubled, Combine::Product).unwrap();
            prop_assert!((d.v - base.v).abs() <= 1e-12 * base.v.max(1.0));
        }

        #[test]
        fn partition_and_monotone_in_sigma(vs in prop::collection::vec(0.0f64..1.0, 1..200)) {
            let ivs: Vec<ImageVariance> = vs.iter().enumerate()
                .map(|(i, &v)| ImageVariance { id: i as u64, v_b: v, v_c: 1.0, v, n_det: 1 })
                .collect();
            let mut prev = usize::MAX;
            for s in 1..10 {
                let recs = rank_and_divide(&ivs, s as f64 / 10.0).unwrap();
                let (sim, dis) = split_ids(&recs);
                prop_assert_eq!(sim.len() + dis.len(), ivs.len());
                prop_assert!(sim.iter().all(|id| !dis.contains(id)));
                prop_assert!(sim.len() <= prev);
                prev = sim.len();
            }
        }
    }
}

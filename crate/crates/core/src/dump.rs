//! JSON-lines prediction dumps: one image per line,
//! `{"id": 3, "passes": [[{"box": [x1, y1, x2, y2], "scores": [...], "anchor_id": 17}, ...], ...]}`.
//!
//! In-process passes are written in this format, and dumps from other
//! detectors can be brought in for division.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Matching;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::variance::{AlignedPasses, PassEntry};

pub fn write_dump(path: &Path, images: &[AlignedPasses]) -> Result<()> {
    let mut out = String::new();
    for img in images {
        let line = serde_json::to_string(img).map_err(|e| Error::json(path, e))?;
        writeln!(out, "{line}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reference entry `entry` of image `id` had no counterpart in `pass` and was
/// copied from pass 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duplicated {
    pub id: u64,
    pub pass: usize,
    pub entry: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportedDump {
    pub images: Vec<AlignedPasses>,
    pub duplicated: Vec<Duplicated>,
}

pub fn import_prediction_dump(path: &Path, matching: Matching) -> Result<ImportedDump> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dump(&text, matching)
}

pub fn parse_dump(text: &str, matching: Matching) -> Result<ImportedDump> {
    let mut images = Vec::new();
    let mut duplicated = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Dump { line: line_no, msg };
        let raw: AlignedPasses = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if raw.passes.len() < 2 {
            return Err(err(format!(
                "image {} has {} passes, need at least 2",
                raw.id,
                raw.passes.len()
            )));
        }
        for pass in &raw.passes {
            for e in pass {
                if e.scores.is_empty() || e.scores.len() != pass[0].scores.len() {
                    return Err(err(format!(
                        "image {}: score vectors must be non-empty and equally long",
                        raw.id
                    )));
                }
            }
        }
        let aligned = match matching {
            Matching::Anchor => align_by_anchor(raw).map_err(err)?,
            Matching::IouGreedy => {
                let (a, d) = align_by_iou(raw);
                duplicated.extend(d);
                a
            }
        };
        images.push(aligned);
    }
    Ok(ImportedDump { images, duplicated })
}

fn align_by_anchor(raw: AlignedPasses) -> std::result::Result<AlignedPasses, String> {
    let id = raw.id;
    let anchor_of = |e: &PassEntry| {
        e.anchor_id
            .ok_or_else(|| format!("image {id}: anchor matching needs anchor_id on every entry"))
    };
    let reference: Vec<usize> = raw.passes[0]
        .iter()
        .map(anchor_of)
        .collect::<std::result::Result<_, _>>()?;
    let mut passes = Vec::with_capacity(raw.passes.len());
    for (m, pass) in raw.passes.into_iter().enumerate() {
        let mut by_anchor: HashMap<usize, PassEntry> = HashMap::with_capacity(pass.len());
        for e in pass {
            let a = anchor_of(&e)?;
            if by_anchor.insert(a, e).is_some() {
                return Err(format!("image {id}: anchor {a} appears twice in pass {m}"));
            }
        }
        let ordered = reference
            .iter()
            .map(|a| {
                by_anchor
                    .remove(a)
                    .ok_or_else(|| format!("image {id}: anchor {a} missing from pass {m}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(a) = by_anchor.keys().min() {
            return Err(format!(
                "image {id}: pass {m} has anchor {a} not present in pass 0"
            ));
        }
        passes.push(ordered);
    }
    Ok(AlignedPasses { id, passes })
}

/// Pass 0 is the reference; each reference box, in order, claims the
/// highest-IoU unclaimed box of every other pass.
fn align_by_iou(raw: AlignedPasses) -> (AlignedPasses, Vec<Duplicated>) {
    let reference = raw.passes[0].clone();
    let mut dups = Vec::new();
    let mut passes = vec![reference.clone()];
    for (m, pass) in raw.passes.iter().enumerate().skip(1) {
        let mut claimed = vec![false; pass.len()];
        let mut ordered = Vec::with_capacity(reference.len());
        for (j, r) in reference.iter().enumerate() {
            let rb = BBox::from_array(r.bbox);
            let best = pass
                .iter()
                .enumerate()
                .filter(|(k, _)| !claimed[*k])
                .map(|(k, e)| (k, rb.iou(&BBox::from_array(e.bbox))))
                .filter(|&(_, iou)| iou > 0.0)
                .fold(None, |acc: Option<(usize, f64)>, (k, iou)| match acc {
                    Some((_, b)) if b >= iou => acc,
                    _ => Some((k, iou)),
                });
            match best {
                Some((k, _)) => {
                    claimed[k] = true;
                    ordered.push(pass[k].clone());
                }
                None => {
                    dups.push(Duplicated {
                        id: raw.id,
                        pass: m,
                        entry: j,
                    });
                    ordered.push(r.clone());
                }
            }
        }
        passes.push(ordered);
    }
    (AlignedPasses { id: raw.id, passes }, dups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variance::{box_variance, class_variance};

    fn entry(anchor: Option<usize>, b: [f64; 4], s: [f64; 2]) -> PassEntry {
        PassEntry {
            anchor_id: anchor,
            bbox: b,
            scores: s.to_vec(),
        }
    }

    #[test]
    fn hand_dump_gives_unit_box_variance() {
        let text = r#"{"id":0,"passes":[[{"box":[0,0,10,10],"scores":[0.5,0.5],"anchor_id":4}],[{"box":[2,0,10,10],"scores":[0.5,0.5],"anchor_id":4}]]}"#;
        for m in [Matching::Anchor, Matching::IouGreedy] {
            let d = parse_dump(text, m).unwrap();
            assert_eq!(box_variance(&d.images[0]).unwrap(), 1.0);
            assert!(d.duplicated.is_empty());
        }
    }

    #[test]
    fn anchor_mode_reorders_by_anchor() {
        let img = AlignedPasses {
            id: 2,
            passes: vec![
                vec![
                    entry(Some(1), [0.0, 0.0, 4.0, 4.0], [0.9, 0.1]),
                    entry(Some(7), [20.0, 20.0, 30.0, 30.0], [0.2, 0.8]),
                ],
                vec![
                    entry(Some(7), [21.0, 20.0, 30.0, 30.0], [0.3, 0.7]),
                    entry(Some(1), [0.0, 1.0, 4.0, 4.0], [0.8, 0.2]),
                ],
            ],
        };
        let text = serde_json::to_string(&img).unwrap();
        let d = parse_dump(&text, Matching::Anchor).unwrap();
        let p = &d.images[0].passes[1];
        assert_eq!(p[0].anchor_id, Some(1));
        assert_eq!(p[1].anchor_id, Some(7));
    }

    #[test]
    fn round_trip_preserves_variance() {
        let img = AlignedPasses {
            id: 5,
            passes: (0..3)
                .map(|m| {
                    vec![
                        entry(
                            Some(3),
                            [1.0 + m as f64 * 0.37, 2.0, 9.5, 11.0],
                            [0.6 - 0.1 * m as f64, 0.3],
                        ),
                        entry(
                            Some(9),
                            [30.0, 31.0 - 0.21 * m as f64, 40.0, 44.0],
                            [0.1, 0.85],
                        ),
                    ]
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dump(&path, std::slice::from_ref(&img)).unwrap();
        let back = import_prediction_dump(&path, Matching::Anchor).unwrap();
        assert_eq!(back.images[0], img);
        assert_eq!(
            box_variance(&back.images[0]).unwrap(),
            box_variance(&img).unwrap()
        );
        assert_eq!(
            class_variance(&back.images[0]).unwrap(),
            class_variance(&img).unwrap()
        );
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let good = r#"{"id":0,"passes":[[],[]]}"#;
        let text = format!("{good}\n{good}\n{{\"id\": 1, \"passes\": \n");
        match parse_dump(&text, Matching::Anchor) {
            Err(Error::Dump { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anchor_mode_requires_anchor_ids() {
        let text = r#"{"id":0,"passes":[[{"box":[0,0,10,10],"scores":[1.0]}],[{"box":[0,0,10,10],"scores":[1.0]}]]}"#;
        assert!(matches!(
            parse_dump(text, Matching::Anchor),
            Err(Error::Dump { line: 1, .. })
        ));
        assert!(parse_dump(text, Matching::IouGreedy).is_ok());
    }

    #[test]
    fn unmatched_reference_is_duplicated_and_flagged() {
        let img = AlignedPasses {
            id: 8,
            passes: vec![
                vec![entry(None, [0.0, 0.0, 10.0, 10.0], [0.9, 0.1])],
                vec![entry(None, [40.0, 40.0, 50.0, 50.0], [0.2, 0.8])],
            ],
        };
        let d = parse_dump(&serde_json::to_string(&img).unwrap(), Matching::IouGreedy).unwrap();
        assert_eq!(
            d.duplicated,
            vec![Duplicated {
                id: 8,
                pass: 1,
                entry: 0
            }]
        );
        assert_eq!(d.images[0].passes[1], img.passes[0]);
        assert_eq!(box_variance(&d.images[0]).unwrap(), 0.0);
        assert_eq!(class_variance(&d.images[0]).unwrap(), 0.0);
    }

    #[test]
    fn iou_greedy_picks_the_best_overlap() {
        let img = AlignedPasses {
            id: 1,
            passes: vec![
                vec![entry(None, [0.0, 0.0, 10.0, 10.0], [0.9, 0.1])],
                vec![
                    entry(None, [5.0, 5.0, 15.0, 15.0], [0.5, 0.5]),
                    entry(None, [1.0, 0.0, 10.0, 10.0], [0.8, 0.2]),
                ],
            ],
        };
        let d = parse_dump(&serde_json::to_string(&img).unwrap(), Matching::IouGreedy).unwrap();
        assert_eq!(d.images[0].passes[1][0].bbox, [1.0, 0.0, 10.0, 10.0]);
    }
}

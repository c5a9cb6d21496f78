//! Phrase-detection and scene-graph-generation Recall@K.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{iou, union_box, BBox};
use crate::graphgen::ScoredTriplet;
use crate::scene::Scene;

pub const DEFAULT_IOU: f64 = 0.5;
pub const DEFAULT_KS: [usize; 2] = [50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    /// Labels plus union-box localization.
    PhrDet,
    /// Labels plus subject and object box localization.
    SgGen,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::PhrDet, Mode::SgGen];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PhrDet => "PhrDet",
            Mode::SgGen => "SGGen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub subj_label: usize,
    pub predicate: usize,
    pub obj_label: usize,
    pub subj_box: BBox,
    pub obj_box: BBox,
}

impl GtTriplet {
    pub fn union(&self) -> BBox {
        union_box(&self.subj_box, &self.obj_box)
    }
}

/// Ground-truth triplets of a scene, in relation order.
pub fn gt_triplets(scene: &Scene) -> Vec<GtTriplet> {
    scene
        .relations
        .iter()
        .map(|r| {
            let (s, o) = (&scene.objects[r.subj], &scene.objects[r.obj]);
            GtTriplet {
                subj_label: s.class,
                predicate: r.predicate,
                obj_label: o.class,
                subj_box: s.bbox,
                obj_box: o.bbox,
            }
        })
        .collect()
}

pub fn match_triplet(pred: &ScoredTriplet, gt: &GtTriplet, mode: Mode, iou_thresh: f64) -> bool {
    if pred.subj_label != gt.subj_label || pred.predicate != gt.predicate || pred.obj_label != gt.obj_label {
        return false;
    }
    match mode {
        Mode::PhrDet => iou(&union_box(&pred.subj_box, &pred.obj_box), &gt.union()) >= iou_thresh,
        Mode::SgGen => iou(&pred.subj_box, &gt.subj_box) >= iou_thresh && iou(&pred.obj_box, &gt.obj_box) >= iou_thresh,
    }
}

/// Indices of the `k` best predictions: descending score, ties to the lower index.
pub fn top_k(preds: &[ScoredTriplet], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| preds[*b].score.total_cmp(&preds[*a].score).then(a.cmp(b)));
    order.truncate(k);
    order
}

/// Ground-truth triplets hit by the top-`k` predictions under a one-to-one
/// assignment. Predictions are visited in rank order and each tries an
/// augmenting path, so the count is a maximum matching.
pub fn hits_at_k(preds: &[ScoredTriplet], gts: &[GtTriplet], k: usize, mode: Mode, iou_thresh: f64) -> usize {
    let top = top_k(preds, k);
    let adj: Vec<Vec<usize>> = top
        .iter()
        .map(|p| (0..gts.len()).filter(|g| match_triplet(&preds[*p], &gts[*g], mode, iou_thresh)).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut hits = 0;
    for p in 0..adj.len() {
        let mut seen = vec![false; gts.len()];
        if augment(p, &adj, &mut owner, &mut seen) {
            hits += 1;
        }
    }
    hits
}

fn augment(p: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adj[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        if owner[g].is_none_or(|q| augment(q, adj, owner, seen)) {
            owner[g] = Some(p);
            return true;
        }
    }
    false
}

/// `hits / |gt|`, or 1.0 when there is no ground truth.
pub fn recall_at_k(preds: &[ScoredTriplet], gts: &[GtTriplet], k: usize, mode: Mode, iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    hits_at_k(preds, gts, k, mode, iou_thresh) as f64 / gts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Per-image recall, then the mean over images.
    #[default]
    Macro,
    /// Total hits over total ground truth.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageHits {
    pub hits: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mode: Mode,
    pub recall_at: BTreeMap<usize, f64>,
    /// Per image, per K.
    pub per_image: Vec<BTreeMap<usize, ImageHits>>,
    /// Images without ground truth (counted as full recall).
    pub empty_gt: usize,
}

/// Recall@K for every `k` over a corpus of `(predictions, ground truth)` pairs.
pub fn evaluate(
    images: &[(Vec<ScoredTriplet>, Vec<GtTriplet>)],
    ks: &[usize],
    mode: Mode,
    iou_thresh: f64,
    averaging: Averaging,
) -> EvalResult {
    let per_image: Vec<BTreeMap<usize, ImageHits>> = images
        .iter()
        .map(|(p, g)| {
            ks.iter()
                .map(|k| {
                    (
                        *k,
                        ImageHits {
                            hits: hits_at_k(p, g, *k, mode, iou_thresh),
                            total: g.len(),
                        },
                    )
                })
                .collect()
        })
        .collect();
    let mut recall_at = BTreeMap::new();
    for k in ks {
        let r = match averaging {
            Averaging::Macro => {
                let sum: f64 = per_image
                    .iter()
                    .map(|m| {
                        let h = m[k];
                        if h.total == 0 {
                            1.0
                        } else {
                            h.hits as f64 / h.total as f64
                        }
                    })
                    .sum();
                if per_image.is_empty() {
                    1.0
                } else {
                    sum / per_image.len() as f64
                }
            }
            Averaging::Micro => {
                let (h, t) = per_image.iter().fold((0, 0), |(h, t), m| (h + m[k].hits, t + m[k].total));
                if t == 0 {
                    1.0
                } else {
                    h as f64 / t as f64
                }
            }
        };
        recall_at.insert(*k, r);
    }
    EvalResult {
        mode,
        recall_at,
        per_image,
        empty_gt: images.iter().filter(|(_, g)| g.is_empty()).count(),
    }
}

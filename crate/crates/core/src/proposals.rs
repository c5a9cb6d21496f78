//! Object proposals, synthetic ROI features and subgraph clustering.
//!
//! The region proposal network is replaced by a stub that emits the scene's
//! ground-truth boxes (optionally jittered), and ROI pooling by
//! [`FeatureSynth`], a deterministic function of box geometry and class.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::geometry::{iou, union_box, BBox};
use crate::math;
use crate::numcore::Tensor;
use crate::rng::rng_for;
use crate::scene::Scene;

/// Side of the pooled subgraph feature map.
pub const SUBGRAPH_POOL: usize = 5;
pub const DEFAULT_CLUSTER_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectProposal {
    pub bbox: BBox,
    pub feature: Tensor,
    pub score: f64,
    /// Category of the ground-truth object the stub derived this proposal from.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphProposal {
    pub bbox: BBox,
    /// `D × Ks × Ks` map.
    pub feature: Tensor,
    /// Sorted member object indices (at least two).
    pub members: Vec<usize>,
    pub score: f64,
}

/// Ordered object pair `(subj, obj)` and the subgraph that represents it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateTriple {
    pub subj: usize,
    pub obj: usize,
    pub subgraph: usize,
}

/// Deterministic stand-in for ROI-pooled CNN features.
///
/// A feature is a per-class base vector plus a smooth sinusoidal encoding of
/// the box geometry normalized by the canvas size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSynth {
    pub dim: usize,
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub seed: u64,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

impl FeatureSynth {
    pub fn new(dim: usize, canvas_w: f64, canvas_h: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, "features.geometry", 0);
        let f = Uniform::new_inclusive(0.5, 3.0).expect("bounds");
        let p = Uniform::new(0.0, core::f64::consts::TAU).expect("bounds");
        let freq = (0..dim).map(|_| f.sample(&mut rng)).collect();
        let phase = (0..dim).map(|_| p.sample(&mut rng)).collect();
        Self {
            dim,
            canvas_w,
            canvas_h,
            seed,
            freq,
            phase,
        }
    }

    pub fn class_base(&self, class_id: usize) -> Vec<f64> {
        let mut rng = rng_for(self.seed, "features.class", class_id as u64);
        let u = Uniform::new_inclusive(-1.0, 1.0).expect("bounds");
        (0..self.dim).map(|_| u.sample(&mut rng)).collect()
    }

    pub fn features(&self, bbox: &BBox, class_id: usize) -> Tensor {
        let (cx, cy) = bbox.center();
        let geom = [
            cx / self.canvas_w,
            cy / self.canvas_h,
            bbox.w / self.canvas_w,
            bbox.h / self.canvas_h,
        ];
        let base = self.class_base(class_id);
        let data = (0..self.dim)
            .map(|d| base[d] + 0.5 * math::sin(core::f64::consts::PI * self.freq[d] * geom[d % 4] + self.phase[d]))
            .collect();
        Tensor::vector(data)
    }
}

/// Stub proposal stage: `n` proposals cycling over the ground-truth objects,
/// each box jittered by up to `jitter` × its size per coordinate.
pub fn stub_proposals(scene: &Scene, n: usize, jitter: f64, seed: u64, synth: &FeatureSynth) -> Result<Vec<ObjectProposal>> {
    if n < 2 {
        return Err(Error::invalid("stub_proposals", "need at least two proposals to form a pair"));
    }
    if scene.objects.is_empty() {
        return Err(Error::Empty("stub_proposals"));
    }
    let mut rng = rng_for(seed, &scene.id, 0);
    let u = Uniform::new_inclusive(-1.0, 1.0).expect("bounds");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let gt = &scene.objects[i % scene.objects.len()];
        let b = gt.bbox;
        let bbox = if jitter > 0.0 {
            let mut d = [0.0; 4];
            d.iter_mut().for_each(|v| *v = u.sample(&mut rng) * jitter);
            BBox {
                x: b.x + d[0] * b.w,
                y: b.y + d[1] * b.h,
                w: (b.w * (1.0 + d[2])).max(1.0),
                h: (b.h * (1.0 + d[3])).max(1.0),
            }
        } else {
            b
        };
        out.push(ObjectProposal {
            bbox,
            feature: synth.features(&bbox, gt.class),
            score: iou(&bbox, &b),
            label: Some(gt.class),
        });
    }
    Ok(out)
}

/// All ordered pairs `(i, j)`, `i ≠ j`, in row-major order.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).collect()
}

/// Greedy non-maximum suppression with member merging.
///
/// Candidates are visited by descending score (ties: lower index first).
/// Returns, for every candidate, the index of the surviving candidate that
/// represents it.
pub fn nms_assign(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    let mut owner: Vec<Option<usize>> = vec![None; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if owner[i].is_some() {
            continue;
        }
        owner[i] = Some(i);
        for &j in &order[pos + 1..] {
            if owner[j].is_none() && iou(&boxes[i], &boxes[j]) > thresh {
                owner[j] = Some(i);
            }
        }
    }
    owner.into_iter().map(|o| o.expect("every candidate is assigned")).collect()
}

/// Clusters all object pairs into subgraph proposals.
///
/// One union-box candidate per unordered pair, scored by the product of the
/// two object scores, is clustered with [`nms_assign`]; suppressed candidates
/// hand their members to the survivor, whose box grows to cover them.
pub fn build_subgraphs(
    objects: &[ObjectProposal],
    nms_thresh: f64,
    synth: &FeatureSynth,
) -> Result<(Vec<SubgraphProposal>, Vec<CandidateTriple>)> {
    if objects.is_empty() {
        return Err(Error::Empty("build_subgraphs"));
    }
    if objects.len() < 2 {
        return Err(Error::invalid("build_subgraphs", "need at least two objects"));
    }
    let n = objects.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    let boxes: Vec<BBox> = pairs
        .iter()
        .map(|(i, j)| union_box(&objects[*i].bbox, &objects[*j].bbox))
        .collect();
    let scores: Vec<f64> = pairs.iter().map(|(i, j)| objects[*i].score * objects[*j].score).collect();
    let owner = nms_assign(&boxes, &scores, nms_thresh);

    // Survivors in order of first appearance among pair indices.
    let mut slot = vec![usize::MAX; pairs.len()];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut survivor_of: Vec<usize> = Vec::new();
    for (p, &o) in owner.iter().enumerate() {
        if o == p {
            slot[p] = members.len();
            members.push(Vec::new());
            survivor_of.push(p);
        }
    }
    let mut pair_slot = vec![0; pairs.len()];
    for (p, &o) in owner.iter().enumerate() {
        let k = slot[o];
        pair_slot[p] = k;
        let (i, j) = pairs[p];
        members[k].push(i);
        members[k].push(j);
    }

    let mut subgraphs = Vec::with_capacity(members.len());
    for (k, mut m) in members.into_iter().enumerate() {
        m.sort_unstable();
        m.dedup();
        let bbox = m[1..]
            .iter()
            .fold(objects[m[0]].bbox, |acc, i| union_box(&acc, &objects[*i].bbox));
        let vector = synth.features(&bbox, 0);
        subgraphs.push(SubgraphProposal {
            bbox,
            feature: tile(&vector, SUBGRAPH_POOL),
            members: m,
            score: scores[survivor_of[k]],
        });
    }

    let mut index = vec![vec![0usize; n]; n];
    for (p, (i, j)) in pairs.iter().enumerate() {
        index[*i][*j] = pair_slot[p];
        index[*j][*i] = pair_slot[p];
    }
    let triples = ordered_pairs(n)
        .into_iter()
        .map(|(i, j)| CandidateTriple {
            subj: i,
            obj: j,
            subgraph: index[i][j],
        })
        .collect();
    Ok((subgraphs, triples))
}

/// Repeats a `[D]` vector at every cell of a `D × size × size` map.
pub fn tile(vector: &Tensor, size: usize) -> Tensor {
    let cells = size * size;
    let mut data = Vec::with_capacity(vector.len() * cells);
    for v in vector.data() {
        data.extend(core::iter::repeat_n(*v, cells));
    }
    Tensor::new(&[vector.len(), size, size], data).expect("tile shape")
}

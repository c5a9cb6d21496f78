//! Object and predicate heads, scene-graph supervision and graph assembly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::math;
use crate::nn::Linear;
use crate::numcore::{argmax, Var};
use crate::params::{Group, Init, ParamId, ParamStore, Session};
use crate::rng::{rng_for, Rng};
use crate::scene::{Scene, BACKGROUND};

/// `f_node`, the box regressor and `f_rel`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub node: Linear,
    pub boxes: Linear,
    /// 1×1 bottleneck over the `(D+2)`-channel relation input.
    pub rel_reduce: ParamId,
    pub rel_reduce_b: ParamId,
    pub rel_out: Linear,
    pub dim: usize,
    pub pool: usize,
}

impl Heads {
    pub fn new(store: &mut ParamStore, dim: usize, pool: usize, num_classes: usize, num_predicates: usize, seed: u64) -> Self {
        let g = Group::Heads;
        let mid = (dim / 2).max(1);
        Self {
            node: Linear::new(store, "heads.node", g, dim, num_classes + 1, seed),
            boxes: Linear::new(store, "heads.box", g, dim, 4, seed),
            rel_reduce: store.register("heads.rel_reduce.w", g, &[mid, dim + 2], Init::FanIn(dim + 2), seed),
            rel_reduce_b: store.register("heads.rel_reduce.b", g, &[mid], Init::Zeros, seed),
            rel_out: Linear::new(store, "heads.rel_out", g, mid * pool * pool, num_predicates + 1, seed),
            dim,
            pool,
        }
    }
}

/// Inverted dropout with masks drawn from a keyed stream; each call draws a
/// fresh mask.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64, index: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", "rate must lie in [0, 1)"));
        }
        Ok(Self {
            rate,
            rng: rng_for(seed, "dropout", index),
        })
    }

    pub fn apply(&mut self, s: &mut Session, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let n = s.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let shape = s.tape.shape(x).to_vec();
        let m = s.tape.constant(&shape, mask)?;
        s.tape.mul(x, m)
    }
}

fn maybe_drop(s: &mut Session, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(s, x),
        None => Ok(x),
    }
}

/// Object logits over `num_classes + 1` categories (index 0 is background).
pub fn object_logits(s: &mut Session, h: &Heads, o: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    let x = maybe_drop(s, o, dropout)?;
    h.node.forward(s, x)
}

/// `softmax(f_node(õ))`.
pub fn predict_object(s: &mut Session, h: &Heads, o: Var) -> Result<Var> {
    let l = object_logits(s, h, o, None)?;
    s.tape.softmax(l, 0)
}

/// Class-agnostic box deltas `(dx, dy, dw, dh)` for one object.
pub fn box_deltas(s: &mut Session, h: &Heads, o: Var) -> Result<Var> {
    h.boxes.forward(s, o)
}

/// 1×1 convolution of a `[D×Ks×Ks]` map with the object vector as a single
/// `D`-channel kernel; the result is `[1×Ks×Ks]`.
pub fn object_conv(s: &mut Session, o: Var, map: Var) -> Result<Var> {
    let d = s.tape.value(o).len();
    let k = s.tape.reshape(o, &[1, d, 1, 1])?;
    s.tape.conv2d(map, k, 1, 0)
}

/// Predicate logits for the ordered pair `(i, j)` inside one subgraph map.
pub fn relation_logits(s: &mut Session, h: &Heads, oi: Var, oj: Var, sk: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    let a = object_conv(s, oi, sk)?;
    let b = object_conv(s, oj, sk)?;
    let x = s.tape.concat(&[a, b, sk], 0)?;
    let shape = s.tape.shape(x).to_vec();
    let cells = shape[1] * shape[2];
    let flat = s.tape.reshape(x, &[shape[0], cells])?;
    let w = s.p(h.rel_reduce);
    let bias = s.p(h.rel_reduce_b);
    let y = s.tape.matmul(w, flat)?;
    let y = s.tape.add_bias(y, bias, 0)?;
    let y = s.tape.relu(y);
    let mid = s.tape.shape(y)[0];
    let y = s.tape.reshape(y, &[mid * cells])?;
    let y = maybe_drop(s, y, dropout)?;
    h.rel_out.forward(s, y)
}

/// Predicate distribution for `(i, j)` given the subgraph's member list.
pub fn predict_relation(
    s: &mut Session,
    h: &Heads,
    objects: &[Var],
    i: usize,
    j: usize,
    subgraph: Var,
    members: &[usize],
) -> Result<Var> {
    if i == j {
        return Err(Error::invalid("predict_relation", "subject and object must differ"));
    }
    if !members.contains(&i) || !members.contains(&j) {
        return Err(Error::invalid("predict_relation", format!("subgraph does not contain both {i} and {j}")));
    }
    let l = relation_logits(s, h, objects[i], objects[j], subgraph, None)?;
    s.tape.softmax(l, 0)
}

/// `λ_pred`, `λ_obj` (reported as `λ_cls`) and `λ_reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pred: f64,
    pub obj: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pred: 2.0,
            obj: 1.0,
            reg: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.pred, self.obj, self.reg].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights", "weights must be finite and non-negative"))
        }
    }
}

pub const MATCH_IOU: f64 = 0.5;

/// Center/size deltas taking `proposal` to `target`.
pub fn encode_box(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = target.center();
    [
        (gx - px) / proposal.w,
        (gy - py) / proposal.h,
        math::ln(target.w / proposal.w),
        math::ln(target.h / proposal.h),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(proposal: &BBox, d: &[f64]) -> BBox {
    let (px, py) = proposal.center();
    let (cx, cy) = (px + d[0] * proposal.w, py + d[1] * proposal.h);
    let (w, h) = (proposal.w * math::exp(d[2]), proposal.h * math::exp(d[3]));
    BBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
    }
}

/// Ground-truth assignment for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Class per proposal (0 = background).
    pub classes: Vec<usize>,
    /// Matched ground-truth object per proposal.
    pub matched: Vec<Option<usize>>,
    /// Regression target per proposal (zeros for background).
    pub deltas: Vec<[f64; 4]>,
    /// Predicate per candidate pair (0 = no relation).
    pub predicates: Vec<usize>,
}

/// Matches each proposal to the highest-IoU ground-truth object (ties to the
/// lower index) when IoU ≥ 0.5, then labels candidate pairs from the
/// ground-truth relations of their matches.
pub fn assign_targets(boxes: &[BBox], scene: &Scene, pairs: &[(usize, usize)]) -> Result<Targets> {
    if scene.objects.is_empty() {
        return Err(Error::Empty("scene_graph_loss: ground truth"));
    }
    let mut classes = Vec::with_capacity(boxes.len());
    let mut matched = Vec::with_capacity(boxes.len());
    let mut deltas = Vec::with_capacity(boxes.len());
    for b in boxes {
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in scene.objects.iter().enumerate() {
            let v = iou(b, &obj.bbox);
            if v >= MATCH_IOU && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                classes.push(scene.objects[g].class);
                matched.push(Some(g));
                deltas.push(encode_box(b, &scene.objects[g].bbox));
            }
            None => {
                classes.push(BACKGROUND);
                matched.push(None);
                deltas.push([0.0; 4]);
            }
        }
    }
    let mut predicates = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let p = match (matched.get(i).copied().flatten(), matched.get(j).copied().flatten()) {
            (Some(a), Some(b)) if a != b => scene
                .relations
                .iter()
                .find(|r| r.subj == a && r.obj == b)
                .map_or(BACKGROUND, |r| r.predicate),
            _ => BACKGROUND,
        };
        predicates.push(p);
    }
    Ok(Targets {
        classes,
        matched,
        deltas,
        predicates,
    })
}

/// Weighted total plus its three terms.
#[derive(Debug, Clone, Copy)]
pub struct SceneGraphLoss {
    pub total: Var,
    pub pred: Var,
    pub obj: Var,
    pub reg: Var,
}

fn mean_of(s: &mut Session, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return s.tape.constant(&[1], vec![0.0]);
    }
    let all = s.tape.concat(terms, 0)?;
    Ok(s.tape.mean(all))
}

/// `λ_pred·L_pred + λ_obj·L_obj + λ_reg·L_reg`, with cross-entropy means
/// for the classification terms and smooth-L1 over foreground boxes only.
pub fn scene_graph_loss(
    s: &mut Session,
    obj_logits: &[Var],
    deltas: &[Var],
    rel_logits: &[Var],
    targets: &Targets,
    w: &LossWeights,
) -> Result<SceneGraphLoss> {
    w.validate()?;
    if obj_logits.len() != targets.classes.len() || deltas.len() != targets.classes.len() {
        return Err(Error::dims("scene_graph_loss", &[obj_logits.len(), deltas.len()], &[targets.classes.len()]));
    }
    if rel_logits.len() != targets.predicates.len() {
        return Err(Error::dims("scene_graph_loss", &[rel_logits.len()], &[targets.predicates.len()]));
    }
    let mut ce = Vec::with_capacity(obj_logits.len());
    for (l, c) in obj_logits.iter().zip(&targets.classes) {
        ce.push(s.tape.softmax_cross_entropy(*l, *c)?);
    }
    let obj = mean_of(s, &ce)?;

    let mut ce = Vec::with_capacity(rel_logits.len());
    for (l, p) in rel_logits.iter().zip(&targets.predicates) {
        ce.push(s.tape.softmax_cross_entropy(*l, *p)?);
    }
    let pred = mean_of(s, &ce)?;

    let mut reg_terms = Vec::new();
    for ((d, c), t) in deltas.iter().zip(&targets.classes).zip(&targets.deltas) {
        if *c == BACKGROUND {
            continue;
        }
        let t = s.tape.constant(&[4], t.to_vec())?;
        let r = s.tape.sub(*d, t)?;
        let r = s.tape.smooth_l1(r);
        reg_terms.push(s.tape.sum(r));
    }
    let reg = mean_of(s, &reg_terms)?;

    let a = s.tape.scale(pred, w.pred);
    let b = s.tape.scale(obj, w.obj);
    let c = s.tape.scale(reg, w.reg);
    let ab = s.tape.add(a, b)?;
    let total = s.tape.add(ab, c)?;
    Ok(SceneGraphLoss { total, pred, obj, reg })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub bbox: BBox,
    pub dist: Vec<f64>,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub subj: usize,
    pub obj: usize,
    pub dist: Vec<f64>,
}

/// A ranked `⟨subject, predicate, object⟩` prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriplet {
    pub subj: usize,
    pub obj: usize,
    pub subj_label: usize,
    pub predicate: usize,
    pub obj_label: usize,
    pub subj_box: BBox,
    pub obj_box: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

fn check_dist(d: &[f64], what: &str) -> Result<()> {
    let sum: f64 = d.iter().sum();
    if d.is_empty() || d.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("assemble_graph", format!("{what} is not a distribution")));
    }
    Ok(())
}

/// Builds a graph from per-proposal object distributions and per-pair
/// predicate distributions; nodes whose top-1 label is background are
/// dropped together with their edges.
pub fn assemble_graph(obj_dists: &[Vec<f64>], boxes: &[BBox], pairs: &[(usize, usize)], rel_dists: &[Vec<f64>]) -> Result<SceneGraph> {
    if obj_dists.len() != boxes.len() || pairs.len() != rel_dists.len() {
        return Err(Error::invalid("assemble_graph", "inconsistent index sets"));
    }
    let mut remap = vec![None; obj_dists.len()];
    let mut nodes = Vec::new();
    for (i, (d, b)) in obj_dists.iter().zip(boxes).enumerate() {
        check_dist(d, "object distribution")?;
        let label = argmax(d);
        if label == BACKGROUND {
            continue;
        }
        remap[i] = Some(nodes.len());
        nodes.push(GraphNode {
            bbox: *b,
            dist: d.clone(),
            label,
            score: d[label],
        });
    }
    let mut edges = Vec::new();
    for (&(i, j), d) in pairs.iter().zip(rel_dists) {
        check_dist(d, "predicate distribution")?;
        if i == j || i >= remap.len() || j >= remap.len() {
            return Err(Error::invalid("assemble_graph", format!("bad pair ({i}, {j})")));
        }
        if let (Some(a), Some(b)) = (remap[i], remap[j]) {
            edges.push(GraphEdge {
                subj: a,
                obj: b,
                dist: d.clone(),
            });
        }
    }
    Ok(SceneGraph { nodes, edges })
}

impl SceneGraph {
    /// Scored triplets in descending score order (stable, so ties keep edge
    /// order). With `top1` each edge contributes its best non-background
    /// predicate; otherwise every non-background predicate is a candidate.
    pub fn triplets(&self, top1: bool) -> Vec<ScoredTriplet> {
        let mut out = Vec::new();
        for e in &self.edges {
            let (s, o) = (&self.nodes[e.subj], &self.nodes[e.obj]);
            let mut push = |p: usize| {
                out.push(ScoredTriplet {
                    subj: e.subj,
                    obj: e.obj,
                    subj_label: s.label,
                    predicate: p,
                    obj_label: o.label,
                    subj_box: s.bbox,
                    obj_box: o.bbox,
                    score: s.score * e.dist[p] * o.score,
                })
            };
            if top1 {
                if e.dist.len() > 1 {
                    push(1 + argmax(&e.dist[1..]));
                }
            } else {
                (1..e.dist.len()).for_each(&mut push);
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_session, worst};
    use crate::numcore::Tensor;
    use crate::params::GroupMask;
    use crate::scene::{SceneObject, SceneRelation};

    fn heads(store: &mut ParamStore) -> Heads {
        Heads::new(store, 4, 2, 3, 2, 7)
    }

    #[test]
    fn object_distribution() {
        let mut store = ParamStore::new();
        let h = heads(&mut store);
        let mut s = Session::new(&store, GroupMask::NONE);
        let o = s.tape.constant(&[4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let p = predict_object(&mut s, &h, o).unwrap();
        assert!((s.tape.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = object_logits(&mut s, &h, o, None).unwrap();
        let shifted = s.tape.affine(l, 1.0, 17.0);
        assert_eq!(argmax(s.tape.value(l)), argmax(s.tape.value(shifted)));

        for p in store.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let mut s = Session::new(&store, GroupMask::NONE);
        let o = s.tape.constant(&[4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let p = predict_object(&mut s, &h, o).unwrap();
        assert!(s.tape.value(p).iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn object_kernel_convolution() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, GroupMask::NONE);
        let o = s.tape.constant(&[2], vec![1.0, 1.0]).unwrap();
        let map = s.tape.constant(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = object_conv(&mut s, o, map).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 1, 1]);
        assert_eq!(s.tape.value(y), &[2.0]);
    }

    #[test]
    fn relation_direction_and_membership() {
        let mut store = ParamStore::new();
        let h = heads(&mut store);
        let mut s = Session::new(&store, GroupMask::NONE);
        let o = [
            s.tape.constant(&[4], vec![0.3, -0.2, 0.9, 0.1]).unwrap(),
            s.tape.constant(&[4], vec![-0.5, 0.4, 0.0, 0.7]).unwrap(),
        ];
        let sk = s.tape.constant(&[4, 2, 2], (0..16).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let pij = predict_relation(&mut s, &h, &o, 0, 1, sk, &[0, 1]).unwrap();
        let pji = predict_relation(&mut s, &h, &o, 1, 0, sk, &[0, 1]).unwrap();
        assert!((s.tape.value(pij).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(s.tape.value(pij), s.tape.value(pji));
        assert!(predict_relation(&mut s, &h, &o, 0, 1, sk, &[0]).is_err());
        assert!(predict_relation(&mut s, &h, &o, 0, 0, sk, &[0, 1]).is_err());
    }

    #[test]
    fn full_scale_loss_weights() {
        let w = LossWeights::default();
        assert_eq!((w.pred, w.obj, w.reg), (2.0, 1.0, 0.5));
    }

    #[test]
    fn smooth_l1_branch_boundary() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, GroupMask::NONE);
        let x = s.tape.constant(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = s.tape.smooth_l1(x);
        assert_eq!(s.tape.value(y), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn box_codec_round_trip() {
        let p = BBox::new(10.0, 12.0, 20.0, 8.0).unwrap();
        let g = BBox::new(8.0, 15.0, 24.0, 6.0).unwrap();
        let d = encode_box(&p, &g);
        let back = decode_box(&p, &d);
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(encode_box(&p, &p), [0.0; 4]);
    }

    fn scene() -> Scene {
        Scene {
            id: "s".into(),
            width: 64,
            height: 64,
            objects: vec![
                SceneObject {
                    bbox: BBox::new(0.0, 0.0, 20.0, 20.0).unwrap(),
                    class: 1,
                },
                SceneObject {
                    bbox: BBox::new(30.0, 30.0, 20.0, 20.0).unwrap(),
                    class: 2,
                },
            ],
            relations: vec![SceneRelation {
                subj: 0,
                predicate: 2,
                obj: 1,
            }],
        }
    }

    #[test]
    fn assignment_rules() {
        let sc = scene();
        let boxes = [
            BBox::new(1.0, 1.0, 20.0, 20.0).unwrap(),
            BBox::new(30.0, 30.0, 20.0, 20.0).unwrap(),
            BBox::new(50.0, 0.0, 10.0, 10.0).unwrap(),
        ];
        let pairs = crate::proposals::ordered_pairs(3);
        let t = assign_targets(&boxes, &sc, &pairs).unwrap();
        assert_eq!(t.classes, vec![1, 2, 0]);
        assert_eq!(t.matched, vec![Some(0), Some(1), None]);
        assert_eq!(t.deltas[1], [0.0; 4]);
        assert_eq!(t.deltas[2], [0.0; 4]);
        for (k, p) in pairs.iter().enumerate() {
            assert_eq!(t.predicates[k], if *p == (0, 1) { 2 } else { 0 });
        }
        let empty = Scene {
            objects: vec![],
            relations: vec![],
            ..sc
        };
        assert!(assign_targets(&boxes, &empty, &pairs).is_err());
    }

    #[test]
    fn zero_loss_at_exact_one_hot() {
        let sc = scene();
        let boxes: Vec<BBox> = sc.objects.iter().map(|o| o.bbox).collect();
        let pairs = crate::proposals::ordered_pairs(2);
        let t = assign_targets(&boxes, &sc, &pairs).unwrap();
        let store = ParamStore::new();
        let mut s = Session::new(&store, GroupMask::NONE);
        let one_hot = |s: &mut Session, n: usize, k: usize| {
            let mut v = vec![-1000.0; n];
            v[k] = 1000.0;
            s.tape.constant(&[n], v).unwrap()
        };
        let ol: Vec<Var> = t.classes.iter().map(|c| one_hot(&mut s, 3, *c)).collect();
        let rl: Vec<Var> = t.predicates.iter().map(|p| one_hot(&mut s, 3, *p)).collect();
        let dl: Vec<Var> = (0..2).map(|_| s.tape.zeros(&[4])).collect();
        let l = scene_graph_loss(&mut s, &ol, &dl, &rl, &t, &LossWeights::default()).unwrap();
        assert_eq!(s.tape.scalar(l.total), 0.0);

        let wrong = one_hot(&mut s, 3, 0);
        let l = scene_graph_loss(&mut s, &[ol[0], wrong], &dl, &rl, &t, &LossWeights::default()).unwrap();
        assert!(s.tape.scalar(l.total) > 0.0);
    }

    #[test]
    fn loss_gradient_and_separability() {
        let sc = scene();
        let boxes = [BBox::new(1.0, 1.0, 20.0, 20.0).unwrap(), BBox::new(29.0, 31.0, 21.0, 19.0).unwrap()];
        let pairs = crate::proposals::ordered_pairs(2);
        let t = assign_targets(&boxes, &sc, &pairs).unwrap();
        let mut store = ParamStore::new();
        let h = heads(&mut store);
        let inputs = [
            Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]),
            Tensor::vector(vec![-0.5, 0.4, 0.0, 0.7]),
            Tensor::new(&[4, 2, 2], (0..16).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap(),
        ];
        let loss = |w: LossWeights| {
            let h = h.clone();
            let t = t.clone();
            move |s: &mut Session, v: &[Var]| -> Result<Var> {
                let ol = [object_logits(s, &h, v[0], None)?, object_logits(s, &h, v[1], None)?];
                let dl = [box_deltas(s, &h, v[0])?, box_deltas(s, &h, v[1])?];
                let rl = [
                    relation_logits(s, &h, v[0], v[1], v[2], None)?,
                    relation_logits(s, &h, v[1], v[0], v[2], None)?,
                ];
                Ok(scene_graph_loss(s, &ol, &dl, &rl, &t, &w)?.total)
            }
        };
        let mask = GroupMask::of(&[Group::Heads]);
        let report = check_session(&store, mask, &inputs, loss(LossWeights::default())).unwrap();
        assert!(worst(&report) < 1e-4, "{report:?}");

        let grads = |w: LossWeights| {
            let mut s = Session::new(&store, mask);
            let v: Vec<Var> = inputs.iter().map(|t| s.tape.constant(t.shape(), t.data().to_vec()).unwrap()).collect();
            let l = loss(w)(&mut s, &v).unwrap();
            s.backward(l).unwrap()
        };
        let with = grads(LossWeights::default());
        let without = grads(LossWeights { reg: 0.0, ..Default::default() });
        for id in [h.node.w, h.rel_out.w, h.rel_reduce] {
            assert_eq!(with.get(id), without.get(id));
        }
        assert!(without.get(h.boxes.w).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn minimal_graph_and_ranking() {
        let boxes = [BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), BBox::new(6.0, 6.0, 5.0, 5.0).unwrap()];
        let od = vec![vec![0.1, 0.7, 0.2], vec![0.2, 0.2, 0.6]];
        let pairs = crate::proposals::ordered_pairs(2);
        let rd = vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]];
        let g = assemble_graph(&od, &boxes, &pairs, &rd).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (2, 2));
        let all = g.triplets(false);
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        let top = g.triplets(true);
        assert_eq!(top.len(), 2);
        assert_eq!((top[0].subj, top[0].predicate), (1, 2));
        assert!((top[0].score - 0.6 * 0.8 * 0.7).abs() < 1e-15);
        assert_eq!(g, assemble_graph(&od, &boxes, &pairs, &rd).unwrap());

        let bg = vec![vec![0.9, 0.05, 0.05], od[1].clone()];
        let g = assemble_graph(&bg, &boxes, &pairs, &rd).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (1, 0));
        assert!(assemble_graph(&[vec![0.5, 0.6]], &boxes[..1], &[], &[]).is_err());
    }

    #[test]
    fn dropout_is_keyed_and_scaled() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, GroupMask::NONE);
        let x = s.tape.constant(&[64], vec![1.0; 64]).unwrap();
        let mut a = Dropout::new(0.5, 3, 0).unwrap();
        let mut b = Dropout::new(0.5, 3, 0).unwrap();
        let ya = a.apply(&mut s, x).unwrap();
        let yb = b.apply(&mut s, x).unwrap();
        assert_eq!(s.tape.value(ya), s.tape.value(yb));
        assert!(s.tape.value(ya).iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(Dropout::new(1.0, 0, 0).is_err());
    }
}

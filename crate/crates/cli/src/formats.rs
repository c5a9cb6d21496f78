//! On-disk formats: scene and graph JSONL, label JSON, PPM images and the
//! per-step loss CSV.

use anyhow::{anyhow, bail, Context, Result};
use kbsg_core::graphgen::{SceneGraph, ScoredTriplet};
use kbsg_core::scene::{LabelSpace, Scene, SceneObject, SceneRelation};
use kbsg_core::train::LossReport;
use kbsg_core::{BBox, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    /// `[x, y, w, h]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    pub subj: usize,
    pub predicate: usize,
    pub obj: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectRecord>,
    pub relations: Vec<RelationRecord>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        Self {
            id: s.id.clone(),
            width: s.width,
            height: s.height,
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    bbox: o.bbox.to_array(),
                    class: o.class,
                })
                .collect(),
            relations: s
                .relations
                .iter()
                .map(|r| RelationRecord {
                    subj: r.subj,
                    predicate: r.predicate,
                    obj: r.obj,
                })
                .collect(),
        }
    }
}

impl SceneRecord {
    pub fn to_scene(&self) -> Result<Scene> {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let [x, y, w, h] = o.bbox;
                Ok(SceneObject {
                    bbox: BBox::new(x, y, w, h)?,
                    class: o.class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            objects,
            relations: self
                .relations
                .iter()
                .map(|r| SceneRelation {
                    subj: r.subj,
                    predicate: r.predicate,
                    obj: r.obj,
                })
                .collect(),
        })
    }
}

fn jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}", i + 1)))
        .collect()
}

fn to_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_scenes(scenes: &[Scene]) -> String {
    to_jsonl(scenes.iter().map(SceneRecord::from))
}

/// Parses scenes, validating each against `labels` when given.
pub fn read_scenes(text: &str, labels: Option<&LabelSpace>) -> Result<Vec<Scene>> {
    let records: Vec<SceneRecord> = jsonl(text)?;
    records
        .iter()
        .map(|r| {
            let s = r.to_scene().with_context(|| format!("scene {}", r.id))?;
            if let Some(l) = labels {
                s.validate(l).with_context(|| format!("scene {}", r.id))?;
            }
            Ok(s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsRecord {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
}

pub fn write_labels(labels: &LabelSpace) -> String {
    let r = LabelsRecord {
        classes: labels.classes.clone(),
        predicates: labels.predicates.clone(),
    };
    serde_json::to_string_pretty(&r).expect("labels serialize") + "\n"
}

pub fn read_labels(text: &str) -> Result<LabelSpace> {
    let r: LabelsRecord = serde_json::from_str(text)?;
    if r.classes.is_empty() || r.predicates.is_empty() {
        bail!("labels need at least one class and one predicate");
    }
    Ok(LabelSpace {
        classes: r.classes,
        predicates: r.predicates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
    pub score: f64,
}

/// One predicted graph. Every non-background predicate of an object pair is
/// its own edge, scored by its predicate probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub id: String,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

impl GraphRecord {
    pub fn new(id: &str, g: &SceneGraph) -> Self {
        let nodes = g
            .nodes
            .iter()
            .map(|n| NodeRecord {
                bbox: n.bbox.to_array(),
                label: n.label,
                score: n.score,
            })
            .collect();
        let mut edges = Vec::new();
        for e in &g.edges {
            for (p, score) in e.dist.iter().enumerate().skip(1) {
                edges.push(EdgeRecord {
                    subj: e.subj,
                    obj: e.obj,
                    predicate: p,
                    score: *score,
                });
            }
        }
        Self {
            id: id.to_string(),
            nodes,
            edges,
        }
    }

    /// Ranked triplets, scored as subject score × predicate score × object
    /// score; ties keep edge order.
    pub fn triplets(&self) -> Result<Vec<ScoredTriplet>> {
        let boxes = self
            .nodes
            .iter()
            .map(|n| {
                let [x, y, w, h] = n.bbox;
                BBox::new(x, y, w, h).map_err(anyhow::Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            let (s, o) = match (self.nodes.get(e.subj), self.nodes.get(e.obj)) {
                (Some(s), Some(o)) if e.subj != e.obj => (s, o),
                _ => bail!("graph {}: bad edge ({}, {})", self.id, e.subj, e.obj),
            };
            out.push(ScoredTriplet {
                subj: e.subj,
                obj: e.obj,
                subj_label: s.label,
                predicate: e.predicate,
                obj_label: o.label,
                subj_box: boxes[e.subj],
                obj_box: boxes[e.obj],
                score: s.score * e.score * o.score,
            });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }
}

pub fn write_graphs(graphs: &[GraphRecord]) -> String {
    to_jsonl(graphs)
}

pub fn read_graphs(text: &str) -> Result<Vec<GraphRecord>> {
    jsonl(text)
}

/// Binary PPM (P6) from a `3×H×W` tensor in `[−1, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        bail!("expected a 3×H×W image, got {:?}", img.shape());
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i].clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PPM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields[0] != "P6" {
        bail!("not a binary PPM (P6)");
    }
    let w: usize = fields[1].parse()?;
    let h: usize = fields[2].parse()?;
    if fields[3] != "255" {
        bail!("only 8-bit PPM is supported");
    }
    let body = &bytes[pos + 1..];
    if body.len() != 3 * w * h {
        bail!("expected {} pixel bytes, found {}", 3 * w * h, body.len());
    }
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = body[3 * i + c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| anyhow!(e))
}

pub const LOSS_HEADER: &str = "step,L_pred,L_obj,L_reg,L_G,L_D,L_pixel";

pub fn loss_row(r: &LossReport) -> String {
    format!("{},{},{},{},{},{},{}", r.step, r.pred, r.obj, r.reg, r.g, r.d, r.pixel)
}

/// Rows of an existing loss log whose step is below `start`.
pub fn loss_rows_before(text: &str, start: usize) -> Result<Vec<String>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        bail!("loss log has an unexpected header");
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let step: usize = l
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("loss log line {}", i + 2))?;
        if step < start {
            out.push(l.to_string());
        }
    }
    Ok(out)
}

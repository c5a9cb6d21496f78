use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{check_session, GradCheck, OP_TOLERANCE, PIPELINE_TOLERANCE};
use crate::config::{ImageConfig, ModelConfig, Switches};
use crate::error::Result;
use crate::geometry::BBox;
use crate::graphgen::{box_deltas, object_logits, relation_logits, scene_graph_loss, LossWeights};
use crate::imggen::gan_losses;
use crate::kb::{FactTriple, TripleStore, Vocabulary};
use crate::model::{Model, ProposalConfig, Sample};
use crate::numcore::{Tensor, Var};
use crate::params::{Group, GroupMask, ParamStore, Session};
use crate::rng::rng_for;
use crate::refine::{inter_refine, kb_refine, KnowledgeSource};
use crate::scene::{LabelSpace, Scene, SceneObject, SceneRelation};

/// Smallest configuration that still exercises every stage (16×16 images).
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        memory_dim: 3,
        embed_dim: 3,
        fact_hidden: 3,
        attention_hidden: 4,
        top_k: 8,
        memory_passes: 2,
        refine_iters: 2,
        num_classes: 2,
        num_predicates: 2,
        cluster_iou: 0.5,
        kb: true,
        gan: true,
        image: ImageConfig {
            out_res: 16,
            start_res: 4,
            noise_channels: 2,
            gen_channels: 3,
            disc_channels: 2,
            layout_dim: 2,
            lambda_pixel: 1.0,
        },
    }
}

/// Two objects, one subgraph, two facts per label.
pub struct Fixture {
    pub model: Model,
    pub sample: Sample,
    pub store: TripleStore,
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = tiny_config();
        let labels = LabelSpace {
            classes: vec!["cup".to_string(), "table".to_string()],
            predicates: vec!["On".to_string(), "NextTo".to_string()],
        };
        let store = TripleStore::from_triples([
            FactTriple::new("cup", "On", "table", 2.0)?,
            FactTriple::new("cup", "UsedFor", "drinking", 1.0)?,
            FactTriple::new("table", "NextTo", "cup", 1.5)?,
            FactTriple::new("table", "IsA", "furniture", 0.5)?,
        ]);
        let vocab = Vocabulary::build(&store, ["cup", "table"]);
        let scene = Scene {
            id: "gradcheck".into(),
            width: 64,
            height: 64,
            objects: vec![
                SceneObject {
                    bbox: BBox::new(6.0, 8.0, 22.0, 18.0)?,
                    class: 1,
                },
                SceneObject {
                    bbox: BBox::new(26.0, 30.0, 30.0, 24.0)?,
                    class: 2,
                },
            ],
            relations: vec![SceneRelation {
                subj: 0,
                predicate: 1,
                obj: 1,
            }],
        };
        let mut model = Model::new(&cfg, vocab.len(), seed)?;
        // Zero-initialized biases put ReLU inputs exactly on the kink when an
        // upstream activation is all zero; move them off it.
        for p in model.params.iter_mut() {
            if p.tensor.data().iter().all(|v| *v == 0.0) {
                let mut rng = rng_for(seed, &p.name, 1);
                p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        // Keep the retrieval label well away from an argmax tie.
        let b = model.heads.node.b;
        model.params.tensor_mut(b).data_mut()[1] = 3.0;
        let sample = Sample::prepare(&scene, &cfg, &ProposalConfig { jitter: 0.05, seed })?;
        Ok(Self {
            model,
            sample,
            store,
            vocab,
            labels,
        })
    }

    pub fn source(&self) -> KnowledgeSource<'_> {
        KnowledgeSource {
            store: &self.store,
            vocab: &self.vocab,
            labels: &self.labels,
            top_k: self.model.config.top_k,
        }
    }

    /// Scene-graph loss plus the generator objective and the negated
    /// discriminator objective, all in one graph.
    pub fn total_loss(&self, s: &mut Session) -> Result<Var> {
        let f = self.model.forward(s, &self.sample, Some(self.source()), Switches::ALL, None)?;
        let l = scene_graph_loss(s, &f.obj_logits, &f.deltas, &f.rel_logits, &self.sample.targets, &LossWeights::default())?;
        let gen = self.model.generator.as_ref().expect("fixture has a generator");
        let disc = self.model.discriminator.as_ref().expect("fixture has a discriminator");
        let objs: Vec<(Var, BBox)> = f.objects.iter().zip(&self.sample.proposals).map(|(o, p)| (*o, p.bbox)).collect();
        let layout = gen.layout(s, &objs, self.sample.canvas_scale())?;
        let z = gen.noise(s, 1, 0)?;
        let fake = gen.generate(s, layout.grid, z)?;
        let img = &self.sample.image;
        let real = s.tape.constant(img.shape(), img.data().to_vec())?;
        let g = gan_losses(s, disc, real, fake, layout.grid, 1.0)?;
        let neg_d = s.tape.scale(g.l_d, -1.0);
        let t = s.tape.add(l.total, g.g_objective)?;
        s.tape.add(t, neg_d)
    }
}

fn row(name: &str, report: &[(String, f64)], tolerance: f64) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        count: report.len(),
        max_rel_err: report.iter().map(|r| r.1).fold(0.0, f64::max),
        tolerance,
    }
}

fn vector(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec())
}

/// Finite-difference checks of each pipeline stage in isolation.
pub fn module_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let fx = Fixture::new(seed)?;
    let m = &fx.model;
    let p = &m.params;
    let d = m.config.feature_dim;
    let dm = m.config.memory_dim;
    let objs = [vector(&[0.3, -0.2, 0.5, 0.1]), vector(&[-0.4, 0.1, 0.2, 0.6])];
    let map = fx.sample.subgraphs[0].feature.clone();
    let mut out = Vec::new();

    let mut ins = objs.to_vec();
    ins.push(map.clone());
    let r = check_session(p, GroupMask::of(&[Group::Refine]), &ins, |s, v| {
        let r = inter_refine(s, &m.inter, &v[..2], &v[2..], &[vec![0, 1]])?;
        let a = s.tape.concat(&r.objects, 0)?;
        let b = s.tape.reshape(r.subgraphs[0], &[d * 25])?;
        let a = s.tape.sum(a);
        let b = s.tape.sum(b);
        s.tape.add(a, b)
    })?;
    out.push(row("inter_refine", &r, OP_TOLERANCE));

    let kp = m.knowledge.as_ref().expect("fixture has knowledge");
    let ins = [objs[0].clone(), vector(&[0.2, -0.5, 0.4][..dm]), vector(&[-0.1, 0.3, 0.6][..dm])];
    let r = check_session(p, GroupMask::of(&[Group::Knowledge]), &ins, |s, v| {
        let o = kb_refine(s, kp, v[0], &v[1..])?;
        Ok(s.tape.sum(o))
    })?;
    out.push(row("kb_refine", &r, OP_TOLERANCE));

    let fact = fx.store.iter().next().expect("fixture facts").clone();
    let r = check_session(p, GroupMask::of(&[Group::Knowledge]), &[], |s, _| {
        let e = kp.encoder.encode_fact(s, &fact, &fx.vocab)?;
        Ok(s.tape.sum(e))
    })?;
    out.push(row("encode_fact", &r, OP_TOLERANCE));

    let mut ins = objs.to_vec();
    ins.push(map);
    let t = fx.sample.targets.clone();
    let r = check_session(p, GroupMask::of(&[Group::Heads]), &ins, |s, v| {
        let h = &m.heads;
        let ol = [object_logits(s, h, v[0], None)?, object_logits(s, h, v[1], None)?];
        let dl = [box_deltas(s, h, v[0])?, box_deltas(s, h, v[1])?];
        let rl = [relation_logits(s, h, v[0], v[1], v[2], None)?, relation_logits(s, h, v[1], v[0], v[2], None)?];
        Ok(scene_graph_loss(s, &ol, &dl, &rl, &t, &LossWeights::default())?.total)
    })?;
    out.push(row("heads+loss", &r, PIPELINE_TOLERANCE));

    let gen = m.generator.as_ref().expect("fixture has a generator");
    let disc = m.discriminator.as_ref().expect("fixture has a discriminator");
    let ic = &m.config.image;
    let n = ic.layout_dim * ic.out_res * ic.out_res;
    let layout = Tensor::new(
        &[ic.layout_dim, ic.out_res, ic.out_res],
        (0..n).map(|i| crate::math::sin(i as f64 * 0.37)).collect(),
    )?;
    let r = check_session(p, GroupMask::of(&[Group::Generator]), &[layout.clone()], |s, v| {
        let z = gen.noise(s, seed, 0)?;
        let img = gen.generate(s, v[0], z)?;
        Ok(s.tape.mean(img))
    })?;
    out.push(row("generator", &r, PIPELINE_TOLERANCE));

    let img = fx.sample.image.clone();
    let fake = Tensor::new(img.shape(), img.data().iter().map(|v| -0.5 * v).collect())?;
    let r = check_session(p, GroupMask::of(&[Group::Discriminator]), &[img, fake, layout], |s, v| {
        let g = gan_losses(s, disc, v[0], v[1], v[2], 1.0)?;
        s.tape.add(g.l_d, g.g_objective)
    })?;
    out.push(row("gan_losses", &r, PIPELINE_TOLERANCE));
    Ok(out)
}

/// Gradient of the full composite loss with respect to every parameter,
/// summarized per parameter group.
pub fn end_to_end_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let fx = Fixture::new(seed)?;
    let report = check_session(&fx.model.params, GroupMask::all(), &[], |s, _| fx.total_loss(s))?;
    let mut rows = Vec::new();
    for g in Group::ALL {
        let part: Vec<(String, f64)> = report
            .iter()
            .filter(|(name, _)| group_of(&fx.model.params, name) == Some(g))
            .cloned()
            .collect();
        rows.push(row(g.name(), &part, PIPELINE_TOLERANCE));
    }
    Ok(rows)
}

fn group_of(p: &ParamStore, name: &str) -> Option<Group> {
    p.id(name).map(|id| p.get(id).group)
}

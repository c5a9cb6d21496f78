//! The assembled network and its per-image forward pass.

use alloc::vec::Vec;

use crate::config::{ModelConfig, Switches};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::graphgen::{
    assemble_graph, assign_targets, box_deltas, decode_box, object_logits, relation_logits, Dropout, Heads, SceneGraph, Targets,
};
use crate::imggen::{Discriminator, Generator};
use crate::numcore::{argmax, Tensor, Var};
use crate::params::{GroupMask, ParamStore, Session};
use crate::proposals::{build_subgraphs, stub_proposals, CandidateTriple, FeatureSynth, ObjectProposal, SubgraphProposal, SUBGRAPH_POOL};
use crate::refine::{refine_loop, FactCache, InterParams, KnowledgeParams, KnowledgeSource, KnowledgeStep};
use crate::scene::{render_scene, Scene};

/// Proposal-stage settings shared by training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    /// Relative box jitter applied by the stub proposal stage.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { jitter: 0.05, seed: 0 }
    }
}

/// One image with its proposals, clustering, assignment and real image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub proposals: Vec<ObjectProposal>,
    pub subgraphs: Vec<SubgraphProposal>,
    pub candidates: Vec<CandidateTriple>,
    pub targets: Targets,
    /// Rendered scene average-pooled to `out_res`.
    pub image: Tensor,
}

impl Sample {
    pub fn prepare(scene: &Scene, config: &ModelConfig, proposals: &ProposalConfig) -> Result<Self> {
        let synth = FeatureSynth::new(config.feature_dim, scene.width as f64, scene.height as f64, proposals.seed);
        let objs = stub_proposals(scene, scene.objects.len(), proposals.jitter, proposals.seed, &synth)?;
        let (subgraphs, candidates) = build_subgraphs(&objs, config.cluster_iou, &synth)?;
        let boxes: Vec<BBox> = objs.iter().map(|o| o.bbox).collect();
        let pairs: Vec<(usize, usize)> = candidates.iter().map(|c| (c.subj, c.obj)).collect();
        let targets = assign_targets(&boxes, scene, &pairs)?;
        let image = downsample(&render_scene(scene), config.image.out_res)?;
        Ok(Self {
            scene: scene.clone(),
            proposals: objs,
            subgraphs,
            candidates,
            targets,
            image,
        })
    }

    /// Scale from scene coordinates to generator pixels.
    pub fn canvas_scale(&self) -> f64 {
        self.image.shape()[2] as f64 / self.scene.width as f64
    }
}

/// Average-pools a `C×H×W` image to `C×side×side`.
pub fn downsample(img: &Tensor, side: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || side == 0 || s[1] % side != 0 || s[2] % side != 0 || s[1] / side != s[2] / side {
        return Err(Error::dims("downsample", s, &[s[0], side, side]));
    }
    let (c, h, w, f) = (s[0], s[1], s[2], s[1] / side);
    let mut out = alloc::vec![0.0; c * side * side];
    let norm = 1.0 / (f * f) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * side + y / f) * side + x / f] += img.data()[(ch * h + y) * w + x] * norm;
            }
        }
    }
    Tensor::new(&[c, side, side], out)
}

/// Network outputs for one image.
#[derive(Debug, Clone)]
pub struct Forward {
    pub obj_logits: Vec<Var>,
    pub deltas: Vec<Var>,
    pub rel_logits: Vec<Var>,
    /// Refined object vectors `õ`.
    pub objects: Vec<Var>,
    pub subgraphs: Vec<Var>,
}

/// All sub-networks over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub inter: InterParams,
    pub heads: Heads,
    pub knowledge: Option<KnowledgeParams>,
    pub generator: Option<Generator>,
    pub discriminator: Option<Discriminator>,
}

impl Model {
    /// Registers every sub-network enabled in `config`. Each parameter is
    /// drawn from its own stream, so shared parameters are identical across
    /// configurations with the same seed.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamStore::new();
        let inter = InterParams::new(&mut params, c.feature_dim, seed);
        let heads = Heads::new(&mut params, c.feature_dim, SUBGRAPH_POOL, c.num_classes, c.num_predicates, seed);
        let knowledge = if c.kb {
            if vocab_size == 0 {
                return Err(Error::invalid("model", "knowledge branch needs a non-empty vocabulary"));
            }
            Some(KnowledgeParams::new(
                &mut params,
                c.feature_dim,
                c.memory_dim,
                vocab_size,
                c.embed_dim,
                c.fact_hidden,
                c.attention_hidden,
                c.memory_passes,
                seed,
            ))
        } else {
            None
        };
        let (generator, discriminator) = if c.gan {
            (
                Some(Generator::new(&mut params, c.feature_dim, &c.image, seed)?),
                Some(Discriminator::new(&mut params, &c.image, seed)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config: c.clone(),
            params,
            inter,
            heads,
            knowledge,
            generator,
            discriminator,
        })
    }

    /// Runtime switches restricted to the branches this model has.
    pub fn effective(&self, sw: Switches) -> Switches {
        Switches {
            kb: sw.kb && self.knowledge.is_some(),
            gan: sw.gan && self.generator.is_some(),
        }
    }

    /// Proposal features → refinement → heads. `dropout` applies to the
    /// inputs of `f_node` and `f_rel`.
    pub fn forward(
        &self,
        s: &mut Session,
        sample: &Sample,
        kb: Option<KnowledgeSource>,
        sw: Switches,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Forward> {
        let mut objects = Vec::with_capacity(sample.proposals.len());
        for p in &sample.proposals {
            objects.push(s.tape.constant(p.feature.shape(), p.feature.data().to_vec())?);
        }
        let mut maps = Vec::with_capacity(sample.subgraphs.len());
        for g in &sample.subgraphs {
            maps.push(s.tape.constant(g.feature.shape(), g.feature.data().to_vec())?);
        }
        let members: Vec<Vec<usize>> = sample.subgraphs.iter().map(|g| g.members.clone()).collect();

        let mut cache = FactCache::new();
        let step = match (self.effective(sw).kb, kb, &self.knowledge) {
            (true, Some(source), Some(params)) => Some(KnowledgeStep {
                params,
                source,
                cache: &mut cache,
            }),
            (true, None, _) => return Err(Error::invalid("forward", "knowledge branch enabled without a knowledge source")),
            _ => None,
        };
        let heads = &self.heads;
        let classify = |s: &mut Session, o: Var| -> Result<usize> {
            let l = object_logits(s, heads, o, None)?;
            Ok(argmax(s.tape.value(l)))
        };
        let (objs, subs) = refine_loop(s, &self.inter, step, self.config.refine_iters, &objects, &maps, &members, classify)?;

        let mut obj_logits = Vec::with_capacity(objs.len());
        let mut deltas = Vec::with_capacity(objs.len());
        for o in &objs {
            obj_logits.push(object_logits(s, heads, *o, dropout.as_deref_mut())?);
            deltas.push(box_deltas(s, heads, *o)?);
        }
        let mut rel_logits = Vec::with_capacity(sample.candidates.len());
        for c in &sample.candidates {
            rel_logits.push(relation_logits(s, heads, objs[c.subj], objs[c.obj], subs[c.subgraph], dropout.as_deref_mut())?);
        }
        Ok(Forward {
            obj_logits,
            deltas,
            rel_logits,
            objects: objs,
            subgraphs: subs,
        })
    }

    /// Inference without the image branch: returns the assembled graph.
    pub fn predict(&self, sample: &Sample, kb: Option<KnowledgeSource>, sw: Switches) -> Result<SceneGraph> {
        let mut s = Session::new(&self.params, GroupMask::NONE);
        let f = self.forward(&mut s, sample, kb, Switches { gan: false, ..sw }, None)?;
        let mut obj_dists = Vec::with_capacity(f.obj_logits.len());
        let mut boxes = Vec::with_capacity(f.obj_logits.len());
        for ((l, d), p) in f.obj_logits.iter().zip(&f.deltas).zip(&sample.proposals) {
            let sm = s.tape.softmax(*l, 0)?;
            obj_dists.push(s.tape.value(sm).to_vec());
            boxes.push(decode_box(&p.bbox, s.tape.value(*d)));
        }
        let mut rel_dists = Vec::with_capacity(f.rel_logits.len());
        for l in &f.rel_logits {
            let sm = s.tape.softmax(*l, 0)?;
            rel_dists.push(s.tape.value(sm).to_vec());
        }
        let pairs: Vec<(usize, usize)> = sample.candidates.iter().map(|c| (c.subj, c.obj)).collect();
        assemble_graph(&obj_dists, &boxes, &pairs, &rel_dists)
    }
}

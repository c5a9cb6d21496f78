//! Object/subgraph message passing and knowledge-based refinement.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kb::{FactEncoder, TripleStore, Vocabulary};
use crate::math;
use crate::nn::{GruCell, Linear};
use crate::numcore::Var;
use crate::params::{Group, ParamStore, Session};
use crate::scene::LabelSpace;

/// Residual maps between object vectors and subgraph feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct InterParams {
    pub s2o: Linear,
    pub o2s: Linear,
    pub dim: usize,
}

impl InterParams {
    pub fn new(store: &mut ParamStore, dim: usize, seed: u64) -> Self {
        Self {
            s2o: Linear::new(store, "refine.s2o", Group::Refine, dim, dim, seed),
            o2s: Linear::new(store, "refine.o2s", Group::Refine, dim, dim, seed),
            dim,
        }
    }
}

/// Query map, fact projection, episodic attention, AGRU, memory and fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeParams {
    pub encoder: FactEncoder,
    pub fact_proj: Linear,
    pub query: Linear,
    /// `W_2, b_2`: `4·Dm → attention_hidden`.
    pub att_hidden: Linear,
    /// `W_1, b_1`: `attention_hidden → 1`.
    pub att_out: Linear,
    pub agru: GruCell,
    pub memory: Linear,
    pub fuse: Linear,
    pub memory_dim: usize,
    pub passes: usize,
}

impl KnowledgeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        memory_dim: usize,
        vocab_size: usize,
        embed_dim: usize,
        fact_hidden: usize,
        attention_hidden: usize,
        passes: usize,
        seed: u64,
    ) -> Self {
        let k = Group::Knowledge;
        let encoder = FactEncoder::new(store, "kb.encoder", vocab_size, embed_dim, fact_hidden, seed);
        Self {
            fact_proj: Linear::new(store, "kb.fact_proj", k, encoder.output_dim(), memory_dim, seed),
            query: Linear::new(store, "kb.query", k, feature_dim, memory_dim, seed),
            att_hidden: Linear::new(store, "kb.att_hidden", k, 4 * memory_dim, attention_hidden, seed),
            att_out: Linear::new(store, "kb.att_out", k, attention_hidden, 1, seed),
            agru: GruCell::new(store, "kb.agru", k, memory_dim, memory_dim, seed),
            memory: Linear::new(store, "kb.memory", k, 3 * memory_dim, memory_dim, seed),
            fuse: Linear::new(store, "kb.fuse", k, feature_dim + memory_dim, feature_dim, seed),
            encoder,
            memory_dim,
            passes,
        }
    }
}

/// Read-only inputs for retrieval during refinement.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeSource<'a> {
    pub store: &'a TripleStore,
    pub vocab: &'a Vocabulary,
    pub labels: &'a LabelSpace,
    pub top_k: usize,
}

/// Projected fact vectors per label, valid only within the session that built them.
#[derive(Debug, Default)]
pub struct FactCache {
    by_label: BTreeMap<String, Vec<Var>>,
}

impl FactCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Retrieves, encodes and projects the top-K facts for `label`.
    pub fn facts(&mut self, s: &mut Session, p: &KnowledgeParams, src: &KnowledgeSource, label: &str) -> Result<Vec<Var>> {
        if let Some(f) = self.by_label.get(label) {
            return Ok(f.clone());
        }
        let mut out = Vec::new();
        for fact in src.store.retrieve_topk(label, src.top_k)? {
            let enc = p.encoder.encode_fact(s, &fact, src.vocab)?;
            out.push(p.fact_proj.forward(s, enc)?);
        }
        self.by_label.insert(label.into(), out.clone());
        Ok(out)
    }
}

/// Output of [`inter_refine`] with the attention weights used.
#[derive(Debug, Clone)]
pub struct InterRefined {
    pub objects: Vec<Var>,
    pub subgraphs: Vec<Var>,
    /// `α^{s→o}` per object, aligned with the object's subgraphs in index order.
    pub object_alpha: Vec<Vec<f64>>,
    /// `α^{o→s}` per subgraph, aligned with its member list.
    pub subgraph_alpha: Vec<Vec<f64>>,
}

fn dot(s: &mut Session, a: Var, b: Var) -> Result<Var> {
    let m = s.tape.mul(a, b)?;
    Ok(s.tape.sum(m))
}

/// Softmax-weighted sum of `values`, scored by scaled dot products against `key`.
fn attend(s: &mut Session, key: Var, values: &[Var], dim: usize) -> Result<(Var, Vec<f64>)> {
    let scale = 1.0 / math::sqrt(dim as f64);
    let mut scores = Vec::with_capacity(values.len());
    for v in values {
        let d = dot(s, key, *v)?;
        scores.push(s.tape.scale(d, scale));
    }
    let scores = s.tape.concat(&scores, 0)?;
    let alpha = s.tape.softmax(scores, 0)?;
    let mut acc = None;
    for (k, v) in values.iter().enumerate() {
        let a = s.tape.select(alpha, k)?;
        let term = s.tape.scale_by(a, *v)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => s.tape.add(prev, term)?,
        });
    }
    let weights = s.tape.value(alpha).to_vec();
    Ok((acc.expect("non-empty association set"), weights))
}

/// One round of residual message passing between objects (`[D]`) and
/// subgraph maps (`[D×Ks×Ks]`). `members[k]` lists the objects of subgraph `k`.
pub fn inter_refine(
    s: &mut Session,
    p: &InterParams,
    objects: &[Var],
    subgraphs: &[Var],
    members: &[Vec<usize>],
) -> Result<InterRefined> {
    if members.len() != subgraphs.len() {
        return Err(Error::invalid("inter_refine", "one member list per subgraph"));
    }
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); objects.len()];
    for (k, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::invalid("inter_refine", format!("subgraph {k} has no member objects")));
        }
        for &i in m {
            let slot = owners
                .get_mut(i)
                .ok_or_else(|| Error::invalid("inter_refine", format!("subgraph {k} names unknown object {i}")))?;
            slot.push(k);
        }
    }
    if let Some(i) = owners.iter().position(|o| o.is_empty()) {
        return Err(Error::invalid("inter_refine", format!("object {i} belongs to no subgraph")));
    }

    let d = p.dim;
    let mut pooled = Vec::with_capacity(subgraphs.len());
    for sg in subgraphs {
        let shape = s.tape.shape(*sg).to_vec();
        if shape.len() != 3 || shape[0] != d {
            return Err(Error::dims("inter_refine", &shape, &[d, 0, 0]));
        }
        let flat = s.tape.reshape(*sg, &[d, shape[1] * shape[2]])?;
        pooled.push(s.tape.mean_last(flat));
    }

    let mut new_objects = Vec::with_capacity(objects.len());
    let mut object_alpha = Vec::with_capacity(objects.len());
    for (i, o) in objects.iter().enumerate() {
        let vals: Vec<Var> = owners[i].iter().map(|k| pooled[*k]).collect();
        let (msg, alpha) = attend(s, *o, &vals, d)?;
        let upd = p.s2o.forward(s, msg)?;
        let upd = s.tape.relu(upd);
        new_objects.push(s.tape.add(*o, upd)?);
        object_alpha.push(alpha);
    }

    let mut new_subgraphs = Vec::with_capacity(subgraphs.len());
    let mut subgraph_alpha = Vec::with_capacity(subgraphs.len());
    for (k, sg) in subgraphs.iter().enumerate() {
        let vals: Vec<Var> = members[k].iter().map(|i| objects[*i]).collect();
        let (msg, alpha) = attend(s, pooled[k], &vals, d)?;
        let upd = p.o2s.forward(s, msg)?;
        let upd = s.tape.relu(upd);
        let shape = s.tape.shape(*sg).to_vec();
        let col = s.tape.reshape(upd, &[d, 1])?;
        let ones = s.tape.constant(&[1, shape[1] * shape[2]], vec![1.0; shape[1] * shape[2]])?;
        let spread = s.tape.matmul(col, ones)?;
        let spread = s.tape.reshape(spread, &shape)?;
        new_subgraphs.push(s.tape.add(*sg, spread)?);
        subgraph_alpha.push(alpha);
    }

    Ok(InterRefined {
        objects: new_objects,
        subgraphs: new_subgraphs,
        object_alpha,
        subgraph_alpha,
    })
}

/// Episodic attention over facts. Returns the gate vector `g` (`[K]`) and the
/// interaction vectors `z_k` (`[4·Dm]` each).
pub fn dmn_attend(s: &mut Session, p: &KnowledgeParams, facts: &[Var], q: Var, m: Var) -> Result<(Var, Vec<Var>)> {
    if facts.is_empty() {
        return Err(Error::Empty("dmn_attend"));
    }
    let mut scores = Vec::with_capacity(facts.len());
    let mut zs = Vec::with_capacity(facts.len());
    for f in facts {
        let fq = s.tape.mul(*f, q)?;
        let fm = s.tape.mul(*f, m)?;
        let dq = s.tape.sub(*f, q)?;
        let dq = s.tape.abs(dq);
        let dm = s.tape.sub(*f, m)?;
        let dm = s.tape.abs(dm);
        let z = s.tape.concat(&[fq, fm, dq, dm], 0)?;
        let h = p.att_hidden.forward(s, z)?;
        let h = s.tape.tanh(h);
        scores.push(p.att_out.forward(s, h)?);
        zs.push(z);
    }
    let scores = s.tape.concat(&scores, 0)?;
    Ok((s.tape.softmax(scores, 0)?, zs))
}

/// Attention-gated GRU scan: `e_k = g_k·GRU(f_k, e_{k−1}) + (1−g_k)·e_{k−1}`
/// from `e_{−1} = 0`.
pub fn agru_pass(s: &mut Session, cell: &GruCell, facts: &[Var], g: Var) -> Result<Var> {
    let n = s.tape.shape(g).iter().product::<usize>();
    if n != facts.len() {
        return Err(Error::dims("agru_pass", &[facts.len()], &[n]));
    }
    let mut e = s.tape.zeros(&[cell.hidden]);
    for (k, f) in facts.iter().enumerate() {
        let gk = s.tape.select(g, k)?;
        let h = cell.step(s, *f, e)?;
        let delta = s.tape.sub(h, e)?;
        let delta = s.tape.scale_by(gk, delta)?;
        e = s.tape.add(e, delta)?;
    }
    Ok(e)
}

/// `m' = ReLU(W_m[m; e; q] + b_m)`.
pub fn memory_update(s: &mut Session, map: &Linear, m: Var, e: Var, q: Var) -> Result<Var> {
    let x = s.tape.concat(&[m, e, q], 0)?;
    let y = map.forward(s, x)?;
    Ok(s.tape.relu(y))
}

/// Fuses retrieved knowledge into one object vector; `facts` are projected
/// fact vectors (possibly empty).
pub fn kb_refine(s: &mut Session, p: &KnowledgeParams, o: Var, facts: &[Var]) -> Result<Var> {
    let q = p.query.forward(s, o)?;
    let q = s.tape.tanh(q);
    let mut m = q;
    if !facts.is_empty() {
        for _ in 0..p.passes {
            let (g, _) = dmn_attend(s, p, facts, q, m)?;
            let e = agru_pass(s, &p.agru, facts, g)?;
            m = memory_update(s, &p.memory, m, e, q)?;
        }
    }
    let x = s.tape.concat(&[o, m], 0)?;
    let y = p.fuse.forward(s, x)?;
    Ok(s.tape.relu(y))
}

/// Knowledge branch of [`refine_loop`]: parameters, retrieval inputs, and a
/// classifier giving the current label index (0 = background) of an object.
pub struct KnowledgeStep<'a, 'k> {
    pub params: &'a KnowledgeParams,
    pub source: KnowledgeSource<'k>,
    pub cache: &'a mut FactCache,
}

/// Runs `iters` rounds of inter-refinement followed (when a knowledge branch
/// is given) by knowledge refinement with labels from `classify`.
pub fn refine_loop<C>(
    s: &mut Session,
    inter: &InterParams,
    mut knowledge: Option<KnowledgeStep>,
    iters: usize,
    objects: &[Var],
    subgraphs: &[Var],
    members: &[Vec<usize>],
    mut classify: C,
) -> Result<(Vec<Var>, Vec<Var>)>
where
    C: FnMut(&mut Session, Var) -> Result<usize>,
{
    if iters == 0 {
        return Err(Error::invalid("refine_loop", "at least one iteration"));
    }
    let mut objs = objects.to_vec();
    let mut subs = subgraphs.to_vec();
    for _ in 0..iters {
        let r = inter_refine(s, inter, &objs, &subs, members)?;
        subs = r.subgraphs;
        objs = match knowledge.as_mut() {
            None => r.objects,
            Some(k) => {
                let mut out = Vec::with_capacity(r.objects.len());
                for o in r.objects {
                    let label = classify(s, o)?;
                    let facts = match k.source.labels.class_name(label) {
                        Some(name) if label != crate::scene::BACKGROUND => k.cache.facts(s, k.params, &k.source, name)?,
                        _ => Vec::new(),
                    };
                    out.push(kb_refine(s, k.params, o, &facts)?);
                }
                out
            }
        };
    }
    Ok((objs, subs))
}

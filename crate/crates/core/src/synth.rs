//! Seeded synthetic corpus: scenes governed by a class-pair rule table and a
//! knowledge base consistent with those rules.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::kb::FactTriple;
use crate::math::{ceil, floor, round};
use crate::rng::rng_for;
use crate::scene::{LabelSpace, Scene, SceneObject, SceneRelation};

pub const CLASS_NAMES: [&str; 20] = [
    "person", "dog", "table", "cup", "chair", "car", "tree", "bike", "horse", "lamp", "bottle", "sofa", "bird", "boat",
    "book", "plate", "hat", "bench", "kite", "bag",
];

pub const PREDICATE_NAMES: [&str; 10] = [
    "NextTo", "On", "Under", "Holds", "Near", "Behind", "RidesOn", "LooksAt", "HasA", "PartOf",
];

const DISTRACTOR_RELATIONS: [&str; 4] = ["IsA", "UsedFor", "AtLocation", "HasProperty"];
const DISTRACTOR_TAILS: [&str; 8] = ["object", "thing", "home", "outdoors", "red", "small", "animal", "tool"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub canvas: usize,
    pub max_triples: usize,
    /// Fraction of ordered class pairs that carry a predicate.
    pub rule_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 8,
            num_classes: 6,
            num_predicates: 4,
            min_objects: 2,
            max_objects: 5,
            canvas: 64,
            max_triples: 60,
            rule_density: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::invalid("synth", format!("num_classes must be in 1..={}", CLASS_NAMES.len())));
        }
        if self.num_predicates == 0 || self.num_predicates > PREDICATE_NAMES.len() {
            return Err(Error::invalid("synth", format!("num_predicates must be in 1..={}", PREDICATE_NAMES.len())));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(Error::invalid("synth", "need 2 ≤ min_objects ≤ max_objects"));
        }
        if self.canvas < 32 || self.canvas % 16 != 0 {
            return Err(Error::invalid("synth", "canvas must be a multiple of 16, at least 32"));
        }
        if !(self.rule_density > 0.0 && self.rule_density <= 1.0) {
            return Err(Error::invalid("synth", "rule_density must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub labels: LabelSpace,
    pub scenes: Vec<Scene>,
    pub triples: Vec<FactTriple>,
    /// Predicate for each ordered class pair that has one.
    pub rules: BTreeMap<(usize, usize), usize>,
}

fn rules(cfg: &SynthConfig) -> BTreeMap<(usize, usize), usize> {
    let mut rng = rng_for(cfg.seed, "synth.rules", 0);
    let mut pairs: Vec<(usize, usize)> = (1..=cfg.num_classes)
        .flat_map(|a| (1..=cfg.num_classes).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let n = (ceil(pairs.len() as f64 * cfg.rule_density) as usize).clamp(cfg.num_predicates.min(pairs.len()), pairs.len());
    pairs.truncate(n);
    pairs.sort_unstable();
    // Every predicate is used at least once.
    let mut order: Vec<usize> = (1..=cfg.num_predicates).collect();
    order.shuffle(&mut rng);
    pairs
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let pred = if k < order.len() { order[k] } else { rng.random_range(1..=cfg.num_predicates) };
            (p, pred)
        })
        .collect()
}

fn scene(cfg: &SynthConfig, rules: &BTreeMap<(usize, usize), usize>, index: usize) -> Scene {
    let mut rng = rng_for(cfg.seed, "synth.scene", index as u64);
    let c = cfg.canvas as f64;
    loop {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut attempts = 0;
        while objects.len() < n && attempts < 200 {
            attempts += 1;
            let w = rng.random_range(0.18..0.42) * c;
            let h = rng.random_range(0.18..0.42) * c;
            let x = floor(rng.random_range(0.0..c - w));
            let y = floor(rng.random_range(0.0..c - h));
            let bbox = BBox {
                x,
                y,
                w: floor(w),
                h: floor(h),
            };
            if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.3) {
                let class = rng.random_range(1..=cfg.num_classes);
                objects.push(SceneObject { bbox, class });
            }
        }
        let mut relations = Vec::new();
        for (i, a) in objects.iter().enumerate() {
            for (j, b) in objects.iter().enumerate() {
                if i != j {
                    if let Some(p) = rules.get(&(a.class, b.class)) {
                        relations.push(SceneRelation {
                            subj: i,
                            predicate: *p,
                            obj: j,
                        });
                    }
                }
            }
        }
        if objects.len() >= cfg.min_objects && !relations.is_empty() {
            return Scene {
                id: format!("img{index:04}"),
                width: cfg.canvas,
                height: cfg.canvas,
                objects,
                relations,
            };
        }
    }
}

/// Builds the corpus. Every rule becomes a weighted triple, so every
/// relation label in the scenes is backed by a fact; distractor facts fill
/// the store up to `max_triples`.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let labels = LabelSpace {
        classes: CLASS_NAMES[..cfg.num_classes].iter().map(|s| s.to_string()).collect(),
        predicates: PREDICATE_NAMES[..cfg.num_predicates].iter().map(|s| s.to_string()).collect(),
    };
    let rules = rules(cfg);
    if rules.len() > cfg.max_triples {
        return Err(Error::invalid("synth", "rule table exceeds max_triples"));
    }
    let scenes = (0..cfg.images).map(|i| scene(cfg, &rules, i)).collect();

    let mut rng = rng_for(cfg.seed, "synth.kb", 0);
    let mut triples = Vec::new();
    for ((a, b), p) in &rules {
        let w = round(rng.random_range(1.0..3.0) * 100.0) / 100.0;
        triples.push(FactTriple::new(&labels.classes[a - 1], &labels.predicates[p - 1], &labels.classes[b - 1], w)?);
    }
    let mut k = 0;
    while triples.len() < cfg.max_triples && k < cfg.num_classes * DISTRACTOR_RELATIONS.len() {
        let class = &labels.classes[k % cfg.num_classes];
        let rel = DISTRACTOR_RELATIONS[k / cfg.num_classes];
        let tail = DISTRACTOR_TAILS[rng.random_range(0..DISTRACTOR_TAILS.len())];
        let w = round(rng.random_range(0.1..1.0) * 100.0) / 100.0;
        triples.push(FactTriple::new(class, rel, tail, w)?);
        k += 1;
    }
    Ok(Corpus {
        labels,
        scenes,
        triples,
        rules,
    })
}

impl Corpus {
    /// TSV rendering of the triple store.
    pub fn kb_tsv(&self) -> String {
        let mut out = String::from("# head\trelation\ttail\tweight\n");
        for t in &self.triples {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", t.head, t.relation, t.tail, t.weight));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::TripleStore;

    #[test]
    fn corpus_is_consistent_and_seeded() {
        let cfg = SynthConfig::default();
        let c = generate(&cfg).unwrap();
        assert_eq!(c.scenes.len(), 8);
        assert!(c.triples.len() <= 60);
        for s in &c.scenes {
            s.validate(&c.labels).unwrap();
            assert!((2..=5).contains(&s.objects.len()));
            assert!(!s.relations.is_empty());
        }
        let store = TripleStore::parse_tsv(&c.kb_tsv()).unwrap();
        for s in &c.scenes {
            for r in &s.relations {
                let head = &c.labels.classes[s.objects[r.subj].class - 1];
                let tail = &c.labels.classes[s.objects[r.obj].class - 1];
                let rel = &c.labels.predicates[r.predicate - 1];
                assert!(store.iter().any(|t| &t.head == head && &t.relation == rel && &t.tail == tail));
            }
        }
        assert_eq!(c, generate(&cfg).unwrap());
        assert_ne!(c.scenes, generate(&SynthConfig { seed: 1, ..cfg }).unwrap().scenes);
    }
}

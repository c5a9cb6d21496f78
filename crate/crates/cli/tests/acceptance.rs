//! One line per acceptance criterion. Run with `--nocapture` to see the table.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kbsg::commands::{
    self, EvalArgs, Overrides, Scope, SynthArgs, TrainArgs, CHECKPOINT_FILE, KB_FILE, LABELS_FILE, LOSS_FILE,
    RUN_MANIFEST, SCENES_FILE,
};
use kbsg::formats::{read_labels, read_scenes};
use kbsg_core::config::{ImageConfig, ModelConfig, Switches};
use kbsg_core::eval::{match_triplet, recall_at_k, Averaging, GtTriplet, Mode, DEFAULT_IOU};
use kbsg_core::gradcheck::{OP_TOLERANCE, PIPELINE_TOLERANCE};
use kbsg_core::graphgen::ScoredTriplet;
use kbsg_core::imggen::{compose_layout, Generator};
use kbsg_core::kb::{retrieval_order, FactTriple, TripleStore, Vocabulary};
use kbsg_core::model::{Model, ProposalConfig, Sample};
use kbsg_core::params::{Group, GroupMask, ParamStore, Session};
use kbsg_core::proposals::{build_subgraphs, nms_assign, ordered_pairs, stub_proposals, FeatureSynth};
use kbsg_core::refine::{agru_pass, dmn_attend, KnowledgeParams, KnowledgeSource};
use kbsg_core::rng::rng_for;
use kbsg_core::scene::{Scene, SceneObject};
use kbsg_core::synth::{generate, SynthConfig};
use kbsg_core::train::{train, TrainConfig};
use kbsg_core::{iou, BBox};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn c1_gradients() -> Check {
    let t = Instant::now();
    let ops = ok(commands::gradcheck(Scope::Op, 0))?;
    let e2e = ok(commands::gradcheck(Scope::End2End, 0))?;
    let elapsed = t.elapsed();
    let worst = |rows: &[kbsg_core::gradcheck::GradCheck]| rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &ops {
        ensure(r.max_rel_err < OP_TOLERANCE, format!("op {} rel err {:e}", r.name, r.max_rel_err))?;
    }
    for r in &e2e {
        ensure(r.count > 0 && r.max_rel_err < PIPELINE_TOLERANCE, format!("group {} rel err {:e}", r.name, r.max_rel_err))?;
    }
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} op rows max {:.1e}; {} groups max {:.1e}; {:.1}s",
        ops.len(),
        worst(&ops),
        e2e.len(),
        worst(&e2e),
        elapsed.as_secs_f64()
    ))
}

/// Re-runs the unit and integration suites (every other test target) in a
/// separate target directory.
fn c2_unit_suites() -> Check {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-suites");
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let runs: [&[&str]; 2] = [&["test", "-p", "kbsg-core"], &["test", "-p", "kbsg", "--lib", "--test", "commands", "--test", "formats"]];
    let mut passed = 0;
    for args in runs {
        let out = ok(Command::new(&cargo).args(args).current_dir(&root).env("CARGO_TARGET_DIR", &target).output())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        if !out.status.success() {
            let tail: Vec<&str> = stdout.lines().filter(|l| l.contains("FAILED") || l.contains("panicked")).take(5).collect();
            return Err(format!("`cargo {}` failed: {}", args.join(" "), tail.join(" | ")));
        }
        passed += stdout
            .lines()
            .filter_map(|l| l.strip_prefix("test result: ok. "))
            .filter_map(|l| l.split(' ').next()?.parse::<usize>().ok())
            .sum::<usize>();
    }
    Ok(format!("{passed} tests passed"))
}

fn c3_dmn() -> Check {
    let mut store = ParamStore::new();
    let kp = KnowledgeParams::new(&mut store, 6, 4, 10, 4, 3, 5, 2, 9);
    let mut s = Session::new(&store, GroupMask::NONE);
    let mut rng = rng_for(3, "acceptance.dmn", 0);
    let mut v = |s: &mut Session, n: usize| {
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.tape.constant(&[n], data).unwrap()
    };
    let q = v(&mut s, 4);
    let m = v(&mut s, 4);
    let mut worst: f64 = 0.0;
    for k in [1, 3, 8] {
        let facts: Vec<_> = (0..k).map(|_| v(&mut s, 4)).collect();
        let (g, _) = ok(dmn_attend(&mut s, &kp, &facts, q, m))?;
        let g = s.tape.value(g).to_vec();
        worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
        if k == 1 {
            ensure(g == [1.0], format!("singleton gate {g:?}"))?;
        }
    }
    ensure(worst <= 1e-12, format!("|Σg − 1| = {worst:e}"))?;
    let facts: Vec<_> = (0..5).map(|_| v(&mut s, 4)).collect();
    let closed = s.tape.zeros(&[5]);
    let e = ok(agru_pass(&mut s, &kp.agru, &facts, closed))?;
    ensure(s.tape.value(e).iter().all(|x| *x == 0.0), "closed gates changed the episode state")?;
    Ok(format!("singleton g = [1]; closed-gate identity; max |Σg − 1| = {worst:.1e} over K ∈ {{1, 3, 8}}"))
}

fn reference_nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
    let mut owner = vec![usize::MAX; boxes.len()];
    for (p, &i) in order.iter().enumerate() {
        if owner[i] != usize::MAX {
            continue;
        }
        owner[i] = i;
        for &j in &order[p + 1..] {
            if owner[j] == usize::MAX && iou(&boxes[i], &boxes[j]) > thresh {
                owner[j] = i;
            }
        }
    }
    owner
}

fn c4_clustering() -> Check {
    let mut rng = rng_for(4, "acceptance.scenes", 0);
    let mut subgraphs = 0;
    for n in 0..50u64 {
        let objects = (0..6)
            .map(|_| {
                let (w, h) = (rng.random_range(4.0..30.0), rng.random_range(4.0..30.0));
                SceneObject {
                    bbox: BBox::new(rng.random_range(0.0..64.0 - w), rng.random_range(0.0..64.0 - h), w, h).unwrap(),
                    class: rng.random_range(1..=6),
                }
            })
            .collect();
        let scene = Scene {
            id: format!("s{n}"),
            width: 64,
            height: 64,
            objects,
            relations: Vec::new(),
        };
        let synth = FeatureSynth::new(4, 64.0, 64.0, n);
        let props = ok(stub_proposals(&scene, 6, 0.05, n, &synth))?;
        let (subs, cands) = ok(build_subgraphs(&props, 0.5, &synth))?;
        subgraphs += subs.len();
        let mut seen = BTreeMap::new();
        for c in &cands {
            *seen.entry((c.subj, c.obj)).or_insert(0) += 1;
            let m = &subs[c.subgraph].members;
            ensure(m.contains(&c.subj) && m.contains(&c.obj), format!("scene {n}: pair ({}, {}) outside its subgraph", c.subj, c.obj))?;
        }
        ensure(
            seen.keys().copied().collect::<Vec<_>>() == ordered_pairs(6) && seen.values().all(|v| *v == 1),
            format!("scene {n}: ordered pairs not covered exactly once"),
        )?;
        ensure(ok(build_subgraphs(&props, 0.5, &synth))? == (subs, cands), format!("scene {n}: clustering not deterministic"))?;

        // Tie-heavy scores: only three distinct values.
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let scores: Vec<f64> = (0..6).map(|_| rng.random_range(0..3) as f64).collect();
        let a = nms_assign(&boxes, &scores, 0.3);
        ensure(a == nms_assign(&boxes, &scores, 0.3) && a == reference_nms(&boxes, &scores, 0.3), format!("scene {n}: NMS tie rule"))?;
    }
    Ok(format!("50 scenes, 30 ordered pairs each, {subgraphs} subgraphs; NMS matches the tie-rule reference"))
}

fn c5_retrieval() -> Check {
    let mut rng = rng_for(5, "acceptance.kb", 0);
    let mut keys = Vec::new();
    for h in 0..10 {
        for r in 0..10 {
            for t in 0..10 {
                keys.push((h, r, t));
            }
        }
    }
    let mut triples = Vec::new();
    while triples.len() < 500 {
        let (h, r, t) = keys.swap_remove(rng.random_range(0..keys.len()));
        let w = [0.5, 1.0, 1.5, 2.0][rng.random_range(0..4)];
        triples.push(ok(FactTriple::new(&format!("h{h}"), &format!("R{r}"), &format!("t{t}"), w))?);
    }
    let store = TripleStore::from_triples(triples.clone());
    ensure(store.len() == 500, "fixture size")?;
    let mut ties = 0;
    for q in 0..100 {
        let head = format!("h{}", rng.random_range(0..11));
        let k = rng.random_range(1..=12);
        let got = ok(store.retrieve_topk(&head, k))?;
        let mut oracle: Vec<FactTriple> = triples.iter().filter(|t| t.head == head).cloned().collect();
        oracle.sort_by(retrieval_order);
        if oracle.len() > k && oracle[k - 1].weight == oracle[k].weight {
            ties += 1;
        }
        oracle.truncate(k);
        ensure(got == oracle, format!("query {q} ({head}, k = {k}) differs from the oracle"))?;
    }
    ensure(ties > 0, "no weight tie at the cut-off in any query")?;
    Ok(format!("500 triples, 100 queries, {ties} with a weight tie at the cut-off"))
}

fn exhaustive_hits(preds: &[ScoredTriplet], gts: &[GtTriplet], k: usize, mode: Mode) -> usize {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| preds[*b].score.partial_cmp(&preds[*a].score).unwrap().then(a.cmp(b)));
    order.truncate(k);
    fn best(g: usize, gts: &[GtTriplet], top: &[&ScoredTriplet], used: &mut [bool], mode: Mode) -> usize {
        if g == gts.len() {
            return 0;
        }
        let mut b = best(g + 1, gts, top, used, mode);
        for p in 0..top.len() {
            if !used[p] && match_triplet(top[p], &gts[g], mode, DEFAULT_IOU) {
                used[p] = true;
                b = b.max(1 + best(g + 1, gts, top, used, mode));
                used[p] = false;
            }
        }
        b
    }
    let top: Vec<&ScoredTriplet> = order.iter().map(|i| &preds[*i]).collect();
    best(0, gts, &top, &mut vec![false; top.len()], mode)
}

fn c6_metric() -> Check {
    let mut rng = rng_for(6, "acceptance.metric", 0);
    let anchors = [(4.0, 4.0, 12.0, 10.0), (24.0, 6.0, 10.0, 14.0), (8.0, 28.0, 16.0, 8.0)];
    let bx = |rng: &mut kbsg_core::rng::Rng| {
        let (x, y, w, h) = anchors[rng.random_range(0..3)];
        BBox::new(x + rng.random_range(-3.0..3.0), y + rng.random_range(-3.0..3.0), w, h).unwrap()
    };
    let mut compared = 0;
    let mut nonzero = 0;
    for i in 0..200 {
        let gts: Vec<GtTriplet> = (0..rng.random_range(1..=5))
            .map(|_| GtTriplet {
                subj_label: rng.random_range(1..3),
                predicate: rng.random_range(1..3),
                obj_label: rng.random_range(1..3),
                subj_box: bx(&mut rng),
                obj_box: bx(&mut rng),
            })
            .collect();
        let preds: Vec<ScoredTriplet> = (0..rng.random_range(0..10))
            .map(|_| ScoredTriplet {
                subj: 0,
                obj: 1,
                subj_label: rng.random_range(1..3),
                predicate: rng.random_range(1..3),
                obj_label: rng.random_range(1..3),
                subj_box: bx(&mut rng),
                obj_box: bx(&mut rng),
                score: (rng.random_range(0..4) as f64) * 0.25,
            })
            .collect();
        for mode in Mode::ALL {
            for k in [1, 3, 5, 10] {
                let r = recall_at_k(&preds, &gts, k, mode, DEFAULT_IOU);
                let o = exhaustive_hits(&preds, &gts, k, mode) as f64 / gts.len() as f64;
                ensure(r == o, format!("instance {i} {} K = {k}: {r} vs oracle {o}", mode.name()))?;
                compared += 1;
                if r > 0.0 {
                    nonzero += 1;
                }
            }
        }
    }
    Ok(format!("200 instances × 2 modes × 4 K = {compared} comparisons ({nonzero} with hits)"))
}

fn write_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let p = dir.join("overfit.toml");
    fs::write(&p, format!("[data]\ndir = {:?}\n", data.to_string_lossy())).unwrap();
    p
}

fn c7_overfit(work: &Path) -> Check {
    let t = Instant::now();
    let data = work.join("data");
    ok(commands::synth(&SynthArgs {
        out: data.clone(),
        images: 8,
        classes: 6,
        predicates: 4,
        seed: 0,
    }))?;
    let labels = ok(read_labels(&ok(fs::read_to_string(data.join(LABELS_FILE)))?))?;
    let scenes = ok(read_scenes(&ok(fs::read_to_string(data.join(SCENES_FILE)))?, Some(&labels)))?;
    let kb = ok(TripleStore::parse_tsv(&ok(fs::read_to_string(data.join(KB_FILE)))?))?;
    ensure(scenes.len() == 8 && scenes.iter().all(|s| s.objects.len() <= 5), "corpus shape")?;
    ensure(labels.classes.len() == 6 && labels.predicates.len() == 4 && kb.len() <= 60, "label space / KB size")?;

    let cfg = write_config(work, &data);
    let out = work.join("run-a");
    let r = ok(commands::train(&TrainArgs {
        config: cfg.clone(),
        out: out.clone(),
        overrides: Overrides::default(),
        resume: false,
    }))?;
    let report = ok(commands::eval(&EvalArgs {
        config: cfg,
        checkpoint: out.join(CHECKPOINT_FILE),
        ks: vec![50],
        averaging: Averaging::Macro,
        out: None,
        overrides: Overrides::default(),
    }))?;
    let elapsed = t.elapsed();
    let (p, g) = (report.recall(Mode::PhrDet, 50).unwrap(), report.recall(Mode::SgGen, 50).unwrap());
    ensure(r.steps <= 2000, "too many steps")?;
    ensure(p == 1.0 && g == 1.0, format!("PhrDet R@50 = {p}, SGGen R@50 = {g} after {} steps", r.steps))?;
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} triples, {} steps: PhrDet R@50 = {p}, SGGen R@50 = {g}; {:.0}s",
        kb.len(),
        r.steps,
        elapsed.as_secs_f64()
    ))
}

fn shared(params: &ParamStore) -> Vec<(String, Vec<f64>)> {
    params
        .iter()
        .filter(|(_, p)| matches!(p.group, Group::Refine | Group::Heads))
        .map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec()))
        .collect()
}

fn c8_ablation() -> Check {
    let corpus = ok(generate(&SynthConfig {
        images: 4,
        ..SynthConfig::default()
    }))?;
    let store = TripleStore::from_triples(corpus.triples.clone());
    let vocab = Vocabulary::build(&store, corpus.labels.classes.iter().map(String::as_str));
    let src = KnowledgeSource {
        store: &store,
        vocab: &vocab,
        labels: &corpus.labels,
        top_k: 8,
    };
    let base_cfg = ModelConfig {
        feature_dim: 12,
        memory_dim: 8,
        embed_dim: 6,
        fact_hidden: 6,
        attention_hidden: 8,
        image: ImageConfig {
            gen_channels: 4,
            disc_channels: 4,
            noise_channels: 2,
            layout_dim: 4,
            ..ImageConfig::default()
        },
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        steps: 4,
        pretrain_steps: 2,
        batch: 2,
        batch_pretrain: 2,
        ..TrainConfig::default()
    };
    let run = |kb: bool, gan: bool, sw: Switches| -> Result<(Vec<(String, Vec<f64>)>, Vec<f64>), String> {
        let cfg = ModelConfig { kb, gan, ..base_cfg.clone() };
        let mut m = ok(Model::new(&cfg, vocab.len(), 7))?;
        let data: Vec<Sample> = corpus
            .scenes
            .iter()
            .map(|s| Sample::prepare(s, &cfg, &ProposalConfig::default()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let reports = ok(train(&mut m, &data, kb.then_some(src), sw, &tc, 0, |_, _| Ok(())))?;
        Ok((shared(&m.params), reports.iter().map(|r| r.pred).collect()))
    };
    let grid = [
        ("baseline", run(false, false, Switches::BASELINE)?),
        ("+KB", run(true, false, Switches { kb: true, gan: false })?),
        ("+GAN", run(false, true, Switches { kb: false, gan: true })?),
        ("+KB+GAN", run(true, true, Switches::ALL)?),
    ];
    for i in 0..4 {
        for j in i + 1..4 {
            ensure(grid[i].1 .0 != grid[j].1 .0, format!("{} and {} share a trajectory", grid[i].0, grid[j].0))?;
        }
    }
    let off = run(true, true, Switches::BASELINE)?;
    ensure(off == grid[0].1, "both switches off differs from the baseline path")?;
    Ok("4 distinct trajectories; switches off reproduces the baseline bitwise".into())
}

fn c9_layout_generator() -> Check {
    let store = ParamStore::new();
    let mut s = Session::new(&store, GroupMask::NONE);
    let mut rng = rng_for(9, "acceptance.layout", 0);
    let objs: Vec<_> = (0..3)
        .map(|i| {
            let e: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            (s.tape.constant(&[5], e).unwrap(), BBox::new(4.0 * i as f64, 3.0 + i as f64, 20.0, 18.0).unwrap())
        })
        .collect();
    let all = ok(compose_layout(&mut s, &objs, 64, 64))?;
    let mut sum = ok(compose_layout(&mut s, &objs[..1], 64, 64))?.grid;
    for o in &objs[1..] {
        let one = ok(compose_layout(&mut s, std::slice::from_ref(o), 64, 64))?.grid;
        sum = ok(s.tape.add(sum, one))?;
    }
    ensure(s.tape.value(all.grid) == s.tape.value(sum), "layout additivity is not exact")?;

    let cfg = ModelConfig::full();
    let mut store = ParamStore::new();
    let g = ok(Generator::new(&mut store, cfg.feature_dim, &cfg.image, 1))?;
    let mut s = Session::new(&store, GroupMask::NONE);
    let objs: Vec<_> = (0..2)
        .map(|i| {
            let e: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (s.tape.constant(&[cfg.feature_dim], e).unwrap(), BBox::new(10.0 + 20.0 * i as f64, 12.0, 24.0, 30.0).unwrap())
        })
        .collect();
    let layout = ok(g.layout(&mut s, &objs, 1.0))?;
    let z = ok(g.noise(&mut s, 1, 0))?;
    let img = ok(g.generate(&mut s, layout.grid, z))?;
    let shape = s.tape.shape(img).to_vec();
    ensure(shape == [3, 64, 64], format!("generator shape {shape:?}"))?;
    let (lo, hi) = s.tape.value(img).iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    ensure((-1.0..=1.0).contains(&lo) && (-1.0..=1.0).contains(&hi), format!("range [{lo}, {hi}]"))?;
    Ok(format!("additivity exact; full-scale generator {shape:?} with values in [{lo:.3}, {hi:.3}]"))
}

fn c10_determinism(work: &Path) -> Check {
    let cfg = write_config(work, &work.join("data"));
    let out = work.join("run-b");
    ok(commands::train(&TrainArgs {
        config: cfg,
        out: out.clone(),
        overrides: Overrides::default(),
        resume: false,
    }))?;
    let a = work.join("run-a");
    for f in [CHECKPOINT_FILE, LOSS_FILE, RUN_MANIFEST] {
        let (x, y) = (ok(fs::read(a.join(f)))?, ok(fs::read(out.join(f)))?);
        ensure(x == y, format!("{f} differs"))?;
    }
    let bytes = ok(fs::metadata(out.join(CHECKPOINT_FILE)))?.len();
    Ok(format!("checkpoint ({bytes} bytes), loss log and manifest byte-identical across two runs"))
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("gradient integrity", Box::new(c1_gradients)),
        ("unit suites", Box::new(c2_unit_suites)),
        ("DMN invariants", Box::new(c3_dmn)),
        ("clustering", Box::new(c4_clustering)),
        ("retrieval oracle", Box::new(c5_retrieval)),
        ("metric oracle", Box::new(c6_metric)),
        ("overfit run", Box::new(|| c7_overfit(w))),
        ("ablation coherence", Box::new(c8_ablation)),
        ("layout/generator", Box::new(c9_layout_generator)),
        ("determinism", Box::new(|| c10_determinism(w))),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {msg}", i + 1),
            Err(msg) => {
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {msg}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

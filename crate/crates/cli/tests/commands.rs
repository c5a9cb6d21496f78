use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use kbsg::checkpoint::Checkpoint;
use kbsg::commands::{
    self, EvalArgs, Overrides, Prepared, ScoreArgs, Scope, SynthArgs, TrainArgs, CHECKPOINT_FILE, KB_FILE, LOSS_FILE,
    RUN_MANIFEST, SCENES_FILE,
};
use kbsg::config::RunConfig;
use kbsg::error::Kind;
use kbsg::formats::{read_labels, read_scenes, LOSS_HEADER};
use kbsg_core::eval::{Averaging, Mode};
use kbsg_core::kb::TripleStore;

const SMALL: &str = r#"
[model]
feature_dim = 8
memory_dim = 8
embed_dim = 6
fact_hidden = 6
attention_hidden = 8
noise_channels = 2
gen_channels = 4
disc_channels = 4
layout_dim = 4

[train]
steps = 4
batch = 2
batch_pretrain = 2
pretrain_steps = 2
milestones = [3]

[data]
dir = "data"
"#;

fn synth_args(out: &Path, images: usize, seed: u64) -> SynthArgs {
    SynthArgs {
        out: out.to_path_buf(),
        images,
        classes: 6,
        predicates: 4,
        seed,
    }
}

/// A temp directory with a 3-image dataset under `data/` and `small.toml`.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    commands::synth(&synth_args(&dir.path().join("data"), 3, 1)).unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn train_args(cfg: &Path, out: &Path, steps: Option<usize>) -> TrainArgs {
    TrainArgs {
        config: cfg.to_path_buf(),
        out: out.to_path_buf(),
        overrides: Overrides {
            steps,
            ..Overrides::default()
        },
        resume: false,
    }
}

#[test]
fn synth_counts_determinism_and_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let files = commands::synth(&synth_args(&a, 8, 5)).unwrap();
    commands::synth(&synth_args(&b, 8, 5)).unwrap();
    assert_eq!(files.len(), 3 + 8);

    let text = fs::read_to_string(a.join(SCENES_FILE)).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 8);
    for f in &files {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }

    let labels = read_labels(&fs::read_to_string(a.join("labels.json")).unwrap()).unwrap();
    let scenes = read_scenes(&text, Some(&labels)).unwrap();
    let store = TripleStore::parse_tsv(&fs::read_to_string(a.join(KB_FILE)).unwrap()).unwrap();
    assert!(store.len() <= 60);
    for s in &scenes {
        for r in &s.relations {
            let rel = &labels.predicates[r.predicate - 1];
            assert!(store.iter().any(|t| &t.relation == rel), "{rel} missing from the KB");
        }
    }
}

#[test]
fn zero_steps_keeps_initialization() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("run0");
    let r = commands::train(&train_args(&cfg, &out, Some(0))).unwrap();
    assert_eq!(r.steps, 0);
    let c = Checkpoint::decode(&fs::read(out.join(CHECKPOINT_FILE)).unwrap()).unwrap();
    let mut rc = RunConfig::parse(SMALL).unwrap();
    rc.resolve_paths(dir.path());
    let init = Prepared::new(rc).unwrap();
    assert_eq!(c, Checkpoint::capture(0, &init.model.params));
    assert_eq!(fs::read_to_string(out.join(LOSS_FILE)).unwrap(), format!("{LOSS_HEADER}\n"));
}

#[test]
fn loss_log_columns_and_manifest() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("run");
    commands::train(&train_args(&cfg, &out, None)).unwrap();
    let log = fs::read_to_string(out.join(LOSS_FILE)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,L_pred,L_obj,L_reg,L_G,L_D,L_pixel"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[0], i.to_string());
        assert!(cols[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    let m = fs::read_to_string(out.join(RUN_MANIFEST)).unwrap();
    assert!(m.contains("command: train\n"));
    assert!(m.contains("seed: 0\n"));
    assert!(m.contains("output: checkpoint.bin\n"));
    assert!(m.contains("content_hash: "));
    assert!(m.contains("  steps = 4\n"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (dir, cfg) = workspace();
    let full = dir.path().join("full");
    commands::train(&train_args(&cfg, &full, Some(4))).unwrap();

    let part = dir.path().join("part");
    commands::train(&train_args(&cfg, &part, Some(2))).unwrap();
    let mut resume = train_args(&cfg, &part, Some(4));
    resume.resume = true;
    let r = commands::train(&resume).unwrap();
    assert_eq!(r.steps, 4);

    for f in [CHECKPOINT_FILE, LOSS_FILE] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_defaults_determinism_and_shape_check() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("run");
    commands::train(&train_args(&cfg, &out, Some(2))).unwrap();
    let args = EvalArgs {
        config: cfg.clone(),
        checkpoint: out.join(CHECKPOINT_FILE),
        ks: Vec::new(),
        averaging: Averaging::Macro,
        out: Some(dir.path().join("eval")),
        overrides: Overrides::default(),
    };
    let a = commands::eval(&args).unwrap();
    let b = commands::eval(&args).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.images, 3);
    for m in Mode::ALL {
        assert!(a.recall(m, 50).is_some() && a.recall(m, 100).is_some());
        assert_eq!(a.results.iter().find(|r| r.mode == m).unwrap().recall_at.len(), 2);
    }
    let report = fs::read_to_string(dir.path().join("eval/report.txt")).unwrap();
    assert_eq!(report, a.render());
    assert!(report.contains("sggen_recall@50: "));

    let scored = commands::score(&ScoreArgs {
        predictions: dir.path().join("eval/predictions.jsonl"),
        ground_truth: dir.path().join("data").join(SCENES_FILE),
        ks: Vec::new(),
        averaging: Averaging::Macro,
        out: None,
    })
    .unwrap();
    assert_eq!(scored, a);

    let mut wrong = args.clone();
    wrong.overrides.no_gan = true;
    let e = commands::eval(&wrong).unwrap_err();
    assert_eq!(e.kind, Kind::Config);
}

#[test]
fn gradcheck_table_lists_groups() {
    let rows = commands::gradcheck(Scope::End2End, 0).unwrap();
    let table = commands::gradcheck_table(&rows);
    for g in ["refine", "knowledge", "heads", "generator", "discriminator"] {
        assert!(table.contains(g), "{table}");
    }
    commands::gradcheck_verdict(&rows).unwrap();
    let ops = commands::gradcheck(Scope::Op, 0).unwrap();
    assert!(ops.len() > 10);
    commands::gradcheck_verdict(&ops).unwrap();
}

fn kbsg(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kbsg")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn exit_codes() {
    let (dir, _) = workspace();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nsteps = 1\nlr_main = \"fast\"\n").unwrap();
    let o = kbsg(&["train", "--config", "bad.toml"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    fs::write(d.join("nodata.toml"), "[data]\ndir = \"missing\"\n").unwrap();
    assert_eq!(kbsg(&["train", "--config", "nodata.toml"], d).status.code(), Some(3));

    let o = kbsg(&["synth", "--out", "again", "--images", "2"], d);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(kbsg(&["synth", "--out", "x", "--classes", "99"], d).status.code(), Some(2));
}

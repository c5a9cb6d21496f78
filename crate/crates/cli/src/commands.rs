//! The `synth`, `train`, `eval`, `score` and `gradcheck` commands.

use std::fs;
use std::path::{Path, PathBuf};

use kbsg_core::config::{ModelConfig, Switches};
use kbsg_core::eval::{evaluate, gt_triplets, Averaging, EvalResult, GtTriplet, Mode, DEFAULT_IOU};
use kbsg_core::gradcheck::{end_to_end_suite, module_suite, op_suite, GradCheck};
use kbsg_core::graphgen::ScoredTriplet;
use kbsg_core::kb::{parse_word_vectors, TripleStore, Vocabulary};
use kbsg_core::model::{Model, Sample};
use kbsg_core::refine::KnowledgeSource;
use kbsg_core::scene::{render_scene, LabelSpace, Scene};
use kbsg_core::synth::{generate, SynthConfig};
use kbsg_core::train::{train as run_training, LossReport};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{core, fail, Categorize, CliError, CliResult, Kind};
use crate::formats::{
    encode_ppm, loss_row, loss_rows_before, read_graphs, read_labels, read_scenes, write_graphs, write_labels,
    write_scenes, GraphRecord, LOSS_HEADER,
};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const LABELS_FILE: &str = "labels.json";
pub const KB_FILE: &str = "kb.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_MANIFEST: &str = "manifest.txt";

fn read(path: &Path, kind: Kind) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| fail(kind, format!("{}: {e}", path.display())))
}

fn read_text(path: &Path, kind: Kind) -> CliResult<String> {
    String::from_utf8(read(path, kind)?).map_err(|_| fail(kind, format!("{}: not UTF-8", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| fail(Kind::Data, format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| fail(Kind::Data, format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub images: usize,
    pub classes: usize,
    pub predicates: usize,
    pub seed: u64,
}

/// Writes `scenes.jsonl`, `labels.json`, `kb.tsv` and one PPM per scene under
/// `images/`. Returns the written paths.
pub fn synth(a: &SynthArgs) -> CliResult<Vec<PathBuf>> {
    let cfg = SynthConfig {
        images: a.images,
        num_classes: a.classes,
        num_predicates: a.predicates,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg).map_err(|e| core(e, Kind::Config))?;
    let images = a.out.join("images");
    create_dir(&images)?;
    let mut written = Vec::new();
    for (name, body) in [
        (SCENES_FILE, write_scenes(&corpus.scenes)),
        (LABELS_FILE, write_labels(&corpus.labels)),
        (KB_FILE, corpus.kb_tsv()),
    ] {
        let p = a.out.join(name);
        write(&p, body)?;
        written.push(p);
    }
    for s in &corpus.scenes {
        let p = images.join(format!("{}.ppm", s.id));
        write(&p, encode_ppm(&render_scene(s)).kind(Kind::Numeric)?)?;
        written.push(p);
    }
    Ok(written)
}

/// Flags shared by the commands that build a model from a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub no_gan: bool,
    pub no_kb: bool,
}

/// Reads and parses a config file; relative paths resolve against its
/// directory.
pub fn load_config(path: &Path, o: &Overrides) -> CliResult<RunConfig> {
    let text = read_text(path, Kind::Config)?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| fail(Kind::Config, format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.train.steps = s;
    }
    cfg.model.gan &= !o.no_gan;
    cfg.model.kb &= !o.no_kb;
    cfg.train_config().validate().map_err(|e| core(e, Kind::Config))?;
    Ok(cfg)
}

/// A dataset directory plus the knowledge base, with the raw bytes of every
/// input for content hashing.
pub struct Dataset {
    pub labels: LabelSpace,
    pub scenes: Vec<Scene>,
    pub store: TripleStore,
    pub inputs: Vec<(String, Vec<u8>)>,
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let mut inputs = Vec::new();
    let mut load = |path: PathBuf| -> CliResult<String> {
        let bytes = read(&path, Kind::Data)?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| fail(Kind::Data, format!("{}: not UTF-8", path.display())))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push((name, bytes));
        Ok(text)
    };
    let labels_path = cfg.data.dir.join(LABELS_FILE);
    let labels = read_labels(&load(labels_path.clone())?).map_err(|e| fail(Kind::Data, format!("{}: {e:#}", labels_path.display())))?;
    let scenes_path = cfg.data.dir.join(SCENES_FILE);
    let scenes =
        read_scenes(&load(scenes_path.clone())?, Some(&labels)).map_err(|e| fail(Kind::Data, format!("{}: {e:#}", scenes_path.display())))?;
    if scenes.is_empty() {
        return Err(fail(Kind::Data, format!("{}: no scenes", scenes_path.display())));
    }
    let store = if cfg.model.kb {
        let p = cfg.triples_path();
        TripleStore::parse_tsv(&load(p.clone())?).map_err(|e| fail(Kind::Data, format!("{}: {e}", p.display())))?
    } else {
        TripleStore::from_triples([])
    };
    if let Some(p) = &cfg.kb.word_vectors {
        if cfg.model.kb {
            load(p.clone())?;
        }
    }
    Ok(Dataset {
        labels,
        scenes,
        store,
        inputs,
    })
}

/// Everything needed to train or run a model.
pub struct Prepared {
    pub cfg: RunConfig,
    pub model_cfg: ModelConfig,
    pub data: Dataset,
    pub vocab: Vocabulary,
    pub samples: Vec<Sample>,
    pub model: Model,
}

impl Prepared {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        let data = load_dataset(&cfg)?;
        let model_cfg = cfg.model_config(&data.labels);
        let vocab = Vocabulary::build(&data.store, data.labels.classes.iter().map(String::as_str));
        let vocab_size = if model_cfg.kb { vocab.len() } else { 0 };
        let mut model = Model::new(&model_cfg, vocab_size, cfg.train.seed).map_err(|e| core(e, Kind::Config))?;
        if let (Some(p), Some(kp)) = (&cfg.kb.word_vectors, model.knowledge.as_ref()) {
            let text = read_text(p, Kind::Data)?;
            let vectors =
                parse_word_vectors(&text, model_cfg.embed_dim).map_err(|e| fail(Kind::Data, format!("{}: {e}", p.display())))?;
            let id = kp.encoder.embed;
            vocab.load_vectors(model.params.tensor_mut(id), &vectors).map_err(|e| core(e, Kind::Data))?;
        }
        let pc = cfg.proposal_config();
        let samples = data
            .scenes
            .iter()
            .map(|s| Sample::prepare(s, &model_cfg, &pc).map_err(|e| core(e, Kind::Data)))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            cfg,
            model_cfg,
            data,
            vocab,
            samples,
            model,
        })
    }

    pub fn source(&self) -> Option<KnowledgeSource<'_>> {
        self.model_cfg.kb.then_some(KnowledgeSource {
            store: &self.data.store,
            vocab: &self.vocab,
            labels: &self.data.labels,
            top_k: self.model_cfg.top_k,
        })
    }

    pub fn switches(&self) -> Switches {
        Switches {
            kb: self.model_cfg.kb,
            gan: self.model_cfg.gan,
        }
    }
}

/// Snapshot of a run: resolved config, seed, content hash of the inputs and
/// the files written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<(String, String)>,
    pub content_hash: String,
    pub outputs: Vec<String>,
}

/// Git-style object hash (`blob <len>\0<bytes>`), with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, inputs: &[(String, Vec<u8>)], outputs: &[&str]) -> Self {
        let config = cfg.to_toml();
        let inputs: Vec<(String, String)> = inputs.iter().map(|(n, b)| (n.clone(), blob_hash(b))).collect();
        let mut tree = format!("config {}\n", blob_hash(config.as_bytes()));
        for (n, h) in &inputs {
            tree.push_str(&format!("{n} {h}\n"));
        }
        Self {
            command: command.to_string(),
            seed: cfg.train.seed,
            content_hash: blob_hash(tree.as_bytes()),
            config,
            inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("command: {}\nseed: {}\ncontent_hash: {}\n", self.command, self.seed, self.content_hash);
        for (n, h) in &self.inputs {
            out.push_str(&format!("input: {n} {h}\n"));
        }
        for o in &self.outputs {
            out.push_str(&format!("output: {o}\n"));
        }
        out.push_str("config:\n");
        for l in self.config.lines() {
            out.push_str(&format!("  {l}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub overrides: Overrides,
    /// Continue from `out/checkpoint.bin`.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub last: Option<LossReport>,
}

fn save(out: &Path, step: usize, model: &Model, rows: &[String]) -> CliResult<()> {
    let c = Checkpoint::capture(step, &model.params);
    write(&out.join(CHECKPOINT_FILE), c.encode())?;
    write(&out.join(CHECKPOINT_MANIFEST), c.manifest())?;
    let mut log = String::from(LOSS_HEADER);
    log.push('\n');
    for r in rows {
        log.push_str(r);
        log.push('\n');
    }
    write(&out.join(LOSS_FILE), log)
}

/// Phase one (unless resuming) then the joint steps; writes the checkpoint,
/// its manifest, the loss log and the run manifest to `out`.
pub fn train(a: &TrainArgs) -> CliResult<TrainOutcome> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let mut p = Prepared::new(cfg)?;
    create_dir(&a.out)?;
    let (start, mut rows) = if a.resume {
        let c = Checkpoint::decode(&read(&a.out.join(CHECKPOINT_FILE), Kind::Data)?).kind(Kind::Data)?;
        c.restore(&mut p.model.params).kind(Kind::Config)?;
        let log = read_text(&a.out.join(LOSS_FILE), Kind::Data)?;
        (c.step, loss_rows_before(&log, c.step).kind(Kind::Data)?)
    } else {
        (0, Vec::new())
    };
    let tc = p.cfg.train_config();
    let every = p.cfg.train.save_every;
    let mut model = p.model.clone();
    let mut io_error = None;
    let reports = run_training(&mut model, &p.samples, p.source(), p.switches(), &tc, start, |m, r| {
        rows.push(loss_row(r));
        if every > 0 && (r.step + 1) % every == 0 {
            if let Err(e) = save(&a.out, r.step + 1, m, &rows) {
                let msg = e.to_string();
                io_error = Some(e);
                return Err(kbsg_core::Error::InvalidArgument { op: "checkpoint", msg });
            }
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let reports = reports.map_err(|e| core(e, Kind::Data))?;
    let steps = start.max(tc.steps);
    save(&a.out, steps, &model, &rows)?;
    p.model = model;
    let m = RunManifest::new("train", &p.cfg, &p.data.inputs, &[CHECKPOINT_FILE, CHECKPOINT_MANIFEST, LOSS_FILE]);
    write(&a.out.join(RUN_MANIFEST), m.render())?;
    Ok(TrainOutcome {
        steps,
        last: reports.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub ks: Vec<usize>,
    pub averaging: Averaging,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub results: Vec<EvalResult>,
}

impl EvalReport {
    pub fn compute(images: &[(Vec<ScoredTriplet>, Vec<GtTriplet>)], ks: &[usize], averaging: Averaging) -> Self {
        let results = Mode::ALL.iter().map(|m| evaluate(images, ks, *m, DEFAULT_IOU, averaging)).collect();
        Self {
            images: images.len(),
            results,
        }
    }

    pub fn recall(&self, mode: Mode, k: usize) -> Option<f64> {
        self.results.iter().find(|r| r.mode == mode)?.recall_at.get(&k).copied()
    }

    /// `key: value` lines.
    pub fn render(&self) -> String {
        let mut out = format!("images: {}\n", self.images);
        for r in &self.results {
            out.push_str(&format!("{}_empty_gt: {}\n", r.mode.name().to_lowercase(), r.empty_gt));
            for (k, v) in &r.recall_at {
                out.push_str(&format!("{}_recall@{k}: {v:.6}\n", r.mode.name().to_lowercase()));
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("mode,k,recall\n");
        for r in &self.results {
            for (k, v) in &r.recall_at {
                out.push_str(&format!("{},{k},{v}\n", r.mode.name()));
            }
        }
        out
    }
}

fn check_ks(ks: &[usize]) -> CliResult<Vec<usize>> {
    if ks.contains(&0) {
        return Err(fail(Kind::Config, "K must be positive"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        ks = kbsg_core::eval::DEFAULT_KS.to_vec();
    }
    Ok(ks)
}

fn write_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    create_dir(out)?;
    write(&out.join("report.txt"), report.render())?;
    write(&out.join("report.csv"), report.csv())
}

/// Inference with the image branch discarded, then PhrDet and SGGen Rec@K
/// on the configured dataset.
pub fn eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let ks = check_ks(&a.ks)?;
    let cfg = load_config(&a.config, &a.overrides)?;
    let mut p = Prepared::new(cfg)?;
    let c = Checkpoint::decode(&read(&a.checkpoint, Kind::Data)?).kind(Kind::Data)?;
    c.restore(&mut p.model.params)
        .map_err(|e| fail(Kind::Config, format!("checkpoint does not match the configured model: {e:#}")))?;
    let sw = Switches {
        kb: p.model_cfg.kb,
        gan: false,
    };
    let mut images = Vec::with_capacity(p.samples.len());
    let mut graphs = Vec::with_capacity(p.samples.len());
    for s in &p.samples {
        let g = p.model.predict(s, p.source(), sw).map_err(|e| core(e, Kind::Data))?;
        images.push((g.triplets(false), gt_triplets(&s.scene)));
        graphs.push(GraphRecord::new(&s.scene.id, &g));
    }
    let report = EvalReport::compute(&images, &ks, a.averaging);
    if let Some(out) = &a.out {
        write_report(out, &report)?;
        write(&out.join("predictions.jsonl"), write_graphs(&graphs))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArgs {
    pub predictions: PathBuf,
    pub ground_truth: PathBuf,
    pub ks: Vec<usize>,
    pub averaging: Averaging,
    pub out: Option<PathBuf>,
}

/// Rec@K from a predicted-graph JSONL against a scenes JSONL, matched by id.
pub fn score(a: &ScoreArgs) -> CliResult<EvalReport> {
    let ks = check_ks(&a.ks)?;
    let graphs = read_graphs(&read_text(&a.predictions, Kind::Data)?)
        .map_err(|e| fail(Kind::Data, format!("{}: {e:#}", a.predictions.display())))?;
    let scenes = read_scenes(&read_text(&a.ground_truth, Kind::Data)?, None)
        .map_err(|e| fail(Kind::Data, format!("{}: {e:#}", a.ground_truth.display())))?;
    let mut images = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let preds = match graphs.iter().find(|g| g.id == s.id) {
            Some(g) => g.triplets().kind(Kind::Data)?,
            None => Vec::new(),
        };
        images.push((preds, gt_triplets(s)));
    }
    let report = EvalReport::compute(&images, &ks, a.averaging);
    if let Some(out) = &a.out {
        write_report(out, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Module,
    End2End,
}

/// Random shapes per primitive in the op-level suite.
pub const OP_SHAPES: usize = 5;

pub fn gradcheck(scope: Scope, seed: u64) -> CliResult<Vec<GradCheck>> {
    let rows = match scope {
        Scope::Op => op_suite(seed, OP_SHAPES),
        Scope::Module => module_suite(seed),
        Scope::End2End => end_to_end_suite(seed),
    };
    rows.map_err(|e| core(e, Kind::Numeric))
}

pub fn gradcheck_table(rows: &[GradCheck]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
    let mut out = format!("{:<w$}  {:>6}  {:>12}  {:>9}  result\n", "name", "count", "max_rel_err", "tolerance");
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>6}  {:>12.3e}  {:>9.0e}  {}\n",
            r.name,
            r.count,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

/// Nonzero-exit error when any row failed.
pub fn gradcheck_verdict(rows: &[GradCheck]) -> CliResult<()> {
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            kind: Kind::Numeric,
            error: anyhow::anyhow!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

//! Two-phase training: generator/discriminator pretraining on ground-truth
//! objects, then joint scene-graph and image-level updates.

use alloc::format;
use alloc::vec::Vec;

use crate::config::Switches;
use crate::error::{Error, Result};
use crate::graphgen::{scene_graph_loss, Dropout, LossWeights};
use crate::imggen::gan_losses;
use crate::model::{Model, Sample};
use crate::numcore::Var;
use crate::params::{Group, GroupMask, ParamGrads, ParamStore, Session};
use crate::refine::KnowledgeSource;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub batch_pretrain: usize,
    pub pretrain_steps: usize,
    pub lr_main: f64,
    pub lr_decay: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    /// Joint training steps `T_s`.
    pub steps: usize,
    pub batch: usize,
    pub weights: LossWeights,
    /// Weight of the image-level objective inside the composite update.
    pub gan_weight: f64,
    pub lambda_pixel: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-4,
            batch_pretrain: 4,
            pretrain_steps: 20,
            lr_main: 0.01,
            lr_decay: 0.1,
            milestones: alloc::vec![1500],
            steps: 2000,
            batch: 4,
            weights: LossWeights::default(),
            gan_weight: 1.0,
            lambda_pixel: 1.0,
            weight_decay: 1e-4,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale optimization settings (lr 1e-4 / batch 32 pretraining,
    /// lr 0.01 decayed by 0.1).
    pub fn full() -> Self {
        Self {
            batch_pretrain: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_pretrain, self.lr_main, self.lr_decay];
        if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::invalid("train config", "learning rates and decay must be positive"));
        }
        if self.batch == 0 || self.batch_pretrain == 0 {
            return Err(Error::invalid("train config", "batch sizes must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("train config", "milestones must be strictly increasing"));
        }
        if !(self.weight_decay >= 0.0 && self.gan_weight >= 0.0 && self.lambda_pixel >= 0.0) {
            return Err(Error::invalid("train config", "weight_decay, gan_weight and lambda_pixel must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("train config", "dropout must lie in [0, 1)"));
        }
        self.weights.validate()
    }

    /// Learning rate for joint step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.milestones.iter().filter(|m| **m <= step).count();
        (0..n).fold(self.lr_main, |lr, _| lr * self.lr_decay)
    }
}

/// `p ← p − lr·(g + weight_decay·p)` for every parameter that has a gradient.
pub fn sgd_update(params: &mut ParamStore, grads: &ParamGrads, lr: f64, weight_decay: f64) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if let Some(g) = grads.get(id) {
            let t = params.tensor_mut(id);
            t.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(p, g)| *p -= lr * (g + weight_decay * *p));
        }
    }
}

/// Per-step means over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub pred: f64,
    pub obj: f64,
    pub reg: f64,
    /// `−log D(fake)`.
    pub g: f64,
    /// `log D(real) + log(1 − D(fake))`.
    pub d: f64,
    pub pixel: f64,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        [self.total, self.pred, self.obj, self.reg, self.g, self.d, self.pixel]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn stream(step: usize, image: usize) -> u64 {
    ((step as u64) << 32) | image as u64
}

fn batch_indices(step: usize, batch: usize, n: usize) -> impl Iterator<Item = usize> {
    (0..batch).map(move |k| (step * batch + k) % n)
}

const GAN: [Group; 2] = [Group::Generator, Group::Discriminator];

fn assert_partition(store: &ParamStore, grads: &ParamGrads, allowed: GroupMask) {
    for (id, p) in store.iter() {
        assert!(
            grads.get(id).is_none() || allowed.contains(p.group),
            "update touched {} outside its partition",
            p.name
        );
    }
}

fn guard(what: &str, grads: &ParamGrads, loss: f64) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("{what}: loss {loss}")));
    }
    Ok(())
}

fn constant_like(s: &mut Session, v: &[f64], shape: &[usize]) -> Result<Var> {
    s.tape.constant(shape, v.to_vec())
}

/// Phase one: alternating G-then-D updates on ground-truth object features.
/// Touches only generator and discriminator parameters.
pub fn pretrain_generator(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    if data.is_empty() {
        return Err(Error::Empty("pretrain_generator: dataset"));
    }
    let (Some(gen), Some(disc)) = (model.generator.clone(), model.discriminator.clone()) else {
        return Ok(Vec::new());
    };
    let seed = derive_seed(cfg.seed, "pretrain", 0);
    let mut reports = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let idx: Vec<usize> = batch_indices(step, cfg.batch_pretrain, data.len()).collect();
        let scale = 1.0 / idx.len() as f64;

        let mask = GroupMask::of(&[Group::Generator]);
        let mut g_grads = ParamGrads::zeros_like(&model.params);
        let mut report = LossReport { step, ..Default::default() };
        for &i in &idx {
            let sample = &data[i];
            let mut s = Session::new(&model.params, mask);
            let (fake, layout) = pretrain_fake(&mut s, &gen, sample, seed, stream(step, i))?;
            let real = constant_like(&mut s, sample.image.data(), sample.image.shape())?;
            let l = gan_losses(&mut s, &disc, real, fake, layout, cfg.lambda_pixel)?;
            let grads = s.backward(l.g_objective)?;
            guard("pretrain G", &grads, s.tape.scalar(l.g_objective))?;
            g_grads.add_scaled(&grads, scale);
            report.g += s.tape.scalar(l.g_adv) * scale;
            report.pixel += s.tape.scalar(l.pixel) * scale;
        }
        assert_partition(&model.params, &g_grads, GroupMask::of(&GAN));
        sgd_update(&mut model.params, &g_grads, cfg.lr_pretrain, cfg.weight_decay);

        let mask = GroupMask::of(&[Group::Discriminator]);
        let mut d_grads = ParamGrads::zeros_like(&model.params);
        for &i in &idx {
            let sample = &data[i];
            let mut s = Session::new(&model.params, mask);
            let (fake, layout) = pretrain_fake(&mut s, &gen, sample, seed, stream(step, i))?;
            let real = constant_like(&mut s, sample.image.data(), sample.image.shape())?;
            let l = gan_losses(&mut s, &disc, real, fake, layout, cfg.lambda_pixel)?;
            let obj = s.tape.scale(l.l_d, -1.0);
            let grads = s.backward(obj)?;
            guard("pretrain D", &grads, s.tape.scalar(l.l_d))?;
            d_grads.add_scaled(&grads, scale);
            report.d += s.tape.scalar(l.l_d) * scale;
        }
        assert_partition(&model.params, &d_grads, GroupMask::of(&GAN));
        sgd_update(&mut model.params, &d_grads, cfg.lr_pretrain, cfg.weight_decay);
        reports.push(report);
    }
    Ok(reports)
}

/// Generated image and layout from the raw ground-truth object features.
fn pretrain_fake(
    s: &mut Session,
    gen: &crate::imggen::Generator,
    sample: &Sample,
    seed: u64,
    index: u64,
) -> Result<(Var, Var)> {
    let mut objs = Vec::new();
    for (p, g) in sample.proposals.iter().zip(&sample.targets.matched) {
        if let Some(g) = g {
            let o = constant_like(s, p.feature.data(), p.feature.shape())?;
            objs.push((o, sample.scene.objects[*g].bbox));
        }
    }
    if objs.is_empty() {
        return Err(Error::Empty("pretrain_generator: ground-truth objects"));
    }
    let layout = gen.layout(s, &objs, sample.canvas_scale())?;
    let z = gen.noise(s, seed, index)?;
    let fake = gen.generate(s, layout.grid, z)?;
    Ok((fake, layout.grid))
}

/// Gradients of one image in the joint phase, before batch averaging.
pub struct StepGrads {
    pub grads: ParamGrads,
    pub report: LossReport,
}

/// Scene-graph loss plus (when enabled) the image-level objective for one
/// image. The generator term back-propagates into the object pathway; the
/// discriminator term uses the same fake, detached.
pub fn image_grads(
    model: &Model,
    sample: &Sample,
    kb: Option<KnowledgeSource>,
    sw: Switches,
    cfg: &TrainConfig,
    step: usize,
    image: usize,
    dropout: bool,
) -> Result<StepGrads> {
    let sw = model.effective(sw);
    let mut mask = GroupMask::of(&[Group::Refine, Group::Heads]);
    if sw.kb {
        mask = mask.with(Group::Knowledge);
    }
    if sw.gan {
        mask = mask.with(Group::Generator);
    }
    let mut s = Session::new(&model.params, mask);
    let mut drop = if dropout {
        Some(Dropout::new(cfg.dropout, cfg.seed, stream(step, image))?)
    } else {
        None
    };
    let f = model.forward(&mut s, sample, kb, sw, drop.as_mut())?;
    let l = scene_graph_loss(&mut s, &f.obj_logits, &f.deltas, &f.rel_logits, &sample.targets, &cfg.weights)?;
    let mut report = LossReport {
        step,
        pred: s.tape.scalar(l.pred),
        obj: s.tape.scalar(l.obj),
        reg: s.tape.scalar(l.reg),
        ..Default::default()
    };
    let mut total = l.total;
    let mut detached = None;
    if let (true, Some(gen), Some(disc)) = (sw.gan, &model.generator, &model.discriminator) {
        let objs: Vec<(Var, crate::geometry::BBox)> = f
            .objects
            .iter()
            .zip(&sample.proposals)
            .map(|(o, p)| (*o, p.bbox))
            .collect();
        let layout = gen.layout(&mut s, &objs, sample.canvas_scale())?;
        let z = gen.noise(&mut s, cfg.seed, stream(step, image))?;
        let fake = gen.generate(&mut s, layout.grid, z)?;
        let real = constant_like(&mut s, sample.image.data(), sample.image.shape())?;
        let gl = gan_losses(&mut s, disc, real, fake, layout.grid, cfg.lambda_pixel)?;
        let weighted = s.tape.scale(gl.g_objective, cfg.gan_weight);
        total = s.tape.add(total, weighted)?;
        report.g = s.tape.scalar(gl.g_adv);
        report.pixel = s.tape.scalar(gl.pixel);
        detached = Some((s.tape.to_tensor(fake), s.tape.to_tensor(layout.grid)));
    }
    report.total = s.tape.scalar(total);
    let mut grads = s.backward(total)?;

    if let (Some((fake, layout)), Some(disc)) = (detached, &model.discriminator) {
        let mut s = Session::new(&model.params, GroupMask::of(&[Group::Discriminator]));
        let fake = constant_like(&mut s, fake.data(), fake.shape())?;
        let layout = constant_like(&mut s, layout.data(), layout.shape())?;
        let real = constant_like(&mut s, sample.image.data(), sample.image.shape())?;
        let gl = gan_losses(&mut s, disc, real, fake, layout, cfg.lambda_pixel)?;
        let obj = s.tape.scale(gl.l_d, -cfg.gan_weight);
        grads.add_scaled(&s.backward(obj)?, 1.0);
        report.d = s.tape.scalar(gl.l_d);
    }
    Ok(StepGrads { grads, report })
}

/// One joint step over a batch: gradients summed in image order, averaged,
/// and applied as a single SGD update with weight decay.
pub fn train_step(
    model: &mut Model,
    data: &[Sample],
    kb: Option<KnowledgeSource>,
    sw: Switches,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::Empty("train_step: dataset"));
    }
    let idx: Vec<usize> = batch_indices(step, cfg.batch, data.len()).collect();
    let scale = 1.0 / idx.len() as f64;
    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut report = LossReport { step, ..Default::default() };
    for &i in &idx {
        let g = image_grads(model, &data[i], kb, sw, cfg, step, i, cfg.dropout > 0.0)?;
        grads.add_scaled(&g.grads, scale);
        let r = g.report;
        report.total += r.total * scale;
        report.pred += r.pred * scale;
        report.obj += r.obj * scale;
        report.reg += r.reg * scale;
        report.g += r.g * scale;
        report.d += r.d * scale;
        report.pixel += r.pixel * scale;
    }
    if !report.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("train_step {step}: loss {}", report.total)));
    }
    sgd_update(&mut model.params, &grads, cfg.lr_at(step), cfg.weight_decay);
    Ok(report)
}

/// The region-proposal pretraining stage; the stub proposals have nothing
/// to learn.
pub fn pretrain_rpn(_data: &[Sample]) {}

/// Full two-phase run from joint step `start` (phase one runs only when
/// `start == 0` and there is at least one joint step to take). `on_step` sees each joint-step report.
pub fn train<F>(
    model: &mut Model,
    data: &[Sample],
    kb: Option<KnowledgeSource>,
    sw: Switches,
    cfg: &TrainConfig,
    start: usize,
    mut on_step: F,
) -> Result<Vec<LossReport>>
where
    F: FnMut(&Model, &LossReport) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("train: dataset"));
    }
    let sw = model.effective(sw);
    if start == 0 && cfg.steps > 0 {
        pretrain_rpn(data);
        if sw.gan {
            pretrain_generator(model, data, cfg)?;
        }
    }
    let mut out = Vec::with_capacity(cfg.steps.saturating_sub(start));
    for step in start..cfg.steps {
        let r = train_step(model, data, kb, sw, cfg, step)?;
        on_step(model, &r)?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::geometry::BBox;
    use crate::model::ProposalConfig;
    use crate::numcore::Tensor;
    use crate::params::Init;
    use crate::scene::{Scene, SceneObject, SceneRelation};
    use alloc::vec;

    fn scene(id: &str, shift: f64) -> Scene {
        Scene {
            id: id.into(),
            width: 64,
            height: 64,
            objects: vec![
                SceneObject {
                    bbox: BBox::new(4.0 + shift, 6.0, 20.0, 16.0).unwrap(),
                    class: 1,
                },
                SceneObject {
                    bbox: BBox::new(30.0, 28.0 + shift, 24.0, 20.0).unwrap(),
                    class: 2,
                },
            ],
            relations: vec![SceneRelation {
                subj: 0,
                predicate: 1,
                obj: 1,
            }],
        }
    }

    fn setup(gan: bool) -> (Model, Vec<Sample>) {
        let cfg = ModelConfig {
            kb: false,
            gan,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, 0, 3).unwrap();
        let data = vec![
            Sample::prepare(&scene("a", 0.0), &cfg, &ProposalConfig::default()).unwrap(),
            Sample::prepare(&scene("b", 3.0), &cfg, &ProposalConfig::default()).unwrap(),
        ];
        (model, data)
    }

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        let id = store.register("p", Group::Heads, &[1], Init::Zeros, 0);
        store.tensor_mut(id).data_mut()[0] = 1.0;
        let mut g = ParamGrads::zeros_like(&store);
        g.grads[0] = Some(vec![1.0]);
        sgd_update(&mut store, &g, 0.1, 0.0);
        assert!((store.tensor(id).data()[0] - 0.9).abs() < 1e-15);

        let zero = ParamGrads {
            grads: vec![Some(vec![0.0])],
        };
        let before = store.clone();
        sgd_update(&mut store, &zero, 0.1, 0.0);
        assert_eq!(store, before);
        sgd_update(&mut store, &zero, 0.1, 0.5);
        assert!(store.tensor(id).l2_norm_sq() < before.tensor(id).l2_norm_sq());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            milestones: vec![10, 20],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(10) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(25) - 0.0001).abs() < 1e-15);
        let p = TrainConfig::full();
        assert_eq!((p.lr_pretrain, p.batch_pretrain, p.lr_main, p.lr_decay), (1e-4, 32, 0.01, 0.1));
        assert!(TrainConfig {
            milestones: vec![5, 5],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn pretraining_touches_only_gan_parameters() {
        let (mut model, data) = setup(true);
        let before = model.params.clone();
        let cfg = TrainConfig {
            pretrain_steps: 0,
            ..TrainConfig::default()
        };
        pretrain_generator(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.params, before);

        let cfg = TrainConfig {
            pretrain_steps: 2,
            batch_pretrain: 2,
            ..TrainConfig::default()
        };
        pretrain_generator(&mut model, &data, &cfg).unwrap();
        let mut changed = [false; 2];
        for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
            match a.group {
                Group::Generator => changed[0] |= a.tensor != b.tensor,
                Group::Discriminator => changed[1] |= a.tensor != b.tensor,
                _ => assert_eq!(a.tensor, b.tensor, "{}", a.name),
            }
        }
        assert_eq!(changed, [true, true]);
        assert!(pretrain_generator(&mut model, &[], &cfg).is_err());

        let (mut again, _) = setup(true);
        pretrain_generator(&mut again, &data, &cfg).unwrap();
        assert_eq!(again.params, model.params);
    }

    #[test]
    fn frozen_image_branch_reduces_to_baseline_gradient() {
        let (model, data) = setup(true);
        let (base, _) = setup(false);
        let cfg = TrainConfig {
            gan_weight: 0.0,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let full = image_grads(&model, &data[0], None, Switches::ALL, &cfg, 0, 0, false).unwrap();
        let plain = image_grads(&base, &data[0], None, Switches::BASELINE, &cfg, 0, 0, false).unwrap();
        for (id, p) in base.params.iter() {
            let fid = model.params.id(&p.name).unwrap();
            assert_eq!(full.grads.get(fid), plain.grads.get(id), "{}", p.name);
        }
    }

    #[test]
    fn background_only_regression_gradient_is_zero() {
        let (model, mut data) = setup(false);
        let t = &mut data[0].targets;
        t.classes.iter_mut().for_each(|c| *c = 0);
        t.predicates.iter_mut().for_each(|p| *p = 0);
        let cfg = TrainConfig {
            weights: LossWeights { reg: 0.0, ..Default::default() },
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let g = image_grads(&model, &data[0], None, Switches::BASELINE, &cfg, 0, 0, false).unwrap();
        assert!(g.grads.get(model.heads.boxes.w).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(g.report.reg, 0.0);
    }

    #[test]
    fn loss_decreases_on_one_image() {
        let (mut model, data) = setup(false);
        let cfg = TrainConfig {
            lr_main: 1e-3,
            batch: 1,
            dropout: 0.0,
            weight_decay: 0.0,
            steps: 50,
            ..TrainConfig::default()
        };
        let one = &data[..1];
        let losses: Vec<f64> = (0..cfg.steps)
            .map(|t| train_step(&mut model, one, None, Switches::BASELINE, &cfg, t).unwrap().total)
            .collect();
        assert!(losses.windows(5).all(|w| w[4] <= w[0]), "{losses:?}");
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut model, data) = setup(false);
        let id = model.heads.node.w;
        let n = model.params.tensor(id).len();
        *model.params.tensor_mut(id) = Tensor::new(model.params.tensor(id).shape(), vec![f64::NAN; n]).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_step(&mut model, &data, None, Switches::BASELINE, &cfg, 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let cfg = TrainConfig {
            steps: 3,
            pretrain_steps: 1,
            batch: 2,
            batch_pretrain: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut m, data) = setup(true);
            let r = train(&mut m, &data, None, Switches::ALL, &cfg, 0, |_, _| Ok(())).unwrap();
            (m.params, r)
        };
        assert_eq!(run(), run());
    }
}

//! Layout composition, cascaded-refinement generator, conditional
//! discriminator and the adversarial/pixel objectives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::config::ImageConfig;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Conv, Linear};
use crate::numcore::{bilinear_warp, Var};
use crate::params::{Group, ParamStore, Session};
use crate::rng::rng_for;

/// Side of the tiled embedding grid before warping.
pub const EMBED_GRID: usize = 8;
pub const LEAK: f64 = 0.2;
pub const LOG_EPS: f64 = 1e-7;

/// Summed layout plus the per-object contributions.
#[derive(Debug, Clone)]
pub struct SceneLayout {
    pub grid: Var,
    pub per_object: Vec<Var>,
}

/// Tiles each `[Dl]` embedding to `Dl×8×8`, warps it into its box on an
/// `h×w` canvas and sums the results. Boxes are in canvas coordinates.
pub fn compose_layout(s: &mut Session, objects: &[(Var, BBox)], h: usize, w: usize) -> Result<SceneLayout> {
    if objects.is_empty() {
        return Err(Error::Empty("compose_layout"));
    }
    let cells = EMBED_GRID * EMBED_GRID;
    let ones = s.tape.constant(&[1, cells], vec![1.0; cells])?;
    let mut per_object = Vec::with_capacity(objects.len());
    for (e, b) in objects {
        let d = s.tape.value(*e).len();
        let col = s.tape.reshape(*e, &[d, 1])?;
        let tiled = s.tape.matmul(col, ones)?;
        let tiled = s.tape.reshape(tiled, &[d, EMBED_GRID, EMBED_GRID])?;
        per_object.push(bilinear_warp(&mut s.tape, tiled, b, h, w)?);
    }
    let mut grid = per_object[0];
    for l in &per_object[1..] {
        grid = s.tape.add(grid, *l)?;
    }
    Ok(SceneLayout { grid, per_object })
}

/// Generator: object-to-layout projection, refinement modules and output convs.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub project: Linear,
    pub stages: Vec<(Conv, Conv)>,
    pub out: (Conv, Conv),
    pub config: ImageConfig,
}

impl Generator {
    pub fn new(store: &mut ParamStore, feature_dim: usize, config: &ImageConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let g = Group::Generator;
        let c = config.gen_channels;
        let project = Linear::new(store, "gen.project", g, feature_dim, config.layout_dim, seed);
        let mut stages = Vec::new();
        let mut prev = config.noise_channels;
        for i in 0..config.stages() {
            let a = Conv::new(store, &format!("gen.stage{i}.a"), g, prev + config.layout_dim, c, 3, 1, seed);
            let b = Conv::new(store, &format!("gen.stage{i}.b"), g, c, c, 3, 1, seed);
            stages.push((a, b));
            prev = c;
        }
        let out = (
            Conv::new(store, "gen.out.a", g, c, c, 3, 1, seed),
            Conv::new(store, "gen.out.b", g, c, 3, 3, 1, seed),
        );
        Ok(Self {
            project,
            stages,
            out,
            config: config.clone(),
        })
    }

    /// Gaussian noise `[noise_channels × start × start]` for one draw.
    pub fn noise(&self, s: &mut Session, seed: u64, index: u64) -> Result<Var> {
        let r = self.config.start_res;
        let n = self.config.noise_channels * r * r;
        let mut rng = rng_for(seed, "noise", index);
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        s.tape.constant(&[self.config.noise_channels, r, r], data)
    }

    /// Renders `3 × out × out` in `[−1, 1]` from a layout of the same side.
    pub fn generate(&self, s: &mut Session, layout: Var, noise: Var) -> Result<Var> {
        let out = self.config.out_res;
        let ls = s.tape.shape(layout).to_vec();
        if ls != [self.config.layout_dim, out, out] {
            return Err(Error::dims("generate_image", &ls, &[self.config.layout_dim, out, out]));
        }
        let mut x = noise;
        let mut res = self.config.start_res;
        for (a, b) in &self.stages {
            let l = s.tape.avg_pool(layout, out / res)?;
            let h = s.tape.concat(&[x, l], 0)?;
            let h = a.forward(s, h)?;
            let h = s.tape.leaky_relu(h, LEAK);
            let h = b.forward(s, h)?;
            let h = s.tape.leaky_relu(h, LEAK);
            x = s.tape.upsample_nearest(h)?;
            res *= 2;
        }
        let h = self.out.0.forward(s, x)?;
        let h = s.tape.leaky_relu(h, LEAK);
        let h = self.out.1.forward(s, h)?;
        Ok(s.tape.tanh(h))
    }

    /// Projects object features and composes them on the output canvas;
    /// `scale` maps scene coordinates to canvas pixels.
    pub fn layout(&self, s: &mut Session, objects: &[(Var, BBox)], scale: f64) -> Result<SceneLayout> {
        let mut items = Vec::with_capacity(objects.len());
        for (o, b) in objects {
            items.push((self.project.forward(s, *o)?, b.scaled(scale, scale)));
        }
        compose_layout(s, &items, self.config.out_res, self.config.out_res)
    }
}

/// Conditional discriminator over image ⊕ layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub convs: Vec<Conv>,
    pub out: Linear,
}

impl Discriminator {
    pub const LAYERS: usize = 4;

    pub fn new(store: &mut ParamStore, config: &ImageConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let g = Group::Discriminator;
        let c = config.disc_channels;
        let mut convs = Vec::new();
        let mut prev = 3 + config.layout_dim;
        for i in 0..Self::LAYERS {
            convs.push(Conv::new(store, &format!("disc.conv{i}"), g, prev, c, 3, 1, seed));
            prev = c;
        }
        let side = config.out_res >> Self::LAYERS;
        let out = Linear::new(store, "disc.out", g, c * side * side, 1, seed);
        Ok(Self { convs, out })
    }

    /// Probability that `image` is real given `layout`, as a `[1]` tensor.
    pub fn forward(&self, s: &mut Session, image: Var, layout: Var) -> Result<Var> {
        let mut x = s.tape.concat(&[image, layout], 0)?;
        for c in &self.convs {
            x = c.forward(s, x)?;
            x = s.tape.leaky_relu(x, LEAK);
            x = s.tape.avg_pool(x, 2)?;
        }
        let n = s.tape.value(x).len();
        let x = s.tape.reshape(x, &[n])?;
        let y = self.out.forward(s, x)?;
        Ok(s.tape.sigmoid(y))
    }
}

/// Terms of the image-level objectives.
#[derive(Debug, Clone, Copy)]
pub struct GanLosses {
    /// `log D(real) + log(1 − D(fake))`, ascended by the discriminator.
    pub l_d: Var,
    /// `−log D(fake)`, the non-saturating generator term.
    pub g_adv: Var,
    /// Mean absolute pixel difference.
    pub pixel: Var,
    /// `g_adv + λ_p·pixel`, minimized by the generator.
    pub g_objective: Var,
    pub d_real: Var,
    pub d_fake: Var,
}

/// Evaluates both objectives with log arguments clamped to `[1e-7, 1 − 1e-7]`.
pub fn gan_losses(s: &mut Session, disc: &Discriminator, real: Var, fake: Var, layout: Var, lambda_p: f64) -> Result<GanLosses> {
    if s.tape.shape(real) != s.tape.shape(fake) {
        return Err(Error::dims("gan_losses", s.tape.shape(real), s.tape.shape(fake)));
    }
    let d_real = disc.forward(s, real, layout)?;
    let d_fake = disc.forward(s, fake, layout)?;
    let lr = s.tape.ln_clamped(d_real, LOG_EPS, 1.0 - LOG_EPS);
    let one_minus = s.tape.affine(d_fake, -1.0, 1.0);
    let lf = s.tape.ln_clamped(one_minus, LOG_EPS, 1.0 - LOG_EPS);
    let l_d = s.tape.add(lr, lf)?;
    let lg = s.tape.ln_clamped(d_fake, LOG_EPS, 1.0 - LOG_EPS);
    let g_adv = s.tape.scale(lg, -1.0);
    let pixel = pixel_loss(s, real, fake)?;
    let weighted = s.tape.scale(pixel, lambda_p);
    let g_objective = s.tape.add(g_adv, weighted)?;
    Ok(GanLosses {
        l_d,
        g_adv,
        pixel,
        g_objective,
        d_real,
        d_fake,
    })
}

/// `mean |real − fake|`.
pub fn pixel_loss(s: &mut Session, real: Var, fake: Var) -> Result<Var> {
    let d = s.tape.sub(real, fake)?;
    let d = s.tape.abs(d);
    Ok(s.tape.mean(d))
}

//! Multi-scale min-max training, presets, the training driver and inference.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::history::{LossLog, LOSS_CSV};
use crate::imaging::{self, build_pyramid, ImageBatch};
use crate::losses::{cycle_objective, gan_objective, LossBundle, LossWeights, ScaleLosses, Side};
use crate::networks::{ArchConfig, FusionMode, Networks, ScaleVars};
use crate::nn::Ctx;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_scales: usize,
    /// Side of the square training crops at the finest scale.
    pub image_size: usize,
    pub fusion: FusionMode,
    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Capacity of the per-scale history of generated images shown to the
    /// discriminators; 0 disables it.
    pub image_pool: usize,
    pub blur_dir: PathBuf,
    pub sharp_dir: PathBuf,
    pub out_dir: PathBuf,
    pub image_channels: usize,
    pub base_width: usize,
    pub residual_blocks: usize,
    pub reblur_width: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub attention_reduction: usize,
    pub residual_init_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let adam = AdamConfig::default();
        Self {
            n_scales: 3,
            image_size: 256,
            fusion: FusionMode::Saam,
            lambda_adv: 1.0,
            lambda_cyc: 10.0,
            batch_size: 1,
            iterations: 10_000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            seed: 0,
            checkpoint_every: 1000,
            image_pool: 0,
            blur_dir: PathBuf::from("data/blur"),
            sharp_dir: PathBuf::from("data/sharp"),
            out_dir: PathBuf::from("runs/usaad"),
            image_channels: arch.image_channels,
            base_width: arch.base_width,
            residual_blocks: arch.residual_blocks,
            reblur_width: arch.reblur_width,
            disc_width: arch.disc_width,
            disc_layers: arch.disc_layers,
            attention_reduction: arch.attention_reduction,
            residual_init_gain: arch.residual_init_gain,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_channels: self.image_channels,
            base_width: self.base_width,
            residual_blocks: self.residual_blocks,
            reblur_width: self.reblur_width,
            disc_width: self.disc_width,
            disc_layers: self.disc_layers,
            attention_reduction: self.attention_reduction,
            residual_init_gain: self.residual_init_gain,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { adv: self.lambda_adv, cyc: self.lambda_cyc }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// Side of the coarsest pyramid level.
    pub fn coarsest_size(&self) -> usize {
        self.image_size >> (self.n_scales.saturating_sub(1))
    }

    /// Check everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_scales == 0 || self.n_scales > 8 {
            return bad(format!("n_scales must be in 1..=8, got {}", self.n_scales));
        }
        let div = 4usize << (self.n_scales - 1);
        if self.image_size == 0 || self.image_size % div != 0 {
            return bad(format!(
                "image_size {} must be divisible by {div} for {} scales (4 at the coarsest)",
                self.image_size, self.n_scales
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        for (name, l) in [("lambda_adv", self.lambda_adv), ("lambda_cyc", self.lambda_cyc)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {l}"));
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        let arch = self.arch();
        arch.validate()?;
        let d = crate::networks::PatchDiscriminator::min_input_for(arch.disc_layers);
        if self.coarsest_size() < d {
            return bad(format!(
                "coarsest scale {}×{0} is below the discriminator's minimum input {d}×{d}; lower disc_layers or n_scales",
                self.coarsest_size()
            ));
        }
        Ok(())
    }

    /// Parse a flat TOML or JSON document of overrides on top of the defaults.
    pub fn from_str_any(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_str_any(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Single-line JSON rendering, parseable by [`TrainConfig::from_str_any`].
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// The eight ablation rows: scales × cross-scale fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Net1,
    Net2,
    Net3,
    Net4,
    Net5,
    Net6,
    Net7,
    Net8,
}

impl Preset {
    pub const ALL: [Preset; 8] =
        [Preset::Net1, Preset::Net2, Preset::Net3, Preset::Net4, Preset::Net5, Preset::Net6, Preset::Net7, Preset::Net8];

    pub fn scales(self) -> usize {
        match self {
            Preset::Net1 => 1,
            Preset::Net2 => 2,
            _ => 3,
        }
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            Preset::Net1 | Preset::Net2 | Preset::Net3 => FusionMode::None,
            Preset::Net4 => FusionMode::Add,
            Preset::Net5 => FusionMode::Concat,
            Preset::Net6 => FusionMode::ChannelAttention,
            Preset::Net7 => FusionMode::SpatialAttention,
            Preset::Net8 => FusionMode::Saam,
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        config.n_scales = self.scales();
        config.fusion = self.fusion();
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Preset::ALL.iter().position(|p| p == self).expect("listed") + 1;
        write!(f, "Net{i}")
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.to_string().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let valid: Vec<String> = Preset::ALL.iter().map(|p| p.to_string()).collect();
            Error::Config(format!("unknown preset {s:?}; valid presets: {}", valid.join(", ")))
        })
    }
}

/// Tape nodes of the generator half of one step, coarsest scale first.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    pub deblurred: Vec<ScaleVars>,
    /// `G_S→B(G_B→S(B^i))`.
    pub reblurred: Vec<Var>,
    /// `G_S→B(S^i)`.
    pub fake_blur: Vec<Var>,
    /// `G_B→S` run coarse-to-fine over `fake_blur`.
    pub restored: Vec<ScaleVars>,
    pub cyc_b: Vec<Var>,
    pub cyc_s: Vec<Var>,
}

impl GeneratorPass {
    pub fn fake_sharp(&self) -> Vec<Var> {
        self.deblurred.iter().map(|s| s.image).collect()
    }
}

/// Both cycles at every scale for pyramids given coarsest first.
pub fn generator_pass<T: Real>(nets: &Networks<T>, cx: &mut Ctx<T>, blur: &[Var], sharp: &[Var]) -> Result<GeneratorPass> {
    let deblurred = nets.deblur_levels(cx, blur)?;
    let mut reblurred = Vec::with_capacity(blur.len());
    let mut cyc_b = Vec::with_capacity(blur.len());
    for (s, &b) in deblurred.iter().zip(blur) {
        let r = nets.g_sb.forward(cx, s.image)?;
        reblurred.push(r);
        cyc_b.push(cycle_objective(cx.tape, r, b)?);
    }
    let fake_blur = sharp.iter().map(|&s| nets.g_sb.forward(cx, s)).collect::<Result<Vec<_>>>()?;
    let restored = nets.deblur_levels(cx, &fake_blur)?;
    let cyc_s = restored
        .iter()
        .zip(sharp)
        .map(|(r, &s)| cycle_objective(cx.tape, r.image, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratorPass { deblurred, reblurred, fake_blur, restored, cyc_b, cyc_s })
}

/// Generator objective to minimize: per scale,
/// `−λ_adv·(log σ D_S(Î) + log σ D_B(G_S→B(S))) + λ_cyc·(cyc_b + cyc_s)`,
/// with the discriminators read from `nets` as constants.
pub fn generator_objective<T: Real>(
    nets: &Networks<T>,
    tape: &mut Tape<T>,
    pass: &GeneratorPass,
    weights: LossWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..pass.cyc_b.len() {
        let cyc = tape.add(pass.cyc_b[i], pass.cyc_s[i])?;
        terms.push(tape.scale(cyc, weights.cyc));
        if weights.adv != 0.0 {
            let (ds, db) = {
                let mut cx = Ctx::frozen(tape, &nets.store);
                (nets.d_s.forward(&mut cx, pass.deblurred[i].image)?, nets.d_b.forward(&mut cx, pass.fake_blur[i])?)
            };
            let gs = gan_objective(tape, None, ds, Side::Generator)?;
            let gb = gan_objective(tape, None, db, Side::Generator)?;
            let adv = tape.add(gs, gb)?;
            terms.push(tape.scale(adv, -weights.adv));
        }
    }
    tape.sum(&terms)
}

/// Discriminator objective to minimize (the negated adversarial value summed
/// over scales) and the per-scale adversarial values `(D_S, D_B)`.
pub fn discriminator_objective<T: Real>(
    nets: &Networks<T>,
    cx: &mut Ctx<T>,
    real_sharp: &[Var],
    fake_sharp: &[Var],
    real_blur: &[Var],
    fake_blur: &[Var],
) -> Result<(Var, Vec<(Var, Var)>)> {
    let mut values = Vec::with_capacity(real_sharp.len());
    let mut terms = Vec::with_capacity(2 * real_sharp.len());
    for i in 0..real_sharp.len() {
        let rs = nets.d_s.forward(cx, real_sharp[i])?;
        let fs = nets.d_s.forward(cx, fake_sharp[i])?;
        let rb = nets.d_b.forward(cx, real_blur[i])?;
        let fb = nets.d_b.forward(cx, fake_blur[i])?;
        let vs = gan_objective(cx.tape, Some(rs), fs, Side::Discriminator)?;
        let vb = gan_objective(cx.tape, Some(rb), fb, Side::Discriminator)?;
        values.push((vs, vb));
        terms.push(vs);
        terms.push(vb);
    }
    let total = cx.tape.sum(&terms)?;
    Ok((cx.tape.neg(total), values))
}

/// History of generated images per (domain, scale), replayed to the
/// discriminators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePool {
    pub capacity: usize,
    /// `slots[domain * n_scales + scale]`, domain 0 = sharp, 1 = blur.
    pub slots: Vec<Vec<Tensor<f32>>>,
}

impl ImagePool {
    pub fn new(capacity: usize, n_scales: usize) -> Self {
        Self { capacity, slots: vec![Vec::new(); 2 * n_scales] }
    }

    /// Swap roughly half of a full pool's entries with the new batch items.
    fn query(&mut self, slot: usize, batch: &Tensor<f32>, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        if self.capacity == 0 {
            return Ok(batch.clone());
        }
        let (n, c, h, w) = batch.dims4()?;
        let stored = &mut self.slots[slot];
        let mut out = Vec::with_capacity(batch.numel());
        for i in 0..n {
            let item = Tensor::new(&[1, c, h, w], batch.item_slice(i).to_vec())?;
            if stored.len() < self.capacity {
                stored.push(item.clone());
                out.extend_from_slice(item.data());
            } else if rng.random::<bool>() {
                let k = rng.random_range(0..self.capacity);
                let old = std::mem::replace(&mut stored[k], item);
                out.extend_from_slice(old.data());
            } else {
                out.extend_from_slice(item.data());
            }
        }
        Tensor::new(&[n, c, h, w], out)
    }
}

const STREAM_BLUR: u64 = 1;
const STREAM_SHARP: u64 = 2;
const STREAM_POOL: u64 = 3;

/// Seed for an independent random stream.
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices of the images in batch `iteration`: sample `k = iteration·b + j`
/// is element `k mod n` of the seeded permutation for epoch `⌊k / n⌋`.
pub fn batch_indices(seed: u64, stream: u64, n_images: usize, batch: usize, iteration: u64) -> Vec<usize> {
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch)
        .map(|j| {
            let k = iteration * batch as u64 + j as u64;
            let epoch = k / n_images as u64;
            if epoch != perm_epoch {
                perm = (0..n_images).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch)));
                perm_epoch = epoch;
            }
            perm[(k % n_images as u64) as usize]
        })
        .collect()
}

/// Position of every random stream; the streams are pure functions of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub iteration: u64,
}

/// Model, optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub nets: Networks<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub pool: ImagePool,
    /// Completed steps.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(config.arch(), config.fusion, config.seed)?;
        let opt_g = Adam::new(config.adam(), &nets.store, nets.generator_params());
        let opt_d = Adam::new(config.adam(), &nets.store, nets.discriminator_params());
        let pool = ImagePool::new(config.image_pool, config.n_scales);
        Ok(Self { config, nets, opt_g, opt_d, pool, iteration: 0 })
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.config.seed, iteration: self.iteration }
    }

    fn pyramid_levels(&self, batch: &ImageBatch, what: &str) -> Result<Vec<Tensor<f32>>> {
        let (_, c, h, w) = batch.dims();
        let m = self.config.image_size;
        if (c, h, w) != (self.config.image_channels, m, m) {
            return Err(Error::Shape(format!(
                "{what} batch is {c}×{h}×{w}, expected {}×{m}×{m}",
                self.config.image_channels
            )));
        }
        Ok(build_pyramid(batch, self.config.n_scales)?.levels().iter().map(|l| l.tensor().clone()).collect())
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, blur: &ImageBatch, sharp: &ImageBatch) -> Result<LossBundle> {
        let b_levels = self.pyramid_levels(blur, "blur")?;
        let s_levels = self.pyramid_levels(sharp, "sharp")?;
        let iteration = self.iteration + 1;
        let weights = self.config.weights();
        let n = self.config.n_scales;

        let mut gt = Tape::new();
        let b_vars: Vec<Var> = b_levels.iter().map(|t| gt.constant(t.clone())).collect();
        let s_vars: Vec<Var> = s_levels.iter().map(|t| gt.constant(t.clone())).collect();
        let pass = generator_pass(&self.nets, &mut Ctx::new(&mut gt, &self.nets.store), &b_vars, &s_vars)?;

        // discriminators see detached (optionally replayed) fakes
        let mut pool_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_POOL, iteration));
        let mut fakes_s = Vec::with_capacity(n);
        let mut fakes_b = Vec::with_capacity(n);
        for i in 0..n {
            fakes_s.push(self.pool.query(i, gt.value(pass.deblurred[i].image), &mut pool_rng)?);
            fakes_b.push(self.pool.query(n + i, gt.value(pass.fake_blur[i]), &mut pool_rng)?);
        }
        let mut dt = Tape::new();
        let (d_loss, d_values) = {
            let mut cx = Ctx::new(&mut dt, &self.nets.store);
            let consts = |cx: &mut Ctx<f32>, ts: &[Tensor<f32>]| ts.iter().map(|t| cx.tape.constant(t.clone())).collect::<Vec<_>>();
            let rs = consts(&mut cx, &s_levels);
            let fs = consts(&mut cx, &fakes_s);
            let rb = consts(&mut cx, &b_levels);
            let fb = consts(&mut cx, &fakes_b);
            discriminator_objective(&self.nets, &mut cx, &rs, &fs, &rb, &fb)?
        };

        let scales: Vec<ScaleLosses> = (0..n)
            .map(|i| ScaleLosses {
                gan_bs: dt.value(d_values[i].0).item() as f64,
                gan_sb: dt.value(d_values[i].1).item() as f64,
                cyc_b: gt.value(pass.cyc_b[i]).item() as f64,
                cyc_s: gt.value(pass.cyc_s[i]).item() as f64,
            })
            .collect();
        for (i, s) in scales.iter().enumerate() {
            if let Some(term) = s.non_finite() {
                return Err(Error::NonFinite { term: term.into(), scale: i + 1, iteration });
            }
        }
        let bundle = LossBundle::new(scales, weights)?;

        let d_grads = dt.backward(d_loss);
        self.opt_d.step(&mut self.nets.store, &d_grads);

        let g_loss = generator_objective(&self.nets, &mut gt, &pass, weights)?;
        if !gt.value(g_loss).item().is_finite() {
            return Err(Error::NonFinite { term: "generator objective".into(), scale: n, iteration });
        }
        let g_grads = gt.backward(g_loss);
        self.opt_g.step(&mut self.nets.store, &g_grads);

        self.iteration = iteration;
        debug!("iteration {iteration}: total {:.6}", bundle.total);
        Ok(bundle)
    }

    /// Restore the finest-scale sharp estimate for any image size; inputs
    /// are edge-padded up to the pyramid's divisibility and cropped back.
    pub fn infer(&self, image: &ImageBatch) -> Result<ImageBatch> {
        infer(&self.nets, self.config.n_scales, image)
    }

    pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
        dir.join(format!("ckpt_{iteration:08}.usaad"))
    }
}

/// Coarse-to-fine restoration with frozen weights; output has the input's shape.
pub fn infer(nets: &Networks<f32>, n_scales: usize, image: &ImageBatch) -> Result<ImageBatch> {
    let (n, c, h, w) = image.dims();
    if c != nets.arch.image_channels {
        return Err(Error::Shape(format!("model expects {} channels, got {c}", nets.arch.image_channels)));
    }
    let div = 4usize << (n_scales.max(1) - 1);
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    let padded = if (ph, pw) == (h, w) { image.clone() } else { edge_pad(image, ph, pw)? };
    let pyramid = build_pyramid(&padded, n_scales)?;
    let states = nets.deblur(pyramid.levels())?;
    let out = states.last().expect("at least one scale").image.clone();
    if (ph, pw) == (h, w) {
        return Ok(out);
    }
    let src = out.tensor().data();
    let mut data = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let row = plane * ph * pw + y * pw;
            data.extend_from_slice(&src[row..row + w]);
        }
    }
    ImageBatch::new(Tensor::new(&[n, c, h, w], data)?)
}

fn edge_pad(image: &ImageBatch, ph: usize, pw: usize) -> Result<ImageBatch> {
    let (n, c, h, w) = image.dims();
    let src = image.tensor().data();
    let mut data = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        for y in 0..ph {
            let row = plane * h * w + y.min(h - 1) * w;
            data.extend((0..pw).map(|x| src[row + x.min(w - 1)]));
        }
    }
    ImageBatch::new(Tensor::new(&[n, c, ph, pw], data)?)
}

/// Result of [`fit`].
#[derive(Debug)]
pub struct FitOutcome {
    pub trainer: Trainer,
    /// Bundles of the iterations run by this call.
    pub history: Vec<LossBundle>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
}

/// Unpaired training data at the configured crop size.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub blur: Vec<ImageBatch>,
    pub sharp: Vec<ImageBatch>,
}

impl Corpus {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let canon = |p: &Path| fs::canonicalize(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
        if canon(&config.blur_dir)? == canon(&config.sharp_dir)? {
            return Err(Error::Data("blur and sharp groups must be different directories".into()));
        }
        let size = u32::try_from(config.image_size).map_err(|_| Error::Config("image_size too large".into()))?;
        let split = |b: ImageBatch| (0..b.len()).map(|i| b.item(i)).collect::<Vec<_>>();
        Ok(Self {
            blur: split(imaging::load_images(&config.blur_dir, config.image_channels, size)?),
            sharp: split(imaging::load_images(&config.sharp_dir, config.image_channels, size)?),
        })
    }

    pub fn batch(&self, config: &TrainConfig, iteration: u64) -> Result<(ImageBatch, ImageBatch)> {
        let pick = |imgs: &[ImageBatch], stream| {
            let idx = batch_indices(config.seed, stream, imgs.len(), config.batch_size, iteration);
            ImageBatch::stack(&idx.iter().map(|&i| imgs[i].clone()).collect::<Vec<_>>())
        };
        Ok((pick(&self.blur, STREAM_BLUR)?, pick(&self.sharp, STREAM_SHARP)?))
    }
}

/// Train from scratch (or from `resume`) up to `config.iterations`, writing
/// checkpoints and the loss CSV under `config.out_dir`.
pub fn fit(config: &TrainConfig, resume: Option<&Path>) -> Result<FitOutcome> {
    config.validate()?;
    let corpus = Corpus::load(config)?;
    fit_with(config, &corpus, resume)
}

/// [`fit`] over an already loaded corpus.
pub fn fit_with(config: &TrainConfig, corpus: &Corpus, resume: Option<&Path>) -> Result<FitOutcome> {
    config.validate()?;
    if corpus.blur.is_empty() || corpus.sharp.is_empty() {
        return Err(Error::Data("both image groups need at least one image".into()));
    }
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let loss_csv = out.join(LOSS_CSV);

    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            if !resumable(&t.config, config) {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            t.config = config.clone();
            let log = LossLog::resume(&loss_csv, t.iteration)?;
            info!("resuming at iteration {}", t.iteration);
            (t, log)
        }
        None => (Trainer::new(config.clone())?, LossLog::create(&loss_csv)?),
    };

    let mut checkpoints = Vec::new();
    if trainer.iteration == 0 {
        let p = Trainer::checkpoint_path(out, 0);
        trainer.save(&p)?;
        checkpoints.push(p);
    }
    let mut history = Vec::new();
    while trainer.iteration < config.iterations {
        let (blur, sharp) = corpus.batch(config, trainer.iteration)?;
        let bundle = trainer.train_step(&blur, &sharp)?;
        log.append(trainer.iteration, &bundle)?;
        if trainer.iteration % config.checkpoint_every == 0 || trainer.iteration == config.iterations {
            let p = Trainer::checkpoint_path(out, trainer.iteration);
            trainer.save(&p)?;
            checkpoints.push(p);
        }
        if trainer.iteration % 10 == 0 {
            info!(
                "iteration {}/{}: total {:.4}, finest cycle {:.4}",
                trainer.iteration,
                config.iterations,
                bundle.total,
                bundle.finest().cycle()
            );
        }
        history.push(bundle);
    }
    Ok(FitOutcome { trainer, history, checkpoints, loss_csv })
}

/// Settings that may change between a checkpoint and its continuation.
fn resumable(saved: &TrainConfig, now: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        iterations: 0,
        checkpoint_every: 1,
        out_dir: PathBuf::new(),
        blur_dir: PathBuf::new(),
        sharp_dir: PathBuf::new(),
        ..c.clone()
    };
    strip(saved) == strip(now)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_str_any(&c.to_json_line()).unwrap(), c);
        let t = TrainConfig::from_str_any("n_scales = 2\nfusion = \"add\"\nimage_size = 128\n").unwrap();
        assert_eq!((t.n_scales, t.fusion, t.image_size, t.lambda_cyc), (2, FusionMode::Add, 128, 10.0));
        assert!(TrainConfig::from_str_any("nscales = 2").is_err());
    }

    #[test]
    fn validation_errors() {
        let bad = [
            TrainConfig { n_scales: 0, ..Default::default() },
            TrainConfig { image_size: 100, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { lambda_cyc: -1.0, ..Default::default() },
            TrainConfig { image_size: 64, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        TrainConfig { image_size: 64, disc_layers: 2, ..Default::default() }.validate().unwrap();
    }

    #[test]
    fn presets_match_the_ablation_rows() {
        let want = [
            (1, FusionMode::None),
            (2, FusionMode::None),
            (3, FusionMode::None),
            (3, FusionMode::Add),
            (3, FusionMode::Concat),
            (3, FusionMode::ChannelAttention),
            (3, FusionMode::SpatialAttention),
            (3, FusionMode::Saam),
        ];
        for (p, w) in Preset::ALL.iter().zip(want) {
            assert_eq!((p.scales(), p.fusion()), w);
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), *p);
        }
        let err = "Net9".parse::<Preset>().unwrap_err().to_string();
        assert!(err.contains("Net1") && err.contains("Net8"), "{err}");
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..3).flat_map(|it| batch_indices(4, 1, 6, 2, it)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert_eq!(batch_indices(4, 1, 6, 2, 5), batch_indices(4, 1, 6, 2, 5));
        assert_ne!(
            (0..3).flat_map(|it| batch_indices(4, 1, 6, 2, it)).collect::<Vec<_>>(),
            (0..3).flat_map(|it| batch_indices(4, 2, 6, 2, it)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pool_replays_history() {
        let mut pool = ImagePool::new(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = |v: f32| Tensor::full(&[1, 1, 2, 2], v);
        assert_eq!(pool.query(0, &img(1.0), &mut rng).unwrap(), img(1.0));
        assert_eq!(pool.query(0, &img(2.0), &mut rng).unwrap(), img(2.0));
        let outs: Vec<f32> = (3..40).map(|v| pool.query(0, &img(v as f32), &mut rng).unwrap().data()[0]).collect();
        assert!(outs.iter().enumerate().any(|(i, &o)| o != (i + 3) as f32));
        assert_eq!(pool.slots[0].len(), 2);
        let mut off = ImagePool::new(0, 1);
        assert_eq!(off.query(0, &img(5.0), &mut rng).unwrap(), img(5.0));
    }

    #[test]
    fn edge_pad_then_crop_is_identity_path() {
        let img = ImageBatch::new(Tensor::from_fn(&[1, 1, 3, 5], |i| i as f32 / 20.0)).unwrap();
        let p = edge_pad(&img, 8, 8).unwrap();
        assert_eq!(p.dims(), (1, 1, 8, 8));
        assert_eq!(p.tensor().data()[7], img.tensor().data()[4]);
        assert_eq!(p.tensor().data()[63], img.tensor().data()[14]);
    }
}

//! Networks and the two-stage training driver.
//!
//! Stage 1 fits the guidance network (AG-Net) to reconstruct aligned pairs. Stage 2
//! trains the registration network against the weighted loss while the AG-Net,
//! stored in the same parameter store under `agnet.`, stays frozen.

pub mod checkpoint;
pub mod optim;

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resolve, PairRecord};
use crate::error::{Error, Result};
use crate::extractors::{split_mi, Mdfe, Mife};
use crate::losses::{self, LossComponents, LossWeights};
use crate::metrics::{evaluate_images, DiceConvention, PairMetrics};
use crate::raster::{self, grayscale, gray_tensor, LabelMap, Mask, Raster};
use crate::registration::{stn_warp, warp::warp_nearest, DeformationField, M3rm, UNetConfig};
use crate::sparse_coding::{DictionaryConfig, StackConfig};
use crate::ssm::{MambaConfig, MambaMode, ScanPath};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{ParamStore, Tensor};
pub use checkpoint::Checkpoint;
use optim::{poly_lr, Adam};

pub const AGNET_PREFIX: &str = "agnet.";
pub const NET_PREFIX: &str = "net.";

/// Architecture sizes shared by both networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Image channels seen by the networks (inputs are reduced to their channel mean when 1).
    pub channels: usize,
    pub code_channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub tied_dictionary: bool,
    pub state: usize,
    pub scan_path: ScanPath,
    pub unet_depth: usize,
    pub unet_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 1,
            code_channels: 32,
            blocks: 4,
            kernel: 3,
            tied_dictionary: false,
            state: 8,
            scan_path: ScanPath::Sequential,
            unet_depth: 3,
            unet_base: 16,
        }
    }
}

impl ModelConfig {
    fn stack(&self, mode: MambaMode) -> StackConfig {
        StackConfig {
            code_channels: self.code_channels,
            blocks: self.blocks,
            dictionary: DictionaryConfig { kernel: self.kernel, tied: self.tied_dictionary },
            mamba: self.mamba(mode),
        }
    }

    fn mamba(&self, mode: MambaMode) -> MambaConfig {
        MambaConfig { mode, state: self.state, scan_path: self.scan_path }
    }

    pub fn check(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.code_channels == 0 || self.state == 0 || self.unet_base == 0 || self.unet_depth == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Which sub-networks use Mamba layers and whether the similarity loss is ROI-weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub mdfe: MambaMode,
    pub mife: MambaMode,
    pub m3rm: MambaMode,
    pub roi_mask: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::preset(AblationPreset::B6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationPreset {
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b1" => Ok(AblationPreset::B1),
            "b2" => Ok(AblationPreset::B2),
            "b3" => Ok(AblationPreset::B3),
            "b4" => Ok(AblationPreset::B4),
            "b5" => Ok(AblationPreset::B5),
            "b6" => Ok(AblationPreset::B6),
            other => Err(Error::Config(format!("unknown ablation preset {other:?} (b1..b6)"))),
        }
    }
}

impl Ablation {
    pub fn preset(p: AblationPreset) -> Self {
        use MambaMode::{Bi, None, Uni};
        let (mdfe, mife, m3rm, roi_mask) = match p {
            AblationPreset::B1 => (None, None, None, false),
            AblationPreset::B2 => (Bi, None, None, false),
            AblationPreset::B3 => (Bi, Bi, None, false),
            AblationPreset::B4 => (Uni, Uni, Uni, false),
            AblationPreset::B5 => (Bi, Bi, Bi, false),
            AblationPreset::B6 => (Bi, Bi, Bi, true),
        };
        Ablation { mdfe, mife, m3rm, roi_mask }
    }

    pub fn uses_mamba(&self) -> bool {
        [self.mdfe, self.mife, self.m3rm].iter().any(|m| *m != MambaMode::None)
    }
}

/// Everything needed to rebuild a network's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetLayout {
    Agnet { model: ModelConfig },
    Mambareg { model: ModelConfig, agnet: ModelConfig, ablation: Ablation },
}

/// Guidance network: two MD extractors and one MI extractor fed with both MI maps.
#[derive(Clone, Debug)]
pub struct AgNet {
    pub mdfe_x: Mdfe,
    pub mdfe_y: Mdfe,
    pub mife: Mife,
}

#[derive(Clone, Copy, Debug)]
pub struct AgOutputs {
    pub md_x: Var,
    pub md_y: Var,
    pub mi_x: Var,
    pub mi_y: Var,
    pub ix_hat: Var,
    pub iy_hat: Var,
}

impl AgNet {
    pub fn init(store: &mut ParamStore, m: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        m.check()?;
        let stack = m.stack(MambaMode::Bi);
        let c = m.channels;
        Ok(AgNet {
            mdfe_x: Mdfe::init(store, "agnet.mdfe_x", c, &stack, rng)?,
            mdfe_y: Mdfe::init(store, "agnet.mdfe_y", c, &stack, rng)?,
            mife: Mife::init(store, "agnet.mife", 2 * c, c, &stack, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ix: Var, iy: Var, train: bool) -> Result<AgOutputs> {
        let md_x = self.mdfe_x.forward(tape, store, ix, train)?;
        let md_y = self.mdfe_y.forward(tape, store, iy, train)?;
        let mi_x = split_mi(tape, ix, md_x)?;
        let mi_y = split_mi(tape, iy, md_y)?;
        let both = tape.concat_channels(mi_x, mi_y)?;
        let r = self.mife.forward(tape, store, both, train)?;
        let ix_hat = tape.add(r.r_x, md_x)?;
        let iy_hat = tape.add(r.r_y, md_y)?;
        Ok(AgOutputs { md_x, md_y, mi_x, mi_y, ix_hat, iy_hat })
    }
}

/// The registration network.
#[derive(Clone, Debug)]
pub struct MambaReg {
    pub mdfe_x: Mdfe,
    pub mdfe_y: Mdfe,
    pub mife: Mife,
    pub m3rm: M3rm,
    pub ablation: Ablation,
}

#[derive(Clone, Copy, Debug)]
pub struct RegOutputs {
    pub md_x: Var,
    pub md_y: Var,
    pub mi_x: Var,
    pub mi_y: Var,
    pub r_x: Var,
    pub r_y: Var,
    pub phi: Var,
    pub x_warp: Var,
    pub ix_hat: Var,
    pub iy_hat: Var,
}

impl MambaReg {
    pub fn init(store: &mut ParamStore, m: &ModelConfig, ablation: Ablation, rng: &mut ChaCha8Rng) -> Result<Self> {
        m.check()?;
        let c = m.channels;
        let unet = UNetConfig { depth: m.unet_depth, base_channels: m.unet_base, bottleneck: m.mamba(ablation.m3rm) };
        Ok(MambaReg {
            mdfe_x: Mdfe::init(store, "net.mdfe_x", c, &m.stack(ablation.mdfe), rng)?,
            mdfe_y: Mdfe::init(store, "net.mdfe_y", c, &m.stack(ablation.mdfe), rng)?,
            mife: Mife::init(store, "net.mife", c, c, &m.stack(ablation.mife), rng)?,
            m3rm: M3rm::init(store, "net.m3rm", 2 * c, unet, rng)?,
            ablation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ix: Var, iy: Var, train: bool) -> Result<RegOutputs> {
        let md_x = self.mdfe_x.forward(tape, store, ix, train)?;
        let md_y = self.mdfe_y.forward(tape, store, iy, train)?;
        let mi_x = split_mi(tape, ix, md_x)?;
        let mi_y = split_mi(tape, iy, md_y)?;
        let phi = self.m3rm.forward(tape, store, mi_x, mi_y, train)?;
        let r = self.mife.forward(tape, store, mi_x, train)?;
        let x_warp = tape.warp(ix, phi)?;
        let ix_hat = tape.add(r.r_x, md_x)?;
        let r_moved = tape.warp(r.r_x, phi)?;
        let iy_hat = tape.add(r_moved, md_y)?;
        Ok(RegOutputs { md_x, md_y, mi_x, mi_y, r_x: r.r_x, r_y: r.r_y, phi, x_warp, ix_hat, iy_hat })
    }

    /// Field only, without the reconstruction branch.
    pub fn predict_field(&self, tape: &mut Tape, store: &ParamStore, ix: Var, iy: Var) -> Result<Var> {
        let md_x = self.mdfe_x.forward(tape, store, ix, false)?;
        let md_y = self.mdfe_y.forward(tape, store, iy, false)?;
        let mi_x = split_mi(tape, ix, md_x)?;
        let mi_y = split_mi(tape, iy, md_y)?;
        self.m3rm.forward(tape, store, mi_x, mi_y, false)
    }
}

/// A training pair: both images are `[1, C, H, W]` in the network's channel count.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub moving: Tensor,
    pub fixed: Tensor,
    pub masks: Option<(Mask, Mask)>,
}

/// Reduces a `[C, H, W]` image to `[1, channels, H, W]`.
pub fn network_input(img: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if channels == 1 {
        gray_tensor(&grayscale(img)?).reshape(&[1, 1, h, w])
    } else if c == channels {
        img.clone().reshape(&[1, c, h, w])
    } else if c == 1 {
        let plane = img.data();
        let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
        Tensor::from_vec(&[1, channels, h, w], data)
    } else {
        Err(Error::Shape(format!("{c}-channel image for a {channels}-channel network")))
    }
}

/// Loads training pairs. Label paths are never read here.
pub fn load_train_pairs(root: &Path, records: &[PairRecord], channels: usize, with_masks: bool) -> Result<Vec<TrainPair>> {
    records
        .iter()
        .map(|r| {
            let moving = network_input(&raster::load_image(&resolve(root, &r.moving_path))?, channels)?;
            let fixed = network_input(&raster::load_image(&resolve(root, &r.fixed_path))?, channels)?;
            if moving.shape() != fixed.shape() {
                return Err(Error::Shape(format!("pair {}: {:?} vs {:?}", r.id(), moving.shape(), fixed.shape())));
            }
            let masks = if with_masks {
                let load = |p: &str| -> Result<Mask> {
                    let path = resolve(root, p);
                    if !path.is_file() {
                        return Err(Error::Config(format!("ROI mask {} is missing; run gen-masks first", path.display())));
                    }
                    raster::load_mask(&path)
                };
                Some((load(&r.moving_mask_path)?, load(&r.fixed_mask_path)?))
            } else {
                None
            };
            Ok(TrainPair { moving, fixed, masks })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 50, lr: 1e-3, lr_power: 0.9, batch_size: 8, seed: 3407, model: ModelConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-4,
            lr_power: 0.9,
            batch_size: 8,
            seed: 3407,
            image_size: 64,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            model: ModelConfig::default(),
        }
    }
}

fn check_schedule(epochs: usize, lr: f64, batch: usize) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(())
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        check_schedule(self.epochs, self.lr, self.batch_size)?;
        self.weights.check()?;
        self.model.check()
    }
}

impl PretrainConfig {
    pub fn check(&self) -> Result<()> {
        check_schedule(self.epochs, self.lr, self.batch_size)?;
        self.model.check()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub parts: Option<LossComponents>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!("epoch={} loss={:.10e} lr={:.6e}", self.epoch, self.loss, self.lr);
        if let Some(p) = self.parts {
            s.push_str(&format!(
                " sim={:.10e} smooth={:.10e} guidance={:.10e} recon={:.10e}",
                p.sim, p.smooth, p.guidance, p.recon
            ));
        }
        s
    }
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn grad_buffers(store: &ParamStore) -> Vec<Option<Tensor>> {
    vec![None; store.len()]
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} in epoch {}", epoch + 1)))
    }
}

/// Stage 1 on pixel-aligned pairs. Returns the checkpoint and the per-epoch log.
pub fn pretrain_agnet(
    pairs: &[TrainPair],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.check()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no aligned pairs to pre-train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let net = AgNet::init(&mut store, &cfg.model, &mut rng)?;
    let mut opt = Adam::new(&store, |_| true);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_power);
        let order = epoch_order(pairs.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = grad_buffers(&store);
            for &i in batch {
                let mut tape = Tape::new();
                let ix = tape.constant(pairs[i].moving.clone());
                let iy = tape.constant(pairs[i].fixed.clone());
                let out = net.forward(&mut tape, &store, ix, iy, true)?;
                let loss = losses::agnet(&mut tape, out.ix_hat, ix, out.iy_hat, iy)?;
                total += tape.scalar(loss);
                tape.backward(loss).accumulate_into(&mut grads, 1.0 / batch.len() as f64);
            }
            opt.step(&mut store, &grads, lr);
        }
        let log = EpochLog { epoch: epoch + 1, loss: total / pairs.len() as f64, lr, parts: None };
        check_finite(log.loss, epoch)?;
        on_epoch(&log);
        history.push(log);
    }
    let layout = NetLayout::Agnet { model: cfg.model };
    let ckpt = Checkpoint {
        config_json: serde_json::to_string(&layout).expect("serialisable"),
        epoch: cfg.epochs as u64,
        metrics_json: serde_json::json!({ "final_loss": history.last().map(|h| h.loss) }).to_string(),
        params: store,
        optimizer: Some(opt.state),
    };
    Ok((ckpt, history))
}

pub fn parse_layout(ckpt: &Checkpoint) -> Result<NetLayout> {
    serde_json::from_str(&ckpt.config_json).map_err(|e| Error::format("checkpoint config", e.to_string()))
}

/// Rebuilds the AG-Net from a Stage 1 checkpoint (or the AG-Net part of a Stage 2 one).
pub fn load_agnet(ckpt: &Checkpoint) -> Result<(ParamStore, AgNet, ModelConfig)> {
    let model = match parse_layout(ckpt)? {
        NetLayout::Agnet { model } => model,
        NetLayout::Mambareg { agnet, .. } => agnet,
    };
    let mut store = ParamStore::new();
    let net = AgNet::init(&mut store, &model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut subset = ParamStore::new();
    for (name, t) in ckpt.params.iter().filter(|(n, _)| n.starts_with(AGNET_PREFIX)) {
        subset.add(name, t.clone());
    }
    if subset.len() != store.len() {
        return Err(Error::Config(format!("checkpoint holds {} AG-Net tensors, expected {}", subset.len(), store.len())));
    }
    store.load_from(&subset)?;
    Ok((store, net, model))
}

/// Result of Stage 2.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub agnet_digest_before: String,
    pub agnet_digest_after: String,
    /// Norm of every gradient that reached an AG-Net parameter during Stage 2.
    pub agnet_grad_norm: f64,
}

/// Loss graph of one Stage 2 sample.
pub fn stage2_loss(
    tape: &mut Tape,
    store: &ParamStore,
    net: &MambaReg,
    pair: &TrainPair,
    ag_mi: &(Tensor, Tensor),
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let ix = tape.constant(pair.moving.clone());
    let iy = tape.constant(pair.fixed.clone());
    let out = net.forward(tape, store, ix, iy, true)?;
    let mask = match (&pair.masks, net.ablation.roi_mask) {
        (Some((mx, my)), true) => Some(union_mask(mx, my, tape.value(out.phi))?),
        (None, true) => return Err(Error::Config("ROI-weighted loss needs masks for every pair".into())),
        _ => None,
    };
    let sim = losses::sim(tape, out.x_warp, iy, mask.as_ref())?;
    let smooth = tape.smooth(out.phi)?;
    let gx = tape.constant(ag_mi.0.clone());
    let gy = tape.constant(ag_mi.1.clone());
    let guidance = losses::guidance(tape, (out.mi_x, out.mi_y), (gx, gy))?;
    let recon = losses::recon(tape, out.ix_hat, ix, out.iy_hat, iy)?;
    let parts = LossComponents {
        sim: tape.scalar(sim),
        smooth: tape.scalar(smooth),
        guidance: tape.scalar(guidance),
        recon: tape.scalar(recon),
    };
    let total = losses::total(tape, [sim, smooth, guidance, recon], w)?;
    Ok((total, parts))
}

/// `max(warp_nearest(mask_x, phi), mask_y)` as a `[1, 1, H, W]` tensor; `phi` is treated as a constant.
pub fn union_mask(mask_x: &Mask, mask_y: &Mask, phi: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = phi.dims4()?;
    if mask_x.h != h || mask_x.w != w || !mask_x.same_size(mask_y) {
        return Err(Error::Shape(format!("masks {}x{} / {}x{} for a {h}x{w} field", mask_x.h, mask_x.w, mask_y.h, mask_y.w)));
    }
    let moved = warp_nearest(&mask_x.data, &phi.data()[..2 * h * w], h, w);
    let data = moved.iter().zip(&mask_y.data).map(|(a, b)| f64::from((*a).max(*b))).collect();
    Tensor::from_vec(&[1, 1, h, w], data)
}

/// AG-Net MI features of every pair, computed once with frozen parameters.
fn guidance_targets(store: &ParamStore, ag: &AgNet, pairs: &[TrainPair]) -> Result<Vec<(Tensor, Tensor)>> {
    pairs
        .iter()
        .map(|p| {
            let mut tape = Tape::new();
            let ix = tape.constant(p.moving.clone());
            let iy = tape.constant(p.fixed.clone());
            let out = ag.forward(&mut tape, store, ix, iy, false)?;
            Ok((tape.value(out.mi_x).clone(), tape.value(out.mi_y).clone()))
        })
        .collect()
}

fn agnet_grad_sq(grads: &Gradients, store: &ParamStore) -> f64 {
    grads
        .params()
        .filter(|(id, _)| store.name(*id).starts_with(AGNET_PREFIX))
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Stage 2. `agnet` may be a Stage 1 checkpoint or any checkpoint holding AG-Net parameters.
pub fn train_mambareg(
    pairs: &[TrainPair],
    agnet: &Checkpoint,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.check()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    if cfg.ablation.roi_mask && pairs.iter().any(|p| p.masks.is_none()) {
        return Err(Error::Config("ROI-weighted loss needs masks for every pair".into()));
    }
    let (ag_store, ag, ag_model) = load_agnet(agnet)?;
    if ag_model.channels != cfg.model.channels {
        return Err(Error::Config(format!(
            "AG-Net works on {} channels, the registration network on {}",
            ag_model.channels, cfg.model.channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ag_store;
    let net = MambaReg::init(&mut store, &cfg.model, cfg.ablation, &mut rng)?;
    let digest_before = store.digest_prefix(AGNET_PREFIX);
    let targets = guidance_targets(&store, &ag, pairs)?;
    let mut opt = Adam::new(&store, |n| n.starts_with(NET_PREFIX));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut ag_sq = 0.0;
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_power);
        let order = epoch_order(pairs.len(), &mut rng);
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = grad_buffers(&store);
            for &i in batch {
                let mut tape = Tape::new();
                let (loss, parts) = stage2_loss(&mut tape, &store, &net, &pairs[i], &targets[i], &cfg.weights)?;
                total += tape.scalar(loss);
                sum.sim += parts.sim;
                sum.smooth += parts.smooth;
                sum.guidance += parts.guidance;
                sum.recon += parts.recon;
                let g = tape.backward(loss);
                ag_sq += agnet_grad_sq(&g, &store);
                g.accumulate_into(&mut grads, 1.0 / batch.len() as f64);
            }
            opt.step(&mut store, &grads, lr);
        }
        let n = pairs.len() as f64;
        let parts = LossComponents { sim: sum.sim / n, smooth: sum.smooth / n, guidance: sum.guidance / n, recon: sum.recon / n };
        let log = EpochLog { epoch: epoch + 1, loss: total / n, lr, parts: Some(parts) };
        check_finite(log.loss, epoch)?;
        on_epoch(&log);
        history.push(log);
    }
    let digest_after = store.digest_prefix(AGNET_PREFIX);
    let layout = NetLayout::Mambareg { model: cfg.model, agnet: ag_model, ablation: cfg.ablation };
    let checkpoint = Checkpoint {
        config_json: serde_json::to_string(&layout).expect("serialisable"),
        epoch: cfg.epochs as u64,
        metrics_json: serde_json::json!({
            "final_loss": history.last().map(|h| h.loss),
            "agnet_digest": digest_after,
        })
        .to_string(),
        params: store,
        optimizer: Some(opt.state),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        agnet_digest_before: digest_before,
        agnet_digest_after: digest_after,
        agnet_grad_norm: ag_sq.sqrt(),
    })
}

/// Stage 2 checkpoint holding the network exactly as `train_mambareg` initialises it.
pub fn untrained_checkpoint(agnet: &Checkpoint, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.check()?;
    let (mut store, _, ag_model) = load_agnet(agnet)?;
    MambaReg::init(&mut store, &cfg.model, cfg.ablation, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let layout = NetLayout::Mambareg { model: cfg.model, agnet: ag_model, ablation: cfg.ablation };
    Ok(Checkpoint {
        config_json: serde_json::to_string(&layout).expect("serialisable"),
        epoch: 0,
        metrics_json: "{}".into(),
        params: store,
        optimizer: None,
    })
}

/// Inference wrapper around a Stage 2 checkpoint.
pub struct Registrar {
    pub store: ParamStore,
    pub net: MambaReg,
    pub model: ModelConfig,
}

impl Registrar {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let NetLayout::Mambareg { model, agnet, ablation } = parse_layout(ckpt)? else {
            return Err(Error::Config("checkpoint holds an AG-Net, not a registration network".into()));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        AgNet::init(&mut store, &agnet, &mut rng)?;
        let net = MambaReg::init(&mut store, &model, ablation, &mut rng)?;
        if ckpt.params.len() != store.len() {
            return Err(Error::Config(format!("checkpoint holds {} tensors, expected {}", ckpt.params.len(), store.len())));
        }
        store.load_from(&ckpt.params)?;
        Ok(Registrar { store, net, model })
    }

    /// Field registering `i_x` onto `i_y` (both `[C, H, W]`) and `i_x` warped by it.
    pub fn register(&self, i_x: &Tensor, i_y: &Tensor) -> Result<(DeformationField, Tensor)> {
        let (_, h, w) = i_x.dims3()?;
        let (_, hy, wy) = i_y.dims3()?;
        if (h, w) != (hy, wy) {
            return Err(Error::Shape(format!("moving {h}x{w} vs fixed {hy}x{wy}")));
        }
        let mut tape = Tape::new();
        let ix = tape.constant(network_input(i_x, self.model.channels)?);
        let iy = tape.constant(network_input(i_y, self.model.channels)?);
        let phi = self.net.predict_field(&mut tape, &self.store, ix, iy)?;
        let field = DeformationField::new(tape.value(phi).clone().reshape(&[2, h, w])?)?;
        if !field.phi.is_finite() {
            return Err(Error::Numeric("predicted field is not finite".into()));
        }
        let warped = stn_warp(i_x, &field)?;
        Ok((field, warped))
    }
}

pub fn infer_register(i_x: &Tensor, i_y: &Tensor, ckpt: &Checkpoint) -> Result<(DeformationField, Tensor)> {
    Registrar::from_checkpoint(ckpt)?.register(i_x, i_y)
}

/// Registers one pair and scores it: Dice of warped moving labels against fixed labels,
/// image metrics between the warped moving image and the fixed image (channel means).
pub fn evaluate_pair(root: &Path, record: &PairRecord, reg: &Registrar, convention: DiceConvention) -> Result<PairMetrics> {
    let i_x = raster::load_image(&resolve(root, &record.moving_path))?;
    let i_y = raster::load_image(&resolve(root, &record.fixed_path))?;
    let (field, warped) = reg.register(&i_x, &i_y)?;
    let labels = match (&record.moving_label_path, &record.fixed_label_path) {
        (Some(m), Some(f)) => {
            let lm = raster::load_labels(&resolve(root, m))?;
            let lf = raster::load_labels(&resolve(root, f))?;
            Some((warp_labels(&lm, &field)?, lf))
        }
        _ => None,
    };
    evaluate_images(
        &record.id(),
        &grayscale(&warped)?,
        &grayscale(&i_y)?,
        labels.as_ref().map(|(a, b)| (a, b)),
        convention,
    )
}

pub fn warp_labels(labels: &LabelMap, field: &DeformationField) -> Result<LabelMap> {
    if labels.h != field.height() || labels.w != field.width() {
        return Err(Error::Shape(format!("{}x{} labels for a {}x{} field", labels.h, labels.w, field.height(), field.width())));
    }
    Raster::from_vec(labels.h, labels.w, warp_nearest(&labels.data, field.phi.data(), labels.h, labels.w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_ablation_axes() {
        let b1 = Ablation::preset(AblationPreset::B1);
        assert!(!b1.uses_mamba() && !b1.roi_mask);
        let b4 = Ablation::preset(AblationPreset::B4);
        assert_eq!((b4.mdfe, b4.mife, b4.m3rm), (MambaMode::Uni, MambaMode::Uni, MambaMode::Uni));
        assert!(Ablation::preset(AblationPreset::B6).roi_mask);
        assert!(!Ablation::preset(AblationPreset::B5).roi_mask);
        assert_eq!("B3".parse::<AblationPreset>().unwrap(), AblationPreset::B3);
        assert!("b7".parse::<AblationPreset>().is_err());
    }

    #[test]
    fn layout_round_trips_through_json() {
        let s = NetLayout::Mambareg { model: ModelConfig::default(), agnet: ModelConfig::default(), ablation: Ablation::default() };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NetLayout>(&j).unwrap(), s);
    }

    #[test]
    fn union_mask_with_zero_field() {
        let mx = Raster::from_vec(2, 2, vec![1u8, 0, 0, 0]).unwrap();
        let my = Raster::from_vec(2, 2, vec![0u8, 0, 0, 1]).unwrap();
        let m = union_mask(&mx, &my, &Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_schedules_are_config_errors() {
        let c = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(c.check(), Err(Error::Config(_))));
        let c = TrainConfig { lr: 0.0, ..Default::default() };
        assert!(matches!(c.check(), Err(Error::Config(_))));
    }

    #[test]
    fn network_input_channel_handling() {
        let rgb = Tensor::from_vec(&[3, 1, 1], vec![0.3, 0.6, 0.9]).unwrap();
        let g = network_input(&rgb, 1).unwrap();
        assert_eq!(g.shape(), &[1, 1, 1, 1]);
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
        let gray = Tensor::full(&[1, 1, 1], 0.5);
        assert_eq!(network_input(&gray, 3).unwrap().shape(), &[1, 3, 1, 1]);
    }
}

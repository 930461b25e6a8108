//! Subcommand implementations.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use mambareg::config::RunConfig;
use mambareg::data::{
    crop_by_latest_labels, frame_paths, make_splits, read_manifest, resolve, select_pairs, synth_pair, write_manifest,
    CropOutcome, PairRecord, SynthParams,
};
use mambareg::metrics::{MetricReport, PairMetrics};
use mambareg::raster;
use mambareg::roi_mask::{gen_roi_mask, MaskParams};
use mambareg::training::{
    evaluate_pair, load_train_pairs, pretrain_agnet, train_mambareg, Ablation, Checkpoint, Registrar,
};
use mambareg::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::panel::write_panel;
use crate::run::RunDir;
use crate::{Cli, Command};

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const ALIGNED_MANIFEST: &str = "aligned.tsv";
pub const AGNET_CKPT: &str = "agnet.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.tsv";

/// Exit status of `evaluate` when a metric is NaN.
const NAN_EXIT: u8 = 2;

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let seed = cli.global.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(d) = &cli.global.device {
        cfg.device = d.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().with_context(|| format!("--{flag} is required (or set it under [paths] in the config)"))
}

/// Folds command-line flags into the config so the written config.toml reproduces the run.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { train_pairs, test_pairs, size, magnitude } => {
            set(&mut cfg.synth.train_pairs, *train_pairs);
            set(&mut cfg.synth.test_pairs, *test_pairs);
            set(&mut cfg.synth.params.size, *size);
            set(&mut cfg.synth.params.magnitude, *magnitude);
        }
        Command::BuildDataset { src, train_pairs, test_pairs } => {
            set_opt(&mut cfg.paths.src, src.clone());
            set(&mut cfg.dataset.train_pairs, *train_pairs);
            set(&mut cfg.dataset.test_pairs, *test_pairs);
        }
        Command::GenMasks { data, manifest } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.manifest, manifest.clone());
        }
        Command::Pretrain { data, manifest, epochs, lr } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.manifest, manifest.clone());
            set(&mut cfg.pretrain.epochs, *epochs);
            set(&mut cfg.pretrain.lr, *lr);
        }
        Command::Train { data, manifest, agnet, ablation, epochs, lr } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.manifest, manifest.clone());
            set_opt(&mut cfg.paths.agnet, agnet.clone());
            set(&mut cfg.train.ablation, ablation.map(Ablation::preset));
            set(&mut cfg.train.epochs, *epochs);
            set(&mut cfg.train.lr, *lr);
        }
        Command::Register { checkpoint, moving, fixed } => {
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set_opt(&mut cfg.paths.moving, moving.clone());
            set_opt(&mut cfg.paths.fixed, fixed.clone());
        }
        Command::Evaluate { data, manifest, checkpoint, dice_convention } => {
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.manifest, manifest.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set(&mut cfg.evaluate.dice_convention, *dice_convention);
        }
    }
    cfg.check()?;
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve_config(&cli)?;
    let out = cli.global.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let exclusive = matches!(cli.command, Command::Synth { .. } | Command::BuildDataset { .. });
    let mut run = RunDir::create(&out, &cfg, exclusive, cli.global.force)?;
    run.line(&format!("command={} seed={}", cli.command.name(), cfg.seed))?;
    match cli.command {
        Command::Synth { .. } => synth(&cfg, &mut run),
        Command::BuildDataset { .. } => build_dataset(&cfg, &mut run),
        Command::GenMasks { .. } => gen_masks(&cfg, &mut run),
        Command::Pretrain { .. } => pretrain(&cfg, &mut run),
        Command::Train { .. } => train(&cfg, &mut run),
        Command::Register { .. } => register(&cfg, &mut run),
        Command::Evaluate { .. } => evaluate(&cfg, &mut run),
    }
}

fn write_mask(root: &Path, rel: &str, img: &mambareg::Tensor, params: &MaskParams) -> Result<()> {
    let mask = gen_roi_mask(img, params).with_context(|| format!("mask for {rel}"))?;
    raster::save_mask(&resolve(root, rel), &mask)?;
    Ok(())
}

fn synth(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let root = run.dir.clone();
    let s = &cfg.synth;
    let aligned = SynthParams { magnitude: 0.0, ..s.params };
    let splits = [
        ("train", s.train_pairs, s.params, TRAIN_MANIFEST),
        ("test", s.test_pairs, s.params, TEST_MANIFEST),
        ("aligned", s.train_pairs, aligned, ALIGNED_MANIFEST),
    ];
    for (stream, (split, n, params, manifest)) in splits.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream as u64);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let pair = synth_pair(&params, &mut rng)?;
            let plant = format!("{split}{i:04}");
            let m = frame_paths(&plant, "rgb", "t0");
            let f = frame_paths(&plant, "ir", "t0");
            raster::save_image(&resolve(&root, &m.image), &pair.moving)?;
            raster::save_image(&resolve(&root, &f.image), &pair.fixed)?;
            write_mask(&root, &m.mask, &pair.moving, &cfg.masks.moving)?;
            write_mask(&root, &f.mask, &pair.fixed, &cfg.masks.fixed)?;
            let labeled = split == "test";
            if labeled {
                raster::save_labels(&resolve(&root, &m.label), &pair.moving_labels)?;
                raster::save_labels(&resolve(&root, &f.label), &pair.fixed_labels)?;
            }
            records.push(PairRecord {
                moving_path: m.image,
                fixed_path: f.image,
                moving_label_path: labeled.then_some(m.label),
                fixed_label_path: labeled.then_some(f.label),
                moving_mask_path: m.mask,
                fixed_mask_path: f.mask,
                plant_id: plant,
                t_moving: "t0".into(),
                t_fixed: "t0".into(),
            });
        }
        write_manifest(&root.join(manifest), &records)?;
        run.line(&format!("split={split} pairs={n} manifest={manifest}"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn mask_records(root: &Path, records: &[PairRecord], cfg: &RunConfig, done: &mut BTreeSet<String>) -> Result<usize> {
    let mut written = 0;
    for r in records {
        for (img, mask, params) in
            [(&r.moving_path, &r.moving_mask_path, &cfg.masks.moving), (&r.fixed_path, &r.fixed_mask_path, &cfg.masks.fixed)]
        {
            if done.insert(mask.clone()) {
                let image = raster::load_image(&resolve(root, img))?;
                write_mask(root, mask, &image, params)?;
                written += 1;
            }
        }
    }
    Ok(written)
}

fn build_dataset(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let src = required(&cfg.paths.src, "src")?;
    let root = run.dir.clone();
    let mut plants: Vec<PathBuf> = std::fs::read_dir(src)
        .with_context(|| format!("reading {}", src.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    plants.sort();
    for p in &plants {
        let name = p.file_name().and_then(|s| s.to_str()).context("plant directory name is not UTF-8")?;
        match crop_by_latest_labels(p, &root.join(name), &cfg.dataset.crop)? {
            CropOutcome::Cropped { frames } => run.line(&format!("plant={name} cropped_frames={frames}"))?,
            CropOutcome::Skipped { reason } => run.line(&format!("plant={name} skipped reason={reason:?}"))?,
        }
    }
    let records = select_pairs(&root, &cfg.dataset.pairs)?;
    let (train, test) = make_splits(&records, cfg.dataset.train_pairs, cfg.dataset.test_pairs, cfg.seed);
    write_manifest(&root.join(TRAIN_MANIFEST), &train)?;
    write_manifest(&root.join(TEST_MANIFEST), &test)?;
    let masks = mask_records(&root, &records, cfg, &mut BTreeSet::new())?;
    run.line(&format!("candidates={} train={} test={} masks={masks}", records.len(), train.len(), test.len()))?;
    Ok(ExitCode::SUCCESS)
}

fn manifests(cfg: &RunConfig, root: &Path) -> Vec<String> {
    match &cfg.paths.manifest {
        Some(m) => vec![m.clone()],
        None => [TRAIN_MANIFEST, TEST_MANIFEST, ALIGNED_MANIFEST]
            .into_iter()
            .filter(|m| root.join(m).is_file())
            .map(String::from)
            .collect(),
    }
}

fn gen_masks(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let root = required(&cfg.paths.data, "data")?;
    let names = manifests(cfg, root);
    if names.is_empty() {
        bail!("no manifests found in {}", root.display());
    }
    let mut done = BTreeSet::new();
    for m in names {
        let records = read_manifest(&root.join(&m))?;
        let n = mask_records(root, &records, cfg, &mut done)?;
        run.line(&format!("manifest={m} masks={n}"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn manifest_records(cfg: &RunConfig, default: &str) -> Result<(PathBuf, Vec<PairRecord>)> {
    let root = required(&cfg.paths.data, "data")?.clone();
    let name = cfg.paths.manifest.as_deref().unwrap_or(default);
    let records = read_manifest(&root.join(name))?;
    if records.is_empty() {
        bail!("{} lists no pairs", root.join(name).display());
    }
    Ok((root, records))
}

fn pretrain(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let (root, records) = manifest_records(cfg, ALIGNED_MANIFEST)?;
    let pairs = load_train_pairs(&root, &records, cfg.pretrain.model.channels, false)?;
    let mut log_err = Ok(());
    let (ckpt, _) = pretrain_agnet(&pairs, &cfg.pretrain, |e| {
        if log_err.is_ok() {
            log_err = run.line(&e.line());
        }
    })?;
    log_err?;
    ckpt.save(&run.path(AGNET_CKPT))?;
    run.line(&format!("checkpoint={AGNET_CKPT} params={}", ckpt.params.num_scalars()))?;
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let (root, records) = manifest_records(cfg, TRAIN_MANIFEST)?;
    let agnet = Checkpoint::load(required(&cfg.paths.agnet, "agnet")?)?;
    let pairs = load_train_pairs(&root, &records, cfg.train.model.channels, cfg.train.ablation.roi_mask)?;
    let mut log_err = Ok(());
    let outcome = train_mambareg(&pairs, &agnet, &cfg.train, |e| {
        if log_err.is_ok() {
            log_err = run.line(&e.line());
        }
    })?;
    log_err?;
    outcome.checkpoint.save(&run.path(MODEL_CKPT))?;
    run.line(&format!(
        "checkpoint={MODEL_CKPT} agnet_digest_before={} agnet_digest_after={} agnet_grad_norm={:e}",
        outcome.agnet_digest_before, outcome.agnet_digest_after, outcome.agnet_grad_norm
    ))?;
    Ok(ExitCode::SUCCESS)
}

fn register(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let reg = Registrar::from_checkpoint(&Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?)?;
    let moving = raster::load_image(required(&cfg.paths.moving, "moving")?)?;
    let fixed = raster::load_image(required(&cfg.paths.fixed, "fixed")?)?;
    let (field, warped) = reg.register(&moving, &fixed)?;
    raster::save_image(&run.path("warped.png"), &warped)?;
    write_panel(&run.path("panel.png"), &moving, &fixed, &warped, &field)?;
    run.line(&format!("warped=warped.png panel=panel.png max_displacement={:.6}", field.max_norm()))?;
    Ok(ExitCode::SUCCESS)
}

fn evaluate(cfg: &RunConfig, run: &mut RunDir) -> Result<ExitCode> {
    let (root, records) = manifest_records(cfg, TEST_MANIFEST)?;
    let reg = Registrar::from_checkpoint(&Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?)?;
    let mut report = MetricReport::default();
    for r in &records {
        let m = match evaluate_pair(&root, r, &reg, cfg.evaluate.dice_convention) {
            Ok(m) => m,
            Err(Error::UndefinedMetric(why)) => {
                log::warn!("pair {}: {why}", r.id());
                PairMetrics { id: r.id(), dice: None, mse: f64::NAN, ncc: f64::NAN, ssim: f64::NAN }
            }
            Err(e) => return Err(e.into()),
        };
        report.push(m);
    }
    let tsv = report.to_tsv();
    std::fs::write(run.path(REPORT_FILE), &tsv)?;
    print!("{tsv}");
    let s = report.summary();
    run.line(&format!(
        "pairs={} dice={} mse={:e} ncc={} ssim={}",
        s.n,
        s.dice.map_or("NA".into(), |d| format!("{}", 100.0 * d)),
        s.mse,
        s.ncc,
        s.ssim
    ))?;
    if report.has_nan() {
        log::error!("report contains NaN metrics");
        return Ok(ExitCode::from(NAN_EXIT));
    }
    Ok(ExitCode::SUCCESS)
}

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voldiff::io::checkpoint::{load_checkpoint, save_checkpoint};
use voldiff::io::synthetic::{generate_dataset_with, load_case, read_manifest, write_dataset, Manifest, SyntheticConfig};
use voldiff::io::{read_volume, write_volume, Split, SyntheticCase, VolumeMeta};
use voldiff::metrics::{MetricsRow, METRICS_CSV_HEADER};
use voldiff::pipeline::{aggregate, binarize, prepare_source, sample_segmentation, score, Mode, Trainer};
use voldiff::schedule::{make_stride_plan, NoiseSchedule};
use voldiff::tensor::Eager;
use voldiff::unet::{build_model, count_flops_and_peak_memory};
use voldiff::Tensor;

use crate::alloc;
use crate::config::RunConfig;

pub const TRAIN_METRICS_HEADER: &str = "step,split,dice,hd95";
pub const LOSS_HEADER: &str = "step,loss";
pub const BENCH_HEADER: &str = "mode,phase,input_extent,seconds,peak_bytes,flops";

pub fn manifest_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn generate(cfg: &RunConfig) -> Result<Manifest> {
    let d = &cfg.data;
    let synth = SyntheticConfig {
        modalities: d.modalities,
        ..SyntheticConfig::default()
    };
    let cases = generate_dataset_with(d.n_cases, d.extent, d.seed, d.fractions, &synth)?;
    fs::create_dir_all(&d.dir).with_context(|| format!("creating {}", d.dir.display()))?;
    Ok(write_dataset(&d.dir, &cases, d.seed, d.fractions)?)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => bail!("unknown split `{s}`"),
    })
}

fn load_split(cfg: &RunConfig, manifest: &Manifest, split: Split, cap: usize) -> Result<Vec<SyntheticCase>> {
    let entries = manifest.split(split);
    let take = if cap == 0 { usize::MAX } else { cap };
    entries
        .take(take)
        .map(|e| load_case(&cfg.data.dir, e).map_err(Into::into))
        .collect()
}

fn check_dataset(cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    ensure!(
        manifest.modalities == cfg.data.modalities,
        "dataset has {} modalities but the config expects {}",
        manifest.modalities,
        cfg.data.modalities
    );
    let factor = cfg.unet().downsampling_factor();
    let need = if cfg.mode == Mode::HalfRes { 2 * factor } else { factor };
    ensure!(
        manifest.extent % need == 0,
        "volume extent {} is not a multiple of {need} required by {} with this network",
        manifest.extent,
        cfg.mode
    );
    if cfg.mode == Mode::PatchDdm {
        ensure!(
            cfg.train.patch_extent <= manifest.extent,
            "patch extent {} exceeds the volume extent {}",
            cfg.train.patch_extent,
            manifest.extent
        );
    }
    Ok(())
}

fn csv_writer(path: &Path, header: &str, append: bool) -> Result<File> {
    let exists = path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if !append || !exists {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

fn fmt_hd(h: Option<f64>) -> String {
    h.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub dice: f64,
}

pub struct TrainSummary {
    pub final_step: u64,
    pub best: Option<BestRecord>,
    pub losses: Vec<f32>,
}

/// Mean validation scores with the current sampling weights.
fn validate(trainer: &Trainer, cfg: &RunConfig, cases: &[SyntheticCase]) -> Result<(f64, Option<f64>)> {
    let plan = make_stride_plan(trainer.schedule.timesteps(), cfg.train.eval_sampling_steps)?;
    let model = trainer.inference_model();
    let mut dice_sum = 0.0;
    let mut hd = Vec::new();
    for c in cases {
        let soft = sample_segmentation(&model, &trainer.schedule, &c.image, &plan, cfg.sample.seed, cfg.mode)?;
        let (d, h) = score(&binarize(&soft)?, &binarize(&c.mask)?)?;
        dice_sum += d;
        hd.extend(h);
    }
    let hd_mean = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
    Ok((dice_sum / cases.len().max(1) as f64, hd_mean))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let manifest = read_manifest(&cfg.data.dir).context("reading dataset manifest")?;
    check_dataset(cfg, &manifest)?;
    let train_cases = load_split(cfg, &manifest, Split::Train, 0)?;
    ensure!(!train_cases.is_empty(), "dataset has no training cases");
    let val_cases = load_split(cfg, &manifest, Split::Val, cfg.train.eval_cases)?;
    let sources = train_cases
        .iter()
        .map(|c| prepare_source(&c.mask, &c.image, cfg.mode))
        .collect::<voldiff::Result<Vec<_>>>()?;

    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(p)?)?;
            // optimizer hyperparameters may change between legs; the moments carry over
            t.config.optimizer = cfg.trainer().optimizer;
            t.set_ema_decay(cfg.trainer().ema_decay)?;
            ensure!(t.config.mode == cfg.mode, "checkpoint was trained in mode {}", t.config.mode);
            ensure!(t.model.config == cfg.unet(), "checkpoint network differs from the config");
            t
        }
        None => Trainer::new(cfg.trainer(), &cfg.unet(), cfg.schedule)?,
    };
    fs::create_dir_all(&cfg.run_dir)?;
    let append = resume.is_some();
    let mut metrics = csv_writer(&cfg.run_dir.join("metrics.csv"), TRAIN_METRICS_HEADER, append)?;
    let mut loss_csv = csv_writer(&cfg.run_dir.join("loss.csv"), LOSS_HEADER, append)?;
    let best_path = cfg.run_dir.join("best.json");
    let mut best: Option<BestRecord> = if append && best_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&best_path)?)?)
    } else {
        None
    };

    let mut losses = Vec::new();
    let started = Instant::now();
    while trainer.step_count() < cfg.train.steps {
        let loss = trainer.train_step(&sources)?;
        let step = trainer.step_count();
        losses.push(loss);
        writeln!(loss_csv, "{step},{loss}")?;
        if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
            let (dice, hd) = validate(&trainer, cfg, &val_cases)?;
            writeln!(metrics, "{step},val,{dice:.6},{}", fmt_hd(hd))?;
            metrics.flush()?;
            log::info!(
                "step {step}: loss {loss:.5}, val dice {dice:.4}, hd95 {} ({:.0}s)",
                fmt_hd(hd),
                started.elapsed().as_secs_f64()
            );
            let ckpt = trainer.checkpoint();
            save_checkpoint(&cfg.run_dir.join("last.ckpt"), &ckpt)?;
            if best.as_ref().map_or(true, |b| dice > b.dice) {
                save_checkpoint(&cfg.run_dir.join("best.ckpt"), &ckpt)?;
                let rec = BestRecord { step, dice };
                fs::write(&best_path, serde_json::to_string_pretty(&rec)?)?;
                best = Some(rec);
            }
        }
    }
    loss_csv.flush()?;
    Ok(TrainSummary {
        final_step: trainer.step_count(),
        best,
        losses,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub run_id: String,
    pub mode: Mode,
    pub steps: usize,
    pub ensemble_size: usize,
}

pub fn sample_dir(cfg: &RunConfig, steps: usize, ensemble: usize) -> PathBuf {
    cfg.run_dir.join("samples").join(format!("steps{steps}_ens{ensemble}"))
}

/// Sweeps every (steps, ensemble size) pair; ensembles of different sizes
/// share their leading members.
pub fn sample(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<MetricsRow>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.inference_model();
    let schedule = NoiseSchedule::new(ckpt.schedule)?;
    let mode: Mode = ckpt.extra.get("mode").map_or(Ok(cfg.mode), |m| m.parse())?;
    let manifest = read_manifest(&cfg.data.dir)?;
    let cases = load_split(cfg, &manifest, parse_split(&cfg.sample.split)?, cfg.sample.max_cases)?;
    let largest = *cfg.sample.ensemble_sizes.iter().max().context("no ensemble sizes")?;
    fs::create_dir_all(&cfg.run_dir)?;
    let mut sweep = csv_writer(&cfg.run_dir.join("sweep.csv"), METRICS_CSV_HEADER, false)?;
    let mut rows = Vec::new();
    for &steps in &cfg.sample.steps {
        let plan = make_stride_plan(schedule.timesteps(), steps)?;
        for &e in &cfg.sample.ensemble_sizes {
            let dir = sample_dir(cfg, steps, e);
            fs::create_dir_all(&dir)?;
            let meta = SampleMeta {
                run_id: cfg.run_id.clone(),
                mode,
                steps,
                ensemble_size: e,
            };
            fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        }
        for case in &cases {
            let members = (0..largest)
                .map(|i| sample_segmentation(&model, &schedule, &case.image, &plan, cfg.sample.seed + i as u64, mode))
                .collect::<voldiff::Result<Vec<_>>>()?;
            let reference = binarize(&case.mask)?;
            for &e in &cfg.sample.ensemble_sizes {
                let result = aggregate(members[..e].to_vec())?;
                let dir = sample_dir(cfg, steps, e);
                write_volume(&dir.join(format!("{}.mask", case.id)), &result.consensus.to_volume(), &VolumeMeta::named(&["mask"], "{0, 1}"))?;
                write_volume(&dir.join(format!("{}.mean", case.id)), &result.mean, &VolumeMeta::named(&["mean"], "[0, 1]"))?;
                write_volume(
                    &dir.join(format!("{}.variance", case.id)),
                    &result.variance,
                    &VolumeMeta::named(&["variance"], "[0, 1], normalized by its maximum"),
                )?;
                let (dice, hd95) = score(&result.consensus, &reference)?;
                let row = MetricsRow {
                    run_id: cfg.run_id.clone(),
                    case_id: case.id.clone(),
                    mode: mode.to_string(),
                    ensemble_size: e,
                    steps,
                    dice,
                    hd95,
                };
                writeln!(sweep, "{}", row.to_csv())?;
                rows.push(row);
            }
        }
    }
    sweep.flush()?;
    Ok(rows)
}

/// Scores the masks in `pred_dir` (as written by `sample`) against the
/// dataset and writes `pred_dir/metrics.csv`.
pub fn eval(cfg: &RunConfig, pred_dir: &Path) -> Result<Vec<MetricsRow>> {
    let meta: SampleMeta = serde_json::from_str(
        &fs::read_to_string(pred_dir.join("meta.json")).with_context(|| format!("no meta.json in {}", pred_dir.display()))?,
    )?;
    let manifest = read_manifest(&cfg.data.dir)?;
    let split = parse_split(&cfg.sample.split)?;
    let mut out = csv_writer(&pred_dir.join("metrics.csv"), METRICS_CSV_HEADER, false)?;
    let mut rows = Vec::new();
    for entry in manifest.split(split) {
        let path = pred_dir.join(format!("{}.mask.vol.json", entry.id));
        if !path.exists() {
            continue;
        }
        let (pred, _) = read_volume(&path)?;
        let case = load_case(&cfg.data.dir, entry)?;
        let (dice, hd95) = score(&binarize(&pred)?, &binarize(&case.mask)?)?;
        let row = MetricsRow {
            run_id: meta.run_id.clone(),
            case_id: entry.id.clone(),
            mode: meta.mode.to_string(),
            ensemble_size: meta.ensemble_size,
            steps: meta.steps,
            dice,
            hd95,
        };
        writeln!(out, "{}", row.to_csv())?;
        rows.push(row);
    }
    ensure!(!rows.is_empty(), "no predicted masks found in {}", pred_dir.display());
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub phase: &'static str,
    pub input_extent: usize,
    pub seconds: f64,
    pub peak_bytes: usize,
    pub flops: u64,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{}",
            self.mode, self.phase, self.input_extent, self.seconds, self.peak_bytes, self.flops
        )
    }
}

/// Network input extents for training and inference in `mode`.
pub fn mode_extents(mode: Mode, extent: usize, patch: usize) -> (usize, usize) {
    match mode {
        Mode::PatchDdm => (patch, extent),
        Mode::FullRes => (extent, extent),
        Mode::HalfRes => (extent / 2, extent / 2),
    }
}

fn measure<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64, usize)> {
    alloc::reset_peak();
    let base = alloc::current_bytes();
    let start = Instant::now();
    let out = f()?;
    let secs = start.elapsed().as_secs_f64();
    Ok((out, secs, alloc::peak_bytes().saturating_sub(base)))
}

/// One training step and one network evaluation per mode on random data.
/// Training FLOPs count the backward pass as twice the forward pass.
pub fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    let unet = cfg.unet();
    let repeats = b.repeats.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    let image = Tensor::randn(&[cfg.data.modalities, b.extent, b.extent, b.extent], &mut rng);
    let mask = Tensor::randn(&[1, b.extent, b.extent, b.extent], &mut rng).map(|v| f32::from(v > 0.0));
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let (train_ext, infer_ext) = mode_extents(mode, b.extent, b.patch_extent);
        let mut tc = cfg.trainer();
        tc.mode = mode;
        tc.patch_extent = b.patch_extent;
        tc.batch_size = 1;
        tc.seed = b.seed;
        let mut trainer = Trainer::new(tc, &unet, cfg.schedule)?;
        let source = [prepare_source(&mask, &image, mode)?];
        trainer.train_step(&source)?;
        let mut secs = 0.0;
        let mut peak = 0;
        for _ in 0..repeats {
            let (_, s, p) = measure(|| Ok(trainer.train_step(&source)?))?;
            secs += s;
            peak = peak.max(p);
        }
        let fwd = count_flops_and_peak_memory(&unet, train_ext)?.flops;
        rows.push(BenchRow {
            mode,
            phase: "train",
            input_extent: train_ext,
            seconds: secs / repeats as f64,
            peak_bytes: peak,
            flops: 3 * fwd,
        });

        let model = build_model(&unet, b.seed)?;
        let net = model.network()?;
        let mut e = Eager::<f32>::new();
        let bound = net.bind(&mut e, &model.tensors, false);
        let x = Tensor::randn(&[unet.in_channels, infer_ext, infer_ext, infer_ext], &mut rng);
        let mut secs = 0.0;
        let mut peak = 0;
        for _ in 0..repeats {
            let (_, s, p) = measure(|| Ok(net.forward(&mut e, &bound, &x, 500)?))?;
            secs += s;
            peak = peak.max(p);
        }
        rows.push(BenchRow {
            mode,
            phase: "inference",
            input_extent: infer_ext,
            seconds: secs / repeats as f64,
            peak_bytes: peak,
            flops: count_flops_and_peak_memory(&unet, infer_ext)?.flops,
        });
    }
    fs::create_dir_all(&cfg.run_dir)?;
    let mut text = String::new();
    writeln!(text, "{BENCH_HEADER}")?;
    for r in &rows {
        writeln!(text, "{}", r.to_csv())?;
    }
    fs::write(cfg.run_dir.join("bench.csv"), text)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_per_mode() {
        assert_eq!(mode_extents(Mode::PatchDdm, 32, 16), (16, 32));
        assert_eq!(mode_extents(Mode::FullRes, 32, 16), (32, 32));
        assert_eq!(mode_extents(Mode::HalfRes, 32, 16), (16, 16));
    }

    #[test]
    fn hd_formatting() {
        assert_eq!(fmt_hd(None), "undefined");
        assert_eq!(fmt_hd(Some(1.5)), "1.500000");
    }

    #[test]
    fn splits_parse() {
        assert_eq!(parse_split("val").unwrap(), Split::Val);
        assert!(parse_split("holdout").is_err());
    }
}

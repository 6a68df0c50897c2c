//! The five subcommands as library functions over a resolved [`RunConfig`].

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use pdvae::diffmath::OptimizerState;
use pdvae::metrics::{evaluate, MetricReport};
use pdvae::motion::{export_motion, synth_group_dataset, ConditioningFeatures, GroupSample, Skeleton, SynthConfig};
use pdvae::networks::{generate_group, GenerationOptions, GenerationReport, LatentMode, PdvaeModel};
use pdvae::training::{fit_from, Checkpoint, TrainRecord};

use crate::config::RunConfig;
use crate::dataset::{dataset_to_json, read_dataset, sequence_digest, sha256_hex, Manifest, ManifestEntry};
use crate::error::CliError;

pub const DATASET_FILE: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_GOOD_FILE: &str = "last-good.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const RESOLVED_FILE: &str = "resolved.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const BENCH_FILE: &str = "bench.toml";
pub const GENERATED_DIR: &str = "generated";

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_FILE), cfg.to_toml())?;
    Ok(cfg.out.clone())
}

fn write_with_digest(dir: &Path, name: &str, bytes: &[u8]) -> Result<ManifestEntry, CliError> {
    fs::write(dir.join(name), bytes)?;
    Ok(ManifestEntry { name: name.into(), sha256: sha256_hex(bytes) })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    fs::write(dir.join(MANIFEST_FILE), manifest.to_toml())?;
    Ok(())
}

/// Writes the synthetic dataset and its manifest; returns the manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let groups = synth_group_dataset(&cfg.data, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let out = prepare_out(cfg)?;
    let file = write_with_digest(&out, DATASET_FILE, dataset_to_json(&groups).as_bytes())?;
    let sequences = groups
        .iter()
        .flat_map(|g| {
            g.dancers.iter().enumerate().map(move |(i, d)| ManifestEntry {
                name: format!("group{:03}/dancer{:03}", g.group_id, i),
                sha256: sequence_digest(d),
            })
        })
        .collect();
    let manifest = Manifest { command: "synth".into(), seed: cfg.seed, files: vec![file], sequences };
    write_manifest(&out, &manifest)?;
    Ok(manifest)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub checkpoint: PathBuf,
    /// Optimizer steps completed in total, including resumed ones.
    pub step: u64,
}

/// Trains on `data` (default: the dataset in the output directory),
/// optionally continuing from `resume`.
pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let data_path = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(DATASET_FILE));
    let groups = read_dataset(&data_path)?;
    let mode = cfg.latent_mode();
    let (mut model, mut optimizer) = match resume {
        None => {
            let model = PdvaeModel::new(cfg.model.clone(), cfg.seed)?;
            let opt = OptimizerState::for_store(model.params());
            (model, opt)
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.latent_mode != mode {
                return Err(CliError::Config(format!(
                    "checkpoint was trained with latent mode {:?}, config asks for {mode:?}",
                    ck.latent_mode
                )));
            }
            let mut model = PdvaeModel::new(cfg.model.clone(), cfg.seed)?;
            let step = ck.step;
            let opt = ck.restore_into(&mut model)?;
            let opt = opt.unwrap_or_else(|| OptimizerState { step, ..OptimizerState::for_store(model.params()) });
            (model, opt)
        }
    };
    let out = prepare_out(cfg)?;
    let mut log = OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;
    let result = fit_from(&mut model, &groups, &cfg.train, &mut optimizer, |r| {
        writeln!(log, "{}", r.log_line())?;
        Ok(())
    });
    match result {
        Ok(records) => {
            let path = out.join(CHECKPOINT_FILE);
            let bytes = Checkpoint::capture(&model, mode, Some(&optimizer)).to_bytes()?;
            let entry = write_with_digest(&out, CHECKPOINT_FILE, &bytes)?;
            let manifest = Manifest { command: "train".into(), seed: cfg.seed, files: vec![entry], sequences: vec![] };
            write_manifest(&out, &manifest)?;
            Ok(TrainOutcome { records, checkpoint: path, step: optimizer.step })
        }
        Err(e) => {
            // parameters and moments are untouched by the failing step
            Checkpoint::capture(&model, mode, Some(&optimizer)).save(&out.join(LAST_GOOD_FILE))?;
            writeln!(log, "aborted: {e}")?;
            Err(CliError::Runtime(format!("{e}; last good state saved to {}", out.join(LAST_GOOD_FILE).display())))
        }
    }
}

/// Conditioning track synthesised from the data settings: one group's
/// tempo, beats and style for `seed`.
pub fn synth_conditioning(data: &SynthConfig, seed: u64) -> Result<ConditioningFeatures, CliError> {
    let one = SynthConfig { groups: 1, dancers: 1, ..data.clone() };
    let mut g = synth_group_dataset(&one, seed).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(g.remove(0).conditioning)
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(PdvaeModel, LatentMode), CliError> {
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mode = ck.latent_mode;
            let (model, _) = ck.into_model()?;
            let c = model.config();
            if c.joints != cfg.model.joints || c.frames != cfg.model.frames || c.cond_dim != cfg.model.cond_dim {
                return Err(CliError::Config(format!(
                    "checkpoint expects {} joints, {} frames, {}-dim conditioning; data settings give {}, {}, {}",
                    c.joints, c.frames, c.cond_dim, cfg.model.joints, cfg.model.frames, cfg.model.cond_dim
                )));
            }
            Ok((model, mode))
        }
        None => Ok((PdvaeModel::new(cfg.model.clone(), cfg.seed)?, cfg.latent_mode())),
    }
}

/// Generates `dancers` motions from one conditioning track and exports one
/// file per dancer.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, dancers: usize) -> Result<Manifest, CliError> {
    if dancers == 0 {
        return Err(CliError::Usage("--dancers must be at least 1".into()));
    }
    let format = cfg.format()?;
    let (model, mode) = model_for(cfg, Some(checkpoint))?;
    let cond = synth_conditioning(&cfg.data, cfg.seed)?;
    let opts = GenerationOptions { mode, spacing: cfg.generate.spacing };
    let report = generate_group(&model, &cond, dancers, cfg.seed, &opts)?;
    let out = prepare_out(cfg)?;
    let dir = out.join(GENERATED_DIR);
    fs::create_dir_all(&dir)?;
    let skeleton = Skeleton::from_kind(cfg.data.skeleton);
    let mut files = Vec::with_capacity(dancers);
    for (i, m) in report.group.dancers.iter().enumerate() {
        let name = format!("dancer{:03}.{}", i, format.extension());
        let bytes = export_motion(m, &skeleton, format)?;
        files.push(write_with_digest(&dir, &name, &bytes)?);
    }
    let manifest = Manifest { command: "generate".into(), seed: cfg.seed, files, sequences: vec![] };
    fs::write(dir.join(MANIFEST_FILE), manifest.to_toml())?;
    Ok(manifest)
}

/// Seed offset separating held-out reference data from training data.
pub const HELD_OUT_SEED_OFFSET: u64 = 0x4e1d;

/// Metrics of generated groups (or of the reference itself when no
/// checkpoint is given) against held-out reference groups.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<MetricReport, CliError> {
    let reference = match data {
        Some(p) => read_dataset(p)?,
        None => synth_group_dataset(&cfg.data, cfg.seed.wrapping_add(HELD_OUT_SEED_OFFSET))?,
    };
    let generated: Vec<GroupSample> = match checkpoint {
        None => reference.clone(),
        Some(path) => {
            let (model, mode) = model_for(cfg, Some(path))?;
            let opts = GenerationOptions { mode, spacing: cfg.generate.spacing };
            reference
                .iter()
                .map(|g| {
                    let seed = cfg.seed.wrapping_add(g.group_id as u64);
                    let mut r = generate_group(&model, &g.conditioning, g.dancer_count(), seed, &opts)?.group;
                    r.group_id = g.group_id;
                    Ok(r)
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    let feet = Skeleton::from_kind(cfg.data.skeleton).feet();
    let report = evaluate(&generated, &reference, feet, &cfg.metrics)?;
    let out = prepare_out(cfg)?;
    fs::write(out.join(REPORT_FILE), toml::to_string(&report).expect("report serialises"))?;
    Ok(report)
}

/// One dancer count of the scalability benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub dancers: usize,
    /// Peak live tensor elements during generation, outputs excluded.
    pub peak_working_elements: usize,
    pub peak_working_bytes: usize,
    /// Elements of the returned motions, `N * T * pose_dim`.
    pub output_elements: usize,
    pub prior_calls: u64,
    /// Median over repeats.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<MemoryReport>,
    /// Largest over smallest peak working set across dancer counts.
    pub working_set_ratio: f64,
    /// Coefficient of determination of a least-squares line through
    /// (dancers, wall seconds).
    pub wall_time_r_squared: f64,
}

/// `R^2` of the least-squares line through the points.
pub fn linear_r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Generation cost per dancer count, decoding dancers one at a time.
pub fn cmd_bench_scale(cfg: &RunConfig, checkpoint: Option<&Path>, counts: &[usize]) -> Result<BenchReport, CliError> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(CliError::Usage("--dancers needs positive counts".into()));
    }
    let (model, mode) = model_for(cfg, checkpoint)?;
    let cond = synth_conditioning(&cfg.data, cfg.seed)?;
    let opts = GenerationOptions { mode, spacing: cfg.generate.spacing };
    let mut runs = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut times = Vec::with_capacity(cfg.bench.repeats);
        let mut first: Option<GenerationReport> = None;
        for _ in 0..cfg.bench.repeats {
            let t = Instant::now();
            let r = generate_group(&model, &cond, n, cfg.seed, &opts)?;
            times.push(t.elapsed().as_secs_f64());
            first.get_or_insert(r);
        }
        times.sort_by(f64::total_cmp);
        let r = first.expect("at least one repeat");
        runs.push(MemoryReport {
            dancers: n,
            peak_working_elements: r.peak_working_elements,
            peak_working_bytes: 8 * r.peak_working_elements,
            output_elements: r.group.dancers.iter().map(|d| d.data().len()).sum(),
            prior_calls: r.prior_calls,
            wall_seconds: times[times.len() / 2],
        });
    }
    let peaks: Vec<f64> = runs.iter().map(|r| r.peak_working_elements as f64).collect();
    let lo = peaks.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = peaks.iter().copied().fold(0.0, f64::max);
    let xs: Vec<f64> = runs.iter().map(|r| r.dancers as f64).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.wall_seconds).collect();
    let report = BenchReport {
        working_set_ratio: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        wall_time_r_squared: linear_r_squared(&xs, &ys),
        runs,
    };
    let out = prepare_out(cfg)?;
    fs::write(out.join(BENCH_FILE), toml::to_string(&report).expect("bench report serialises"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_squared_of_exact_line_is_one() {
        let xs = [2.0, 5.0, 10.0, 50.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + 1.0).collect();
        assert!((linear_r_squared(&xs, &ys) - 1.0).abs() < 1e-12);
        assert_eq!(linear_r_squared(&xs, &[1.0; 5]), 0.0);
    }
}

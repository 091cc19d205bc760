use std::fs;
use std::path::{Path, PathBuf};

use cxinpaint_core::checkpoint::{save_checkpoint, to_bytes};
use cxinpaint_core::data::split_dataset;
use cxinpaint_core::optim::{write_trace, Trainer};
use cxinpaint_core::{Error, Rng, Scalar, Tensor};

use super::{load_any, patch_paths, read_index, read_store, warn_checksums, write_atomic, AnyTrainer};
use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};

pub const RUN_CONFIG_FILE: &str = "run.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const BEST_FILE: &str = "best.cxip";

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: u64,
    pub iterations: u64,
    pub best_validation: Option<f64>,
}

pub fn epoch_file(epoch: u64) -> String {
    format!("epoch-{epoch:04}.cxip")
}

/// Trains until the schedule's last epoch, checkpointing after every epoch.
///
/// Without `--config`, a resumed run reads the configuration saved in its output directory.
pub fn run(args: &TrainArgs, mut log: impl FnMut(&str)) -> CliResult<TrainOutcome> {
    let saved = |dir: &Path| dir.join(RUN_CONFIG_FILE);
    let mut cfg = match (&args.config, &args.out_dir) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) if args.resume.is_some() && saved(dir).exists() => RunConfig::load(&saved(dir))?,
        (None, _) => {
            return Err(CliError::Usage("--config is required unless resuming a run with a saved run.json".into()))
        }
    };
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &args.out_dir {
        cfg.out_dir = Some(o.clone());
    }
    let data = cfg.data.clone().ok_or_else(|| CliError::Usage("no --data given and none in the config".into()))?;
    let out_dir =
        cfg.out_dir.clone().ok_or_else(|| CliError::Usage("no --out-dir given and none in the config".into()))?;
    fs::create_dir_all(&out_dir)?;
    write_atomic(&saved(&out_dir), serde_json::to_string_pretty(&cfg).expect("config serializes").as_bytes())?;

    let (index_path, store_path) = patch_paths(&data);
    let index = read_index(&index_path)?;
    let (side, patches) = read_store::<f32>(&store_path)?;
    if side != cfg.model.image_size {
        return Err(CliError::SizeMismatch {
            expected: format!("{0}x{0} patches", cfg.model.image_size),
            actual: format!("{side}x{side} in {}", store_path.display()),
        });
    }
    if index.len() != patches.len() {
        return Err(
            Error::Manifest(format!("index lists {} patches, store holds {}", index.len(), patches.len())).into()
        );
    }
    let ids: Vec<usize> = (0..index.len()).collect();
    let vf = cfg.validation_fraction;
    let (train_ids, val_ids, _) =
        split_dataset(ids, |&i| index[i].group().to_string(), [1.0 - vf, vf, 0.0], &mut Rng::new(cfg.seed))?;
    if val_ids.is_empty() || train_ids.len() < 2 {
        return Err(Error::Config("dataset too small for a train/validation split".into()).into());
    }
    log(&format!("{} training and {} validation patches", train_ids.len(), val_ids.len()));

    match &args.resume {
        Some(path) => {
            let (trainer, mismatches) = load_any(path)?;
            warn_checksums(path, &mismatches);
            match trainer {
                AnyTrainer::F32(t) => train_loop(t, &patches, &train_ids, &val_ids, &out_dir, log),
                AnyTrainer::F64(t) => train_loop(t, &patches, &train_ids, &val_ids, &out_dir, log),
            }
        }
        None => match cfg.precision {
            Precision::F32 => {
                let t = Trainer::<f32>::new(&cfg.model, cfg.train.clone(), cfg.seed)?;
                train_loop(t, &patches, &train_ids, &val_ids, &out_dir, log)
            }
            Precision::F64 => {
                let t = Trainer::<f64>::new(&cfg.model, cfg.train.clone(), cfg.seed)?;
                train_loop(t, &patches, &train_ids, &val_ids, &out_dir, log)
            }
        },
    }
}

fn train_loop<S: Scalar>(
    mut trainer: Trainer<S>,
    patches: &[Tensor<f32>],
    train_ids: &[usize],
    val_ids: &[usize],
    out_dir: &Path,
    mut log: impl FnMut(&str),
) -> CliResult<TrainOutcome> {
    let pick = |ids: &[usize]| -> Vec<Tensor<S>> { ids.iter().map(|&i| patches[i].cast()).collect() };
    let (train, val) = (pick(train_ids), pick(val_ids));
    while !trainer.is_finished() {
        let summary = match trainer.train_epoch(&train) {
            Ok(s) => s,
            Err(e @ Error::NonFinite { .. }) => {
                log(&format!("aborting epoch {}: {e}; last good checkpoint kept", trainer.state.epoch + 1));
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let v = trainer.record_validation(&val)?;
        let epoch = trainer.state.epoch;
        save_checkpoint(&out_dir.join(epoch_file(epoch)), &trainer)?;
        if trainer.state.best_validation() == Some(v) {
            write_atomic(&out_dir.join(BEST_FILE), &to_bytes(&trainer)?)?;
        }
        let mut trace = Vec::new();
        write_trace(&mut trace, &trainer.state.trace)?;
        write_atomic(&out_dir.join(TRACE_FILE), &trace)?;
        log(&format!(
            "epoch {epoch} ({:?}): {} iterations, train L2 {:.5}, validation L2 {v:.5}",
            summary.phase, summary.iterations, summary.mean_l2
        ));
    }
    Ok(TrainOutcome {
        epochs: trainer.state.epoch,
        iterations: trainer.state.iteration,
        best_validation: trainer.state.best_validation(),
    })
}

use std::fs;
use std::path::PathBuf;

use cxinpaint_core::data::{composite, masked_batch};
use cxinpaint_core::layers::Mode;
use cxinpaint_core::metrics::{pair_metrics, MetricRegion, MetricsReport};
use cxinpaint_core::optim::Trainer;
use cxinpaint_core::{Error, Scalar, Tensor};

use super::{load_any, patch_paths, read_index, read_store, warn_checksums, AnyTrainer};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub patch_index: PathBuf,
    /// Patch store; defaults to the index path with a `.cxpd` extension.
    pub patches: Option<PathBuf>,
    pub report: PathBuf,
    pub region: MetricRegion,
    pub batch_size: usize,
}

/// Scores reconstructions of every patch listed in the index and writes the report CSV.
pub fn run(args: &EvalArgs) -> CliResult<MetricsReport> {
    let index = read_index(&args.patch_index)?;
    let store = args.patches.clone().unwrap_or_else(|| patch_paths(&args.patch_index.with_extension("cxpd")).1);
    let (trainer, mismatches) = load_any(&args.checkpoint)?;
    warn_checksums(&args.checkpoint, &mismatches);
    let report = match trainer {
        AnyTrainer::F32(t) => evaluate(&t, &index, &store, args),
        AnyTrainer::F64(t) => evaluate(&t, &index, &store, args),
    }?;
    let mut out = Vec::new();
    report.write_csv(&mut out)?;
    fs::write(&args.report, out)?;
    Ok(report)
}

fn evaluate<S: Scalar>(
    trainer: &Trainer<S>,
    index: &[cxinpaint_core::data::IndexEntry],
    store: &std::path::Path,
    args: &EvalArgs,
) -> CliResult<MetricsReport> {
    let side = trainer.generator.config.image_size;
    let (store_side, patches) = read_store::<S>(store)?;
    if store_side != side {
        return Err(CliError::SizeMismatch {
            expected: format!("{side}x{side} patches"),
            actual: format!("{store_side}x{store_side}"),
        });
    }
    let mut selected: Vec<(String, &Tensor<S>)> = Vec::with_capacity(index.len());
    for e in index {
        let p = patches
            .get(e.patch_id)
            .ok_or_else(|| Error::Manifest(format!("patch {} not in a store of {}", e.patch_id, patches.len())))?;
        selected.push((e.patch_id.to_string(), p));
    }
    let fill = S::from_f64_lossy(trainer.config.blank_fill);
    let mut records = Vec::with_capacity(selected.len());
    for chunk in selected.chunks(args.batch_size.max(1)) {
        let refs: Vec<&Tensor<S>> = chunk.iter().map(|(_, p)| *p).collect();
        let (context, _) = masked_batch(&refs, fill)?;
        let fake = trainer.generator.generate(&context, Mode::Eval)?;
        for (i, (id, original)) in chunk.iter().enumerate() {
            let rebuilt = composite(&context.batch_item(i)?, &fake.batch_item(i)?)?;
            records.push(pair_metrics(id.clone(), *original, &rebuilt, args.region)?);
        }
    }
    Ok(MetricsReport { records })
}

use std::path::PathBuf;

use cxinpaint_core::data::{
    composite, crop, load_and_normalize, masked_batch, plane_dims, save_gray_png, tensor_to_gray,
};
use cxinpaint_core::layers::Mode;
use cxinpaint_core::metrics::diff_map;
use cxinpaint_core::models::Generator;
use cxinpaint_core::{Scalar, Tensor};

use super::{load_any, warn_checksums, AnyTrainer};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct InpaintArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub emit_diff: Option<PathBuf>,
    /// Top-left corner of the model-sized window to inpaint inside a larger image.
    pub crop: Option<(usize, usize)>,
}

/// Reconstructs the central region of the image (or of the crop window) and writes the result,
/// identical to the input everywhere else.
pub fn run(args: &InpaintArgs) -> CliResult<()> {
    let (trainer, mismatches) = load_any(&args.checkpoint)?;
    warn_checksums(&args.checkpoint, &mismatches);
    match trainer {
        AnyTrainer::F32(t) => inpaint_with(&t.generator, t.config.blank_fill, args),
        AnyTrainer::F64(t) => inpaint_with(&t.generator, t.config.blank_fill, args),
    }
}

fn inpaint_with<S: Scalar>(generator: &Generator<S>, fill: f64, args: &InpaintArgs) -> CliResult<()> {
    let side = generator.config.image_size;
    let image = load_and_normalize::<S>(&args.image)?;
    let (h, w) = plane_dims(&image)?;
    let (x, y) = match args.crop {
        Some((x, y)) if x + side <= w && y + side <= h => (x, y),
        Some((x, y)) => {
            return Err(CliError::SizeMismatch {
                expected: format!("a {side}x{side} window inside the image"),
                actual: format!("window at ({x}, {y}) in a {w}x{h} image"),
            })
        }
        None if (h, w) == (side, side) => (0, 0),
        None => {
            return Err(CliError::SizeMismatch { expected: format!("{side}x{side}"), actual: format!("{w}x{h}") });
        }
    };
    let window = crop(&image, x, y, side)?;
    let (context, _) = masked_batch(&[&window], S::from_f64_lossy(fill))?;
    let patch = generator.generate(&context, Mode::Eval)?;
    let rebuilt = composite(&context, &patch)?;

    let mut output = image.clone();
    paste(&mut output, &rebuilt, x, y, w);
    let original = tensor_to_gray(&image)?;
    let result = tensor_to_gray(&output)?;
    save_gray_png(&result, &args.out)?;
    if let Some(path) = &args.emit_diff {
        save_gray_png(&diff_map(&original, &result)?, path)?;
    }
    Ok(())
}

fn paste<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, x: usize, y: usize, width: usize) {
    let side = src.shape()[src.shape().len() - 1];
    let data = dst.data_mut();
    for (row, line) in src.data().chunks(side).enumerate() {
        let start = (y + row) * width + x;
        data[start..start + side].copy_from_slice(line);
    }
}

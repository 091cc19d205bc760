use std::fs;
use std::path::PathBuf;

use cxinpaint_core::data::{extract_corpus, read_manifest, write_patch_index, write_patch_store, LungBoxes};
use cxinpaint_core::Error;

use super::{INDEX_FILE, STORE_FILE};
use crate::error::CliResult;

#[derive(Clone, Debug)]
pub struct ExtractArgs {
    pub manifest: PathBuf,
    pub images_dir: PathBuf,
    pub out: PathBuf,
    pub patches_per_image: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub lung_boxes: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractSummary {
    pub images: usize,
    pub patches: usize,
    pub healthy: usize,
}

impl std::fmt::Display for ExtractSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "extracted {} patches from {} images ({} healthy, {} unhealthy)",
            self.patches,
            self.images,
            self.healthy,
            self.patches - self.healthy
        )
    }
}

/// Writes `patches.csv` and `patches.cxpd` into `args.out`. Nothing is left behind on failure.
pub fn run(args: &ExtractArgs) -> CliResult<ExtractSummary> {
    let boxes = match &args.lung_boxes {
        Some(p) => {
            serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("lung boxes: {e}")))?
        }
        None => LungBoxes::default(),
    };
    let records = read_manifest(&args.manifest, &args.images_dir)?;
    let patches = extract_corpus::<f32>(&records, &boxes, args.patches_per_image, args.patch_size, args.seed)?;

    fs::create_dir_all(&args.out)?;
    let (index_path, store_path) = (args.out.join(INDEX_FILE), args.out.join(STORE_FILE));
    let written = (|| -> CliResult<()> {
        let mut index = Vec::new();
        write_patch_index(&mut index, &patches)?;
        fs::write(&index_path, index)?;
        write_patch_store(fs::File::create(&store_path)?, args.patch_size, patches.iter().map(|p| &p.pixels))?;
        Ok(())
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&index_path);
        let _ = fs::remove_file(&store_path);
        return Err(e);
    }
    Ok(ExtractSummary {
        images: records.len(),
        patches: patches.len(),
        healthy: patches.iter().filter(|p| p.label.is_healthy()).count(),
    })
}

//! Image ingestion, lung-region patch extraction, masking and dataset splits.
//!
//! File formats:
//!
//! * Manifest: CSV with a header row. Columns `image` (file name relative to the image
//!   directory), `labels` (`|`-separated pathology names, or `No Finding`/`healthy`/empty) and an
//!   optional `patient_id`.
//! * Patch index: CSV `patch_id,image_id,patient_id,x,y,label`, one row per patch, `x`/`y` the
//!   crop origin in source pixels, `patient_id` empty when the manifest has none.
//! * Patch store: `CXPD` magic, `u32` version, `u32` count, `u32` side, then `count * side * side`
//!   normalized `f32` pixels, all little-endian, in index order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ColorType, GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pathology {
    Atelectasis,
    Consolidation,
    Infiltration,
    Pneumothorax,
    Edema,
    Emphysema,
    Fibrosis,
    Effusion,
    Pneumonia,
    PleuralThickening,
    Cardiomegaly,
    Nodule,
    Mass,
    Hernia,
}

impl Pathology {
    pub const ALL: [Pathology; 14] = [
        Pathology::Atelectasis,
        Pathology::Consolidation,
        Pathology::Infiltration,
        Pathology::Pneumothorax,
        Pathology::Edema,
        Pathology::Emphysema,
        Pathology::Fibrosis,
        Pathology::Effusion,
        Pathology::Pneumonia,
        Pathology::PleuralThickening,
        Pathology::Cardiomegaly,
        Pathology::Nodule,
        Pathology::Mass,
        Pathology::Hernia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pathology::Atelectasis => "Atelectasis",
            Pathology::Consolidation => "Consolidation",
            Pathology::Infiltration => "Infiltration",
            Pathology::Pneumothorax => "Pneumothorax",
            Pathology::Edema => "Edema",
            Pathology::Emphysema => "Emphysema",
            Pathology::Fibrosis => "Fibrosis",
            Pathology::Effusion => "Effusion",
            Pathology::Pneumonia => "Pneumonia",
            Pathology::PleuralThickening => "Pleural_Thickening",
            Pathology::Cardiomegaly => "Cardiomegaly",
            Pathology::Nodule => "Nodule",
            Pathology::Mass => "Mass",
            Pathology::Hernia => "Hernia",
        }
    }
}

impl FromStr for Pathology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace(' ', "_");
        Pathology::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::Manifest(format!("unknown pathology {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum Label {
    #[default]
    Healthy,
    Unhealthy(Vec<Pathology>),
}

impl Label {
    pub fn is_healthy(&self) -> bool {
        matches!(self, Label::Healthy)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Healthy => f.write_str("healthy"),
            Label::Unhealthy(ps) => {
                let names: Vec<&str> = ps.iter().map(|p| p.name()).collect();
                f.write_str(&names.join("|"))
            }
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("healthy") || s.eq_ignore_ascii_case("no finding") {
            return Ok(Label::Healthy);
        }
        let mut ps = s.split('|').map(Pathology::from_str).collect::<Result<Vec<_>>>()?;
        ps.sort();
        ps.dedup();
        Ok(Label::Unhealthy(ps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// File name as listed in the manifest; also the image id.
    pub image: String,
    pub path: PathBuf,
    pub label: Label,
    pub patient_id: Option<String>,
}

/// Reads a manifest, resolving image names against `images_dir`. Records come back sorted by
/// image id.
pub fn read_manifest(manifest: &Path, images_dir: &Path) -> Result<Vec<ImageRecord>> {
    let file = File::open(manifest)?;
    read_manifest_from(file, images_dir)
}

pub fn read_manifest_from(reader: impl Read, images_dir: &Path) -> Result<Vec<ImageRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)));
    let image_col = col(&["image", "image index"]).ok_or_else(|| Error::Manifest("missing `image` column".into()))?;
    let label_col =
        col(&["labels", "label", "finding labels"]).ok_or_else(|| Error::Manifest("missing `labels` column".into()))?;
    let patient_col = col(&["patient_id", "patient-id", "patient id"]);
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::Manifest(format!("row {} is short", line + 2)));
        let image = field(image_col)?.to_string();
        if image.is_empty() {
            return Err(Error::Manifest(format!("row {} has an empty image name", line + 2)));
        }
        let label = field(label_col)?.parse()?;
        let patient_id = match patient_col {
            Some(c) => Some(field(c)?.to_string()).filter(|p| !p.is_empty()),
            None => None,
        };
        out.push(ImageRecord { path: images_dir.join(&image), image, label, patient_id });
    }
    out.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(out)
}

/// Maps an 8-bit intensity to [-1, 1].
pub fn normalize_pixel(p: u8) -> f64 {
    2.0 * (p as f64 / 255.0) - 1.0
}

/// Maps a normalized value back to the 0..255 scale without rounding.
pub fn denormalize(v: f64) -> f64 {
    (v + 1.0) / 2.0 * 255.0
}

pub fn quantize(v: f64) -> u8 {
    denormalize(v).round().clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit grayscale PNG as a `1 x H x W` tensor in [-1, 1].
pub fn load_and_normalize<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let ingest = |reason: String| Error::Ingest { path: path.to_path_buf(), reason };
    let reader = ImageReader::open(path).map_err(|e| ingest(e.to_string()))?;
    let reader = reader.with_guessed_format().map_err(|e| ingest(e.to_string()))?;
    if reader.format() != Some(image::ImageFormat::Png) {
        return Err(ingest("not a PNG file".into()));
    }
    let img = reader.decode().map_err(|e| ingest(e.to_string()))?;
    if img.color() != ColorType::L8 {
        return Err(ingest(format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    Ok(gray_to_tensor(&img.into_luma8()))
}

pub fn gray_to_tensor<S: Scalar>(img: &GrayImage) -> Tensor<S> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&p| S::from_f64_lossy(normalize_pixel(p))).collect();
    Tensor::new(&[1, h as usize, w as usize], data).expect("image buffer length")
}

/// Quantizes a normalized image (any shape ending in `H x W` with one plane) to 8 bits.
pub fn tensor_to_gray<S: Scalar>(t: &Tensor<S>) -> Result<GrayImage> {
    let (h, w) = plane_dims(t)?;
    let data = t.data().iter().map(|v| quantize(v.to_f64_lossy())).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, data).expect("plane length"))
}

pub fn save_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Height and width of a tensor holding exactly one image plane.
pub fn plane_dims<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(contract(format!("expected a single image plane, got shape {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Bilinear resize of a square single-plane image to `size x size` (half-pixel centers,
/// edge clamping). Keeps the input's leading dimensions.
pub fn resize<S: Scalar>(img: &Tensor<S>, size: usize) -> Result<Tensor<S>> {
    let (h, w) = plane_dims(img)?;
    if h != w {
        return Err(contract(format!("resize expects a square image, got {h}x{w}")));
    }
    if size == 0 {
        return Err(contract("resize target must be positive"));
    }
    let scale = h as f64 / size as f64;
    let src = img.data();
    let coord = |d: usize| -> (usize, usize, f64) {
        let c = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(h - 1);
        (lo, hi, c - lo as f64)
    };
    let cols: Vec<_> = (0..size).map(coord).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for &(x0, x1, fx) in &cols {
            let at = |yy: usize, xx: usize| src[yy * w + xx].to_f64_lossy();
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(S::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
        }
    }
    let mut shape = img.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = size;
    shape[n - 1] = size;
    Tensor::new(&shape, out)
}

/// Axis-aligned rectangle in fractional image coordinates, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FracRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Rectangle in pixels, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }
}

impl FracRect {
    fn to_pixels(self, width: usize, height: usize) -> PixelRect {
        let px = |f: f64, n: usize| ((f * n as f64).round().max(0.0) as usize).min(n);
        PixelRect { x0: px(self.x0, width), y0: px(self.y0, height), x1: px(self.x1, width), y1: px(self.y1, height) }
    }

    fn valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x0) && unit(self.x1) && unit(self.y0) && unit(self.y1) && self.x0 < self.x1 && self.y0 < self.y1
    }

    fn overlaps(&self, o: &FracRect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// Box approximation of the two lung fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LungBoxes {
    pub left: FracRect,
    pub right: FracRect,
}

impl Default for LungBoxes {
    fn default() -> Self {
        Self {
            left: FracRect { x0: 0.12, y0: 0.22, x1: 0.46, y1: 0.78 },
            right: FracRect { x0: 0.54, y0: 0.22, x1: 0.88, y1: 0.78 },
        }
    }
}

impl LungBoxes {
    pub fn validate(&self) -> Result<()> {
        if !self.left.valid() || !self.right.valid() {
            return Err(Error::Config("lung boxes must lie within [0, 1] with positive extent".into()));
        }
        if self.left.overlaps(&self.right) {
            return Err(Error::Config("lung boxes must be disjoint".into()));
        }
        Ok(())
    }

    pub fn to_pixels(&self, width: usize, height: usize) -> [PixelRect; 2] {
        [self.left.to_pixels(width, height), self.right.to_pixels(width, height)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord<S> {
    pub image_id: String,
    pub patient_id: Option<String>,
    /// Crop origin (left, top) in source pixels.
    pub x: usize,
    pub y: usize,
    /// `1 x P x P`, normalized to [-1, 1].
    pub pixels: Tensor<S>,
    pub label: Label,
}

impl<S> PatchRecord<S> {
    pub fn rect(&self, side: usize) -> PixelRect {
        PixelRect { x0: self.x, y0: self.y, x1: self.x + side, y1: self.y + side }
    }
}

/// Copies the `side x side` window at `(x, y)` out of a single-plane image.
pub fn crop<S: Scalar>(img: &Tensor<S>, x: usize, y: usize, side: usize) -> Result<Tensor<S>> {
    let (h, w) = plane_dims(img)?;
    if x + side > w || y + side > h {
        return Err(contract(format!("crop {side}x{side} at ({x}, {y}) exceeds {w}x{h} image")));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(side * side);
    for row in y..y + side {
        out.extend_from_slice(&src[row * w + x..row * w + x + side]);
    }
    Tensor::new(&[1, side, side], out)
}

/// Draws `n` crops of side `patch` from the lung boxes of one image.
///
/// Each center is drawn uniformly over the union of the boxes that can hold a patch, then the
/// crop is clamped to stay inside its box.
pub fn extract_patches<S: Scalar>(
    record: &ImageRecord,
    image: &Tensor<S>,
    boxes: &LungBoxes,
    n: usize,
    patch: usize,
    rng: &mut Rng,
) -> Result<Vec<PatchRecord<S>>> {
    if n == 0 || patch == 0 {
        return Err(contract("patch count and size must be positive"));
    }
    let (h, w) = plane_dims(image)?;
    let fitting: Vec<PixelRect> =
        boxes.to_pixels(w, h).into_iter().filter(|r| r.width() >= patch && r.height() >= patch).collect();
    if fitting.is_empty() {
        return Err(Error::Extraction {
            image: record.image.clone(),
            reason: format!("no lung box of the {w}x{h} image fits a {patch}x{patch} patch"),
        });
    }
    let total: usize = fitting.iter().map(PixelRect::area).sum();
    let half = patch / 2;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = rng.index(total)?;
        let rect = fitting
            .iter()
            .find(|r| {
                let hit = k < r.area();
                if !hit {
                    k -= r.area();
                }
                hit
            })
            .expect("draw lies in the union");
        let (cx, cy) = (rect.x0 + k % rect.width(), rect.y0 + k / rect.width());
        let x = cx.saturating_sub(half).clamp(rect.x0, rect.x1 - patch);
        let y = cy.saturating_sub(half).clamp(rect.y0, rect.y1 - patch);
        out.push(PatchRecord {
            image_id: record.image.clone(),
            patient_id: record.patient_id.clone(),
            x,
            y,
            pixels: crop(image, x, y, patch)?,
            label: record.label.clone(),
        });
    }
    Ok(out)
}

/// Extracts patches from every image in manifest order. Each image draws from its own stream
/// forked off `seed` in that order.
pub fn extract_corpus<S: Scalar>(
    records: &[ImageRecord],
    boxes: &LungBoxes,
    n: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<PatchRecord<S>>> {
    boxes.validate()?;
    let mut master = Rng::new(seed);
    let mut out = Vec::with_capacity(records.len() * n);
    for rec in records {
        let mut rng = master.fork();
        let img = load_and_normalize::<S>(&rec.path)?;
        out.extend(extract_patches(rec, &img, boxes, n, patch, &mut rng)?);
    }
    Ok(out)
}

/// A patch split into the visible context and the hidden central target.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample<S> {
    /// `1 x 1 x P x P` with the central region set to the fill value.
    pub context: Tensor<S>,
    /// `1 x 1 x P/2 x P/2`, the original central region.
    pub target: Tensor<S>,
    /// `1 x 1 x P x P`, 1 on the central region, 0 elsewhere.
    pub mask: Tensor<S>,
}

/// Offset and side of the central region of a `side x side` patch.
pub fn central_region(side: usize) -> (usize, usize) {
    (side / 4, side / 2)
}

fn square_side<S: Scalar>(patch: &Tensor<S>) -> Result<usize> {
    let (h, w) = plane_dims(patch)?;
    if h != w || h % 2 != 0 || h < 2 {
        return Err(contract(format!("masking needs a square patch with even side, got {h}x{w}")));
    }
    Ok(h)
}

pub fn make_masked<S: Scalar>(patch: &Tensor<S>, fill: S) -> Result<MaskedSample<S>> {
    let side = square_side(patch)?;
    let (off, inner) = central_region(side);
    let src = patch.data();
    let mut context = src.to_vec();
    let mut mask = vec![S::zero(); side * side];
    let mut target = Vec::with_capacity(inner * inner);
    for y in off..off + inner {
        for x in off..off + inner {
            target.push(src[y * side + x]);
            context[y * side + x] = fill;
            mask[y * side + x] = S::one();
        }
    }
    Ok(MaskedSample {
        context: Tensor::new(&[1, 1, side, side], context)?,
        target: Tensor::new(&[1, 1, inner, inner], target)?,
        mask: Tensor::new(&[1, 1, side, side], mask)?,
    })
}

/// Batched masking: (`N x 1 x P x P` contexts, `N x 1 x P/2 x P/2` targets).
pub fn masked_batch<S: Scalar>(patches: &[&Tensor<S>], fill: S) -> Result<(Tensor<S>, Tensor<S>)> {
    let samples = patches.iter().map(|p| make_masked(p, fill)).collect::<Result<Vec<_>>>()?;
    let contexts: Vec<&Tensor<S>> = samples.iter().map(|s| &s.context).collect();
    let targets: Vec<&Tensor<S>> = samples.iter().map(|s| &s.target).collect();
    Ok((Tensor::concat(&contexts)?, Tensor::concat(&targets)?))
}

/// Writes a `P/2 x P/2` patch into the central region of a `P x P` context.
pub fn composite<S: Scalar>(context: &Tensor<S>, patch: &Tensor<S>) -> Result<Tensor<S>> {
    let side = square_side(context)?;
    let (off, inner) = central_region(side);
    let (ph, pw) = plane_dims(patch)?;
    if (ph, pw) != (inner, inner) {
        return Err(contract(format!("composite expects a {inner}x{inner} patch, got {ph}x{pw}")));
    }
    let mut out = context.clone();
    let dst = out.data_mut();
    for (row, src) in patch.data().chunks(inner).enumerate() {
        let start = (off + row) * side + off;
        dst[start..start + inner].copy_from_slice(src);
    }
    Ok(out)
}

/// Target sizes for a three-way split of `n` items.
fn split_targets(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let train = ((n as f64) * fractions[0]).round() as usize;
    let val = (((n as f64) * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

/// Disjoint, exhaustive train/validation/test split. Items sharing a group key always land in
/// the same split; groups are visited in a seeded random order and fill the splits in turn.
pub fn split_dataset<T, K: Ord + Clone>(
    items: Vec<T>,
    group: impl Fn(&T) -> K,
    fractions: [f64; 3],
    rng: &mut Rng,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(contract("cannot split an empty dataset"));
    }
    let targets = split_targets(items.len(), fractions)?;
    let mut groups: BTreeMap<K, Vec<T>> = BTreeMap::new();
    for item in items {
        groups.entry(group(&item)).or_default().push(item);
    }
    let mut groups: Vec<Vec<T>> = groups.into_values().collect();
    rng.shuffle(&mut groups);
    let mut splits: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut slot = 0;
    for g in groups {
        while slot < 2 && splits[slot].len() >= targets[slot] {
            slot += 1;
        }
        splits[slot].extend(g);
    }
    let [a, b, c] = splits;
    Ok((a, b, c))
}

pub const INDEX_HEADER: [&str; 6] = ["patch_id", "image_id", "patient_id", "x", "y", "label"];

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub patch_id: usize,
    pub image_id: String,
    pub patient_id: Option<String>,
    pub x: usize,
    pub y: usize,
    pub label: Label,
}

impl IndexEntry {
    /// Key that keeps all patches of one patient (or, failing that, one image) together.
    pub fn group(&self) -> &str {
        self.patient_id.as_deref().unwrap_or(&self.image_id)
    }
}

pub fn write_patch_index<S>(out: impl Write, patches: &[PatchRecord<S>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(INDEX_HEADER).map_err(io)?;
    for (i, p) in patches.iter().enumerate() {
        let patient = p.patient_id.clone().unwrap_or_default();
        w.write_record([
            i.to_string(),
            p.image_id.clone(),
            patient,
            p.x.to_string(),
            p.y.to_string(),
            p.label.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_index(reader: impl Read) -> Result<Vec<IndexEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != INDEX_HEADER {
        return Err(Error::Manifest(format!("patch index header must be {}", INDEX_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("index row {}: {e}", line + 2)))?;
        let num = |i: usize| {
            row[i]
                .parse::<usize>()
                .map_err(|_| Error::Manifest(format!("index row {}: bad number {:?}", line + 2, &row[i])))
        };
        out.push(IndexEntry {
            patch_id: num(0)?,
            image_id: row[1].to_string(),
            patient_id: Some(row[2].to_string()).filter(|p| !p.is_empty()),
            x: num(3)?,
            y: num(4)?,
            label: row[5].parse()?,
        });
    }
    Ok(out)
}

const STORE_MAGIC: &[u8; 4] = b"CXPD";
const STORE_VERSION: u32 = 1;

pub fn write_patch_store<'a, S: Scalar, I>(out: impl Write, side: usize, patches: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Tensor<S>>,
    I::IntoIter: ExactSizeIterator,
{
    let patches = patches.into_iter();
    let mut out = BufWriter::new(out);
    out.write_all(STORE_MAGIC)?;
    out.write_all(&STORE_VERSION.to_le_bytes())?;
    out.write_all(&(patches.len() as u32).to_le_bytes())?;
    out.write_all(&(side as u32).to_le_bytes())?;
    for p in patches {
        if plane_dims(p)? != (side, side) {
            return Err(contract(format!("patch of shape {:?} in a store of side {side}", p.shape())));
        }
        for v in p.data() {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a patch store; patches come back as `1 x side x side` tensors.
pub fn read_patch_store<S: Scalar>(reader: impl Read) -> Result<(usize, Vec<Tensor<S>>)> {
    let mut r = BufReader::new(reader);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| Error::Truncated("patch store header"))?;
    if &head[..4] != STORE_MAGIC {
        return Err(Error::Manifest("not a CXPD patch store".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    if word(4) != STORE_VERSION {
        return Err(Error::VersionMismatch { kind: "patch store", found: word(4), expected: STORE_VERSION });
    }
    let (count, side) = (word(8) as usize, word(12) as usize);
    let mut buf = vec![0u8; side * side * 4];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| Error::Truncated("patch store payload"))?;
        let data =
            buf.chunks_exact(4).map(|b| S::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect();
        out.push(Tensor::new(&[1, side, side], data)?);
    }
    Ok((side, out))
}

/// Writes `value` (0..255) into a rectangle of an 8-bit image; used to paint synthetic lesions.
pub fn paint_rect(img: &mut GrayImage, rect: PixelRect, value: u8) {
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            img.put_pixel(x as u32, y as u32, Luma([value]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str) -> ImageRecord {
        ImageRecord { image: name.into(), path: PathBuf::from(name), label: Label::Healthy, patient_id: None }
    }

    #[test]
    fn pixel_normalization() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(128) - 0.003922).abs() < 1e-6);
        for p in 0..=255u8 {
            assert_eq!(quantize(normalize_pixel(p)), p);
        }
    }

    #[test]
    fn labels_parse_and_print() {
        assert_eq!("No Finding".parse::<Label>().unwrap(), Label::Healthy);
        let l: Label = "Mass|Pleural Thickening".parse().unwrap();
        assert_eq!(l, Label::Unhealthy(vec![Pathology::PleuralThickening, Pathology::Mass]));
        assert_eq!(l.to_string(), "Pleural_Thickening|Mass");
        assert!("Broken Arm".parse::<Label>().is_err());
    }

    #[test]
    fn manifest_parsing() {
        let csv = "image,labels,patient_id\nb.png,Nodule,7\na.png,No Finding,3\n";
        let recs = read_manifest_from(csv.as_bytes(), Path::new("imgs")).unwrap();
        assert_eq!(recs[0].image, "a.png");
        assert_eq!(recs[0].path, Path::new("imgs/a.png"));
        assert_eq!(recs[1].label, Label::Unhealthy(vec![Pathology::Nodule]));
        assert_eq!(recs[1].patient_id.as_deref(), Some("7"));
        assert!(matches!(read_manifest_from("file,x\na,b\n".as_bytes(), Path::new(".")), Err(Error::Manifest(_))));
    }

    #[test]
    fn resize_constant_and_shape() {
        let img = Tensor::<f64>::full(&[1, 16, 16], 0.25);
        let r = resize(&img, 5).unwrap();
        assert_eq!(r.shape(), &[1, 5, 5]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(resize(&Tensor::<f64>::zeros(&[1, 4, 3]), 2).is_err());
    }

    #[test]
    fn resize_upsample_is_monotone_per_row() {
        let img = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize(&img, 4).unwrap();
        for row in r.data().chunks(4) {
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn patches_stay_in_boxes() {
        let img = Tensor::<f64>::from_fn(&[1, 256, 256], |i| (i % 255) as f64 / 255.0);
        let boxes = LungBoxes::default();
        let rects = boxes.to_pixels(256, 256);
        let mut rng = Rng::new(4);
        let ps = extract_patches(&record("a"), &img, &boxes, 20, 64, &mut rng).unwrap();
        assert_eq!(ps.len(), 20);
        for p in &ps {
            let r = p.rect(64);
            assert!(rects.iter().any(|b| b.contains_rect(&r)));
            assert_eq!(p.pixels, crop(&img, p.x, p.y, 64).unwrap());
        }
    }

    #[test]
    fn exact_fit_box_forces_crop() {
        let img = Tensor::<f64>::zeros(&[1, 100, 100]);
        let boxes = LungBoxes {
            left: FracRect { x0: 0.10, y0: 0.20, x1: 0.42, y1: 0.52 },
            right: FracRect { x0: 0.60, y0: 0.60, x1: 0.70, y1: 0.70 },
        };
        let ps = extract_patches(&record("a"), &img, &boxes, 1, 32, &mut Rng::new(0)).unwrap();
        assert_eq!((ps[0].x, ps[0].y), (10, 20));
    }

    #[test]
    fn box_too_small_is_an_error() {
        let img = Tensor::<f64>::zeros(&[1, 64, 64]);
        let err =
            extract_patches(&record("tiny.png"), &img, &LungBoxes::default(), 1, 64, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Extraction { ref image, .. } if image == "tiny.png"));
    }

    #[test]
    fn masking_geometry_and_partition() {
        let patch = Tensor::<f64>::from_fn(&[1, 128, 128], |i| (i as f64 * 0.01).sin());
        let s = make_masked(&patch, 0.0).unwrap();
        assert_eq!(s.target.shape(), &[1, 1, 64, 64]);
        for y in 0..128 {
            for x in 0..128 {
                let inside = (32..=95).contains(&y) && (32..=95).contains(&x);
                assert_eq!(s.mask.get(&[0, 0, y, x]).unwrap(), if inside { 1.0 } else { 0.0 });
                if inside {
                    assert_eq!(s.context.get(&[0, 0, y, x]).unwrap(), 0.0);
                }
            }
        }
        let rebuilt = composite(&s.context, &s.target).unwrap();
        assert_eq!(rebuilt.data(), patch.data());
        assert!(make_masked(&Tensor::<f64>::zeros(&[1, 7, 7]), 0.0).is_err());
    }

    #[test]
    fn split_sizes_and_grouping() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_dataset(items, |&i| i, [0.8, 0.1, 0.1], &mut Rng::new(1)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let same_patient: Vec<(usize, &str)> = (0..30).map(|i| (i, "p1")).collect();
        let (a, b, c) = split_dataset(same_patient, |r| r.1, [0.5, 0.25, 0.25], &mut Rng::new(2)).unwrap();
        assert_eq!([a.len(), b.len(), c.len()].iter().filter(|&&n| n == 30).count(), 1);

        let empty: Vec<usize> = Vec::new();
        assert!(split_dataset(empty, |&i| i, [1.0, 0.0, 0.0], &mut Rng::new(0)).is_err());
        assert!(split_dataset(vec![1], |&i| i, [0.5, 0.1, 0.1], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn paper_scale_split() {
        let n = 61_241;
        let f = [59_481.0 / n as f64, 1_760.0 / n as f64, 0.0];
        let (a, b, c) = split_dataset((0..n).collect::<Vec<_>>(), |&i| i, f, &mut Rng::new(3)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (59_481, 1_760, 0));
    }

    #[test]
    fn index_and_store_round_trip() {
        let patches: Vec<PatchRecord<f32>> = (0..3)
            .map(|i| PatchRecord {
                image_id: format!("img{i}.png"),
                patient_id: (i > 0).then(|| "p9".to_string()),
                x: i,
                y: 2 * i,
                pixels: Tensor::from_fn(&[1, 4, 4], |j| (j as f32 - 8.0) / 8.0),
                label: if i == 1 { "Mass".parse().unwrap() } else { Label::Healthy },
            })
            .collect();
        let mut idx = Vec::new();
        write_patch_index(&mut idx, &patches).unwrap();
        let entries = read_patch_index(idx.as_slice()).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[1].label, patches[1].label);
        assert_eq!((entries[2].x, entries[2].y), (2, 4));
        assert_eq!(entries[0].group(), "img0.png");
        assert_eq!(entries[2].group(), "p9");

        let mut store = Vec::new();
        let pix: Vec<Tensor<f32>> = patches.iter().map(|p| p.pixels.clone()).collect();
        write_patch_store(&mut store, 4, &pix).unwrap();
        let (side, back) = read_patch_store::<f32>(store.as_slice()).unwrap();
        assert_eq!(side, 4);
        assert_eq!(back, pix);
        assert!(matches!(read_patch_store::<f32>(&store[..store.len() - 1]), Err(Error::Truncated(_))));
    }
}

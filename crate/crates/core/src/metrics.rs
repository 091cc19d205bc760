//! Reconstruction quality measures and diff-map anomaly highlighting.
//!
//! `mse`, `psnr` and `ssim` take images on the 0..255 intensity scale; use [`intensities`] to
//! convert normalized tensors first.

use std::io::Write;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::data::{central_region, crop, denormalize, plane_dims, quantize, PixelRect};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
pub const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);

/// Maps a normalized tensor in [-1, 1] to 0..255 intensities (unrounded).
pub fn intensities<S: Scalar>(t: &Tensor<S>) -> Tensor<f64> {
    let data = t.data().iter().map(|v| denormalize(v.to_f64_lossy())).collect();
    Tensor::new(t.shape(), data).expect("same length")
}

fn check_same(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    if a.is_empty() {
        return Err(contract("metrics need non-empty images"));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.map(|v| v / total)
}

/// Separable Gaussian filter keeping only positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean of the local SSIM map (11x11 Gaussian window, sigma 1.5) over every position where the
/// window fits inside the image.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = plane_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let k = gaussian_kernel();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_x = filter_valid(x, h, w, &k);
    let mu_y = filter_valid(y, h, w, &k);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let (vx, vy, cxy) = (xx[i] - mx * mx, yy[i] - my * my, xy[i] - mx * my);
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Doubled absolute difference of two 8-bit images, saturating at 255.
pub fn diff_map(a: &GrayImage, b: &GrayImage) -> Result<GrayImage> {
    if a.dimensions() != b.dimensions() {
        let dims = |i: &GrayImage| vec![i.height() as usize, i.width() as usize];
        return Err(Error::ShapeMismatch { left: dims(a), right: dims(b) });
    }
    let data = a.as_raw().iter().zip(b.as_raw()).map(|(&p, &q)| (2 * p.abs_diff(q) as u16).min(255) as u8).collect();
    Ok(GrayImage::from_raw(a.width(), a.height(), data).expect("same dimensions"))
}

/// Diff map of two normalized single-plane tensors, quantized to 8 bits first.
pub fn diff_map_normalized<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<GrayImage> {
    let to_gray = |t: &Tensor<S>| -> Result<GrayImage> {
        let (h, w) = plane_dims(t)?;
        let px = t.data().iter().map(|v| quantize(v.to_f64_lossy())).collect();
        Ok(GrayImage::from_raw(w as u32, h as u32, px).expect("plane length"))
    };
    diff_map(&to_gray(a)?, &to_gray(b)?)
}

/// Mean map intensity inside `region` and over the rest of the map.
pub fn anomaly_energy(map: &GrayImage, region: PixelRect) -> Result<(f64, f64)> {
    let (w, h) = (map.width() as usize, map.height() as usize);
    if region.x0 >= region.x1 || region.y0 >= region.y1 || region.x1 > w || region.y1 > h {
        return Err(contract(format!("region {region:?} is empty or outside the {w}x{h} map")));
    }
    if region.area() == w * h {
        return Err(contract("region covers the whole map, nothing lies outside"));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for (x, y, Luma([v])) in map.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        if (region.x0..region.x1).contains(&x) && (region.y0..region.y1).contains(&y) {
            inside += *v as f64;
        } else {
            outside += *v as f64;
        }
    }
    Ok((inside / region.area() as f64, outside / (w * h - region.area()) as f64))
}

/// Which part of a patch the quality metrics compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricRegion {
    /// Only the inpainted central region.
    #[default]
    Central,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Compares an original normalized patch with its reconstruction.
pub fn pair_metrics<S: Scalar>(
    pair_id: impl Into<String>,
    original: &Tensor<S>,
    reconstruction: &Tensor<S>,
    region: MetricRegion,
) -> Result<PairMetrics> {
    let select = |t: &Tensor<S>| -> Result<Tensor<f64>> {
        let (h, w) = plane_dims(t)?;
        let t = t.reshape(&[1, h, w])?;
        let t = match region {
            MetricRegion::Full => t,
            MetricRegion::Central => {
                let (off, inner) = central_region(h);
                crop(&t, off, off, inner)?
            }
        };
        Ok(intensities(&t))
    };
    let (a, b) = (select(original)?, select(reconstruction)?);
    let m = mse(&a, &b)?;
    Ok(PairMetrics { pair_id: pair_id.into(), mse: m, psnr: psnr_from_mse(m), ssim: ssim(&a, &b)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Number of values that entered the aggregate.
    pub count: usize,
}

impl Aggregate {
    /// Aggregates the finite values; infinite PSNR sentinels are left out.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let vals: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), count: vals.len() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<PairMetrics>,
}

pub const REPORT_HEADER: [&str; 4] = ["pair_id", "mse", "psnr", "ssim"];

impl MetricsReport {
    pub fn mse(&self) -> Aggregate {
        Aggregate::of(self.records.iter().map(|r| r.mse))
    }

    pub fn psnr(&self) -> Aggregate {
        Aggregate::of(self.records.iter().map(|r| r.psnr))
    }

    pub fn ssim(&self) -> Aggregate {
        Aggregate::of(self.records.iter().map(|r| r.ssim))
    }

    /// CSV with one row per pair followed by `mean` and `std` summary rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER).map_err(io)?;
        for r in &self.records {
            w.write_record([r.pair_id.clone(), fmt(r.mse), fmt(r.psnr), fmt(r.ssim)]).map_err(io)?;
        }
        let (m, p, s) = (self.mse(), self.psnr(), self.ssim());
        w.write_record(["mean".into(), fmt(m.mean), fmt(p.mean), fmt(s.mean)]).map_err(io)?;
        w.write_record(["std".into(), fmt(m.std), fmt(p.std), fmt(s.std)]).map_err(io)?;
        w.flush()?;
        Ok(())
    }

    /// Parses a report written by [`MetricsReport::write_csv`], returning the per-pair records
    /// and the summary rows as (mean, std) triples.
    pub fn read_csv(input: impl std::io::Read) -> Result<(Self, [f64; 3], [f64; 3])> {
        let mut rdr = csv::Reader::from_reader(input);
        let bad = |m: String| Error::Manifest(format!("metrics report: {m}"));
        let mut records = Vec::new();
        let (mut mean, mut std) = (None, None);
        for row in rdr.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| row[i].parse::<f64>().map_err(|_| bad(format!("bad number {:?}", &row[i])));
            let vals = [num(1)?, num(2)?, num(3)?];
            match &row[0] {
                "mean" => mean = Some(vals),
                "std" => std = Some(vals),
                id => records.push(PairMetrics { pair_id: id.to_string(), mse: vals[0], psnr: vals[1], ssim: vals[2] }),
            }
        }
        match (mean, std) {
            (Some(m), Some(s)) => Ok((Self { records }, m, s)),
            _ => Err(bad("missing summary rows".into())),
        }
    }
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64, side: usize) -> Tensor<f64> {
        Tensor::full(&[1, side, side], v)
    }

    #[test]
    fn mse_and_psnr_closed_forms() {
        let (a, b) = (constant(0.0, 16), constant(10.0, 16));
        assert_eq!(mse(&a, &b).unwrap(), 100.0);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 28.1308).abs() < 1e-4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(matches!(mse(&a, &constant(0.0, 8)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ssim_constant_images() {
        let a = constant(0.0, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = constant(255.0, 16);
        let expected = SSIM_C1 / (65025.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(ssim(&constant(0.0, 10), &constant(0.0, 10)).is_err());
    }

    #[test]
    fn diff_map_rules() {
        let a = GrayImage::from_raw(2, 1, vec![100, 0]).unwrap();
        let b = GrayImage::from_raw(2, 1, vec![120, 200]).unwrap();
        assert_eq!(diff_map(&a, &b).unwrap().as_raw(), &vec![40, 255]);
        assert!(diff_map(&a, &a).unwrap().as_raw().iter().all(|&v| v == 0));
    }

    #[test]
    fn anomaly_energy_blob() {
        let mut map = GrayImage::new(8, 8);
        map.put_pixel(3, 3, Luma([200]));
        let region = PixelRect { x0: 2, y0: 2, x1: 6, y1: 6 };
        let (inside, outside) = anomaly_energy(&map, region).unwrap();
        assert_eq!((inside, outside), (200.0 / 16.0, 0.0));
        let uniform = GrayImage::from_pixel(8, 8, Luma([7]));
        assert_eq!(anomaly_energy(&uniform, region).unwrap(), (7.0, 7.0));
        assert!(anomaly_energy(&map, PixelRect { x0: 2, y0: 2, x1: 2, y1: 6 }).is_err());
        assert!(anomaly_energy(&map, PixelRect { x0: 0, y0: 0, x1: 8, y1: 8 }).is_err());
    }

    #[test]
    fn report_summary_round_trips() {
        let report = MetricsReport {
            records: vec![
                PairMetrics { pair_id: "0".into(), mse: 0.0, psnr: f64::INFINITY, ssim: 1.0 },
                PairMetrics { pair_id: "1".into(), mse: 0.1 + 0.2, psnr: 1.0 / 3.0, ssim: 0.7 },
                PairMetrics { pair_id: "2".into(), mse: 2.5, psnr: 20.0, ssim: -0.1 },
            ],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let (back, mean, std) = MetricsReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, report);
        assert_eq!(mean, [back.mse().mean, back.psnr().mean, back.ssim().mean]);
        assert_eq!(std, [back.mse().std, back.psnr().std, back.ssim().std]);
        assert_eq!(back.psnr().count, 2);
    }

    #[test]
    fn central_region_metrics() {
        let a = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |i| ((i % 7) as f64 / 7.0) * 2.0 - 1.0);
        let mut b = a.clone();
        b.set(&[0, 0, 0, 0], 1.0).unwrap();
        let central = pair_metrics("x", &a, &b, MetricRegion::Central).unwrap();
        assert_eq!(central.mse, 0.0);
        let full = pair_metrics("x", &a.reshape(&[1, 32, 32]).unwrap(), &b, MetricRegion::Full).unwrap();
        assert!(full.mse > 0.0);
    }
}

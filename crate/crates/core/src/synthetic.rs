//! Seeded synthetic "rib texture" patches for desk-scale experiments.

use std::f64::consts::PI;

use crate::data::PixelRect;
use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GratingSpec {
    pub amplitude: f64,
    pub noise_std: f64,
    /// Spatial frequency range in cycles per pixel.
    pub frequency: (f64, f64),
    /// Maximum tilt of the stripes away from horizontal, in radians.
    pub max_tilt: f64,
}

impl Default for GratingSpec {
    fn default() -> Self {
        Self { amplitude: 0.6, noise_std: 0.05, frequency: (1.0 / 12.0, 1.0 / 6.0), max_tilt: PI / 6.0 }
    }
}

/// One `1 x side x side` grating in [-1, 1].
pub fn grating<S: Scalar>(side: usize, spec: &GratingSpec, rng: &mut Rng) -> Result<Tensor<S>> {
    let freq = rng.uniform_range(spec.frequency.0, spec.frequency.1);
    let tilt = rng.uniform_range(-spec.max_tilt, spec.max_tilt);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let (dx, dy) = (tilt.sin(), tilt.cos());
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let wave = (2.0 * PI * freq * (x as f64 * dx + y as f64 * dy) + phase).sin();
            let v = spec.amplitude * wave + rng.normal(0.0, spec.noise_std)?;
            data.push(S::from_f64_lossy(v.clamp(-1.0, 1.0)));
        }
    }
    Tensor::new(&[1, side, side], data)
}

/// `count` independent gratings drawn from one seed.
pub fn rib_corpus<S: Scalar>(count: usize, side: usize, spec: &GratingSpec, seed: u64) -> Result<Vec<Tensor<S>>> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| grating(side, spec, &mut rng)).collect()
}

/// The centered `blob x blob` square of a `side x side` patch.
pub fn blob_rect(side: usize, blob: usize) -> Result<PixelRect> {
    if blob == 0 || blob > side {
        return Err(contract(format!("blob of side {blob} does not fit a {side}x{side} patch")));
    }
    let start = (side - blob) / 2;
    Ok(PixelRect { x0: start, y0: start, x1: start + blob, y1: start + blob })
}

/// Copy of `patch` with a bright square of side `blob` at its center.
pub fn insert_blob<S: Scalar>(patch: &Tensor<S>, blob: usize, value: f64) -> Result<Tensor<S>> {
    let (h, w) = crate::data::plane_dims(patch)?;
    if h != w {
        return Err(contract(format!("expected a square patch, got {h}x{w}")));
    }
    let r = blob_rect(h, blob)?;
    let mut out = patch.clone();
    let data = out.data_mut();
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            data[y * w + x] = S::from_f64_lossy(value);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_bounded() {
        let a = rib_corpus::<f64>(5, 32, &GratingSpec::default(), 9).unwrap();
        let b = rib_corpus::<f64>(5, 32, &GratingSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        let c = rib_corpus::<f64>(5, 32, &GratingSpec::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blob_is_central() {
        let p = Tensor::<f64>::zeros(&[1, 32, 32]);
        let q = insert_blob(&p, 6, 1.0).unwrap();
        assert_eq!(blob_rect(32, 6).unwrap(), PixelRect { x0: 13, y0: 13, x1: 19, y1: 19 });
        assert_eq!(q.sum().unwrap(), 36.0);
        assert_eq!(q.get(&[0, 13, 13]).unwrap(), 1.0);
        assert_eq!(q.get(&[0, 12, 13]).unwrap(), 0.0);
    }
}

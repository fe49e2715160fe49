//! Multi-band raster and mask carriers plus the [-1,1] normalization.

use crate::error::{arg_err, data_err, shape_err, Result};
use crate::numcore::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Band order used everywhere: red, blue, green, NIR, SWIR1, SWIR2.
pub const BAND_NAMES: [&str; 6] = ["red", "blue", "green", "nir", "swir1", "swir2"];
pub const BANDS: usize = 6;

/// Indices of the red/green/blue bands inside `BAND_NAMES`.
pub const RGB_BANDS: [usize; 3] = [0, 2, 1];

/// H x W x C grid of 32-bit reflectance values, stored band-major
/// ([c][y][x]).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Raster {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err(format!(
                "raster {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Raster { h, w, c, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        &self.data[b * self.h * self.w..(b + 1) * self.h * self.w]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        &mut self.data[b * hw..(b + 1) * hw]
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.data[(b * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, v: f32) {
        self.data[(b * self.h + y) * self.w + x] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// View as a [C,H,W] tensor in the requested precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::c(v as f64)).collect();
        Tensor::new(vec![self.c, self.h, self.w], data).expect("raster invariant")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.data().iter().map(|&v| v.f64() as f32).collect();
        Raster::new(h, w, c, data)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(crate::error::Error::NonFinite(format!(
                    "{context}: raster element {i} is {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// H x W binary grid; 1 marks contaminated/missing pixels, 0 clear ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(data_err(format!("mask must be binary, found value {bad}")));
        }
        Ok(Mask { h, w, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn coverage(&self) -> f64 {
        self.data.iter().map(|&v| v as u64).sum::<u64>() as f64 / self.data.len() as f64
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Mean size of 4-connected components of ones; 0 when there are none.
    pub fn mean_component_size(&self) -> f64 {
        let mut seen = vec![false; self.data.len()];
        let mut components = 0usize;
        let mut total = 0usize;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                total += 1;
                let (y, x) = (i / self.w, i % self.w);
                let mut push = |yy: usize, xx: usize, stack: &mut Vec<usize>| {
                    let j = yy * self.w + xx;
                    if self.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut stack);
                }
                if y + 1 < self.h {
                    push(y + 1, x, &mut stack);
                }
                if x > 0 {
                    push(y, x - 1, &mut stack);
                }
                if x + 1 < self.w {
                    push(y, x + 1, &mut stack);
                }
            }
        }
        if components == 0 {
            0.0
        } else {
            total as f64 / components as f64
        }
    }

    /// Morphological erosion by `radius` pixels (4-neighbourhood),
    /// shrinking masked regions. Models under-detection at cloud edges.
    pub fn eroded(&self, radius: usize) -> Mask {
        let mut cur = self.clone();
        for _ in 0..radius {
            let mut next = cur.clone();
            for y in 0..self.h {
                for x in 0..self.w {
                    if cur.get(y, x) == 0 {
                        continue;
                    }
                    let edge = y == 0
                        || x == 0
                        || y + 1 == self.h
                        || x + 1 == self.w
                        || cur.get(y - 1, x) == 0
                        || cur.get(y + 1, x) == 0
                        || cur.get(y, x - 1) == 0
                        || cur.get(y, x + 1) == 0;
                    if edge {
                        next.set(y, x, 0);
                    }
                }
            }
            cur = next;
        }
        cur
    }
}

/// Per-band affine coefficients mapping physical reflectance into the
/// [-1,1] training range: norm = 2*(x - offset)/scale - 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCoeffs {
    pub offset: Vec<f32>,
    pub scale: Vec<f32>,
}

impl NormCoeffs {
    /// Identity mapping of [0,1] onto [-1,1] per band.
    pub fn unit(bands: usize) -> Self {
        NormCoeffs {
            offset: vec![0.0; bands],
            scale: vec![1.0; bands],
        }
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.offset.len() != bands || self.scale.len() != bands {
            return Err(shape_err(format!(
                "normalization coefficients cover {} bands, rasters have {bands}",
                self.offset.len()
            )));
        }
        if let Some(s) = self.scale.iter().find(|&&s| s <= 0.0) {
            return Err(arg_err(format!("normalization scale must be positive, got {s}")));
        }
        Ok(())
    }
}

/// Min/max scan over the training rasters, per band.
pub fn compute_norm_coeffs<'a>(rasters: impl Iterator<Item = &'a Raster>) -> Result<NormCoeffs> {
    let mut mins = vec![f32::INFINITY; BANDS];
    let mut maxs = vec![f32::NEG_INFINITY; BANDS];
    let mut any = false;
    for r in rasters {
        any = true;
        for b in 0..r.c.min(BANDS) {
            for &v in r.band(b) {
                mins[b] = mins[b].min(v);
                maxs[b] = maxs[b].max(v);
            }
        }
    }
    if !any {
        return Err(data_err("cannot compute normalization from an empty set"));
    }
    let mut scale = Vec::with_capacity(BANDS);
    for b in 0..BANDS {
        let s = maxs[b] - mins[b];
        if s <= 0.0 {
            return Err(arg_err(format!(
                "band {b} has zero range [{}, {}]",
                mins[b], maxs[b]
            )));
        }
        scale.push(s);
    }
    Ok(NormCoeffs {
        offset: mins,
        scale,
    })
}

/// Map physical reflectance into [-1,1] using per-band coefficients.
pub fn normalize(raster: &Raster, coeffs: &NormCoeffs) -> Result<Raster> {
    coeffs.validate(raster.c)?;
    let mut out = raster.clone();
    for b in 0..raster.c {
        let (off, sc) = (coeffs.offset[b], coeffs.scale[b]);
        for v in out.band_mut(b) {
            *v = 2.0 * (*v - off) / sc - 1.0;
        }
    }
    Ok(out)
}

/// Inverse of `normalize`.
pub fn denormalize(raster: &Raster, coeffs: &NormCoeffs) -> Result<Raster> {
    coeffs.validate(raster.c)?;
    let mut out = raster.clone();
    for b in 0..raster.c {
        let (off, sc) = (coeffs.offset[b], coeffs.scale[b]);
        for v in out.band_mut(b) {
            *v = off + sc * (*v + 1.0) / 2.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_maps_to_zero() {
        let mut r = Raster::zeros(2, 2, 6);
        for b in 0..6 {
            for v in r.band_mut(b) {
                *v = 0.5;
            }
        }
        let n = normalize(&r, &NormCoeffs::unit(6)).unwrap();
        for &v in n.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn normalize_roundtrip_within_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut r = Raster::zeros(8, 8, 6);
        for v in r.data_mut() {
            *v = rng.gen::<f32>();
        }
        let coeffs = NormCoeffs {
            offset: vec![0.02, 0.0, 0.05, 0.1, 0.0, 0.01],
            scale: vec![0.9, 1.0, 0.8, 0.7, 1.0, 0.5],
        };
        let back = denormalize(&normalize(&r, &coeffs).unwrap(), &coeffs).unwrap();
        assert!(r.max_abs_diff(&back) <= 1e-6);
    }

    #[test]
    fn coefficients_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rasters = Vec::new();
        for _ in 0..4 {
            let mut r = Raster::zeros(6, 6, 6);
            for v in r.data_mut() {
                *v = rng.gen::<f32>();
            }
            rasters.push(r);
        }
        let a = compute_norm_coeffs(rasters.iter()).unwrap();
        let b = compute_norm_coeffs(rasters.iter()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_scale_rejected() {
        let r = Raster::zeros(4, 4, 6);
        assert!(compute_norm_coeffs(std::iter::once(&r)).is_err());
        let bad = NormCoeffs {
            offset: vec![0.0; 6],
            scale: vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0],
        };
        assert!(normalize(&r, &bad).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(2, 2, vec![0, 1, 2, 0]).is_err());
    }

    #[test]
    fn component_size_counts_blobs() {
        // Two blobs: 3 pixels and 1 pixel -> mean 2.
        let mut m = Mask::zeros(4, 4);
        m.set(0, 0, 1);
        m.set(0, 1, 1);
        m.set(1, 0, 1);
        m.set(3, 3, 1);
        assert_eq!(m.mean_component_size(), 2.0);
    }
}

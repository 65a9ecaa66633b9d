//! Output quality metrics: PSNR, masked-region PSNR, and a pluggable
//! perceptual distance.
//!
//! PSNR uses MAX = 1 (images live in `[0,1]`) and caps at 100 dB so exact
//! matches stay finite in aggregates. The masked variant averages squared
//! error over the mask's pixels (all channels) per image; aggregation over
//! scenes averages the resulting dB values.
//!
//! The perceptual metric is an interface: when no backend is registered the
//! report carries an explicit null, never a fabricated number. The bundled
//! [`ToyPerceptual`] backend is a small fixed-weight conv stack — enough to
//! give the perceptual loss term and metric a deterministic, differentiable
//! realization without a pretrained network. Its localized variant follows
//! the convention of evaluating the mask bounding box dilated by a margin.

use ndarray::{Array2, Array3, ArrayD};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{Backend, PlainBackend, Scalar};

/// Cap applied when MSE underflows to zero (identical inputs).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Dilation margin (pixels) around the mask bounding box for localized
/// perceptual evaluation.
pub const CROP_MARGIN: usize = 4;

fn masked_mse(a: &Array3<f32>, b: &Array3<f32>, mask: Option<&Array2<f32>>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::data(format!(
            "psnr: image shapes disagree ({:?} vs {:?})",
            a.dim(),
            b.dim()
        )));
    }
    let (c, h, w) = a.dim();
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::data(format!(
                "psnr: mask shape {:?} does not cover {h}×{w} images",
                m.dim()
            )));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in 0..h {
        for cc in 0..w {
            if let Some(m) = mask {
                if m[[r, cc]] == 0.0 {
                    continue;
                }
            }
            for ch in 0..c {
                let d = a[[ch, r, cc]] as f64 - b[[ch, r, cc]] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::data("psnr: mask selects no pixels"));
    }
    Ok(sum / count as f64)
}

fn mse_to_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

/// Peak signal-to-noise ratio in dB over the full image, MAX = 1.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    Ok(mse_to_db(masked_mse(a, b, None)?))
}

/// PSNR with squared error averaged only over `mask = 1` pixels (all
/// channels). The mask must select at least one pixel.
pub fn psnr_mask(a: &Array3<f32>, b: &Array3<f32>, mask: &Array2<f32>) -> Result<f64> {
    Ok(mse_to_db(masked_mse(a, b, Some(mask))?))
}

/// Inclusive-exclusive bounding box `(r0, c0, r1, c1)` of the mask's set
/// pixels, dilated by `margin` and clamped to the image bounds.
pub fn mask_bbox(mask: &Array2<f32>, margin: usize) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != 0.0 {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r + 1);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 == h {
        return Err(Error::data("bounding box: mask selects no pixels"));
    }
    Ok((
        r0.saturating_sub(margin),
        c0.saturating_sub(margin),
        (r1 + margin).min(h),
        (c1 + margin).min(w),
    ))
}

/// Crops `(C, H, W)` to a bounding box from [`mask_bbox`].
pub fn crop(image: &Array3<f32>, bbox: (usize, usize, usize, usize)) -> Array3<f32> {
    let (r0, c0, r1, c1) = bbox;
    image.slice(ndarray::s![.., r0..r1, c0..c1]).to_owned()
}

/// Evaluation region for the perceptual metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Full,
    /// Mask bounding box dilated by [`CROP_MARGIN`].
    MaskedCrop,
}

/// A registered perceptual distance.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    /// Distance between two `(C, H, W)` images; 0 for identical inputs.
    fn distance(&self, a: &Array3<f32>, b: &Array3<f32>) -> Result<f64>;
}

/// Dispatches to the registered backend, or reports an explicit absence.
/// Backend failures surface as errors, distinct from `Ok(None)` (absence).
pub fn perceptual(
    backend: Option<&dyn PerceptualBackend>,
    a: &Array3<f32>,
    b: &Array3<f32>,
    region: Region,
    mask: Option<&Array2<f32>>,
) -> Result<Option<f64>> {
    let Some(be) = backend else { return Ok(None) };
    let value = match region {
        Region::Full => be.distance(a, b)?,
        Region::MaskedCrop => {
            let m = mask.ok_or_else(|| Error::data("perceptual: masked crop needs a mask"))?;
            let bbox = mask_bbox(m, CROP_MARGIN)?;
            be.distance(&crop(a, bbox), &crop(b, bbox))?
        }
    };
    Ok(Some(value))
}

/// Per-scene metric row.
#[derive(Clone, Debug)]
pub struct MetricRow {
    /// Scene seed, the corpus-stable identifier.
    pub scene: u64,
    pub psnr: f64,
    pub psnr_mask: f64,
    /// `None` when no perceptual backend is registered.
    pub perceptual: Option<f64>,
}

/// Aggregate over a set of rows; dB values are averaged per scene.
#[derive(Clone, Debug)]
pub struct MetricSummary {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_psnr_mask: f64,
    pub mean_perceptual: Option<f64>,
}

pub fn summarize(rows: &[MetricRow]) -> Result<MetricSummary> {
    if rows.is_empty() {
        return Err(Error::data("metric summary over zero scenes"));
    }
    let n = rows.len() as f64;
    let mean_perceptual = if rows.iter().all(|r| r.perceptual.is_some()) {
        Some(rows.iter().map(|r| r.perceptual.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    Ok(MetricSummary {
        count: rows.len(),
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_psnr_mask: rows.iter().map(|r| r.psnr_mask).sum::<f64>() / n,
        mean_perceptual,
    })
}

/// Deterministic two-layer conv feature extractor with frozen fan-in
/// weights; the perceptual distance is the mean squared feature difference
/// averaged over layers. Differentiable through any [`Backend`], so the
/// same definition serves both the training loss term and evaluation.
pub struct ToyPerceptual {
    /// `(weights (cout, cin, 3, 3), bias (cout))` per stride-2 layer,
    /// stored at full precision and cast per execution.
    layers: Vec<(ArrayD<f64>, ArrayD<f64>)>,
    seed: u64,
}

impl ToyPerceptual {
    pub const DEFAULT_SEED: u64 = 0x70e5;

    pub fn new(seed: u64, in_channels: usize) -> ToyPerceptual {
        let mut rng = derive_rng(seed, "perceptual.weights", 0);
        let chans = [in_channels, 8, 16];
        let mut layers = Vec::new();
        for i in 0..2 {
            let (cin, cout) = (chans[i], chans[i + 1]);
            let w = crate::model::params::init_fan_in::<f64>(
                &mut rng,
                &[cout, cin, 3, 3],
                cin * 9,
            );
            let b = crate::model::params::zeros::<f64>(&[cout]);
            layers.push((w, b));
        }
        ToyPerceptual { layers, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Builds the distance inside any backend (tape or eager).
    pub fn distance_in<F: Scalar, B: Backend<F>>(&self, be: &mut B, a: &B::T, b: &B::T) -> B::T {
        let mut fa = a.clone();
        let mut fb = b.clone();
        let mut total: Option<B::T> = None;
        for (w, bias) in &self.layers {
            let wc = be.constant(w.mapv(F::from_f64));
            let bc = be.constant(bias.mapv(F::from_f64));
            fa = be.conv2d(&fa, &wc, Some(&bc), 2, 1);
            fa = be.silu(&fa);
            fb = be.conv2d(&fb, &wc, Some(&bc), 2, 1);
            fb = be.silu(&fb);
            let d = be.sub(&fa, &fb);
            let sq = be.mul(&d, &d);
            let m = be.mean_all(&sq);
            total = Some(match total {
                Some(t) => be.add(&t, &m),
                None => m,
            });
        }
        let t = total.expect("at least one layer");
        be.scale(&t, 1.0 / self.layers.len() as f64)
    }
}

impl PerceptualBackend for ToyPerceptual {
    fn name(&self) -> &str {
        "toy-conv"
    }

    fn distance(&self, a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(Error::data(format!(
                "perceptual: image shapes disagree ({:?} vs {:?})",
                a.dim(),
                b.dim()
            )));
        }
        if a.shape()[0] != self.layers[0].0.shape()[1] {
            return Err(Error::data(format!(
                "perceptual: backend expects {} channels, got {}",
                self.layers[0].0.shape()[1],
                a.shape()[0]
            )));
        }
        let params: [ArrayD<f32>; 0] = [];
        let mut be = PlainBackend::new(&params);
        let ac = be.constant(a.clone().into_dyn());
        let bc = be.constant(b.clone().into_dyn());
        let d = self.distance_in(&mut be, &ac, &bc);
        let v = be.scalar(&d) as f64;
        if !v.is_finite() {
            return Err(Error::numeric("perceptual: non-finite distance"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Array3<f32> {
        let mut rng = derive_rng(seed, "metrics-test", 0);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = rand_img(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let mask = Array2::from_elem((8, 8), 1.0);
        assert_eq!(psnr_mask(&a, &a, &mask).unwrap(), PSNR_CAP_DB);
    }

    /// A uniform 1/255 offset has closed-form MSE (1/255)², hence
    /// 20·log10(255) ≈ 48.13 dB.
    #[test]
    fn uniform_one_lsb_offset_matches_closed_form() {
        let a = Array3::<f32>::zeros((3, 8, 8));
        let step = 1.0f32 / 255.0;
        let b = a.mapv(|v| v + step);
        let expect = 20.0 * 255.0f64.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-3);
    }

    #[test]
    fn psnr_matches_direct_mse_oracle_and_is_symmetric() {
        let a = rand_img(2, 8, 8);
        let b = rand_img(3, 8, 8);
        let mse: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64;
        let expect = -10.0 * mse.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn full_mask_reduces_to_global_psnr_exactly() {
        let a = rand_img(4, 8, 8);
        let b = rand_img(5, 8, 8);
        let mask = Array2::from_elem((8, 8), 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), psnr_mask(&a, &b, &mask).unwrap());
    }

    #[test]
    fn masked_psnr_ignores_outside_and_matches_oracle() {
        let a = rand_img(6, 8, 8);
        let mut b = a.clone();
        // Corrupt outside the mask only: masked PSNR stays at the cap.
        let mask = Array2::from_shape_fn((8, 8), |(r, _)| if r < 4 { 1.0 } else { 0.0 });
        for ch in 0..3 {
            for c in 0..8 {
                b[[ch, 7, c]] = 0.0;
            }
        }
        assert_eq!(psnr_mask(&a, &b, &mask).unwrap(), PSNR_CAP_DB);

        // Random case against a hand-computed masked MSE.
        let b2 = rand_img(7, 8, 8);
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for r in 0..8 {
            for c in 0..8 {
                if mask[[r, c]] == 1.0 {
                    for ch in 0..3 {
                        sum += (a[[ch, r, c]] as f64 - b2[[ch, r, c]] as f64).powi(2);
                        n += 1;
                    }
                }
            }
        }
        let expect = -10.0 * (sum / n as f64).log10();
        assert!((psnr_mask(&a, &b2, &mask).unwrap() - expect).abs() < 1e-9);

        let empty = Array2::zeros((8, 8));
        assert!(psnr_mask(&a, &b2, &empty).is_err());
    }

    #[test]
    fn scaling_the_error_strictly_decreases_psnr() {
        let a = rand_img(8, 8, 8);
        let e = rand_img(9, 8, 8).mapv(|v| 0.1 * v);
        let b1 = &a + &e;
        let b2 = &a + &e.mapv(|v| 2.0 * v);
        assert!(psnr(&a, &b2).unwrap() < psnr(&a, &b1).unwrap());
    }

    #[test]
    fn bounding_box_matches_rectangle_oracle() {
        let mut mask = Array2::<f32>::zeros((32, 32));
        for r in 10..15 {
            for c in 20..26 {
                mask[[r, c]] = 1.0;
            }
        }
        assert_eq!(mask_bbox(&mask, 0).unwrap(), (10, 20, 15, 26));
        // Dilated by the localization margin, clamped at the right edge.
        assert_eq!(mask_bbox(&mask, 4).unwrap(), (6, 16, 19, 30));
        assert_eq!(mask_bbox(&mask, 12).unwrap(), (0, 8, 27, 32));
        let img = rand_img(10, 32, 32);
        let c = crop(&img, (6, 16, 19, 30));
        assert_eq!(c.shape(), &[3, 13, 14]);
        assert_eq!(c[[1, 0, 0]], img[[1, 6, 16]]);
        assert!(mask_bbox(&Array2::zeros((4, 4)), 0).is_err());
    }

    #[test]
    fn absent_backend_reports_null_not_a_number() {
        let a = rand_img(11, 16, 16);
        let r = perceptual(None, &a, &a, Region::Full, None).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn toy_backend_self_distance_is_zero_and_deterministic() {
        let p = ToyPerceptual::new(ToyPerceptual::DEFAULT_SEED, 3);
        let a = rand_img(12, 16, 16);
        let b = rand_img(13, 16, 16);
        assert_eq!(p.distance(&a, &a).unwrap(), 0.0);
        let d1 = p.distance(&a, &b).unwrap();
        let d2 = ToyPerceptual::new(ToyPerceptual::DEFAULT_SEED, 3).distance(&a, &b).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
        // Different seeds give a different metric.
        let d3 = ToyPerceptual::new(99, 3).distance(&a, &b).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn masked_crop_region_uses_the_dilated_bounding_box() {
        let p = ToyPerceptual::new(1, 3);
        let a = rand_img(14, 32, 32);
        let mut b = a.clone();
        let mut mask = Array2::<f32>::zeros((32, 32));
        for r in 8..12 {
            for c in 8..12 {
                mask[[r, c]] = 1.0;
                for ch in 0..3 {
                    b[[ch, r, c]] = 1.0 - b[[ch, r, c]];
                }
            }
        }
        let local = perceptual(Some(&p), &a, &b, Region::MaskedCrop, Some(&mask))
            .unwrap()
            .unwrap();
        // Direct oracle: distance over the crop itself.
        let bbox = mask_bbox(&mask, CROP_MARGIN).unwrap();
        let oracle = p.distance(&crop(&a, bbox), &crop(&b, bbox)).unwrap();
        assert_eq!(local, oracle);
        assert!(local > 0.0);
        // Region request without a mask is an error, distinct from absence.
        assert!(perceptual(Some(&p), &a, &b, Region::MaskedCrop, None).is_err());
    }

    struct FailingBackend;
    impl PerceptualBackend for FailingBackend {
        fn name(&self) -> &str {
            "failing"
        }
        fn distance(&self, _: &Array3<f32>, _: &Array3<f32>) -> Result<f64> {
            Err(Error::numeric("synthetic backend failure"))
        }
    }

    #[test]
    fn backend_failure_is_distinct_from_absence() {
        let a = rand_img(15, 8, 8);
        let err = perceptual(Some(&FailingBackend), &a, &a, Region::Full, None);
        assert!(err.is_err());
    }

    #[test]
    fn summary_averages_rows_and_flags_missing_perceptual() {
        let rows = vec![
            MetricRow { scene: 1, psnr: 30.0, psnr_mask: 20.0, perceptual: Some(0.5) },
            MetricRow { scene: 2, psnr: 40.0, psnr_mask: 30.0, perceptual: Some(0.1) },
        ];
        let s = summarize(&rows).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(s.mean_psnr, 35.0);
        assert_eq!(s.mean_psnr_mask, 25.0);
        assert_eq!(s.mean_perceptual, Some(0.3));

        let rows = vec![MetricRow { scene: 1, psnr: 30.0, psnr_mask: 20.0, perceptual: None }];
        assert_eq!(summarize(&rows).unwrap().mean_perceptual, None);
        assert!(summarize(&[]).is_err());
    }
}

//! Comparisons between generated triplanes, ground truth and target skeletons.

use crate::error::{shape_err, Result};
use crate::skeleton::{encode_skeleton, PlaneId, RasterParams, Skeleton};
use crate::triplane::{Field, Triplane};

/// PSNR over all geometry channels with a peak-to-peak range of 2 (features
/// live in `[-1, 1]`). Identical inputs give infinity.
pub fn geometry_psnr(pred: &Triplane, target: &Triplane) -> Result<f64> {
    if !pred.same_layout(target) {
        return Err(shape_err("triplanes differ in layout"));
    }
    let n = pred.geometry().len() as f64;
    let mse = pred.geometry().iter().zip(target.geometry()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
    Ok(10.0 * (4.0 / mse).log10())
}

/// Pixels whose geometry channel 0 exceeds `threshold`, per plane.
pub fn support_mask(t: &Triplane, threshold: f64) -> Vec<Vec<bool>> {
    PlaneId::ALL.iter().map(|&p| t.plane_channel(Field::Geometry, p, 0).iter().map(|&v| v as f64 > threshold).collect()).collect()
}

/// Square (Chebyshev) dilation by `radius` pixels.
pub fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            for rr in r.saturating_sub(radius)..(r + radius + 1).min(height) {
                for cc in c.saturating_sub(radius)..(c + radius + 1).min(width) {
                    out[rr * width + cc] = true;
                }
            }
        }
    }
    out
}

/// IoU, pooled over the three planes, between the geometry support of `pred`
/// and the target skeleton's occupancy dilated by `dilation` pixels.
pub fn support_iou(pred: &Triplane, target: &Skeleton, dilation: usize, threshold: f64) -> Result<f64> {
    let (h, w) = (pred.height(), pred.width());
    let enc = encode_skeleton(target, pred.bounds(), h, w, RasterParams::for_resolution(h))?;
    let support = support_mask(pred, threshold);
    let (mut inter, mut union) = (0usize, 0usize);
    for (plane, sup) in enc.planes.iter().zip(&support) {
        let occ: Vec<bool> = plane.occupancy.iter().map(|&o| o != 0).collect();
        let occ = dilate(&occ, h, w, dilation);
        for (&a, &b) in sup.iter().zip(&occ) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::DatasetParams;

    #[test]
    fn psnr_of_known_error() {
        let p = DatasetParams::desk();
        let t = p.init_triplane(&p.character(0).unwrap()).unwrap();
        assert_eq!(geometry_psnr(&t, &t).unwrap(), f64::INFINITY);
        let mut u = t.clone();
        u.geometry_mut().iter_mut().for_each(|v| *v += 0.1);
        // mse 0.01 -> 10 log10(400)
        let expect = 10.0 * 400f64.log10();
        assert!((geometry_psnr(&u, &t).unwrap() - expect).abs() < 1e-5);
    }

    #[test]
    fn dilation_grows_a_point_to_a_square() {
        let mut m = vec![false; 25];
        m[12] = true;
        let d = dilate(&m, 5, 5, 1);
        assert_eq!(d.iter().filter(|&&v| v).count(), 9);
        assert!(d[6] && d[18] && !d[0]);
        assert_eq!(dilate(&m, 5, 5, 0), m);
    }

    #[test]
    fn ground_truth_support_overlaps_its_skeleton() {
        let p = DatasetParams::desk();
        let ch = p.character(2).unwrap();
        let s = p.sample(&ch, &p.init_triplane(&ch).unwrap(), 3).unwrap();
        let iou = support_iou(&s.target, &s.skeleton, 2, 0.5).unwrap();
        assert!(iou > 0.5, "{}", iou);
        let other = p.sample(&ch, &s.init, 5).unwrap();
        assert!(support_iou(&other.target, &s.skeleton, 2, 0.5).unwrap() < iou);
    }
}

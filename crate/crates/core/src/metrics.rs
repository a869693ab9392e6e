//! Segmentation and detection metrics: IoU, probability of detection and
//! false-alarm rate.
//!
//! Conventions (printed in every report header):
//! - predictions are binarized as `p > threshold`;
//! - mIoU is aggregated over the dataset, `ΣTP / (ΣTP + ΣFP + ΣFN)`; the
//!   per-image mean is also reported, counting an image with an empty union
//!   as 1;
//! - targets are the 8-connected components of each ground-truth mask; a
//!   target is detected when a predicted component's centroid lies within
//!   `match_dist` pixels of its centroid, matched greedily nearest-first, one
//!   component per target;
//! - Fa is the fraction of all pixels that belong to unmatched predicted
//!   components, reported ×10⁻⁵; Pd is 1 when there are no targets.

use std::fmt::Write as _;

use crate::bitcore::FloatTensor;
use crate::data::{plane_extents, Mask};
use crate::error::{Error, Result};

/// Fa is reported in these units.
pub const FA_UNIT: f64 = 1e-5;

/// An 8-connected foreground region.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sr, sc) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        (sr / n, sc / n)
    }
}

/// Components in raster order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && mask.bits()[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// Raw counts; every rate in [`MetricsReport`] is derived from these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub targets: u64,
    pub detected: u64,
    pub false_alarm_pixels: u64,
    pub predicted_pixels: u64,
    pub matched_pixels: u64,
    pub total_pixels: u64,
    pub images: u64,
}

impl std::ops::AddAssign for MetricCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.targets += o.targets;
        self.detected += o.detected;
        self.false_alarm_pixels += o.false_alarm_pixels;
        self.predicted_pixels += o.predicted_pixels;
        self.matched_pixels += o.matched_pixels;
        self.total_pixels += o.total_pixels;
        self.images += o.images;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Dataset-aggregated IoU.
    pub miou: f64,
    pub mean_image_iou: f64,
    pub pd: f64,
    /// False-alarm rate in units of 10⁻⁵.
    pub fa: f64,
    pub counts: MetricCounts,
    pub threshold: f64,
    pub match_dist: f64,
}

fn image_counts(pred: &Mask, truth: &Mask, match_dist: f64) -> (MetricCounts, f64) {
    let mut k = MetricCounts {
        images: 1,
        total_pixels: (truth.height() * truth.width()) as u64,
        ..MetricCounts::default()
    };
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        match (p, t) {
            (true, true) => k.tp += 1,
            (true, false) => k.fp += 1,
            (false, true) => k.fn_ += 1,
            (false, false) => {}
        }
    }
    let union = k.tp + k.fp + k.fn_;
    let iou = if union == 0 { 1.0 } else { k.tp as f64 / union as f64 };

    let targets = connected_components(truth);
    let preds = connected_components(pred);
    let mut pairs = Vec::new();
    for (ti, t) in targets.iter().enumerate() {
        let tc = t.centroid();
        for (pi, p) in preds.iter().enumerate() {
            let pc = p.centroid();
            let d = ((tc.0 - pc.0).powi(2) + (tc.1 - pc.1).powi(2)).sqrt();
            if d <= match_dist {
                pairs.push((d, ti, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut target_done = vec![false; targets.len()];
    let mut pred_used = vec![false; preds.len()];
    for (_, ti, pi) in pairs {
        if !target_done[ti] && !pred_used[pi] {
            target_done[ti] = true;
            pred_used[pi] = true;
        }
    }
    k.targets = targets.len() as u64;
    k.detected = target_done.iter().filter(|&&d| d).count() as u64;
    for (p, used) in preds.iter().zip(&pred_used) {
        let a = p.area() as u64;
        k.predicted_pixels += a;
        if *used {
            k.matched_pixels += a;
        } else {
            k.false_alarm_pixels += a;
        }
    }
    (k, iou)
}

fn binarize(pred: &FloatTensor, truth: &Mask, threshold: f64, i: usize) -> Result<Mask> {
    let (h, w) = plane_extents(pred)?;
    if (h, w) != (truth.height(), truth.width()) {
        return Err(Error::Dimension(format!(
            "image {i}: prediction is {h}x{w}, mask is {}x{}",
            truth.height(),
            truth.width()
        )));
    }
    Mask::from_threshold(pred, threshold)
}

/// All metrics over aligned lists of probability maps and masks.
pub fn evaluate(preds: &[FloatTensor], masks: &[Mask], threshold: f64, match_dist: f64) -> Result<MetricsReport> {
    if preds.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} masks",
            preds.len(),
            masks.len()
        )));
    }
    if !(match_dist >= 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} / match distance {match_dist} invalid"
        )));
    }
    let mut counts = MetricCounts::default();
    let mut iou_sum = 0.0;
    for (i, (p, m)) in preds.iter().zip(masks).enumerate() {
        let (k, iou) = image_counts(&binarize(p, m, threshold, i)?, m, match_dist);
        counts += k;
        iou_sum += iou;
    }
    Ok(MetricsReport::from_counts(counts, iou_sum, threshold, match_dist))
}

impl MetricsReport {
    fn from_counts(counts: MetricCounts, iou_sum: f64, threshold: f64, match_dist: f64) -> Self {
        let union = counts.tp + counts.fp + counts.fn_;
        Self {
            miou: if union == 0 { 1.0 } else { counts.tp as f64 / union as f64 },
            mean_image_iou: if counts.images == 0 { 1.0 } else { iou_sum / counts.images as f64 },
            pd: if counts.targets == 0 {
                1.0
            } else {
                counts.detected as f64 / counts.targets as f64
            },
            fa: if counts.total_pixels == 0 {
                0.0
            } else {
                counts.false_alarm_pixels as f64 / counts.total_pixels as f64 / FA_UNIT
            },
            counts,
            threshold,
            match_dist,
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# metrics: pred = p > {}; mIoU = sum TP / sum (TP+FP+FN) over the dataset (per-image mean also given, empty union = 1); \
             targets = 8-connected mask components; detected = predicted-component centroid within {} px, greedy nearest-first, one component per target; \
             Fa = unmatched predicted pixels / all pixels, in 1e-5; Pd = 1 when there are no targets",
            self.threshold, self.match_dist
        )
    }

    pub fn to_key_values(&self) -> String {
        let c = &self.counts;
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.header());
        let _ = writeln!(s, "metrics.miou = {:.12}", self.miou);
        let _ = writeln!(s, "metrics.mean_image_iou = {:.12}", self.mean_image_iou);
        let _ = writeln!(s, "metrics.pd = {:.12}", self.pd);
        let _ = writeln!(s, "metrics.fa_e5 = {:.12}", self.fa);
        for (k, v) in [
            ("tp", c.tp),
            ("fp", c.fp),
            ("fn", c.fn_),
            ("targets", c.targets),
            ("detected", c.detected),
            ("false_alarm_pixels", c.false_alarm_pixels),
            ("total_pixels", c.total_pixels),
            ("images", c.images),
        ] {
            let _ = writeln!(s, "metrics.{k} = {v}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let c = &self.counts;
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>14}", "mIoU", "Pd", "Fa(e-5)", "mean img IoU");
        let _ = writeln!(
            s,
            "{:<10.4} {:>10.4} {:>10.3} {:>14.4}",
            self.miou, self.pd, self.fa, self.mean_image_iou
        );
        let _ = writeln!(
            s,
            "targets {}/{} detected, {} false-alarm px of {} over {} images",
            c.detected, c.targets, c.false_alarm_pixels, c.total_pixels, c.images
        );
        s
    }
}

/// Dataset-aggregated IoU.
pub fn miou(preds: &[FloatTensor], masks: &[Mask], threshold: f64) -> Result<f64> {
    Ok(evaluate(preds, masks, threshold, 0.0)?.miou)
}

/// Mean of per-image IoU.
pub fn mean_image_iou(preds: &[FloatTensor], masks: &[Mask], threshold: f64) -> Result<f64> {
    Ok(evaluate(preds, masks, threshold, 0.0)?.mean_image_iou)
}

/// `(Pd, Fa ×10⁻⁵)`.
pub fn pd_fa(preds: &[FloatTensor], masks: &[Mask], threshold: f64, match_dist: f64) -> Result<(f64, f64)> {
    let r = evaluate(preds, masks, threshold, match_dist)?;
    Ok((r.pd, r.fa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                m.set(r, c, true);
            }
        }
        m
    }

    fn plane(m: &Mask) -> FloatTensor {
        m.to_tensor()
    }

    #[test]
    fn components_use_eight_connectivity() {
        let mut m = Mask::empty(5, 5);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(4, 4, true);
        m.set(4, 3, true);
        m.set(2, 4, true);
        let comps = connected_components(&m);
        let areas: Vec<usize> = comps.iter().map(Component::area).collect();
        assert_eq!(areas, vec![2, 1, 2]);
        assert_eq!(comps[0].centroid(), (0.5, 0.5));
    }

    #[test]
    fn miou_examples() {
        let m = square(64, 64, 30, 30, 5);
        assert_eq!(miou(&[plane(&m)], &[m.clone()], 0.5).unwrap(), 1.0);
        assert_eq!(miou(&[FloatTensor::zeros(&[1, 64, 64])], &[m.clone()], 0.5).unwrap(), 0.0);
        // Dilating a 5×5 square by one pixel (8-neighborhood) gives 7×7.
        let dilated = square(64, 64, 29, 29, 7);
        assert_eq!(miou(&[plane(&dilated)], &[m], 0.5).unwrap(), 25.0 / 49.0);
    }

    #[test]
    fn pd_fa_examples() {
        let m = square(64, 64, 10, 10, 3);
        assert_eq!(pd_fa(&[plane(&m)], &[m.clone()], 0.5, 3.0).unwrap(), (1.0, 0.0));
        assert_eq!(pd_fa(&[FloatTensor::zeros(&[1, 64, 64])], &[m], 0.5, 3.0).unwrap(), (0.0, 0.0));

        // A target detected 2 px away plus a spurious 2×2 blob in 100×100.
        let truth = square(100, 100, 20, 20, 3);
        let mut pred = square(100, 100, 22, 20, 3);
        for (r, c) in [(70, 70), (70, 71), (71, 70), (71, 71)] {
            pred.set(r, c, true);
        }
        let r = evaluate(&[plane(&pred)], &[truth], 0.5, 3.0).unwrap();
        assert_eq!(r.pd, 1.0);
        assert_eq!(r.fa, 4.0 / 1e4 / 1e-5);
        assert!((r.fa - 40.0).abs() < 1e-9);
        assert_eq!(r.counts.false_alarm_pixels, 4);
    }

    #[test]
    fn greedy_matching_uses_each_component_once() {
        // Two targets, one prediction between them: closest target wins.
        let mut truth = Mask::empty(20, 20);
        truth.set(5, 5, true);
        truth.set(5, 9, true);
        let mut pred = Mask::empty(20, 20);
        pred.set(5, 8, true);
        let r = evaluate(&[plane(&pred)], &[truth], 0.5, 3.0).unwrap();
        assert_eq!((r.counts.targets, r.counts.detected), (2, 1));
        assert_eq!(r.pd, 0.5);
        assert_eq!(r.counts.false_alarm_pixels, 0);
    }

    #[test]
    fn empty_cases() {
        let m = Mask::empty(8, 8);
        let r = evaluate(&[FloatTensor::zeros(&[1, 8, 8])], &[m], 0.5, 3.0).unwrap();
        assert_eq!((r.miou, r.mean_image_iou, r.pd, r.fa), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn mismatches_are_dimension_errors() {
        let m = Mask::empty(8, 8);
        assert!(matches!(
            evaluate(&[FloatTensor::zeros(&[1, 8, 9])], &[m.clone()], 0.5, 3.0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(evaluate(&[], &[m], 0.5, 3.0), Err(Error::Dimension(_))));
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> (FloatTensor, Mask) {
        let mut truth = Mask::empty(24, 24);
        let mut pred = FloatTensor::zeros(&[1, 24, 24]);
        for _ in 0..rng.gen_range(0..4) {
            let (r, c) = (rng.gen_range(1..22), rng.gen_range(1..22));
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                truth.set(r + dr, c + dc, true);
            }
        }
        for v in pred.data_mut() {
            *v = if rng.gen_bool(0.02) { 0.9 } else { 0.1 };
        }
        for (i, &b) in truth.bits().iter().enumerate() {
            if b && rng.gen_bool(0.7) {
                pred.data_mut()[i] = 0.8;
            }
        }
        (pred, truth)
    }

    #[test]
    fn permutation_invariance_over_twenty_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut preds, mut masks): (Vec<_>, Vec<_>) = (0..20).map(|_| random_pair(&mut rng)).unzip();
        let before = evaluate(&preds, &masks, 0.5, 3.0).unwrap();
        let mut order: Vec<usize> = (0..20).collect();
        order.shuffle(&mut rng);
        preds = order.iter().map(|&i| preds[i].clone()).collect();
        masks = order.iter().map(|&i| masks[i].clone()).collect();
        assert_eq!(evaluate(&preds, &masks, 0.5, 3.0).unwrap(), before);
    }

    proptest! {
        #[test]
        fn counts_are_conserved(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, m) = random_pair(&mut rng);
            let r = evaluate(&[p.clone()], &[m], 0.5, 3.0).unwrap();
            let c = r.counts;
            prop_assert_eq!(c.false_alarm_pixels, c.predicted_pixels - c.matched_pixels);
            prop_assert_eq!(c.predicted_pixels, c.tp + c.fp);
            prop_assert!(r.miou >= 0.0 && r.miou <= 1.0 && r.pd >= 0.0 && r.pd <= 1.0);
        }

        #[test]
        fn adding_true_pixels_never_hurts(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, m) = random_pair(&mut rng);
            let before = evaluate(&[p.clone()], &[m.clone()], 0.5, 3.0).unwrap();
            let mut better = p.clone();
            for (i, &b) in m.bits().iter().enumerate() {
                if b {
                    better.data_mut()[i] = 1.0;
                }
            }
            let after = evaluate(&[better], &[m.clone()], 0.5, 3.0).unwrap();
            prop_assert!(after.miou >= before.miou);
            prop_assert!(after.pd >= before.pd);

            // A new blob far from all targets adds false alarms and never detections.
            let mut worse = p;
            let mut far = None;
            'search: for r in 0..24usize {
                for c in 0..24usize {
                    let clear = (r.saturating_sub(5)..(r + 6).min(24)).all(|rr| {
                        (c.saturating_sub(5)..(c + 6).min(24)).all(|cc| !m.get(rr, cc) && worse.data()[rr * 24 + cc] <= 0.5)
                    });
                    if clear {
                        far = Some((r, c));
                        break 'search;
                    }
                }
            }
            if let Some((r, c)) = far {
                worse.data_mut()[r * 24 + c] = 1.0;
                let after = evaluate(&[worse], &[m], 0.5, 3.0).unwrap();
                prop_assert!(after.pd <= before.pd);
                prop_assert!(after.fa >= before.fa);
            }
        }
    }
}

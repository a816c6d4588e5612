//! Segmentation metrics on label masks.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

/// One-vs-rest pixel counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn confusion(pred: &[u8], truth: &[u8], class: u8) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(shape_err("confusion", format!("{} vs {} pixels", pred.len(), truth.len())));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// 1 when the class is absent from both masks.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, 1.0)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, 1.0)
    }

    pub fn acc(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), 1.0)
    }

    pub fn se(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, 1.0)
    }

    pub fn sp(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, 1.0)
    }
}

/// Symmetric Hausdorff distance between the pixel sets of `class` in two
/// `h×w` masks. `None` when either set is empty.
pub fn hausdorff(a: &[u8], b: &[u8], w: usize, class: u8) -> Option<f64> {
    let pts = |m: &[u8]| -> Vec<(i64, i64)> {
        m.iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| ((i / w) as i64, (i % w) as i64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    Some(libm::sqrt(directed_sq(&pa, &pb).max(directed_sq(&pb, &pa)) as f64))
}

fn directed_sq(from: &[(i64, i64)], to: &[(i64, i64)]) -> i64 {
    from.iter()
        .map(|&(y, x)| to.iter().map(|&(v, u)| (y - v) * (y - v) + (x - u) * (x - u)).min().unwrap_or(0))
        .max()
        .unwrap_or(0)
}

/// All metrics of one class in one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    /// `None` when the class is missing from either mask.
    pub hd: Option<f64>,
}

pub fn class_metrics(pred: &[u8], truth: &[u8], w: usize, class: u8) -> Result<ClassMetrics> {
    let c = confusion(pred, truth, class)?;
    Ok(ClassMetrics {
        class,
        dice: c.dice(),
        iou: c.iou(),
        acc: c.acc(),
        se: c.se(),
        sp: c.sp(),
        hd: hausdorff(pred, truth, w, class),
    })
}

/// Metrics of every foreground class `1..c`.
pub fn foreground_metrics(pred: &[u8], truth: &[u8], w: usize, classes: usize) -> Result<Vec<ClassMetrics>> {
    (1..classes as u8).map(|l| class_metrics(pred, truth, w, l)).collect()
}

/// Mean Dice over rows.
pub fn mean_dice(rows: &[ClassMetrics]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64
}

/// Mean Hausdorff over rows where it is defined.
pub fn mean_hausdorff(rows: &[ClassMetrics]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.hd).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_cases() {
        let t = [0u8, 1, 1, 0];
        let same = confusion(&t, &t, 1).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let comp = confusion(&[1, 0, 0, 1], &t, 1).unwrap();
        assert_eq!((comp.tp, comp.tn), (0, 0));
        // pred [1,1,0,0] vs truth [0,1,1,0]
        let c = confusion(&[1, 1, 0, 0], &t, 1).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert!(confusion(&[1], &t, 1).is_err());
    }

    #[test]
    fn metric_values() {
        let t = [1u8, 1, 0, 2];
        let m = class_metrics(&t, &t, 2, 1).unwrap();
        assert_eq!([m.dice, m.iou, m.acc, m.se, m.sp], [1.0; 5]);
        let d = confusion(&[1, 1, 0, 0], &[0, 0, 1, 1], 1).unwrap();
        assert_eq!(d.dice(), 0.0);
        // |A| = |B| = 4, |A∩B| = 2
        let a = [1u8, 1, 1, 1, 0, 0];
        let b = [0u8, 0, 1, 1, 1, 1];
        let c = confusion(&a, &b, 1).unwrap();
        assert_eq!(c.dice(), 0.5);
        assert!((c.iou() - 1.0 / 3.0).abs() < 1e-15);
        let empty = confusion(&[0, 0], &[0, 0], 1).unwrap();
        assert_eq!((empty.dice(), empty.iou()), (1.0, 1.0));
    }

    #[test]
    fn hausdorff_cases() {
        let a = [1u8, 0, 0, 0, 1, 0];
        assert_eq!(hausdorff(&a, &a, 3, 1), Some(0.0));
        let mut p = [0u8; 36];
        let mut q = [0u8; 36];
        p[0] = 1;
        q[3 * 6 + 4] = 1;
        assert_eq!(hausdorff(&p, &q, 6, 1), Some(5.0));
        assert_eq!(hausdorff(&p, &[0u8; 36], 6, 1), None);
    }

    #[test]
    fn hausdorff_matches_pairwise_scan() {
        let a = [(0.0f64, 0.0f64), (2.0, 1.0), (4.0, 4.0)];
        let b = [(1.0f64, 0.0f64), (3.0, 3.0), (0.0, 4.0)];
        let (mut ma, mut mb) = ([0u8; 25], [0u8; 25]);
        for &(y, x) in &a {
            ma[y as usize * 5 + x as usize] = 1;
        }
        for &(y, x) in &b {
            mb[y as usize * 5 + x as usize] = 1;
        }
        let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        let dir = |s: &[(f64, f64)], t: &[(f64, f64)]| {
            s.iter().map(|&p| t.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
        };
        let want = dir(&a, &b).max(dir(&b, &a));
        assert!((hausdorff(&ma, &mb, 5, 1).unwrap() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            let c = Confusion { tp, fp, tn, fn_ };
            let i = c.iou();
            prop_assert!((c.dice() - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert_eq!(c.total(), tp + fp + tn + fn_);
        }

        #[test]
        fn relabelling_and_symmetry(
            pair in proptest::collection::vec((0u8..3, 0u8..3), 16)
        ) {
            let p: Vec<u8> = pair.iter().map(|x| x.0).collect();
            let t: Vec<u8> = pair.iter().map(|x| x.1).collect();
            let perm = [2u8, 0, 1];
            let pp: Vec<u8> = p.iter().map(|&l| perm[l as usize]).collect();
            let tp: Vec<u8> = t.iter().map(|&l| perm[l as usize]).collect();
            for l in 0..3u8 {
                let a = class_metrics(&p, &t, 4, l).unwrap();
                let b = class_metrics(&pp, &tp, 4, perm[l as usize]).unwrap();
                prop_assert_eq!((a.dice, a.iou, a.acc, a.se, a.sp, a.hd), (b.dice, b.iou, b.acc, b.se, b.sp, b.hd));
                prop_assert_eq!(hausdorff(&p, &t, 4, l), hausdorff(&t, &p, 4, l));
            }
        }
    }
}

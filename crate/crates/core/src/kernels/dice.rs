use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::LabelVolume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiceError {
    #[error("prediction shape {pred:?} differs from ground truth {gt:?}")]
    ShapeMismatch { pred: [usize; 5], gt: [usize; 5] },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: u16, classes: usize },
}

/// Per-class Dice scores. `per_class[c]` is `None` when class `c` is absent
/// from both volumes; index 0 is background and never enters the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `DSC_c = 2|P_c ∩ G_c| / (|P_c| + |G_c|)` for every class, and the mean over
/// foreground classes present in either volume. A volume with no foreground
/// at all scores 1.0.
pub fn dice_per_class(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<DiceScores, DiceError> {
    if pred.shape != gt.shape {
        return Err(DiceError::ShapeMismatch {
            pred: pred.shape,
            gt: gt.shape,
        });
    }
    let mut inter = vec![0u64; classes];
    let mut p_count = vec![0u64; classes];
    let mut g_count = vec![0u64; classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        for label in [p, g] {
            if label as usize >= classes {
                return Err(DiceError::LabelOutOfRange { label, classes });
            }
        }
        p_count[p as usize] += 1;
        g_count[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let denom = p_count[c] + g_count[c];
            (denom > 0).then(|| 2.0 * inter[c] as f64 / denom as f64)
        })
        .collect();
    let fg: Vec<f64> = per_class.iter().skip(1).flatten().copied().collect();
    let mean = if fg.is_empty() {
        1.0
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };
    Ok(DiceScores { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(data: Vec<u16>) -> LabelVolume {
        LabelVolume::new([1, 1, 1, 1, data.len()], data).unwrap()
    }

    #[test]
    fn identical_is_one() {
        let a = lv(vec![0, 1, 2, 2, 1, 0]);
        assert_eq!(dice_per_class(&a, &a, 3).unwrap().mean, 1.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let p = lv(vec![1, 1, 0, 0]);
        let g = lv(vec![0, 0, 1, 1]);
        let d = dice_per_class(&p, &g, 2).unwrap();
        assert_eq!(d.per_class[1], Some(0.0));
    }

    #[test]
    fn half_overlap() {
        let p = lv(vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let g = lv(vec![0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice_per_class(&p, &g, 2).unwrap().per_class[1], Some(0.5));
    }

    #[test]
    fn absent_classes_excluded() {
        let p = lv(vec![0, 1, 1, 0]);
        let d = dice_per_class(&p, &p, 4).unwrap();
        assert_eq!(d.per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(d.mean, 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            dice_per_class(&lv(vec![0, 5]), &lv(vec![0, 0]), 3),
            Err(DiceError::LabelOutOfRange { label: 5, .. })
        ));
        assert!(matches!(
            dice_per_class(&lv(vec![0]), &lv(vec![0, 0]), 3),
            Err(DiceError::ShapeMismatch { .. })
        ));
    }
}

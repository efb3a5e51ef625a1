//! Overlap metrics, mask post-processing and Grad-CAM.

mod gradcam;

pub use gradcam::{grad_cam, grad_cam_from};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::loss_from_logits;

/// Label 1 where `p >= threshold`, else 0.
pub fn binarize(probs: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// Per-pixel index of the largest channel, `n x 1 x h x w`. Ties resolve to
/// the lowest class.
pub fn argmax_channels(probs: &Tensor<f32>) -> Tensor<f32> {
    let s = probs.shape();
    Tensor::from_fn([s.n, 1, s.h, s.w], |[n, _, y, x]| {
        let mut best = 0;
        for c in 1..s.c {
            if probs.get(n, c, y, x) > probs.get(n, best, y, x) {
                best = c;
            }
        }
        best as f32
    })
}

/// Head-appropriate hard labels: thresholded sigmoid for one channel,
/// channel argmax otherwise.
pub fn labels_from_probs(probs: &Tensor<f32>) -> Tensor<f32> {
    if probs.shape().c == 1 {
        binarize(probs, 0.5)
    } else {
        argmax_channels(probs)
    }
}

/// Pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub truth: usize,
    pub pred: usize,
    pub intersection: usize,
    pub union: usize,
}

impl ClassCounts {
    /// `|G n P| / |G u P|`, or 1 when both sets are empty.
    pub fn jaccard(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// `2|G n P| / (|G| + |P|)`, or 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        if self.truth + self.pred == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.truth + self.pred) as f64
        }
    }
}

/// Per-class and mean overlap scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub counts: Vec<ClassCounts>,
    pub jaccard: Vec<f64>,
    pub dice: Vec<f64>,
    pub mean_jaccard: f64,
    pub mean_dice: f64,
}

impl MetricsRecord {
    /// Counts every class `0..classes` over label maps `truth` and `pred`.
    pub fn from_labels(truth: &Tensor<f32>, pred: &Tensor<f32>, classes: usize) -> Result<Self> {
        if truth.shape() != pred.shape() {
            return Err(Error::shape(format!(
                "metric inputs differ: {} vs {}",
                truth.shape(),
                pred.shape()
            )));
        }
        let mut counts = vec![ClassCounts::default(); classes];
        for (&g, &p) in truth.data().iter().zip(pred.data()) {
            let (g, p) = (label(g, classes)?, label(p, classes)?);
            counts[g].truth += 1;
            counts[p].pred += 1;
            if g == p {
                counts[g].intersection += 1;
                counts[g].union += 1;
            } else {
                counts[g].union += 1;
                counts[p].union += 1;
            }
        }
        let jaccard: Vec<f64> = counts.iter().map(ClassCounts::jaccard).collect();
        let dice: Vec<f64> = counts.iter().map(ClassCounts::dice).collect();
        Ok(MetricsRecord {
            mean_jaccard: jaccard.iter().sum::<f64>() / classes as f64,
            mean_dice: dice.iter().sum::<f64>() / classes as f64,
            counts,
            jaccard,
            dice,
        })
    }
}

fn label(v: f32, classes: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
        return Err(Error::Contract(format!("label {v} outside 0..{classes}")));
    }
    Ok(v as usize)
}

fn binary_counts(g: &Tensor<f32>, p: &Tensor<f32>) -> Result<ClassCounts> {
    if g.shape() != p.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ: {} vs {}",
            g.shape(),
            p.shape()
        )));
    }
    let mut c = ClassCounts::default();
    for (&a, &b) in g.data().iter().zip(p.data()) {
        let (a, b) = (label(a, 2)? == 1, label(b, 2)? == 1);
        c.truth += a as usize;
        c.pred += b as usize;
        c.intersection += (a && b) as usize;
        c.union += (a || b) as usize;
    }
    Ok(c)
}

/// Jaccard index of two binary masks.
pub fn jaccard(g: &Tensor<f32>, p: &Tensor<f32>) -> Result<f64> {
    Ok(binary_counts(g, p)?.jaccard())
}

/// Dice coefficient of two binary masks.
pub fn dice(g: &Tensor<f32>, p: &Tensor<f32>) -> Result<f64> {
    Ok(binary_counts(g, p)?.dice())
}

/// Unweighted mean of per-class Jaccard over `classes` labels.
pub fn mean_iou(g: &Tensor<f32>, p: &Tensor<f32>, classes: usize) -> Result<f64> {
    Ok(MetricsRecord::from_labels(g, p, classes)?.mean_jaccard)
}

/// Dataset-level scores of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Per-sample score averaged over the set: foreground Jaccard for a
    /// binary head, mean IoU over classes otherwise.
    pub jaccard: f64,
    pub dice: f64,
}

/// Scores of one predicted label map against its mask.
pub fn sample_scores(
    truth: &Tensor<f32>,
    pred: &Tensor<f32>,
    head_classes: usize,
) -> Result<(f64, f64)> {
    if head_classes == 1 {
        let c = binary_counts(truth, pred)?;
        Ok((c.jaccard(), c.dice()))
    } else {
        let m = MetricsRecord::from_labels(truth, pred, head_classes)?;
        Ok((m.mean_jaccard, m.mean_dice))
    }
}

/// Mean loss and overlap of `model` over `data`, processed in batches.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Contract(
            "evaluate needs samples and a positive batch size".into(),
        ));
    }
    let classes = model.config().num_classes;
    let (mut loss, mut jac, mut dic) = (0.0, 0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, masks) = data.batch(chunk)?;
        let logits = model.forward(&images)?;
        loss += loss_from_logits(&logits, &masks)? * chunk.len() as f64;
        let probs = if classes == 1 {
            crate::ops::sigmoid(&logits)
        } else {
            crate::ops::softmax_channels(&logits)
        };
        let pred = labels_from_probs(&probs);
        for i in 0..chunk.len() {
            let t = masks.batch_slice(i, 1)?;
            let p = pred.batch_slice(i, 1)?;
            let (j, d) = sample_scores(&t, &p, classes)?;
            jac += j;
            dic += d;
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        jaccard: jac / n,
        dice: dic / n,
    })
}

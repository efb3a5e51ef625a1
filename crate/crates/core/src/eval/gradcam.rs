use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Heatmap from one activation map and the score gradient at that map.
///
/// Channel weights are the spatial mean of `grad`; the map is
/// `relu(sum_c w_c A_c)`, upsampled by nearest neighbour to `out_h x out_w`
/// and scaled so its maximum is 1. An all-zero map is returned as is.
pub fn grad_cam_from(
    activation: &Tensor<f32>,
    grad: &Tensor<f32>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f32>> {
    activation.expect_shape(grad.shape(), "grad_cam")?;
    let s = activation.shape();
    if s.n != 1 {
        return Err(Error::shape(format!(
            "grad_cam takes a single sample, got {s}"
        )));
    }
    let weights: Vec<f64> = (0..s.c)
        .map(|c| grad.plane(0, c).iter().map(|&g| g as f64).sum::<f64>() / s.plane() as f64)
        .collect();
    let mut cam = vec![0.0f64; s.plane()];
    for (c, w) in weights.iter().enumerate() {
        for (acc, &a) in cam.iter_mut().zip(activation.plane(0, c)) {
            *acc += w * a as f64;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));

    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(0.0, f64::max);
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    Ok(Tensor::from_fn([1, 1, out_h, out_w], |[_, _, y, x]| {
        let v = cam[(y * s.h / out_h) * s.w + x * s.w / out_w];
        if hi == 0.0 {
            0.0
        } else if scale == 0.0 {
            1.0
        } else {
            ((v - lo) * scale) as f32
        }
    }))
}

/// Grad-CAM heatmap of `class` at decoder fusion `layer` (1 = deepest,
/// 4 = full resolution) for a single input image.
///
/// The target score is the sum of the class logit over all pixels. For a
/// single-logit head, class 1 uses the logit and class 0 its negation.
pub fn grad_cam(
    model: &Model,
    input: &Tensor<f32>,
    layer: usize,
    class: usize,
) -> Result<Tensor<f32>> {
    if !(1..=4).contains(&layer) {
        return Err(Error::Contract(format!(
            "grad-cam layer must be 1..=4, got {layer}"
        )));
    }
    let heads = model.config().num_classes;
    let labels = heads.max(2);
    if class >= labels {
        return Err(Error::Contract(format!(
            "class {class} outside 0..{labels}"
        )));
    }
    let s = input.shape();
    if s.n != 1 {
        return Err(Error::shape(format!(
            "grad_cam takes a single sample, got {s}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let trace = model.forward_on_tape(&mut tape, x)?;
    let ls = tape.value(trace.logits).shape();
    let selector = Tensor::from_fn(ls, |[_, c, _, _]| match (heads, class) {
        (1, 0) => -1.0,
        (1, _) => 1.0,
        _ if c == class => 1.0,
        _ => 0.0,
    });
    let score = tape.dot(trace.logits, selector)?;
    let grads = tape.backward(score)?;
    let target = trace.fusions[layer - 1];
    let zero;
    let g = match grads.wrt(target) {
        Some(g) => g,
        None => {
            zero = Tensor::zeros(tape.value(target).shape());
            &zero
        }
    };
    grad_cam_from(tape.value(target), g, s.h, s.w)
}

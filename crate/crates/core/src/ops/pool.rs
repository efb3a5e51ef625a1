use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Flat input offsets of each max-pool winner, one per output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgIndices(pub Vec<usize>);

/// 2x2 stride-2 max pooling. Ties go to the first element in row-major
/// scan order of the window.
pub fn maxpool2x2<T: Float>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgIndices)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even rows and cols, got {s}"
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros([s.n, s.c, oh, ow]);
    let mut arg = Vec::with_capacity(out.numel());
    let src = input.data();
    let mut k = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for y in 0..oh {
            for x in 0..ow {
                let top = base + 2 * y * s.w + 2 * x;
                let mut best = top;
                for cand in [top + 1, top + s.w, top + s.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.data_mut()[k] = src[best];
                arg.push(best);
                k += 1;
            }
        }
    }
    Ok((out, ArgIndices(arg)))
}

/// Routes each output gradient to its recorded winner.
pub fn maxpool2x2_backward<T: Float>(
    input_shape: Shape,
    arg: &ArgIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if arg.0.len() != grad_out.numel() {
        return Err(Error::shape(
            "maxpool backward: index count differs from gradient size",
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &d) in arg.0.iter().zip(grad_out.data()) {
        g[i] = g[i] + d;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn picks_maximum() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg.0, vec![3]);
    }

    #[test]
    fn ties_go_to_top_left() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 5.0);
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg.0, vec![0]);
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2x2(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_window_scan_oracle() {
        let x = random_tensor([1, 2, 8, 8], 9);
        let (y, arg) = maxpool2x2(&x).unwrap();
        let mut k = 0;
        for c in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let window = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| x.get(0, c, 2 * oy + dy, 2 * ox + dx));
                    let m = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.get(0, c, oy, ox), m);
                    assert_eq!(x.data()[arg.0[k]], m);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_winner() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1.0, 9.0, 0.0, 0.0, 2.0, 3.0, 0.0, 7.0])
            .unwrap();
        let (_, arg) = maxpool2x2(&x).unwrap();
        let g = Tensor::from_vec([1, 1, 1, 2], vec![10.0, 20.0]).unwrap();
        let dx = maxpool2x2_backward(x.shape(), &arg, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 20.0]);
    }
}

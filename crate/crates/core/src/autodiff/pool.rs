use super::Tensor;

pub fn pool_output_len(len: usize, k: usize, stride: usize) -> Option<usize> {
    (k >= 1 && stride >= 1 && len >= k).then(|| (len - k) / stride + 1)
}

/// Window maxima and the flat input index each came from (first index on ties).
pub(crate) fn max_forward(x: &Tensor, k: usize, stride: usize, lout: usize) -> (Tensor, Vec<usize>) {
    let (n, c, l) = x.dims3("maxpool1d").expect("checked by caller");
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * lout);
    let mut arg = Vec::with_capacity(n * c * lout);
    for row in 0..n * c {
        let base = row * l;
        for t in 0..lout {
            let start = base + t * stride;
            let mut best = start;
            for j in start + 1..start + k {
                if xs[j] > xs[best] {
                    best = j;
                }
            }
            out.push(xs[best]);
            arg.push(best);
        }
    }
    (Tensor::new(vec![n, c, lout], out).expect("pool shape"), arg)
}

pub(crate) fn max_backward(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (g, &i) in grad.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}

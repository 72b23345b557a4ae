//! Direct-loop 3-D convolution and max pooling kernels.

use crate::error::{AfnError, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], padding: [usize; 3]) -> Result<Self> {
        if input.len() != 4 || weight.len() != 5 || weight[1] != input[0] {
            return Err(AfnError::dim("conv3d", input, weight));
        }
        if bias != [weight[0]] {
            return Err(AfnError::dim("conv3d bias", bias, &weight[..1]));
        }
        let mut output = [0; 3];
        for ax in 0..3 {
            let span = input[ax + 1] + 2 * padding[ax];
            if span < weight[ax + 2] {
                return Err(AfnError::dim("conv3d", input, weight));
            }
            output[ax] = span - weight[ax + 2] + 1;
        }
        Ok(Conv3dGeometry {
            c_in: input[0],
            c_out: weight[0],
            input: [input[1], input[2], input[3]],
            kernel: [weight[2], weight[3], weight[4]],
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    /// Output positions along `ax` that read a valid input for kernel tap `k`.
    fn valid(&self, ax: usize, k: usize) -> std::ops::Range<usize> {
        let pad = self.padding[ax];
        let lo = pad.saturating_sub(k);
        let hi = (self.input[ax] + pad).saturating_sub(k).min(self.output[ax]);
        lo..hi.max(lo)
    }
}

/// Visits every (output, input, weight) index triple of a convolution with
/// contiguous inner runs along the last axis.
fn for_each_tap(geom: &Conv3dGeometry, mut visit: impl FnMut(usize, usize, usize, usize)) {
    let [id, ih, iw] = geom.input;
    let [kd, kh, kw] = geom.kernel;
    let [od, oh, ow] = geom.output;
    let [pd, ph, pw] = geom.padding;
    for co in 0..geom.c_out {
        for ci in 0..geom.c_in {
            for a in 0..kd {
                for z in geom.valid(0, a) {
                    let zi = z + a - pd;
                    for b in 0..kh {
                        for y in geom.valid(1, b) {
                            let yi = y + b - ph;
                            for c in 0..kw {
                                let run = geom.valid(2, c);
                                if run.is_empty() {
                                    continue;
                                }
                                let w_idx = (((co * geom.c_in + ci) * kd + a) * kh + b) * kw + c;
                                let out_base = ((co * od + z) * oh + y) * ow + run.start;
                                let in_base = ((ci * id + zi) * ih + yi) * iw + run.start + c - pw;
                                visit(w_idx, out_base, in_base, run.len());
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<F: Real>(geom: &Conv3dGeometry, input: &[F], weight: &[F], bias: &[F]) -> Vec<F> {
    let per_channel = geom.output.iter().product::<usize>();
    let mut out = Vec::with_capacity(geom.c_out * per_channel);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, per_channel));
    }
    for_each_tap(geom, |w_idx, o, i, n| {
        let wv = weight[w_idx];
        if wv == F::zero() {
            return;
        }
        for (dst, &src) in out[o..o + n].iter_mut().zip(&input[i..i + n]) {
            *dst = *dst + wv * src;
        }
    });
    out
}

pub fn conv3d_grad_input<F: Real>(geom: &Conv3dGeometry, grad: &[F], weight: &[F]) -> Vec<F> {
    let mut di = vec![F::zero(); geom.c_in * geom.input.iter().product::<usize>()];
    for_each_tap(geom, |w_idx, o, i, n| {
        let wv = weight[w_idx];
        if wv == F::zero() {
            return;
        }
        for (dst, &g) in di[i..i + n].iter_mut().zip(&grad[o..o + n]) {
            *dst = *dst + wv * g;
        }
    });
    di
}

pub fn conv3d_grad_weight<F: Real>(geom: &Conv3dGeometry, grad: &[F], input: &[F]) -> Vec<F> {
    let k: usize = geom.kernel.iter().product();
    let mut dw = vec![F::zero(); geom.c_out * geom.c_in * k];
    for_each_tap(geom, |w_idx, o, i, n| {
        let acc: F = grad[o..o + n]
            .iter()
            .zip(&input[i..i + n])
            .map(|(&g, &x)| g * x)
            .sum();
        dw[w_idx] = dw[w_idx] + acc;
    });
    dw
}

pub fn conv3d_grad_bias<F: Real>(geom: &Conv3dGeometry, grad: &[F]) -> Vec<F> {
    let per_channel = geom.output.iter().product::<usize>();
    grad.chunks(per_channel).map(|c| c.iter().copied().sum()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: [usize; 3]) -> Result<Self> {
        if input.len() != 4 || window.contains(&0) {
            return Err(AfnError::dim("max_pool3d", input, &window));
        }
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = input[ax + 1] / window[ax];
            if output[ax] == 0 {
                return Err(AfnError::dim("max_pool3d", input, &window));
            }
        }
        Ok(PoolGeometry {
            channels: input[0],
            input: [input[1], input[2], input[3]],
            window,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.channels, self.output[0], self.output[1], self.output[2]]
    }
}

/// Returns pooled values and, per output, the flat input index it came from.
pub fn max_pool3d_forward<F: Real>(geom: &PoolGeometry, input: &[F]) -> (Vec<F>, Vec<usize>) {
    let [id, ih, iw] = geom.input;
    let [wd, wh, ww] = geom.window;
    let [od, oh, ow] = geom.output;
    let n = geom.channels * od * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..geom.channels {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = usize::MAX;
                    for a in 0..wd {
                        for b in 0..wh {
                            for e in 0..ww {
                                let idx = ((c * id + z * wd + a) * ih + y * wh + b) * iw + x * ww + e;
                                if best == usize::MAX || input[idx] > input[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    out.push(input[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward six-deep loop used as the reference.
    fn naive_conv(geom: &Conv3dGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let [id, ih, iw] = geom.input;
        let [kd, kh, kw] = geom.kernel;
        let [od, oh, ow] = geom.output;
        let [pd, ph, pw] = geom.padding;
        let mut out = vec![0.0; geom.c_out * od * oh * ow];
        for co in 0..geom.c_out {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..geom.c_in {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let (zi, yi, xi) = (
                                            (z + a) as isize - pd as isize,
                                            (y + b) as isize - ph as isize,
                                            (x + c) as isize - pw as isize,
                                        );
                                        if zi < 0 || yi < 0 || xi < 0 {
                                            continue;
                                        }
                                        let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                        if zi >= id || yi >= ih || xi >= iw {
                                            continue;
                                        }
                                        acc += weight[(((co * geom.c_in + ci) * kd + a) * kh + b) * kw + c]
                                            * input[((ci * id + zi) * ih + yi) * iw + xi];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let input_shape = [2, 3, 4, 5];
        let weight_shape = [3, 2, 3, 2, 3];
        for padding in [[0, 0, 0], [1, 1, 1], [1, 0, 2]] {
            let geom = Conv3dGeometry::new(&input_shape, &weight_shape, &[3], padding).unwrap();
            let input: Vec<f64> = (0..120).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let weight: Vec<f64> = (0..108).map(|i| ((i * 13 % 9) as f64 - 4.0) / 5.0).collect();
            let bias = vec![0.1, -0.2, 0.3];
            let fast = conv3d_forward(&geom, &input, &weight, &bias);
            let slow = naive_conv(&geom, &input, &weight, &bias);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_picks_window_maximum() {
        let geom = PoolGeometry::new(&[1, 2, 2, 2], [2, 2, 2]).unwrap();
        let input = [0.0, 5.0, 1.0, 2.0, -1.0, 3.0, 4.0, 0.5];
        let (out, arg) = max_pool3d_forward(&geom, &input);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn pool_drops_remainder() {
        let geom = PoolGeometry::new(&[1, 3, 5, 5], [2, 2, 2]).unwrap();
        assert_eq!(geom.output_shape(), vec![1, 1, 2, 2]);
        assert!(PoolGeometry::new(&[1, 1, 4, 4], [2, 2, 2]).is_err());
    }
}

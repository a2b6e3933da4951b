//! Forward/backward kernels over raw `[N, C, D, H, W]` buffers.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (self.input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        o
    }

    pub fn valid(&self) -> bool {
        (0..3).all(|a| {
            self.stride[a] > 0
                && self.kernel[a] > 0
                && self.input[a] + 2 * self.pad[a] >= self.kernel[a]
        })
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output positions `o` along one axis with `0 <= o*stride + k - pad < extent`.
fn valid_range(out: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // first o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // last o with o*stride + k - pad <= extent - 1
    let hi = if extent + pad > k { ((extent + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output();
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (z0, z1) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (x0, x1) = valid_range(ow, iw, sw, e, pw);
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    if z0 >= z1 || y0 >= y1 || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..z0 * oh * ow].fill(T::zero());
                    dst[z1 * oh * ow..].fill(T::zero());
                    for z in z0..z1 {
                        let zz = z * sd + a - pd;
                        let plane = &xc[zz * ih * iw..(zz + 1) * ih * iw];
                        let dz = &mut dst[z * oh * ow..(z + 1) * oh * ow];
                        dz[..y0 * ow].fill(T::zero());
                        dz[y1 * ow..].fill(T::zero());
                        for y in y0..y1 {
                            let yy = y * sh + b - ph;
                            let line = &plane[yy * iw..(yy + 1) * iw];
                            let d = &mut dz[y * ow..(y + 1) * ow];
                            d[..x0].fill(T::zero());
                            d[x1..].fill(T::zero());
                            let first = x0 * sw + e - pw;
                            if sw == 1 {
                                d[x0..x1].copy_from_slice(&line[first..first + (x1 - x0)]);
                            } else {
                                for (o, v) in d[x0..x1].iter_mut().zip(line[first..].iter().step_by(sw)) {
                                    *o = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output();
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (z0, z1) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (x0, x1) = valid_range(ow, iw, sw, e, pw);
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    for z in z0..z1 {
                        let zz = z * sd + a - pd;
                        for y in y0..y1 {
                            let yy = y * sh + b - ph;
                            let line = &mut xc[(zz * ih + yy) * iw..(zz * ih + yy + 1) * iw];
                            let s = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let first = x0 * sw + e - pw;
                            if x0 >= x1 {
                                continue;
                            }
                            if sw == 1 {
                                for (t, &v) in line[first..first + (x1 - x0)].iter_mut().zip(&s[x0..x1]) {
                                    *t = *t + v;
                                }
                            } else {
                                for (t, &v) in line[first..].iter_mut().step_by(sw).zip(&s[x0..x1]) {
                                    *t = *t + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape()[0];
    let [od, oh, ow] = g.output();
    let p = od * oh * ow;
    let kdim = g.in_ch * g.kvol();
    let in_per = g.in_ch * g.input.iter().product::<usize>();
    let mut out = Tensor::zeros(&[n, g.out_ch, od, oh, ow]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let os = &mut out.data_mut()[s * g.out_ch * p..(s + 1) * g.out_ch * p];
        if let Some(b) = bias {
            for (c, chunk) in os.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        T::gemm(
            g.out_ch,
            kdim,
            p,
            T::one(),
            w.data(),
            kdim as isize,
            1,
            src,
            p as isize,
            1,
            beta,
            os,
            p as isize,
            1,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let n = x.shape()[0];
    let p: usize = g.output().iter().product();
    let kdim = g.in_ch * g.kvol();
    let in_per = g.in_ch * g.input.iter().product::<usize>();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.out_ch]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { kdim * p }];
    let mut dcol = vec![T::zero(); if pointwise || !need_dx { 0 } else { kdim * p }];
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let dys = &dy.data()[s * g.out_ch * p..(s + 1) * g.out_ch * p];
        for (c, chunk) in dys.chunks(p).enumerate() {
            let acc: T = chunk.iter().copied().sum();
            db.data_mut()[c] = db.data()[c] + acc;
        }
        if need_dw {
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            // dW[co, k] += dY[co, p] · col[k, p]^T
            T::gemm(
                g.out_ch,
                p,
                kdim,
                T::one(),
                dys,
                p as isize,
                1,
                src,
                1,
                p as isize,
                T::one(),
                dw.data_mut(),
                kdim as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
            if pointwise {
                T::gemm(
                    kdim,
                    g.out_ch,
                    p,
                    T::one(),
                    w.data(),
                    1,
                    kdim as isize,
                    dys,
                    p as isize,
                    1,
                    T::zero(),
                    dxs,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    kdim,
                    g.out_ch,
                    p,
                    T::one(),
                    w.data(),
                    1,
                    kdim as isize,
                    dys,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    p as isize,
                    1,
                );
                col2im(&dcol, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let [n, c, d, h, w] = x.dims5();
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        for z in 0..od {
            for y in 0..oh {
                let srow = nc * d * h * w + (z / f[0]) * h * w + (y / f[1]) * w;
                let drow = nc * od * oh * ow + z * oh * ow + y * ow;
                for xo in 0..ow {
                    dst[drow + xo] = src[srow + xo / f[2]];
                }
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize], f: [usize; 3]) -> Tensor<T> {
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let [n, c, od, oh, ow] = dy.dims5();
    let mut dx = Tensor::zeros(in_shape);
    let src = dy.data();
    let dst = dx.data_mut();
    for nc in 0..n * c {
        for z in 0..od {
            for y in 0..oh {
                let drow = nc * d * h * w + (z / f[0]) * h * w + (y / f[1]) * w;
                let srow = nc * od * oh * ow + z * oh * ow + y * ow;
                for xo in 0..ow {
                    let t = &mut dst[drow + xo / f[2]];
                    *t = *t + src[srow + xo];
                }
            }
        }
    }
    dx
}

/// Per-(sample, channel) normalisation over the spatial axes. Returns the
/// normalised tensor and the inverse standard deviations.
pub fn instance_norm_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let [n, c, d, h, w] = x.dims5();
    let m = d * h * w;
    let mf = T::from_usize(m).unwrap();
    let mut out = Tensor::zeros(x.shape());
    let mut inv = Vec::with_capacity(n * c);
    for (src, dst) in x.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
        let mean = src.iter().copied().sum::<T>() / mf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

pub fn instance_norm_backward<T: Scalar>(y: &Tensor<T>, inv: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, d, h, w] = y.dims5();
    let m = d * h * w;
    let mf = T::from_usize(m).unwrap();
    let mut dx = Tensor::zeros(y.shape());
    for (((ys, dys), dxs), &is) in y
        .data()
        .chunks(m)
        .zip(dy.data().chunks(m))
        .zip(dx.data_mut().chunks_mut(m))
        .zip(inv)
    {
        let mean_dy = dys.iter().copied().sum::<T>() / mf;
        let mean_dyy = ys.iter().zip(dys).map(|(&a, &b)| a * b).sum::<T>() / mf;
        for ((o, &yv), &g) in dxs.iter_mut().zip(ys).zip(dys) {
            *o = is * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

/// Channel softmax of a `[N, K, D, H, W]` logit tensor.
pub fn softmax_channels<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let [n, k, d, h, w] = z.dims5();
    let m = d * h * w;
    let mut out = Tensor::zeros(z.shape());
    let src = z.data();
    let dst = out.data_mut();
    for s in 0..n {
        let base = s * k * m;
        for v in 0..m {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(src[base + c * m + v]);
            }
            let mut tot = T::zero();
            for c in 0..k {
                let e = (src[base + c * m + v] - mx).exp();
                dst[base + c * m + v] = e;
                tot = tot + e;
            }
            for c in 0..k {
                dst[base + c * m + v] = dst[base + c * m + v] / tot;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let [n, _, id, ih, iw] = x.dims5();
        let [od, oh, ow] = g.output();
        let mut out = Tensor::zeros(&[n, g.out_ch, od, oh, ow]);
        for s in 0..n {
            for co in 0..g.out_ch {
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.in_ch {
                                for a in 0..g.kernel[0] {
                                    for b in 0..g.kernel[1] {
                                        for e in 0..g.kernel[2] {
                                            let zz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let yy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                                            let xx = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                            if zz < 0 || yy < 0 || xx < 0 || zz >= id as isize || yy >= ih as isize || xx >= iw as isize {
                                                continue;
                                            }
                                            let xi = (((s * g.in_ch + ci) * id + zz as usize) * ih + yy as usize) * iw + xx as usize;
                                            let wi = (((co * g.in_ch + ci) * g.kernel[0] + a) * g.kernel[1] + b) * g.kernel[2] + e;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = (((s * g.out_ch + co) * od + z) * oh + y) * ow + xo;
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let geoms = [
            ConvGeom { in_ch: 2, out_ch: 3, input: [1, 7, 6], kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] },
            ConvGeom { in_ch: 2, out_ch: 2, input: [4, 5, 5], kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] },
            ConvGeom { in_ch: 3, out_ch: 2, input: [1, 4, 4], kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] },
            ConvGeom { in_ch: 1, out_ch: 2, input: [3, 8, 8], kernel: [3, 5, 5], stride: [1, 2, 2], pad: [1, 2, 2] },
            ConvGeom { in_ch: 2, out_ch: 1, input: [1, 6, 9], kernel: [1, 3, 3], stride: [1, 3, 2], pad: [0, 0, 1] },
        ];
        for g in geoms {
            let x = Tensor::from_fn(&[2, g.in_ch, g.input[0], g.input[1], g.input[2]], |i| ((i * 37 % 11) as f64) - 5.0);
            let w = Tensor::from_fn(&[g.out_ch, g.in_ch, g.kernel[0], g.kernel[1], g.kernel[2]], |i| ((i * 13 % 7) as f64) * 0.1 - 0.3);
            let fast = conv_forward(&x, &w, None, &g);
            let slow = naive_conv(&x, &w, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_fn(&[1, 2, 1, 3, 2], |i| i as f64);
        let dy = Tensor::from_fn(&[1, 2, 1, 6, 4], |i| (i % 5) as f64);
        let y = upsample_forward(&x, [1, 2, 2]);
        let dx = upsample_backward(&dy, x.shape(), [1, 2, 2]);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::from_fn(&[2, 3, 1, 4, 4], |i| (i as f64).sin() * 3.0 + 1.0);
        let (y, _) = instance_norm_forward(&x, 0.0);
        for chunk in y.data().chunks(16) {
            let m: f64 = chunk.iter().sum::<f64>() / 16.0;
            let v: f64 = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let geoms = [
            ConvGeom { in_ch: 2, out_ch: 1, input: [1, 7, 6], kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] },
            ConvGeom { in_ch: 1, out_ch: 1, input: [3, 8, 8], kernel: [3, 5, 5], stride: [1, 2, 2], pad: [1, 2, 2] },
            ConvGeom { in_ch: 2, out_ch: 1, input: [2, 6, 9], kernel: [3, 3, 3], stride: [2, 3, 2], pad: [1, 0, 1] },
            ConvGeom { in_ch: 1, out_ch: 1, input: [1, 2, 2], kernel: [1, 3, 3], stride: [1, 1, 1], pad: [0, 2, 2] },
        ];
        for g in geoms {
            let n_in = g.in_ch * g.input.iter().product::<usize>();
            let n_col = g.in_ch * g.kvol() * g.output().iter().product::<usize>();
            let x: Vec<f64> = (0..n_in).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let c: Vec<f64> = (0..n_col).map(|i| ((i * 5 % 11) as f64) * 0.5 - 2.0).collect();
            let mut col = vec![1e9; n_col];
            im2col(&x, &g, &mut col);
            let mut dx = vec![0.0; n_in];
            col2im(&c, &g, &mut dx);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{g:?}: {lhs} vs {rhs}");
        }
    }
}

//! Hand-written CPU kernels with explicit backward passes for the hot paths
//! of the network: patch extraction for convolution, last-axis softmax and
//! group normalization.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("input has to be contiguous"),
    }
}

/// `(B, C, H, W)` -> `(B, C*k*k + 1, H*W)` patches with zero padding `k/2`;
/// the trailing row is all ones so a bias can ride along in the matmul.
#[derive(Debug, Clone, Copy)]
struct Im2Col {
    k: usize,
}

/// Adjoint of [`Im2Col`]: scatters patch gradients back to the image.
#[derive(Debug, Clone, Copy)]
struct Col2Im {
    k: usize,
    h: usize,
    w: usize,
}

fn im2col<T: WithDType + Float>(src: &[T], dims: (usize, usize, usize, usize), k: usize) -> Vec<T> {
    let (b, c, h, w) = dims;
    let p = (k / 2) as isize;
    let hw = h * w;
    let rows = c * k * k + 1;
    let mut dst = vec![T::zero(); b * rows * hw];
    for bi in 0..b {
        dst[(bi * rows + rows - 1) * hw..(bi + 1) * rows * hw].fill(T::one());
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let row = bi * rows + (ci * k + dy) * k + dx;
                    let out = &mut dst[row * hw..(row + 1) * hw];
                    let oy = dy as isize - p;
                    let ox = dx as isize - p;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s = sy as usize * w;
                        let sx0 = (x_lo as isize + ox) as usize;
                        out[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[s + sx0..s + sx0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: WithDType + Float>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let rows = c * k * k + 1;
    let mut dst = vec![T::zero(); b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut dst[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let row = bi * rows + (ci * k + dy) * k + dx;
                    let col = &src[row * hw..(row + 1) * hw];
                    let oy = dy as isize - p;
                    let ox = dx as isize - p;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s = sy as usize * w;
                        let sx0 = (x_lo as isize + ox) as usize;
                        let target = &mut plane[s + sx0..s + sx0 + (x_hi - x_lo)];
                        for (t, v) in target.iter_mut().zip(&col[y * w + x_lo..y * w + x_hi]) {
                            *t += *v;
                        }
                    }
                }
            }
        }
    }
    dst
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let shape = Shape::from((b, c * self.k * self.k + 1, h * w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, dims, self.k)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, dims, self.k)),
            _ => bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im { k: self.k, h, w })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ckk, _) = layout.shape().dims3()?;
        let c = (ckk - 1) / (self.k * self.k);
        let shape = Shape::from((b, c, self.h, self.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, b, c, self.h, self.w, self.k)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, b, c, self.h, self.w, self.k)),
            _ => bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }
}

/// Patches of `x` for a `k`x`k` convolution plus a trailing row of ones.
pub fn im2col_op(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { k })
}

/// Softmax over the last axis with an analytic backward pass.
#[derive(Debug, Clone, Copy)]
struct SoftmaxLast;

fn softmax_rows<T: WithDType + Float>(src: &[T], n: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for (s, d) in src.chunks(n).zip(dst.chunks_mut(n)) {
        let max = s.iter().fold(T::neg_infinity(), |m, &v| Float::max(m, v));
        let mut sum = T::zero();
        for (x, y) in s.iter().zip(d.iter_mut()) {
            *y = (*x - max).exp();
            sum += *y;
        }
        for y in d.iter_mut() {
            *y /= sum;
        }
    }
    dst
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *layout.shape().dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, layout)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, layout)?, n)),
            _ => bail!("softmax: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(candle_core::D::Minus1)?;
        Ok(Some(res.mul(&grad_res.broadcast_sub(&dot)?)?))
    }
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLast)
}

/// Group normalization without the affine part, over `(B, G, N)` rows.
#[derive(Debug, Clone, Copy)]
struct GroupNormalize {
    eps: f64,
}

#[derive(Debug, Clone, Copy)]
struct GroupNormalizeBwd {
    eps: f64,
}

fn group_stats<T: WithDType + Float>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from(eps).unwrap()).sqrt())
}

fn gn_fwd<T: WithDType + Float>(src: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for (s, d) in src.chunks(n).zip(dst.chunks_mut(n)) {
        let (mean, inv) = group_stats(s, eps);
        for (x, y) in s.iter().zip(d.iter_mut()) {
            *y = (*x - mean) * inv;
        }
    }
    dst
}

fn gn_bwd<T: WithDType + Float>(src: &[T], grad: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    let nf = T::from(n).unwrap();
    for ((s, g), d) in src.chunks(n).zip(grad.chunks(n)).zip(dst.chunks_mut(n)) {
        let (mean, inv) = group_stats(s, eps);
        let mut g_mean = T::zero();
        let mut gx_mean = T::zero();
        for (x, gv) in s.iter().zip(g) {
            g_mean += *gv;
            gx_mean += *gv * (*x - mean) * inv;
        }
        g_mean /= nf;
        gx_mean /= nf;
        for ((x, gv), out) in s.iter().zip(g).zip(d.iter_mut()) {
            let xhat = (*x - mean) * inv;
            *out = inv * (*gv - g_mean - xhat * gx_mean);
        }
    }
    dst
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *layout.shape().dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gn_fwd(contiguous(v, layout)?, n, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(gn_fwd(contiguous(v, layout)?, n, self.eps)),
            _ => bail!("group norm: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg.apply_op2_no_bwd(&grad_res.contiguous()?, &GroupNormalizeBwd { eps: self.eps })?;
        Ok(Some(g))
    }
}

impl CustomOp2 for GroupNormalizeBwd {
    fn name(&self) -> &'static str {
        "group-normalize-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l1.shape().dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(gn_bwd(contiguous(x, l1)?, contiguous(g, l2)?, n, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(gn_bwd(contiguous(x, l1)?, contiguous(g, l2)?, n, self.eps))
            }
            _ => bail!("group norm backward: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Normalizes each row of the last axis to zero mean and unit variance.
pub fn group_normalize(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(GroupNormalize { eps })
}

/// `x * scale[c] + shift[c]` for `(B, C, N)` input.
#[derive(Debug, Clone, Copy)]
struct ChannelAffine;

fn channel_affine<T: WithDType + Float>(x: &[T], scale: &[T], shift: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * n;
            let (sc, sh) = (scale[ci], shift[ci]);
            for (d, v) in out[o..o + n].iter_mut().zip(&x[o..o + n]) {
                *d = *v * sc + sh;
            }
        }
    }
    out
}

impl candle_core::CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, n) = l1.shape().dims3()?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(s)) => CpuStorage::F32(channel_affine(
                contiguous(x, l1)?,
                contiguous(a, l2)?,
                contiguous(s, l3)?,
                b,
                c,
                n,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(s)) => CpuStorage::F64(channel_affine(
                contiguous(x, l1)?,
                contiguous(a, l2)?,
                contiguous(s, l3)?,
                b,
                c,
                n,
            )),
            _ => bail!("channel affine: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, c, _) = x.dims3()?;
        let gx = grad.broadcast_mul(&scale.reshape((1, c, 1))?)?;
        let gscale = (grad * x)?.sum(2)?.sum(0)?;
        let gshift = grad.sum(2)?.sum(0)?;
        Ok((Some(gx), Some(gscale), Some(gshift)))
    }
}

/// Per-channel `x * scale + shift` on `(B, C, N)` input.
pub fn channel_affine_op(x: &Tensor, scale: &Tensor, shift: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize]) -> Vec<f64> {
        let dev = Device::Cpu;
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                let fp = f(&Tensor::from_vec(p, shape, &dev).unwrap()).to_scalar::<f64>().unwrap();
                let fm = f(&Tensor::from_vec(m, shape, &dev).unwrap()).to_scalar::<f64>().unwrap();
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn check(f: &dyn Fn(&Tensor) -> Tensor, shape: &[usize]) {
        let dev = Device::Cpu;
        let n: usize = shape.iter().product();
        let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 / 17.0 - 0.4) * 1.3).collect();
        let v = Var::from_tensor(&Tensor::from_vec(x.clone(), shape, &dev).unwrap()).unwrap();
        let g = f(v.as_tensor()).backward().unwrap();
        let analytic = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let numeric = numeric_grad(f, &x, shape);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    fn weights(n: usize) -> Tensor {
        let w: Vec<f64> = (0..n).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        Tensor::from_vec(w, n, &Device::Cpu).unwrap()
    }

    #[test]
    fn im2col_gradient() {
        let shape = [2, 2, 3, 4];
        let w = weights(2 * (2 * 9 + 1) * 12);
        check(&|x| (im2col_op(x, 3).unwrap().flatten_all().unwrap() * &w).unwrap().sum_all().unwrap(), &shape);
    }

    #[test]
    fn channel_affine_gradient() {
        let dev = Device::Cpu;
        let w = weights(2 * 3 * 4);
        let scale = Tensor::new(&[0.5f64, -1.5, 2.0], &dev).unwrap();
        let shift = Tensor::new(&[0.1f64, 0.2, -0.3], &dev).unwrap();
        check(
            &|x| {
                (channel_affine_op(x, &scale, &shift).unwrap().flatten_all().unwrap() * &w)
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            &[2, 3, 4],
        );
        let sv = Var::from_tensor(&scale).unwrap();
        let x = Tensor::from_vec((0..24).map(|i| i as f64 * 0.1).collect::<Vec<_>>(), (2, 3, 4), &dev).unwrap();
        let g = (channel_affine_op(&x, sv.as_tensor(), &shift).unwrap().flatten_all().unwrap() * &w)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gs = g.get(sv.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ws = w.to_vec1::<f64>().unwrap();
        for ci in 0..3 {
            let expect: f64 = (0..2).flat_map(|b| (0..4).map(move |n| (b * 3 + ci) * 4 + n)).map(|i| xs[i] * ws[i]).sum();
            assert!((gs[ci] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient() {
        let w = weights(12);
        check(&|x| (softmax_last(x).unwrap().flatten_all().unwrap() * &w).unwrap().sum_all().unwrap(), &[3, 4]);
    }

    #[test]
    fn group_normalize_gradient() {
        let w = weights(12);
        check(
            &|x| (group_normalize(x, 1e-5).unwrap().flatten_all().unwrap() * &w).unwrap().sum_all().unwrap(),
            &[2, 6],
        );
    }
}

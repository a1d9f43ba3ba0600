//! Fused CPU kernels for hot paths in the attention layers.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

trait Float: WithDType {
    fn exp(self) -> Self;
    fn larger(self, other: Self) -> Self;
    fn neg_infinity() -> Self;
}

macro_rules! float {
    ($t:ty) => {
        impl Float for $t {
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn larger(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}
float!(f32);
float!(f64);

fn contiguous<'a, T>(src: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&src[a..b]),
        None => bail!("softmax kernels need contiguous input"),
    }
}

fn last_dim(layout: &Layout) -> usize {
    layout.shape().dims().last().copied().unwrap_or(1).max(1)
}

fn softmax_rows<T: Float>(src: &[T], n: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for (s, d) in src.chunks(n).zip(dst.chunks_mut(n)) {
        let max = s.iter().fold(T::neg_infinity(), |m, &x| m.larger(x));
        let mut sum = T::zero();
        for (x, y) in s.iter().zip(d.iter_mut()) {
            *y = (*x - max).exp();
            sum = sum + *y;
        }
        for y in d.iter_mut() {
            *y = *y / sum;
        }
    }
    dst
}

fn softmax_grad_rows<T: Float>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); y.len()];
    for ((y, g), d) in y.chunks(n).zip(g.chunks(n)).zip(dst.chunks_mut(n)) {
        let dot = y.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((a, b), o) in y.iter().zip(g).zip(d.iter_mut()) {
            *o = *a * (*b - dot);
        }
    }
    dst
}

struct Softmax;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "wip-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(layout);
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(softmax_rows(contiguous(s, layout)?, n)),
            CpuStorage::F64(s) => CpuStorage::F64(softmax_rows(contiguous(s, layout)?, n)),
            _ => bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "wip-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            bail!("softmax gradient shape mismatch");
        }
        let n = last_dim(l1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, n))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, n))
            }
            _ => bail!("softmax gradient supports matching f32 or f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last axis with a fused backward pass.
pub(crate) fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn reference(x: &Tensor) -> Tensor {
        let m = x.max_keepdim(D::Minus1).unwrap().detach();
        let e = x.broadcast_sub(&m).unwrap().exp().unwrap();
        e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
    }

    #[test]
    fn matches_composed_softmax_and_its_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&(Tensor::randn(0f64, 3.0, (2, 3, 7), &dev).unwrap())).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 7), &dev).unwrap();
        let a = softmax_last(x.as_tensor()).unwrap();
        let b = reference(x.as_tensor());
        assert!((&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-15);
        let ga = (&a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let (ga, gb) = (ga.get(&x).unwrap(), gb.get(&x).unwrap());
        assert!((ga - gb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-14);
    }

    #[test]
    fn handles_transposed_input_and_masks() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (4, 5), &dev).unwrap().t().unwrap();
        let x = x.broadcast_add(&Tensor::new(&[0f32, -1e9, 0.0, 0.0], &dev).unwrap()).unwrap();
        let a = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in &a {
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

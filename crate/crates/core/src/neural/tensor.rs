use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type with a matching GEMM kernel.
///
/// Training and inference run in `f32`; `f64` exists so finite-difference
/// gradient checks have enough precision.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `C = alpha·A·B + beta·C` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
                };
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len(), "gemm: A too small");
                    assert!(last(k, n, rsb, csb) < b.len(), "gemm: B too small");
                }
                assert!(last(m, n, rsc, csc) < c.len(), "gemm: C too small");
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, b: usize) -> &[T] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [na, ca, ha, wa] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concat {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..na {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Ok(Tensor4 {
            shape: [na, ca + cb, ha, wa],
            data,
        })
    }

    /// Inverse of [`Tensor4::concat_channels`]: the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Tensor4<T>, Tensor4<T>) {
        let [n, ct, h, w] = self.shape;
        let hw = h * w;
        let mut a = Vec::with_capacity(n * c * hw);
        let mut b = Vec::with_capacity(n * (ct - c) * hw);
        for i in 0..n {
            let item = self.item(i);
            a.extend_from_slice(&item[..c * hw]);
            b.extend_from_slice(&item[c * hw..]);
        }
        (
            Tensor4 {
                shape: [n, c, h, w],
                data: a,
            },
            Tensor4 {
                shape: [n, ct - c, h, w],
                data: b,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // Aᵀ·B
        f64::gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor4::<f32>::from_vec([2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor4::<f32>::from_vec([2, 2, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let c = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 3, 1, 2]);
        assert_eq!(c.item(1), &[3., 4., 4., 5., 6., 7.]);
        let (a2, b2) = c.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
        let bad = Tensor4::<f32>::zeros([2, 1, 2, 2]);
        assert!(Tensor4::concat_channels(&a, &bad).is_err());
    }
}

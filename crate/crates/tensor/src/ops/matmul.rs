use std::sync::Arc;

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{mismatch, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tape::record;
use crate::tensor::{numel, Tensor};

/// How the leading (batch) axes of the two operands pair up.
#[derive(Clone, Copy)]
enum Pairing {
    /// Equal batch extents, matched one to one.
    Matched(usize),
    /// `b` has no batch axes; `a`'s batch folds into its row count.
    SharedRhs(usize),
    /// `a` has no batch axes and is applied to every `b` batch.
    SharedLhs(usize),
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]`.
    ///
    /// Batch axes must either match exactly or be absent on one side.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (pairing, batch_shape) = if ba == bb {
            (Pairing::Matched(numel(ba)), ba.to_vec())
        } else if bb.is_empty() || numel(bb) == 1 && bb.len() < ba.len() {
            (Pairing::SharedRhs(numel(ba)), ba.to_vec())
        } else if ba.is_empty() || numel(ba) == 1 && ba.len() < bb.len() {
            (Pairing::SharedLhs(numel(bb)), bb.to_vec())
        } else {
            return Err(mismatch("matmul", sa, sb));
        };
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);

        let (a, b) = (self.data_arc(), other.data_arc());
        let mut c = vec![T::zero(); numel(&out_shape)];
        match pairing {
            Pairing::Matched(_) => c
                .par_chunks_mut(m * n)
                .zip(a.par_chunks(m * k))
                .zip(b.par_chunks(k * n))
                .for_each(|((c, a), b)| gemm_nn(m, k, n, a, b, c)),
            Pairing::SharedRhs(batch) => gemm_nn(batch * m, k, n, &a, &b, &mut c),
            Pairing::SharedLhs(_) => c
                .par_chunks_mut(m * n)
                .zip(b.par_chunks(k * n))
                .for_each(|(c, b)| gemm_nn(m, k, n, &a, b, c)),
        }

        Ok(record(&[self, other], out_shape, Arc::new(c), move |g, needs| {
            let ga = needs[0].then(|| match pairing {
                Pairing::Matched(batch) => {
                    let mut ga = vec![T::zero(); batch * m * k];
                    ga.par_chunks_mut(m * k)
                        .zip(g.par_chunks(m * n))
                        .zip(b.par_chunks(k * n))
                        .for_each(|((ga, g), b)| gemm_nt(m, n, k, g, b, ga));
                    ga
                }
                Pairing::SharedRhs(batch) => {
                    let mut ga = vec![T::zero(); batch * m * k];
                    gemm_nt(batch * m, n, k, g, &b, &mut ga);
                    ga
                }
                Pairing::SharedLhs(_) => {
                    let mut ga = vec![T::zero(); m * k];
                    for (g, b) in g.chunks(m * n).zip(b.chunks(k * n)) {
                        gemm_nt(m, n, k, g, b, &mut ga);
                    }
                    ga
                }
            });
            let gb = needs[1].then(|| match pairing {
                Pairing::Matched(batch) => {
                    let mut gb = vec![T::zero(); batch * k * n];
                    gb.par_chunks_mut(k * n)
                        .zip(a.par_chunks(m * k))
                        .zip(g.par_chunks(m * n))
                        .for_each(|((gb, a), g)| gemm_tn(k, m, n, a, g, gb));
                    gb
                }
                Pairing::SharedRhs(batch) => {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(k, batch * m, n, &a, g, &mut gb);
                    gb
                }
                Pairing::SharedLhs(batch) => {
                    let mut gb = vec![T::zero(); batch * k * n];
                    gb.par_chunks_mut(k * n)
                        .zip(g.par_chunks(m * n))
                        .for_each(|(gb, g)| gemm_tn(k, m, n, &a, g, gb));
                    gb
                }
            });
            vec![ga, gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_contraction() {
        let a = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_left() {
        let eye = Tensor::<f32>::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_fn([2, 5], |i| i as f32 * 0.5 - 1.0);
        assert_eq!(eye.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn batched_shapes() {
        let a = Tensor::<f32>::zeros([3, 2, 4, 5]);
        let b = Tensor::zeros([3, 2, 5, 6]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[3, 2, 4, 6]);
        let w = Tensor::zeros([5, 7]);
        assert_eq!(a.matmul(&w).unwrap().shape(), &[3, 2, 4, 7]);
        assert!(a.matmul(&Tensor::zeros([4, 6])).is_err());
        assert!(a.matmul(&Tensor::zeros([2, 2, 5, 6])).is_err());
    }
}

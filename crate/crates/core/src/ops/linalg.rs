use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `c = a·b + beta·c` for strided row/column views, `c` dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs view out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs view out of bounds");
    assert!(c.len() >= m * n, "gemm: output too small");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulDims {
    batch: usize,
    rhs_batch: usize,
    n: usize,
    k: usize,
    p: usize,
    out_shape: Vec<usize>,
}

/// Shapes for `a[..., n, k] · op(b)[..., k, p]` where `b`'s leading extents
/// are a suffix of `a`'s (broadcast over the remaining leading axes).
fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err!("matmul needs rank >= 2 operands, got {a:?} and {b:?}"));
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, p) = if transpose_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != kb {
        return Err(dim_err!("matmul inner extents differ: {a:?} vs {b:?}"));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    if bb.len() > ab.len() || ab[ab.len() - bb.len()..] != *bb {
        return Err(dim_err!("matmul batch extents {bb:?} do not broadcast onto {ab:?}"));
    }
    let mut out_shape = ab.to_vec();
    out_shape.extend([n, p]);
    Ok(MatmulDims { batch: ab.iter().product(), rhs_batch: bb.iter().product(), n, k, p, out_shape })
}

fn matmul_forward(a: &Tensor, b: &Tensor, d: &MatmulDims, transpose_b: bool) -> Tensor {
    let (n, k, p) = (d.n, d.k, d.p);
    let mut out = vec![0.0; d.batch * n * p];
    let rhs_strides = if transpose_b { (1, k) } else { (p, 1) };
    for i in 0..d.batch {
        let bi = i % d.rhs_batch;
        gemm(
            n,
            k,
            p,
            &a.data()[i * n * k..(i + 1) * n * k],
            (k, 1),
            &b.data()[bi * k * p..(bi + 1) * k * p],
            rhs_strides,
            0.0,
            &mut out[i * n * p..(i + 1) * n * p],
        );
    }
    Tensor::from_parts(d.out_shape.clone(), out)
}

/// Batched matrix product with trailing-axis broadcasting of `b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape(), false)?;
    Ok(matmul_forward(a, b, &d, false))
}

impl<'t> Var<'t> {
    /// `self · rhs`, see [`matmul`].
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` over the last two axes of `rhs`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t>, transpose_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let d = matmul_dims(a.shape(), b.shape(), transpose_b)?;
        let out = matmul_forward(&a, &b, &d, transpose_b);
        Ok(self.record(out, &[self, rhs], move |g, needs| {
            let (n, k, p) = (d.n, d.k, d.p);
            let ga = needs[0].then(|| {
                // dA = dC · op(B)ᵀ
                let mut ga = vec![0.0; d.batch * n * k];
                let strides = if transpose_b { (k, 1) } else { (1, p) };
                for i in 0..d.batch {
                    let bi = i % d.rhs_batch;
                    gemm(
                        n,
                        p,
                        k,
                        &g.data()[i * n * p..(i + 1) * n * p],
                        (p, 1),
                        &b.data()[bi * k * p..(bi + 1) * k * p],
                        strides,
                        0.0,
                        &mut ga[i * n * k..(i + 1) * n * k],
                    );
                }
                Tensor::from_parts(a.shape().to_vec(), ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; d.rhs_batch * k * p];
                for i in 0..d.batch {
                    let bi = i % d.rhs_batch;
                    let ai = &a.data()[i * n * k..(i + 1) * n * k];
                    let gi = &g.data()[i * n * p..(i + 1) * n * p];
                    let dst = &mut gb[bi * k * p..(bi + 1) * k * p];
                    if transpose_b {
                        // B stored p×k: dB += dCᵀ · A
                        gemm(p, n, k, gi, (1, p), ai, (k, 1), 1.0, dst);
                    } else {
                        // dB += Aᵀ · dC
                        gemm(k, n, p, ai, (1, k), gi, (p, 1), 1.0, dst);
                    }
                }
                Tensor::from_parts(b.shape().to_vec(), gb)
            });
            vec![ga, gb]
        }))
    }
}

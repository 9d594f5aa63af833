//! Pure rearrangements (pixel shuffle, window tiling, axis permutes),
//! expressed as gather index maps so one backward rule covers them all.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// An output shape plus the flat source index of every output element.
#[derive(Clone, Debug)]
pub struct IndexMap {
    pub shape: Vec<usize>,
    pub index: Rc<Vec<usize>>,
}

impl IndexMap {
    pub fn apply(&self, input: &Tensor) -> Tensor {
        let data = self.index.iter().map(|&i| input.data()[i]).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn apply_var<'t>(&self, input: Var<'t>) -> Result<Var<'t>> {
        input.gather(&self.shape, Rc::clone(&self.index))
    }
}

fn nhwc(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(dim_err!("{what} expects an NHWC tensor, got {shape:?}")),
    }
}

/// `out[y, x, c] = in[y / r, x / r, c·r² + (y mod r)·r + (x mod r)]`.
pub fn pixel_shuffle_map(shape: &[usize], r: usize) -> Result<IndexMap> {
    let [n, h, w, c] = nhwc(shape, "pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(dim_err!("pixel_shuffle: {c} channels not divisible by r²={}", r * r));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut index = Vec::with_capacity(n * ho * wo * co);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let base = ((b * h + y / r) * w + x / r) * c;
                let sub = (y % r) * r + x % r;
                index.extend((0..co).map(|ch| base + ch * r * r + sub));
            }
        }
    }
    Ok(IndexMap { shape: vec![n, ho, wo, co], index: Rc::new(index) })
}

/// Inverse of [`pixel_shuffle_map`].
pub fn pixel_unshuffle_map(shape: &[usize], r: usize) -> Result<IndexMap> {
    let [n, h, w, c] = nhwc(shape, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(dim_err!("pixel_unshuffle: {h}x{w} not divisible by {r}"));
    }
    let (hi, wi, ci) = (h / r, w / r, c * r * r);
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..hi {
            for x in 0..wi {
                for ch in 0..ci {
                    let (cc, sub) = (ch / (r * r), ch % (r * r));
                    let (sy, sx) = (y * r + sub / r, x * r + sub % r);
                    index.push(((b * h + sy) * w + sx) * c + cc);
                }
            }
        }
    }
    Ok(IndexMap { shape: vec![n, hi, wi, ci], index: Rc::new(index) })
}

pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    Ok(pixel_shuffle_map(input.shape(), r)?.apply(input))
}

pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    Ok(pixel_unshuffle_map(input.shape(), r)?.apply(input))
}

/// Tokens `[N, H·W, C]` to windows `[N·(H/P)·(W/P), P², C]`. Windows are
/// ordered row-major over the window grid, tokens row-major inside a window.
pub fn window_partition_map(batch: usize, h: usize, w: usize, c: usize, p: usize) -> Result<IndexMap> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("window partition: {h}x{w} not divisible by window {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for wy in 0..gh {
            for wx in 0..gw {
                for ty in 0..p {
                    for tx in 0..p {
                        let token = (wy * p + ty) * w + wx * p + tx;
                        let base = (b * h * w + token) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(IndexMap { shape: vec![batch * gh * gw, p * p, c], index: Rc::new(index) })
}

/// Inverse of [`window_partition_map`].
pub fn window_merge_map(batch: usize, h: usize, w: usize, c: usize, p: usize) -> Result<IndexMap> {
    let forward = window_partition_map(batch, h, w, c, p)?;
    let mut index = vec![0; forward.index.len()];
    for (dst, &src) in forward.index.iter().enumerate() {
        index[src] = dst;
    }
    Ok(IndexMap { shape: vec![batch, h * w, c], index: Rc::new(index) })
}

/// Swaps axes 1 and 2 of a rank-4 tensor `[a, b, c, d] -> [a, c, b, d]`.
pub fn swap_middle_map(shape: &[usize]) -> Result<IndexMap> {
    let [a, b, c, d] = *shape else {
        return Err(dim_err!("swap_middle expects rank 4, got {shape:?}"));
    };
    let mut index = Vec::with_capacity(a * b * c * d);
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                let base = ((i * b + j) * c + k) * d;
                index.extend(base..base + d);
            }
        }
    }
    Ok(IndexMap { shape: vec![a, c, b, d], index: Rc::new(index) })
}

impl<'t> Var<'t> {
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t>> {
        pixel_shuffle_map(&self.shape(), r)?.apply_var(self)
    }

    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t>> {
        pixel_unshuffle_map(&self.shape(), r)?.apply_var(self)
    }
}

//! im2col convolution kernels.
//!
//! Forward and backward run one GEMM per image. With more than one worker
//! thread (see [`crate::set_threads`]) the batch is split into contiguous
//! chunks; weight gradients are then reduced chunk by chunk, which changes
//! the floating-point summation order relative to the single-threaded path.

use std::thread;

use super::Scalar;
use crate::error::{Error, Result};

/// Output extent of a convolution or pooling window, if positive.
pub fn conv_output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if k == 0 || stride == 0 || extent + 2 * pad < k {
        return None;
    }
    Some((extent + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || weight.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {x:?}, weight {weight:?}")));
        }
        if weight[2] != weight[3] {
            return Err(Error::shape("conv2d", format!("non-square kernel {weight:?}")));
        }
        if x[1] != weight[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", x[1], weight[1]),
            ));
        }
        let k = weight[2];
        let out = |e| conv_output_extent(e, k, stride, pad);
        let (Some(out_h), Some(out_w)) = (out(x[2]), out(x[3])) else {
            return Err(Error::shape(
                "conv2d",
                format!("non-positive output extent for {x:?} with k={k} stride={stride} pad={pad}"),
            ));
        };
        Ok(ConvGeometry {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: weight[0],
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_image(&self) -> usize {
        self.c_out * self.positions()
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.out_h, self.out_w]
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let dst = &mut cols[row..row + p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let src = &cols[row..row + p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn chunk_ranges(n: usize, workers: usize) -> Vec<(usize, usize)> {
    let workers = workers.clamp(1, n.max(1));
    let per = n.div_ceil(workers);
    (0..n).step_by(per.max(1)).map(|s| (s, (s + per).min(n))).collect()
}

fn forward_range<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeometry, out: &mut [T]) {
    let (patch, p) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); patch * p];
    for (img, dst) in x.chunks(g.in_image()).zip(out.chunks_mut(g.out_image())) {
        im2col(img, g, &mut cols);
        T::gemm(g.c_out, patch, p, T::one(), w, false, &cols, false, T::zero(), dst);
        if let Some(bias) = b {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_image()];
    let workers = crate::threads();
    if workers <= 1 || g.n < 2 {
        forward_range(x, w, b, g, &mut out);
        return out;
    }
    thread::scope(|s| {
        let mut rest = out.as_mut_slice();
        for (start, end) in chunk_ranges(g.n, workers) {
            let (mine, tail) = rest.split_at_mut((end - start) * g.out_image());
            rest = tail;
            let xs = &x[start * g.in_image()..end * g.in_image()];
            s.spawn(move || forward_range(xs, w, b, g, mine));
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

fn backward_range<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let (patch, p) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); patch * p];
    let mut dcols = vec![T::zero(); patch * p];
    let images = x.len() / g.in_image();
    for i in 0..images {
        let img = &x[i * g.in_image()..(i + 1) * g.in_image()];
        let dyi = &dy[i * g.out_image()..(i + 1) * g.out_image()];
        im2col(img, g, &mut cols);
        // dW += dY_i . cols^T
        T::gemm(g.c_out, p, patch, T::one(), dyi, false, &cols, true, T::one(), dw);
        for (o, row) in dyi.chunks(p).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = W^T . dY_i
            T::gemm(patch, g.c_out, p, T::one(), w, true, dyi, false, T::zero(), &mut dcols);
            col2im(&dcols, g, &mut dx[i * g.in_image()..(i + 1) * g.in_image()]);
        }
    }
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_dx: bool,
) -> ConvGrads<T> {
    let wlen = g.c_out * g.patch();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let workers = crate::threads();
    if workers <= 1 || g.n < 2 {
        let mut dw = vec![T::zero(); wlen];
        let mut db = vec![T::zero(); g.c_out];
        backward_range(x, w, dy, g, dx.as_deref_mut(), &mut dw, &mut db);
        return ConvGrads { dx, dw, db };
    }
    let ranges = chunk_ranges(g.n, workers);
    let partials: Vec<(Vec<T>, Vec<T>)> = thread::scope(|s| {
        let mut handles = Vec::new();
        let mut rest = dx.as_deref_mut();
        for &(start, end) in &ranges {
            let mine = match rest.take() {
                Some(r) => {
                    let (m, t) = r.split_at_mut((end - start) * g.in_image());
                    rest = Some(t);
                    Some(m)
                }
                None => None,
            };
            let xs = &x[start * g.in_image()..end * g.in_image()];
            let dys = &dy[start * g.out_image()..end * g.out_image()];
            handles.push(s.spawn(move || {
                let mut dw = vec![T::zero(); wlen];
                let mut db = vec![T::zero(); g.c_out];
                backward_range(xs, w, dys, g, mine, &mut dw, &mut db);
                (dw, db)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("conv worker")).collect()
    });
    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); g.c_out];
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += *b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += *b);
    }
    ConvGrads { dx, dw, db }
}

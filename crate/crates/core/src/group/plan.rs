use super::{Action, Axis, Ratio};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const SNAP: f64 = 1e-9;

/// Per-pixel flag marking values fully supported by in-bounds source pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl ValidMask {
    pub fn all_true(h: usize, w: usize) -> Self {
        ValidMask {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape("ValidMask", format!("{} bits for {h}x{w}", bits.len())));
        }
        Ok(ValidMask { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_all_true(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn intersect(&self, other: &ValidMask) -> Result<ValidMask> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::shape(
                "ValidMask::intersect",
                format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w),
            ));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(ValidMask { h: self.h, w: self.w, bits })
    }

    /// Resizes conservatively: a target pixel is valid only if every source
    /// pixel it covers is valid.
    pub fn resize_to(&self, h: usize, w: usize) -> ValidMask {
        if (h, w) == (self.h, self.w) || self.is_all_true() {
            return ValidMask::all_true(h, w);
        }
        let mut bits = vec![true; h * w];
        for i in 0..h {
            let r0 = i * self.h / h;
            let r1 = ((i + 1) * self.h).div_ceil(h).max(r0 + 1);
            for j in 0..w {
                let c0 = j * self.w / w;
                let c1 = ((j + 1) * self.w).div_ceil(w).max(c0 + 1);
                bits[i * w + j] = (r0..r1).all(|r| (c0..c1).all(|c| self.get(r, c)));
            }
        }
        ValidMask { h, w, bits }
    }
}

#[derive(Clone, Debug)]
enum Taps {
    /// Output pixel `o` copies input pixel `src[o]`.
    Gather(Vec<u32>),
    /// Output pixel `o` is `sum w * in[idx]` over up to four taps.
    Bilinear(Vec<[(u32, f64); 4]>),
}

/// A precomputed spatial transformation of `(in_h, in_w)` planes into
/// `(out_h, out_w)` planes. Linear in the input, so its transpose is the
/// backward rule.
#[derive(Clone, Debug)]
pub struct SpatialPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Taps,
    mask: ValidMask,
}

fn bilinear_taps(row: f64, col: f64, h: usize, w: usize) -> ([(u32, f64); 4], bool) {
    let inside = |v: f64, n: usize| v >= -SNAP && v <= (n - 1) as f64 + SNAP;
    let valid = inside(row, h) && inside(col, w);
    let split = |v: f64| {
        let mut base = v.floor();
        let mut frac = v - base;
        if frac < SNAP {
            frac = 0.0;
        } else if frac > 1.0 - SNAP {
            base += 1.0;
            frac = 0.0;
        }
        (base as i64, frac)
    };
    let (r0, fr) = split(row);
    let (c0, fc) = split(col);
    let mut taps = [(0u32, 0.0f64); 4];
    let corners = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ];
    for (slot, (r, c, wt)) in taps.iter_mut().zip(corners) {
        if wt > 0.0 && r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            *slot = ((r as usize * w + c as usize) as u32, wt);
        }
    }
    (taps, valid)
}

impl SpatialPlan {
    fn identity(h: usize, w: usize) -> Self {
        SpatialPlan {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            taps: Taps::Gather((0..(h * w) as u32).collect()),
            mask: ValidMask::all_true(h, w),
        }
    }

    fn gather(h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut src = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = f(i, j);
                src.push((si * w + sj) as u32);
            }
        }
        SpatialPlan {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            taps: Taps::Gather(src),
            mask: ValidMask::all_true(h, w),
        }
    }

    fn bilinear(h: usize, w: usize, oh: usize, ow: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut taps = Vec::with_capacity(oh * ow);
        let mut bits = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let (row, col) = f(i, j);
                let (t, valid) = bilinear_taps(row, col, h, w);
                taps.push(t);
                bits.push(valid);
            }
        }
        SpatialPlan {
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            taps: Taps::Bilinear(taps),
            mask: ValidMask { h: oh, w: ow, bits },
        }
    }

    /// Rotation by `quarter * 90` degrees counterclockwise.
    fn quarter_turn(quarter: u32, h: usize, w: usize) -> Result<Self> {
        match quarter % 4 {
            0 => Ok(Self::identity(h, w)),
            2 => Ok(Self::gather(h, w, |i, j| (h - 1 - i, w - 1 - j))),
            q => {
                if h != w {
                    return Err(Error::NonSquare { op: "rotation", h, w });
                }
                if q == 1 {
                    Ok(Self::gather(h, w, |i, j| (j, w - 1 - i)))
                } else {
                    Ok(Self::gather(h, w, |i, j| (w - 1 - j, i)))
                }
            }
        }
    }

    /// Bilinear rotation by `degrees` counterclockwise about the pixel-center
    /// origin, zero fill outside the source.
    pub fn rotation_degrees(h: usize, w: usize, degrees: f64) -> Self {
        if degrees == 0.0 {
            return Self::identity(h, w);
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Self::bilinear(h, w, h, w, |i, j| {
            let (x, y) = (j as f64 - cx, cy - i as f64);
            let (sx, sy) = (x * c + y * s, -x * s + y * c);
            (cy - sy, sx + cx)
        })
    }

    /// Frame-preserving zoom about the center by `factor`, zero fill.
    pub fn zoom(h: usize, w: usize, factor: f64) -> Self {
        if factor == 1.0 {
            return Self::identity(h, w);
        }
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Self::bilinear(h, w, h, w, |i, j| (cy + (i as f64 - cy) / factor, cx + (j as f64 - cx) / factor))
    }

    fn flip(axis: Axis, h: usize, w: usize) -> Self {
        match axis {
            Axis::Vertical => Self::gather(h, w, |i, j| (i, w - 1 - j)),
            Axis::Horizontal => Self::gather(h, w, |i, j| (h - 1 - i, j)),
        }
    }

    fn rotation(k: u32, order: u32, h: usize, w: usize) -> Result<Self> {
        if (4 * k) % order == 0 {
            return Self::quarter_turn(4 * k / order, h, w);
        }
        if h != w {
            return Err(Error::NonSquare { op: "rotation", h, w });
        }
        Ok(Self::rotation_degrees(h, w, 360.0 * k as f64 / order as f64))
    }

    fn scale(r: Ratio, h: usize, w: usize) -> Result<Self> {
        if r == Ratio::one() {
            return Ok(Self::identity(h, w));
        }
        let (oh, ow) = (r.scale_extent(h)?, r.scale_extent(w)?);
        // Corner-aligned sampling keeps every source footprint in-bounds.
        let step = |n: usize, on: usize| if on > 1 { (n - 1) as f64 / (on - 1) as f64 } else { 0.0 };
        let (sh, sw) = (step(h, oh), step(w, ow));
        let (ch, cw) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Ok(Self::bilinear(h, w, oh, ow, |i, j| {
            let row = if oh > 1 { i as f64 * sh } else { ch };
            let col = if ow > 1 { j as f64 * sw } else { cw };
            (row, col)
        }))
    }

    /// `self` applied after `first`.
    fn after(self, first: &SpatialPlan) -> SpatialPlan {
        let Taps::Gather(inner) = &first.taps else {
            unreachable!("only permutations are composed")
        };
        let remap = |idx: u32| inner[idx as usize];
        let taps = match self.taps {
            Taps::Gather(src) => Taps::Gather(src.into_iter().map(remap).collect()),
            Taps::Bilinear(t) => Taps::Bilinear(
                t.into_iter()
                    .map(|taps| taps.map(|(i, wt)| if wt > 0.0 { (remap(i), wt) } else { (i, wt) }))
                    .collect(),
            ),
        };
        SpatialPlan { taps, ..self }
    }

    pub fn for_action(action: Action, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::ZeroExtent(vec![h, w]));
        }
        match action {
            Action::Rotation { k, order } => Self::rotation(k % order, order, h, w),
            Action::Reflection(axis) => Ok(Self::flip(axis, h, w)),
            Action::RotoReflection { k, order } => {
                let flip = Self::flip(Axis::Vertical, h, w);
                Ok(Self::rotation(k % order, order, h, w)?.after(&flip))
            }
            Action::Scale(r) => Self::scale(r, h, w),
        }
    }

    pub fn in_extent(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn out_extent(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn is_permutation(&self) -> bool {
        matches!(self.taps, Taps::Gather(_))
    }

    pub fn mask(&self) -> &ValidMask {
        &self.mask
    }

    /// Applies the plan to every trailing `(H, W)` plane.
    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 2] != self.in_h || s[s.len() - 1] != self.in_w {
            return Err(Error::shape(
                "spatial action",
                format!("plan for {}x{} applied to {s:?}", self.in_h, self.in_w),
            ));
        }
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let planes = t.len() / ip;
        let mut out = Vec::with_capacity(planes * op);
        for plane in t.data().chunks(ip) {
            match &self.taps {
                Taps::Gather(src) => out.extend(src.iter().map(|&i| plane[i as usize])),
                Taps::Bilinear(taps) => out.extend(taps.iter().map(|tp| {
                    tp.iter()
                        .filter(|(_, wt)| *wt > 0.0)
                        .fold(T::zero(), |acc, &(i, wt)| acc + T::lit(wt) * plane[i as usize])
                })),
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = self.out_h;
        shape[n - 1] = self.out_w;
        Ok(Tensor::from_parts(shape, out))
    }

    /// `dx += P^T dy` for planes laid out like [`SpatialPlan::apply`].
    pub fn accumulate_transpose<T: Scalar>(&self, dy: &[T], dx: &mut [T]) {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        for (gy, gx) in dy.chunks(op).zip(dx.chunks_mut(ip)) {
            match &self.taps {
                Taps::Gather(src) => {
                    for (d, &i) in gy.iter().zip(src) {
                        gx[i as usize] += *d;
                    }
                }
                Taps::Bilinear(taps) => {
                    for (d, tp) in gy.iter().zip(taps) {
                        for &(i, wt) in tp.iter().filter(|(_, wt)| *wt > 0.0) {
                            gx[i as usize] += T::lit(wt) * *d;
                        }
                    }
                }
            }
        }
    }

    /// Carries a validity mask of the input through the plan: an output pixel
    /// stays valid only if it is geometrically supported and every source
    /// pixel it reads is valid.
    pub fn transport(&self, input: &ValidMask) -> Result<ValidMask> {
        if (input.h, input.w) != (self.in_h, self.in_w) {
            return Err(Error::shape("ValidMask::transport", "mask extent differs from plan input"));
        }
        let bits = match &self.taps {
            Taps::Gather(src) => src.iter().map(|&i| input.bits[i as usize]).collect(),
            Taps::Bilinear(taps) => taps
                .iter()
                .zip(&self.mask.bits)
                .map(|(tp, own)| *own && tp.iter().filter(|(_, wt)| *wt > 0.0).all(|&(i, _)| input.bits[i as usize]))
                .collect(),
        };
        Ok(ValidMask {
            h: self.out_h,
            w: self.out_w,
            bits,
        })
    }
}

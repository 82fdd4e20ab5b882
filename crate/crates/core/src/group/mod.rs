//! Finite transformation sets acting on image and feature-map planes.
//!
//! Rotations are counterclockwise about the pixel-center origin
//! `((H-1)/2, (W-1)/2)`. Multiples of 90 degrees and flips are index
//! permutations; other angles and scalings resample bilinearly.

mod plan;

use std::fmt;
use std::sync::Arc;

pub use plan::{SpatialPlan, ValidMask};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mirror axis of a reflection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Mirror across the horizontal midline (rows reversed).
    Horizontal,
    /// Mirror across the vertical midline (columns reversed).
    Vertical,
}

/// A positive rational scale factor `num/den` in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid(format!("scale factor {num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn one() -> Self {
        Ratio { num: 1, den: 1 }
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn recip(self) -> Self {
        Ratio {
            num: self.den,
            den: self.num,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `extent * self` if it is an integer.
    pub fn scale_extent(self, extent: usize) -> Result<usize> {
        let scaled = extent * self.num as usize;
        if scaled % self.den as usize != 0 || scaled == 0 {
            return Err(Error::NonIntegerExtent {
                extent,
                factor: self.to_string(),
            });
        }
        Ok(scaled / self.den as usize)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl std::str::FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("scale factor `{s}`"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Ratio::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

/// The transformation carried by a group element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    /// Rotation by `k * 360 / order` degrees.
    Rotation { k: u32, order: u32 },
    Reflection(Axis),
    /// Rotation by `k * 360 / order` degrees applied after a vertical-axis flip.
    RotoReflection { k: u32, order: u32 },
    Scale(Ratio),
}

impl Action {
    pub fn is_identity(self) -> bool {
        match self {
            Action::Rotation { k, .. } => k == 0,
            Action::Scale(r) => r == Ratio::one(),
            Action::Reflection(_) | Action::RotoReflection { .. } => false,
        }
    }

    /// The inverse transformation. Defined for every action, whether or not
    /// the inverse is enumerated in a group.
    pub fn inverse(self) -> Action {
        match self {
            Action::Rotation { k, order } => Action::Rotation {
                k: (order - k % order) % order,
                order,
            },
            // Flips and rotoreflections are involutions.
            Action::Reflection(_) | Action::RotoReflection { .. } => self,
            Action::Scale(r) => Action::Scale(r.recip()),
        }
    }

    /// True for actions that permute pixels without interpolation.
    pub fn is_exact(self) -> bool {
        match self {
            Action::Rotation { k, order } | Action::RotoReflection { k, order } => (4 * k) % order == 0,
            Action::Reflection(_) => true,
            Action::Scale(r) => r == Ratio::one(),
        }
    }

    pub fn angle_degrees(self) -> f64 {
        match self {
            Action::Rotation { k, order } | Action::RotoReflection { k, order } => {
                360.0 * k as f64 / order as f64
            }
            _ => 0.0,
        }
    }

    /// Whether this action lies in the cyclic rotation subgroup of order
    /// `lambda` of a group of order `order`. Only pure rotations belong to a
    /// proper subgroup; everything else requires the full group.
    pub fn in_subgroup(self, lambda: usize, order: usize) -> bool {
        if self.is_identity() || lambda == order {
            return true;
        }
        match self {
            Action::Rotation { k, order: n } => (k as usize * lambda) % n as usize == 0,
            _ => false,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let deg = |k: u32, n: u32| {
            let d = 360.0 * k as f64 / n as f64;
            if d.fract() == 0.0 {
                format!("{}", d as i64)
            } else {
                format!("{d}")
            }
        };
        match *self {
            Action::Rotation { k, order } => write!(f, "rot{}", deg(k, order)),
            Action::Reflection(Axis::Vertical) => write!(f, "flip"),
            Action::Reflection(Axis::Horizontal) => write!(f, "flipud"),
            Action::RotoReflection { k, order } => write!(f, "flip+rot{}", deg(k, order)),
            Action::Scale(r) => write!(f, "scale{r}"),
        }
    }
}

/// Direction in which an action is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupElement {
    pub action: Action,
    /// Position in the enumeration of the owning [`GroupSpec`].
    pub index: usize,
}

impl GroupElement {
    pub fn is_identity(&self) -> bool {
        self.action.is_identity()
    }

    pub fn inverse_action(&self) -> Action {
        self.action.inverse()
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.action.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Rotation,
    Reflection,
    RotoReflection,
    Scale,
}

/// A finite transformation set with the identity at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    name: String,
    kind: GroupKind,
    elements: Vec<GroupElement>,
}

impl GroupSpec {
    fn build(name: String, kind: GroupKind, actions: Vec<Action>) -> Self {
        let elements = actions
            .into_iter()
            .enumerate()
            .map(|(index, action)| GroupElement { action, index })
            .collect();
        GroupSpec { name, kind, elements }
    }

    /// `R{order}`: the `order` equidistant rotations.
    pub fn rotation(order: u32) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("rotation group of order 0"));
        }
        let actions = (0..order).map(|k| Action::Rotation { k, order }).collect();
        Ok(Self::build(format!("R{order}"), GroupKind::Rotation, actions))
    }

    /// `R{order}R`: rotations followed by the flipped rotations.
    pub fn rotoreflection(order: u32) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("rotoreflection group of order 0"));
        }
        let mut actions: Vec<Action> = (0..order).map(|k| Action::Rotation { k, order }).collect();
        actions.extend((0..order).map(|k| Action::RotoReflection { k, order }));
        Ok(Self::build(format!("R{order}R"), GroupKind::RotoReflection, actions))
    }

    /// `F`: identity and a vertical-axis mirror.
    pub fn reflection() -> Self {
        let actions = vec![Action::Rotation { k: 0, order: 1 }, Action::Reflection(Axis::Vertical)];
        Self::build("F".into(), GroupKind::Reflection, actions)
    }

    /// A discrete scale set; the identity is inserted first when absent.
    pub fn scale(factors: &[Ratio]) -> Result<Self> {
        let mut list = vec![Ratio::one()];
        for f in factors {
            if list.contains(f) {
                continue;
            }
            list.push(*f);
        }
        let name = if list == [Ratio::one(), Ratio::new(1, 2)?, Ratio::new(2, 1)?] {
            "S".to_string()
        } else {
            let parts: Vec<String> = list[1..].iter().map(|r| r.to_string()).collect();
            format!("S:{}", parts.join(","))
        };
        Ok(Self::build(name, GroupKind::Scale, list.into_iter().map(Action::Scale).collect()))
    }

    /// Parses `R4`, `R8`, `R4R`, `F`, `S` (scales 1/2 and 2) or `S:a/b,c`.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let bad = || Error::invalid(format!("unknown group `{text}`"));
        if t == "F" {
            return Ok(Self::reflection());
        }
        if t == "S" {
            return Self::scale(&[Ratio::new(1, 2)?, Ratio::new(2, 1)?]);
        }
        if let Some(list) = t.strip_prefix("S:") {
            let factors = list.split(',').map(str::parse).collect::<Result<Vec<Ratio>>>()?;
            return Self::scale(&factors);
        }
        let body = t.strip_prefix('R').ok_or_else(bad)?;
        if let Some(n) = body.strip_suffix('R') {
            return Self::rotoreflection(n.parse().map_err(|_| bad())?);
        }
        Self::rotation(body.parse().map_err(|_| bad())?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// Number of elements.
    pub fn order(&self) -> usize {
        self.elements.len()
    }

    /// All elements, identity first. Rotations ascend by `k`; rotoreflection
    /// groups list unflipped then flipped rotations.
    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn non_identity(&self) -> impl Iterator<Item = &GroupElement> {
        self.elements.iter().filter(|e| !e.is_identity())
    }

    pub fn identity(&self) -> &GroupElement {
        &self.elements[0]
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Resampling plan for `action` on `(h, w)` planes.
pub fn plan_for(action: Action, h: usize, w: usize) -> Result<SpatialPlan> {
    SpatialPlan::for_action(action, h, w)
}

/// Applies `g` (or its inverse) to every `(H, W)` plane of an `[N, C, H, W]`
/// tensor, returning the result with the mask of fully supported pixels.
pub fn apply_action<T: Scalar>(g: &GroupElement, t: &Tensor<T>, direction: Direction) -> Result<(Tensor<T>, ValidMask)> {
    let action = match direction {
        Direction::Forward => g.action,
        Direction::Inverse => g.inverse_action(),
    };
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("apply_action", format!("expected NCHW, got {s:?}")));
    }
    let plan = SpatialPlan::for_action(action, s[2], s[3])?;
    let out = plan.apply(t)?;
    Ok((out, plan.mask().clone()))
}

/// Mask of pixels whose bilinear footprint under `g` lies in-bounds.
pub fn valid_region_mask(g: &GroupElement, h: usize, w: usize) -> Result<ValidMask> {
    Ok(SpatialPlan::for_action(g.action, h, w)?.mask().clone())
}

/// Plans are immutable and shared between the tape and callers.
pub fn shared_plan(action: Action, h: usize, w: usize) -> Result<Arc<SpatialPlan>> {
    Ok(Arc::new(SpatialPlan::for_action(action, h, w)?))
}

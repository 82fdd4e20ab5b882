//! Feature-group layouts and their textual form.
//!
//! A layer with base group order `Λ` and `N` feature groups is written `R{Λ}`
//! (every group has `Λ` channels) or, for mixed group sizes,
//! `R{Λ}-{λ2}-… @ f1/f2/…` where group size `λ_i` takes fraction `f_i` of
//! the `N` groups. Groups occupy consecutive channel blocks in the written
//! order.

use std::fmt;

use crate::error::{Error, Result};
use crate::group::Action;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureGroup {
    /// Channels per group, `λ`.
    pub size: usize,
    /// Number of groups of this size.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupLayout {
    order: usize,
    groups: Vec<FeatureGroup>,
}

fn layout_err(text: &str, reason: impl Into<String>) -> Error {
    Error::Layout {
        text: text.to_string(),
        reason: reason.into(),
    }
}

impl GroupLayout {
    pub fn new(order: usize, groups: Vec<FeatureGroup>) -> Result<Self> {
        let text = format!("order {order}");
        if order == 0 {
            return Err(layout_err(&text, "group order must be at least 1"));
        }
        if groups.is_empty() || groups.iter().all(|g| g.count == 0) {
            return Err(layout_err(&text, "layout has no feature groups"));
        }
        for g in &groups {
            if g.size == 0 || order % g.size != 0 {
                return Err(layout_err(&text, format!("group size {} does not divide {order}", g.size)));
            }
        }
        let groups = groups.into_iter().filter(|g| g.count > 0).collect();
        Ok(GroupLayout { order, groups })
    }

    /// `n` groups of the full order.
    pub fn homogeneous(order: usize, n: usize) -> Result<Self> {
        Self::new(order, vec![FeatureGroup { size: order, count: n }])
    }

    /// Base group order `Λ`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    /// `Σ λ·count`, the conv channel count this layout describes.
    pub fn total_channels(&self) -> usize {
        self.groups.iter().map(|g| g.size * g.count).sum()
    }

    /// `Σ count`, the channel count after group pooling.
    pub fn pooled_channels(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.groups.iter().all(|g| g.size == self.order)
    }

    /// Channels of this layout over the channels of a homogeneous layout with
    /// the same number of groups, as `(numerator, denominator)`.
    pub fn channel_fraction(&self) -> (usize, usize) {
        (self.total_channels(), self.order * self.pooled_channels())
    }

    /// Block size of every pooled channel, in channel order.
    pub fn blocks(&self) -> Vec<usize> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.size, g.count))
            .collect()
    }

    /// Pooled channels whose feature group is trained against `action`: a
    /// group of size `λ` covers the cyclic subgroup of order `λ`.
    pub fn pooled_channel_mask(&self, action: Action) -> Vec<bool> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(action.in_subgroup(g.size, self.order), g.count))
            .collect()
    }

    /// Parses the textual form against a base group count `N`.
    pub fn parse(text: &str, base_groups: usize) -> Result<Self> {
        let err = |reason: &str| layout_err(text, reason);
        if base_groups == 0 {
            return Err(err("base group count must be positive"));
        }
        let (sizes_part, fractions_part) = match text.split_once('@') {
            Some((s, f)) => (s.trim(), Some(f.trim())),
            None => (text.trim(), None),
        };
        let body = sizes_part
            .strip_prefix('R')
            .ok_or_else(|| err("layout must start with `R`"))?;
        let sizes = body
            .split('-')
            .map(|s| s.trim().parse::<usize>().map_err(|_| err("group sizes must be integers")))
            .collect::<Result<Vec<_>>>()?;
        let order = sizes[0];
        if order == 0 {
            return Err(err("group order must be at least 1"));
        }
        for &s in &sizes {
            if s == 0 || order % s != 0 {
                return Err(layout_err(text, format!("group size {s} does not divide {order}")));
            }
        }
        let fractions = match fractions_part {
            Some(f) => f
                .split('/')
                .map(|v| v.trim().parse::<f64>().map_err(|_| err("fractions must be numbers")))
                .collect::<Result<Vec<_>>>()?,
            None if sizes.len() == 1 => vec![1.0],
            None => return Err(err("mixed group sizes need `@ fractions`")),
        };
        if fractions.len() != sizes.len() {
            return Err(layout_err(
                text,
                format!("{} group sizes but {} fractions", sizes.len(), fractions.len()),
            ));
        }
        if fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(err("fractions must be non-negative"));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(layout_err(text, format!("fractions sum to {total}, not 1")));
        }
        let mut groups = Vec::with_capacity(sizes.len());
        for (&size, &f) in sizes.iter().zip(&fractions) {
            let exact = f * base_groups as f64;
            let count = exact.round();
            if (exact - count).abs() > 1e-9 {
                return Err(layout_err(
                    text,
                    format!("fraction {f} of {base_groups} groups is not an integer count"),
                ));
            }
            groups.push(FeatureGroup {
                size,
                count: count as usize,
            });
        }
        Self::new(order, groups).map_err(|_| err("layout has no feature groups"))
    }
}

impl fmt::Display for GroupLayout {
    /// Canonical textual form; parses back to the same layout given
    /// `N = pooled_channels()`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_homogeneous() && self.groups.len() == 1 {
            return write!(f, "R{}", self.order);
        }
        let n = self.pooled_channels() as f64;
        let mut sizes = vec![self.order.to_string()];
        let mut fractions = Vec::new();
        let mut groups = self.groups.clone();
        if groups[0].size != self.order {
            groups.insert(0, FeatureGroup { size: self.order, count: 0 });
        }
        for (i, g) in groups.iter().enumerate() {
            if i > 0 {
                sizes.push(g.size.to_string());
            }
            fractions.push((g.count as f64 / n).to_string());
        }
        write!(f, "R{} @ {}", sizes.join("-"), fractions.join("/"))
    }
}

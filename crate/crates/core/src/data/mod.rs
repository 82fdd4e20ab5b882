//! Datasets, Rot-MNIST/Scale-MNIST synthesis and equivariance batches.

pub mod idx;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::equiv::ElementPolicy;
use crate::error::{Error, Result};
use crate::group::{apply_action, Action, Direction, GroupElement, GroupSpec, SpatialPlan, ValidMask};
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

pub use idx::{load_idx, load_images, load_labels, save_float_images, save_images, save_labels, Idx};

/// Range of Scale-MNIST zoom factors.
pub const SCALE_RANGE: (f64, f64) = (0.3, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: String,
    /// Seed of the synthesis that produced the images, if any.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("dataset", format!("expected [N, 1, H, W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", s[0], labels.len()),
            ));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            split: split.into(),
            seed: None,
        })
    }

    /// Reads an image file and a label file (IDX, optionally gzipped).
    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: &str) -> Result<Self> {
        Self::new(load_images(images)?, load_labels(labels)?, split)
    }

    /// Writes `{stem}-images.idx.gz` and `{stem}-labels.idx.gz` into `dir`,
    /// quantizing pixels to bytes.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let img = dir.as_ref().join(format!("{stem}-images.idx.gz"));
        let lab = dir.as_ref().join(format!("{stem}-labels.idx.gz"));
        save_images(&img, &self.images)?;
        save_labels(&lab, &self.labels)?;
        Ok((img, lab))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Self> {
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: split.to_string(),
            seed: self.seed,
        })
    }

    /// Seeded shuffle, then the first `train` items and the next `val`.
    pub fn split(&self, seed: u64, train: usize, val: usize) -> Result<(Self, Self)> {
        if train + val > self.len() {
            return Err(Error::invalid(format!(
                "split of {train} + {val} needs more than the {} available images",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((
            self.subset(&order[..train], "train")?,
            self.subset(&order[train..train + val], "val")?,
        ))
    }

    /// Count per class for `classes` classes.
    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                h[l] += 1;
            }
        }
        h
    }

    /// Mini-batches of indices for `epoch`, shuffled from a stream derived
    /// from `seed`. A final batch with fewer than two items is dropped
    /// (batch norm needs at least two).
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Images and labels of `indices`, in the network dtype.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok((
            self.images.select_rows(indices)?.cast(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Resamples every image with its own plan.
    fn map_images(&self, seed: u64, mut plan: impl FnMut(usize, usize, usize) -> SpatialPlan) -> Result<Self> {
        let (h, w) = self.extent();
        let plane = h * w;
        let mut data = Vec::with_capacity(self.images.len());
        for i in 0..self.len() {
            let img = Tensor::from_vec(&[1, 1, h, w], self.images.data()[i * plane..(i + 1) * plane].to_vec())?;
            let out = plan(i, h, w).apply(&img)?;
            data.extend(out.data().iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(Dataset {
            images: Tensor::from_vec(self.images.shape(), data)?,
            labels: self.labels.clone(),
            split: self.split.clone(),
            seed: Some(seed),
        })
    }
}

/// Angle in degrees of image `index` under `seed`, uniform in `[0, 360)`.
pub fn rot_mnist_angle(seed: u64, index: usize) -> f64 {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64)).random_range(0.0..360.0)
}

/// Rotates each image by its own uniform angle (bilinear about the center,
/// zero fill). Angles come from per-index derived seeds.
pub fn synth_rot_mnist(base: &Dataset, seed: u64) -> Result<Dataset> {
    rotate_each(base, seed, |i| rot_mnist_angle(seed, i))
}

/// Rotation synthesis with caller-chosen angles in degrees.
pub fn rotate_each(base: &Dataset, seed: u64, angle: impl Fn(usize) -> f64) -> Result<Dataset> {
    let (h, w) = base.extent();
    if h != w {
        return Err(Error::NonSquare {
            op: "synth_rot_mnist",
            h,
            w,
        });
    }
    base.map_images(seed, |i, h, w| SpatialPlan::rotation_degrees(h, w, angle(i)))
}

/// Shrinks each image by a uniform factor in [`SCALE_RANGE`] about the
/// center, zero padding back to the frame.
pub fn synth_scale_mnist(base: &Dataset, seed: u64) -> Result<Dataset> {
    base.map_images(seed, |i, h, w| {
        let f = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64)).random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        SpatialPlan::zoom(h, w, f)
    })
}

/// One transformed copy `x_p = φ_g(x_q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedCopy<T> {
    /// Name of the group `element` belongs to.
    pub group: String,
    pub element: GroupElement,
    pub x_p: Tensor<T>,
    pub mask: ValidMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivBatch<T> {
    pub x_q: Tensor<T>,
    pub labels: Vec<usize>,
    pub copies: Vec<TransformedCopy<T>>,
}

impl<T: Scalar> EquivBatch<T> {
    /// Copies for every group in `groups`, in order.
    pub fn for_groups(
        x_q: Tensor<T>,
        labels: Vec<usize>,
        groups: &[GroupSpec],
        policy: ElementPolicy,
        step: u64,
    ) -> Result<Self> {
        let mut batch = EquivBatch {
            x_q,
            labels,
            copies: Vec::new(),
        };
        for spec in groups {
            let part = make_equiv_batch(batch.x_q.clone(), Vec::new(), spec, policy, step)?;
            batch.copies.extend(part.copies);
        }
        Ok(batch)
    }
}

/// Builds the transformed copies of `x_q` selected by `policy` at `step`.
pub fn make_equiv_batch<T: Scalar>(
    x_q: Tensor<T>,
    labels: Vec<usize>,
    spec: &GroupSpec,
    policy: ElementPolicy,
    step: u64,
) -> Result<EquivBatch<T>> {
    let s = x_q.shape();
    if s.len() != 4 {
        return Err(Error::shape("make_equiv_batch", format!("expected NCHW, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let elements = policy.select(spec, step);
    if h != w
        && elements
            .iter()
            .any(|g| matches!(g.action, Action::Rotation { .. } | Action::RotoReflection { .. }))
    {
        return Err(Error::NonSquare {
            op: "make_equiv_batch",
            h,
            w,
        });
    }
    let mut copies = Vec::with_capacity(elements.len());
    for g in elements {
        let (x_p, mask) = apply_action(g, &x_q, Direction::Forward)?;
        copies.push(TransformedCopy {
            group: spec.name().to_string(),
            element: *g,
            x_p,
            mask,
        });
    }
    Ok(EquivBatch { x_q, labels, copies })
}

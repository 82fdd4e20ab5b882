//! Equivariance losses over group-pooled feature maps and the meter that
//! reports them per layer.

mod oracle;
mod report;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{apply_action, shared_plan, Direction, GroupElement, GroupSpec, ValidMask};
use crate::model::Model;
use crate::nn::{GroupLayout, Mode};
use crate::tensor::{ElementMask, Scalar, Tape, Tensor, Var};
use crate::util::derive_seed;

pub use oracle::build_c4_oracle;
pub use report::{EquivarianceReport, LayerSummary, ReportEntry};

/// Which non-identity elements of a group enter a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementPolicy {
    All,
    /// `k` distinct elements drawn per step from a stream keyed by `seed`.
    Sample { k: usize, seed: u64 },
}

impl ElementPolicy {
    /// Non-identity elements used at `step`, in group order.
    pub fn select<'a>(&self, spec: &'a GroupSpec, step: u64) -> Vec<&'a GroupElement> {
        let pool: Vec<&GroupElement> = spec.non_identity().collect();
        match *self {
            ElementPolicy::All => pool,
            ElementPolicy::Sample { k, seed } => {
                if k >= pool.len() {
                    return pool;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step));
                let mut picked = sample(&mut rng, pool.len(), k).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| pool[i]).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivConfig {
    pub groups: Vec<GroupSpec>,
    /// `β_i` per conv block; blocks past the end have `β = 0`.
    pub beta: Vec<f64>,
    /// `α_G` by group name; missing groups default to 1.
    pub alpha: BTreeMap<String, f64>,
    pub policy: ElementPolicy,
}

impl EquivConfig {
    /// The same `β` at each of `blocks` layers, `α = 1`, all elements.
    pub fn uniform(groups: Vec<GroupSpec>, blocks: usize, beta: f64) -> Self {
        EquivConfig {
            groups,
            beta: vec![beta; blocks],
            alpha: BTreeMap::new(),
            policy: ElementPolicy::All,
        }
    }

    /// Layers with `β_i > 0`, ascending.
    pub fn monitored_layers(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&i| self.beta[i] > 0.0).collect()
    }

    pub fn beta_at(&self, layer: usize) -> f64 {
        self.beta.get(layer).copied().unwrap_or(0.0)
    }

    pub fn alpha_for(&self, group: &str) -> f64 {
        self.alpha.get(group).copied().unwrap_or(1.0)
    }

    /// Checks weights and that every monitored layer exists in `model` and
    /// carries a group layout.
    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if let Some(b) = self.beta.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config {
                key: "equiv.beta".into(),
                reason: format!("{b} is not a finite non-negative weight"),
            });
        }
        if let Some((g, a)) = self.alpha.iter().find(|(_, a)| !(**a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config {
                key: format!("equiv.alpha.{g}"),
                reason: format!("{a} is not a finite non-negative weight"),
            });
        }
        for layer in self.monitored_layers() {
            if layer >= model.num_blocks() {
                return Err(Error::MissingMonitoredLayer(layer));
            }
            if model.block_layout(layer).is_none() {
                return Err(Error::MissingLayout(layer));
            }
        }
        Ok(())
    }
}

/// Per-layer pooled maps of one forward pass, keyed by conv block index,
/// together with the valid region of the input that produced them.
#[derive(Clone, Debug, Default)]
pub struct LayerMaps {
    pub maps: BTreeMap<usize, Var>,
    pub input_mask: Option<ValidMask>,
}

/// Masked mean-squared difference between `h_p` and `φ_g(h_q)` where the
/// inputs satisfy `x_p = φ_g(x_q)`.
pub fn layer_equiv_loss<T: Scalar>(tape: &mut Tape<T>, h_p: Var, h_q: Var, g: &GroupElement) -> Result<Var> {
    layer_equiv_loss_masked(tape, h_p, h_q, g, None, None)
}

/// [`layer_equiv_loss`] restricted to a valid input region (resized to the
/// feature extent) and to a subset of pooled channels.
pub fn layer_equiv_loss_masked<T: Scalar>(
    tape: &mut Tape<T>,
    h_p: Var,
    h_q: Var,
    g: &GroupElement,
    input_mask: Option<&ValidMask>,
    channels: Option<&[bool]>,
) -> Result<Var> {
    let sq = tape.shape(h_q).to_vec();
    if sq.len() != 4 {
        return Err(Error::shape("layer_equiv_loss", format!("expected NCHW, got {sq:?}")));
    }
    let plan = shared_plan(g.action, sq[2], sq[3])?;
    let mut mask = plan.mask().clone();
    let moved = if plan.is_permutation() && plan.mask().is_all_true() && g.is_identity() {
        h_q
    } else {
        tape.resample(h_q, plan)?
    };
    if tape.shape(moved) != tape.shape(h_p) {
        return Err(Error::shape(
            "layer_equiv_loss",
            format!("{:?} vs transformed {:?}", tape.shape(h_p), tape.shape(moved)),
        ));
    }
    if let Some(m) = input_mask {
        mask = mask.intersect(&m.resize_to(mask.height(), mask.width()))?;
    }
    let em = ElementMask {
        spatial: (!mask.is_all_true()).then_some(mask),
        channels: channels.map(<[bool]>::to_vec),
    };
    let em = (em.spatial.is_some() || em.channels.is_some()).then_some(em);
    tape.mse(h_p, moved, em.as_ref())
}

/// Unweighted per-layer losses `L_i(g)` for every monitored layer, in layer
/// order. Layers whose layout leaves no channel inside the subgroup
/// containing `g` are skipped.
pub fn network_equiv_terms<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LayerMaps,
    q: &LayerMaps,
    g: &GroupElement,
    config: &EquivConfig,
    layouts: &[Option<GroupLayout>],
) -> Result<Vec<(usize, Var)>> {
    let mut terms = Vec::new();
    for layer in config.monitored_layers() {
        let (Some(&hp), Some(&hq)) = (p.maps.get(&layer), q.maps.get(&layer)) else {
            return Err(Error::MissingMonitoredLayer(layer));
        };
        let channels = layouts
            .get(layer)
            .and_then(Option::as_ref)
            .map(|l| l.pooled_channel_mask(g.action))
            .filter(|m| !m.iter().all(|b| *b));
        if channels.as_ref().is_some_and(|m| m.iter().all(|b| !*b)) {
            continue;
        }
        let l = layer_equiv_loss_masked(tape, hp, hq, g, p.input_mask.as_ref(), channels.as_deref())?;
        terms.push((layer, l));
    }
    Ok(terms)
}

/// `Σ_i β_i · L_i(g)` over monitored layers.
pub fn network_equiv_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LayerMaps,
    q: &LayerMaps,
    g: &GroupElement,
    config: &EquivConfig,
    layouts: &[Option<GroupLayout>],
) -> Result<Var> {
    let terms = network_equiv_terms(tape, p, q, g, config, layouts)?;
    weigh_layers(tape, &terms, config)
}

/// `Σ β_i · term_i`; a constant zero when there are no terms.
pub fn weigh_layers<T: Scalar>(tape: &mut Tape<T>, terms: &[(usize, Var)], config: &EquivConfig) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let weighted: Vec<(Var, T)> = terms.iter().map(|(l, v)| (*v, T::lit(config.beta_at(*l)))).collect();
    tape.weighted_sum(&weighted)
}

/// `primary + Σ_G α_G · L_G`.
pub fn total_objective<T: Scalar>(
    tape: &mut Tape<T>,
    primary: Var,
    per_group: &[(String, Var)],
    config: &EquivConfig,
) -> Result<Var> {
    let mut terms = vec![(primary, T::one())];
    for (name, loss) in per_group {
        let a = config.alpha_for(name);
        if !(a >= 0.0) {
            return Err(Error::Config {
                key: format!("equiv.alpha.{name}"),
                reason: format!("{a} is negative"),
            });
        }
        terms.push((*loss, T::lit(a)));
    }
    tape.weighted_sum(&terms)
}

/// Largest batch the meter forwards at once.
const METER_CHUNK: usize = 64;

/// Measures the equivariance loss of `model` (eval mode) on `sample` for
/// every element of `spec` at the given conv blocks.
pub fn equiv_meter<T: Scalar>(
    model: &Model<T>,
    sample: &Tensor<T>,
    spec: &GroupSpec,
    layers: &[usize],
) -> Result<EquivarianceReport> {
    let n = sample.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    for &l in layers {
        if model.block_layout(l).is_none() {
            return Err(Error::MissingLayout(l));
        }
    }
    // (layer, element) -> sample-weighted sum of chunk means.
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let len = METER_CHUNK.min(n - start);
        let x = sample.narrow(start, len)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fq = model.forward(&mut tape, xv, Mode::Eval, false)?;
        let mut hq = BTreeMap::new();
        for &l in layers {
            hq.insert(l, model.pooled(&mut tape, &fq, l)?);
        }
        for g in spec.elements() {
            if g.is_identity() {
                for &l in layers {
                    let loss = layer_equiv_loss(&mut tape, hq[&l], hq[&l], g)?;
                    let v = tape.value(loss).item().as_f64();
                    assert!(v == 0.0, "identity element produced equivariance loss {v}");
                    sums.entry((l, g.index)).or_default();
                }
                continue;
            }
            let (xp, mask) = apply_action(g, &x, Direction::Forward)?;
            let xpv = tape.constant(xp);
            let fp = model.forward(&mut tape, xpv, Mode::Eval, false)?;
            for &l in layers {
                let channels = model
                    .block_layout(l)
                    .map(|lay| lay.pooled_channel_mask(g.action))
                    .filter(|m| !m.iter().all(|b| *b));
                if channels.as_ref().is_some_and(|m| m.iter().all(|b| !*b)) {
                    continue;
                }
                let hp = model.pooled(&mut tape, &fp, l)?;
                let loss = layer_equiv_loss_masked(&mut tape, hp, hq[&l], g, Some(&mask), channels.as_deref())?;
                *sums.entry((l, g.index)).or_default() += tape.value(loss).item().as_f64() * len as f64;
            }
        }
        start += len;
    }
    let mut entries = Vec::new();
    for (&(layer, index), &s) in &sums {
        entries.push(ReportEntry {
            layer,
            element: spec.elements()[index].to_string(),
            identity: spec.elements()[index].is_identity(),
            mse: s / n as f64,
        });
    }
    Ok(EquivarianceReport::new(spec.name().to_string(), n, entries))
}

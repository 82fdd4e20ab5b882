//! Finite-difference checks of the tape's backward rules.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::equiv::{layer_equiv_loss, total_objective, weigh_layers, EquivConfig};
use crate::error::Result;
use crate::group::{Action, Axis, GroupSpec, SpatialPlan, ValidMask};
use crate::tensor::{BatchNormMode, ElementMask, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub op: String,
    pub shape: String,
    /// Worst `|analytic - numeric| / max(1, |numeric|)` over all inputs.
    pub max_err: f64,
    pub passed: bool,
}

/// Compares tape gradients of `f` at `inputs` with central differences.
/// Returns the worst mixed absolute/relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..probe[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (g.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = normal(&mut rng, tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn cases(s: usize) -> Vec<Case> {
    let (n, c, h, w) = [(2, 3, 5, 5), (3, 2, 6, 4), (2, 4, 7, 7)][s];
    let x4 = vec![n, c, h, w];
    let rows = [2, 3, 4][s];
    let (k, m) = ([3, 4, 2][s], [2, 5, 3][s]);
    let blocks: Vec<usize> = [vec![1, 2], vec![2], vec![2, 2]][s].clone();
    let labels: Vec<usize> = (0..rows).map(|i| (i * 3 + s) % m).collect();
    let stride = [1, 2, 1][s];
    let action = [
        Action::Rotation { k: 1, order: 4 },
        Action::Reflection(Axis::Horizontal),
        Action::Rotation { k: 3, order: 4 },
    ][s];
    let angle = [30.0, 45.0, 200.0][s];

    let mut out: Vec<Case> = vec![
        ("add", vec![x4.clone(), x4.clone()], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 1)
        })),
        ("sub", vec![x4.clone(), x4.clone()], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 2)
        })),
        ("mul", vec![x4.clone(), x4.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 3)
        })),
        ("scale", vec![x4.clone()], Box::new(|t, v| {
            let y = t.scale(v[0], -1.5);
            project(t, y, 4)
        })),
        ("mean", vec![x4.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        })),
        ("weighted_sum", vec![vec![], vec![]], Box::new(|t, v| {
            let y = t.weighted_sum(&[(v[0], 0.5), (v[1], -2.0)])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        })),
        ("matmul", vec![vec![rows, k], vec![k, m]], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 5)
        })),
        ("linear", vec![vec![rows, k], vec![m, k], vec![m]], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 6)
        })),
        ("conv2d", vec![x4.clone(), vec![2, c, 3, 3], vec![2]], Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            project(t, y, 7)
        })),
        ("batch_norm_train", vec![x4.clone(), vec![c], vec![c]], Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
            project(t, y, 8)
        })),
        ("batch_norm_eval", vec![x4.clone(), vec![c], vec![c]], Box::new(move |t, v| {
            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
            let mode = BatchNormMode::Eval { running_mean: &mean, running_var: &var, eps: 1e-5 };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
            project(t, y, 9)
        })),
        ("relu", vec![x4.clone()], Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 10)
        })),
        ("max_pool2d", vec![x4.clone()], Box::new(|t, v| {
            let y = t.max_pool2d(v[0], 2, 2)?;
            project(t, y, 11)
        })),
        ("global_avg_pool", vec![x4.clone()], Box::new(|t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, 12)
        })),
        ("narrow", vec![x4.clone()], Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 1)?;
            project(t, y, 14)
        })),
        ("resample_exact", vec![x4.clone()], Box::new(move |t, v| {
            let (h, w) = (t.shape(v[0])[2], t.shape(v[0])[3]);
            let plan = Arc::new(SpatialPlan::for_action(action, h, w)?);
            let y = t.resample(v[0], plan)?;
            project(t, y, 15)
        })),
        ("resample_bilinear", vec![x4.clone()], Box::new(move |t, v| {
            let (h, w) = (t.shape(v[0])[2], t.shape(v[0])[3]);
            let plan = Arc::new(SpatialPlan::rotation_degrees(h, w, angle));
            let y = t.resample(v[0], plan)?;
            project(t, y, 16)
        })),
        ("mse_masked", vec![x4.clone(), x4.clone()], Box::new(move |t, v| {
            let bits = (0..h * w).map(|i| i % 3 != 0).collect();
            let mask = ElementMask {
                spatial: Some(ValidMask::from_bits(h, w, bits)?),
                channels: Some((0..c).map(|i| i != 1).collect()),
            };
            t.mse(v[0], v[1], Some(&mask))
        })),
        ("softmax_cross_entropy", vec![vec![rows, m]], Box::new(move |t, v| {
            t.softmax_cross_entropy(v[0], &labels)
        })),
    ];
    let spec = if h == w { GroupSpec::rotation(4) } else { Ok(GroupSpec::reflection()) }.expect("valid group");
    let g = spec.elements()[1].clone();
    let g2 = g.clone();
    out.push(("layer_equiv_loss", vec![x4.clone(), x4.clone()], Box::new(move |t, v| {
        layer_equiv_loss(t, v[0], v[1], &g)
    })));
    if h == w {
        let r8 = GroupSpec::rotation(8).expect("valid group");
        let g45 = r8.elements()[1].clone();
        out.push(("layer_equiv_loss_bilinear", vec![x4.clone(), x4.clone()], Box::new(move |t, v| {
            layer_equiv_loss(t, v[0], v[1], &g45)
        })));
    }
    let labels2: Vec<usize> = (0..n).map(|i| (i + s) % m).collect();
    out.push(("total_objective", vec![vec![n, m], x4.clone(), x4.clone()], Box::new(move |t, v| {
        let mut cfg = EquivConfig::uniform(vec![spec.clone()], 1, 0.7);
        cfg.alpha.insert(spec.name().to_string(), 1.3);
        let primary = t.softmax_cross_entropy(v[0], &labels2)?;
        let l = layer_equiv_loss(t, v[1], v[2], &g2)?;
        let lg = weigh_layers(t, &[(0, l)], &cfg)?;
        total_objective(t, primary, &[(spec.name().to_string(), lg)], &cfg)
    })));
    if blocks.iter().sum::<usize>() == c {
        out.push(("group_pool", vec![x4], Box::new(move |t, v| {
            let y = t.group_pool(v[0], &blocks)?;
            project(t, y, 13)
        })));
    }
    out
}

/// Checks every differentiable tape operation on three input shapes.
pub fn check_all_ops(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in 0..3 {
        for (op, shapes, f) in cases(s) {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|sh| normal(&mut rng, sh)).collect();
            let max_err = grad_check(&inputs, eps, f)?;
            out.push(GradCheck {
                op: op.into(),
                shape: format!("{:?}", shapes),
                max_err,
                passed: max_err <= tol,
            });
        }
    }
    Ok(out)
}

//! A conv stack that is exactly C4-equivariant by weight sharing.
//!
//! Channel `4j + r` of every layer holds base filter `j` rotated by `r`
//! quarter turns. A rotation of the input rotates every map spatially and
//! shifts the orientation index `r` cyclically, so the max over each block of
//! four channels rotates exactly. Hidden layers permute the input orientation
//! blocks along with the output orientation:
//! `W[(j, r), (j', s)] = rot_r(base[j][j'][(s - r) mod 4])`.

use crate::error::Result;
use crate::group::{apply_action, Action, Direction, GroupElement};
use crate::model::{build_model, ConvSpec, LayerSpec, Model, ModelConfig};
use crate::tensor::{Fill, Tensor};
use crate::util::derive_seed;

fn unit_normal(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    Tensor::new(
        shape,
        Fill::Normal {
            seed,
            mean: 0.0,
            std: 1.0,
        },
    )
}

fn rot(filter: &Tensor<f64>, r: usize) -> Result<Tensor<f64>> {
    let g = GroupElement {
        action: Action::Rotation { k: r as u32, order: 4 },
        index: r,
    };
    Ok(apply_action(&g, filter, Direction::Forward)?.0)
}

/// `layers` lifted-C4 conv + relu layers of `base_filters` feature groups
/// (4 channels each) on single-channel input, followed by a linear head.
pub fn build_c4_oracle(seed: u64, base_filters: usize, layers: usize) -> Result<Model<f64>> {
    let layers = layers.max(1);
    let mut specs = Vec::new();
    for _ in 0..layers {
        specs.push(LayerSpec::Conv(ConvSpec::same(3)));
        specs.push(LayerSpec::Relu);
    }
    specs.extend([LayerSpec::GlobalAvgPool, LayerSpec::Linear { out: None }]);
    let config = ModelConfig {
        input: [1, 28, 28],
        classes: base_filters.max(1),
        layout: "R4".into(),
        groups: base_filters,
        layers: specs,
    };
    let mut model = build_model::<f64>(&config, seed)?;
    for block in 0..layers {
        let conv = model.block_conv_mut(block).expect("every block has a conv");
        let [c_out, c_in, k, _] = conv.weight.shape().try_into().expect("conv weight is 4-d");
        let in_blocks = if block == 0 { 1 } else { c_in / 4 };
        let in_orients = if block == 0 { c_in } else { 4 };
        let plane = k * k;
        let mut weight = vec![0.0; c_out * c_in * plane];
        let mut bias = vec![0.0; c_out];
        let bias_src = unit_normal(&[base_filters], derive_seed(seed, 1000 + block as u64))?;
        for j in 0..base_filters {
            for jp in 0..in_blocks {
                let bank_seed = derive_seed(seed, ((block * 4096 + j) * 4096 + jp) as u64);
                // One base filter per relative orientation.
                let bank = unit_normal(&[in_orients, 1, k, k], bank_seed)?;
                for r in 0..4 {
                    for s in 0..in_orients {
                        let t = if block == 0 { s } else { (s + 4 - r) % 4 };
                        let base = bank.narrow(t, 1)?;
                        let rotated = rot(&base, r)?;
                        let o = 4 * j + r;
                        let i = if block == 0 { s } else { 4 * jp + s };
                        let at = (o * c_in + i) * plane;
                        weight[at..at + plane].copy_from_slice(rotated.data());
                    }
                }
            }
            for r in 0..4 {
                bias[4 * j + r] = 0.1 * bias_src.data()[j];
            }
        }
        conv.weight = Tensor::from_vec(&[c_out, c_in, k, k], weight)?;
        conv.bias = Tensor::from_vec(&[c_out], bias)?;
    }
    Ok(model)
}

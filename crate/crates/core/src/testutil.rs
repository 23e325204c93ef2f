//! Fixtures shared by unit tests.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::backbone::{clean_pass, BackboneParams, VitConfig};
use crate::model::Sample;
use crate::numerics::Tensor;
use crate::rng::RngKey;

pub fn tiny_vit() -> VitConfig {
    VitConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        mlp_hidden: 12,
        channels: 1,
        image_h: 4,
        image_w: 4,
        patch_h: 2,
        patch_w: 2,
        num_classes: 3,
    }
}

pub fn random_image(cfg: &VitConfig, seed: u64) -> Tensor {
    let mut rng = RngKey::new(seed).rng();
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(&cfg.image_shape(), |_| n.sample(&mut rng))
}

pub fn sample(backbone: &BackboneParams, seed: u64, label: usize) -> (Tensor, Sample) {
    let image = random_image(&backbone.config, seed);
    let pass = clean_pass(&image, backbone).unwrap();
    (
        image,
        Sample {
            id: seed as usize,
            label,
            pass: Arc::new(pass),
        },
    )
}

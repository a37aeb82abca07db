#![allow(dead_code)]

use snnq::data::{synth_dataset, Shape3, SynthConfig, SynthData};
use snnq::net::{ArchSpec, LayerConfig};
use snnq::neuron::LifParams;

/// Two small conv layers on 2x8x8 input, cheap enough for many runs. The
/// larger init gain keeps the second layer spiking.
pub fn tiny_arch(n_classes: usize) -> ArchSpec {
    ArchSpec {
        input: Shape3::new(2, 8, 8),
        n_classes,
        layers: vec![
            LayerConfig::Conv {
                channels: 4,
                kernel: 3,
                pool: 1,
                lif: None,
            },
            LayerConfig::Conv {
                channels: 6,
                kernel: 3,
                pool: 1,
                lif: None,
            },
        ],
        lif: LifParams {
            alpha: 0.9,
            ..LifParams::default()
        },
        init_gain: 1.0,
    }
}

pub fn tiny_data(n_classes: usize, train_per_class: usize, seed: u64) -> SynthData {
    synth_dataset(&SynthConfig {
        n_classes,
        train_per_class,
        test_per_class: 4,
        shape: Shape3::new(2, 8, 8),
        steps: 20,
        rate_hi: 0.3,
        rate_lo: 0.02,
        mask_density: 0.2,
        seed,
    })
    .unwrap()
}

#![allow(dead_code)]

use cxinpaint_core::models::ModelConfig;
use cxinpaint_core::optim::{TrainConfig, TrainSchedule, Trainer};
use cxinpaint_core::synthetic::{rib_corpus, GratingSpec};
use cxinpaint_core::{Scalar, Tensor};

pub fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::with_sizes(16, 4, 4);
    m.margin_width = 1;
    m
}

pub fn tiny_train(total_epochs: u64) -> TrainConfig {
    TrainConfig {
        schedule: TrainSchedule {
            epochs_g_l2_only: 1,
            epochs_d_only: 1,
            total_epochs,
            batch_size: 4,
            ..TrainSchedule::default()
        },
        ..TrainConfig::default()
    }
}

pub fn tiny_trainer<S: Scalar>(train: TrainConfig, seed: u64) -> Trainer<S> {
    Trainer::new(&tiny_model(), train, seed).unwrap()
}

pub fn corpus<S: Scalar>(count: usize, seed: u64) -> Vec<Tensor<S>> {
    rib_corpus(count, 16, &GratingSpec::default(), seed).unwrap()
}

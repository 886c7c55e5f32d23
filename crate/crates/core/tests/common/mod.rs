#![allow(dead_code)]

use lumen::codec::CodecConfig;
use lumen::config::Config;
use lumen::denoiser::UNetConfig;
use lumen::ipfm::IpfmConfig;
use lumen::pipeline::{synthetic_splits, train_codec, ModelBundle};

/// A model small enough to train and sample in well under a second.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.unet = UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention_levels: vec![1],
        time_base_dim: 8,
        heads: 2,
        groups: 4,
    };
    cfg.ipfm = IpfmConfig {
        n_blocks: 1,
        n_query: 4,
        dim: 16,
        heads: 2,
        time_base_dim: 16,
        ..Default::default()
    };
    cfg.instruct.text_encoder.layers = 1;
    cfg.instruct.text_encoder.heads = 2;
    cfg.codec = CodecConfig {
        hidden: 4,
        ..Default::default()
    };
    cfg.image_encoder_width = 4;
    cfg.data.size = 16;
    cfg.data.train_pairs = 8;
    cfg.data.val_pairs = 4;
    cfg.codec_train.steps = 2;
    cfg.train.steps = 3;
    cfg.train.batch = 2;
    cfg.sample.steps = 3;
    cfg
}

pub fn tiny_bundle() -> ModelBundle {
    let cfg = tiny_config();
    let (train, _) = synthetic_splits(&cfg.data);
    let mut b = ModelBundle::new(cfg).unwrap();
    train_codec(&mut b, &train).unwrap();
    b
}

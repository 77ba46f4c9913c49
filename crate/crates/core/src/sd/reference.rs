//! Agreement with reference outputs of the same tiny networks run in
//! diffusers/transformers (`tests/fixtures/make_sd_fixture.py`).

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;

use super::clip::ClipText;
use super::unet::{HeadCount, ImageCond, Recording, UNetCond};
use super::*;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sd_tiny")
}

fn weights(name: &str) -> VarBuilder<'static> {
    // SAFETY: fixture files are not modified while the test runs.
    unsafe { VarBuilder::from_mmaped_safetensors(&[dir().join(format!("{name}.safetensors"))], DType::F32, &Device::Cpu) }.unwrap()
}

fn cases() -> HashMap<String, Tensor> {
    candle_core::safetensors::load(dir().join("cases.safetensors"), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.dims(), b.dims());
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

fn unet_config() -> UNetConfig {
    UNetConfig {
        block_out_channels: vec![16, 32],
        layers_per_block: 1,
        attention_head_dim: HeadCount::One(2),
        cross_attention_dim: 16,
        norm_num_groups: 8,
        down_block_types: vec!["CrossAttnDownBlock2D".into(), "DownBlock2D".into()],
        ..UNetConfig::sd15()
    }
}

#[test]
fn unet_text_branch_and_internals() {
    let c = cases();
    let unet = UNet::new(weights("unet"), None, unet_config()).unwrap();
    let cond = UNetCond { text: &c["unet.text"], image: None };
    let mut rec = Recording::default();
    let eps = unet.forward(&c["unet.x"], 500.0, &cond, Some(&mut rec)).unwrap();
    assert!(max_abs_diff(&eps, &c["unet.eps_text"]) < 1e-4);
    assert_eq!(unet.self_attention_layers().len(), 2);
    for name in unet.self_attention_layers() {
        let got = rec.maps[name].squeeze(0).unwrap_or_else(|_| rec.maps[name].clone());
        assert!(max_abs_diff(&got, &c[&format!("unet.map.{name}")]) < 1e-5, "{name}");
    }
    assert!(max_abs_diff(&rec.features.unwrap().squeeze(0).unwrap(), &c["unet.features"]) < 1e-4);
}

#[test]
fn unet_image_prompt_branch() {
    let c = cases();
    let adapter = weights("adapter");
    let unet = UNet::new(weights("unet"), Some(adapter.pp("ip_adapter")), unet_config()).unwrap();
    let proj = ImageProj::new(adapter.pp("image_proj"), 12, 16, 4).unwrap();
    let tokens = proj.forward(&c["unet.image_embed"]).unwrap();
    assert!(max_abs_diff(&tokens.squeeze(0).unwrap(), &c["unet.image_tokens"]) < 1e-5);
    let gates: HashMap<_, _> = unet
        .cross_attention_levels((8, 8))
        .into_iter()
        .map(|(h, w)| ((h, w), Tensor::ones((1, h * w, 1), DType::F32, &Device::Cpu).unwrap()))
        .collect();
    let cond = UNetCond {
        text: &c["unet.text"],
        image: Some(ImageCond { tokens: &tokens, lambda: 0.8, gates: &gates }),
    };
    let eps = unet.forward(&c["unet.x"], 500.0, &cond, None).unwrap();
    assert!(max_abs_diff(&eps, &c["unet.eps_image"]) < 1e-4);
    assert!(max_abs_diff(&eps, &c["unet.eps_text"]) > 1e-2);
}

#[test]
fn vae_mean_and_decoder() {
    let c = cases();
    let vae = Vae::new(
        weights("vae"),
        VaeConfig {
            block_out_channels: vec![8, 8],
            layers_per_block: 1,
            latent_channels: 4,
            norm_num_groups: 4,
            scaling_factor: 0.5,
        },
    )
    .unwrap();
    assert!(max_abs_diff(&vae.encode(&c["vae.px"]).unwrap(), &c["vae.mean"]) < 1e-4);
    assert!(max_abs_diff(&vae.decode(&c["vae.z"]).unwrap(), &c["vae.decoded"]) < 1e-4);
}

#[test]
fn clip_towers() {
    let c = cases();
    let text = ClipText::new(
        weights("text"),
        &ClipConfig {
            hidden_size: 16,
            intermediate_size: 32,
            num_attention_heads: 2,
            num_hidden_layers: 2,
            vocab_size: 10,
            max_position_embeddings: 8,
            ..ClipConfig::text_l14()
        },
    )
    .unwrap();
    let ids: Vec<u32> = c["text.ids"].flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|&v| v as u32).collect();
    assert!(max_abs_diff(&text.forward(&ids).unwrap().squeeze(0).unwrap(), &c["text.hidden"]) < 1e-4);

    let vision = ClipVision::new(
        weights("vision"),
        &ClipConfig {
            hidden_size: 16,
            intermediate_size: 32,
            num_attention_heads: 2,
            num_hidden_layers: 2,
            image_size: 16,
            patch_size: 8,
            projection_dim: 12,
            ..ClipConfig::vision_h14()
        },
    )
    .unwrap();
    assert!(max_abs_diff(&vision.forward(&c["vision.pixels"]).unwrap(), &c["vision.embeds"]) < 1e-4);
}

use std::path::{Path, PathBuf};

use cellstyle_core::attention::{LayerId, NoControl};
use cellstyle_core::diffusion::contract::check_backbone;
use cellstyle_core::diffusion::{ddim_sample, Backbone};
use cellstyle_core::imaging::Image;
use cellstyle_core::inversion::{invert, InversionOptions};
use cellstyle_core::Error;
use cellstyle_sd::synthetic::{tiny_tensors, write_tiny_checkpoint, TinySpec};
use cellstyle_sd::{load_pretrained, save_weights, AdapterConfig, Device, SdBackbone, MIN_ATTENTION_LAYERS};
use ndarray::Array2;

fn tiny(dir: &Path, spec: &TinySpec) -> AdapterConfig {
    let path = dir.join("tiny.safetensors");
    write_tiny_checkpoint(&path, spec).unwrap();
    let mut cfg = AdapterConfig::new(path);
    cfg.latent_size = 8;
    cfg.schedule.ddim_steps = 5;
    // Random autoencoder weights do not reconstruct anything.
    cfg.reconstruction_tolerance = f64::INFINITY;
    cfg
}

fn load(cfg: &AdapterConfig) -> SdBackbone<f64> {
    load_pretrained(cfg).unwrap()
}

fn cells(size: usize) -> Image<f64> {
    Image::from_gray(Array2::from_shape_fn((size, size), |(y, x)| {
        if (y / 4 + x / 4) % 2 == 0 {
            0.8
        } else {
            0.15
        }
    }))
    .unwrap()
}

#[test]
fn tiny_checkpoint_satisfies_the_backbone_contract() {
    let dir = tempfile::tempdir().unwrap();
    let sd = load(&tiny(dir.path(), &TinySpec::default()));
    assert_eq!(sd.state_shape(), (4, 8, 8));
    assert_eq!(sd.working_size(), (16, 16));
    check_backbone(&sd, &cells(16), 1e-12).unwrap();
}

#[test]
fn exposes_up_path_self_attention_in_forward_order() {
    let dir = tempfile::tempdir().unwrap();
    let sd = load(&tiny(dir.path(), &TinySpec::default()));
    let layers = sd.attention_layers();
    assert!(layers.len() >= MIN_ATTENTION_LAYERS);
    let want: Vec<LayerId> = [1, 2]
        .iter()
        .flat_map(|b| (0..3).map(move |a| LayerId::new(format!("unet.up_blocks.{b}.attentions.{a}.transformer_blocks.0.attn1"))))
        .collect();
    assert_eq!(layers, want);
    // Down path (2 blocks x 2) and mid block come first.
    let all = sd.all_attention_layers();
    assert_eq!(all.len(), 4 + 1 + 6);
    assert_eq!(&all[5..], &want[..]);
}

#[test]
fn override_restricts_and_orders_layers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), &TinySpec::default());
    let all = load(&cfg).all_attention_layers();
    let mut chosen: Vec<LayerId> = all[..7].to_vec();
    chosen.reverse();
    cfg.attention_layers = Some(chosen);
    assert_eq!(load(&cfg).attention_layers(), all[..7].to_vec());

    cfg.attention_layers = Some(all[..3].to_vec());
    assert!(matches!(load_pretrained::<f64>(&cfg), Err(Error::Checkpoint(_))));
    cfg.attention_layers = Some(vec![LayerId::new("unet.conv_in")]);
    assert!(matches!(load_pretrained::<f64>(&cfg), Err(Error::InvalidArgument(_))));
}

#[test]
fn too_few_decoder_attention_layers_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TinySpec {
        unet_channels: vec![8, 16],
        ..TinySpec::default()
    };
    let err = load_pretrained::<f32>(&tiny(dir.path(), &spec)).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("exposes 3")), "{err}");
}

#[test]
fn missing_checkpoint_is_a_missing_file_error() {
    let cfg = AdapterConfig::new(PathBuf::from("/nonexistent/sd15.safetensors"));
    let err = load_pretrained::<f32>(&cfg).err().unwrap();
    assert!(matches!(err, Error::MissingFile(_)), "{err}");
    assert!(err.is_config());
}

#[test]
fn refuses_other_layout_versions_and_untagged_files() {
    let dir = tempfile::tempdir().unwrap();
    let tensors = tiny_tensors(&TinySpec::default());
    let path = dir.path().join("v2.safetensors");
    save_weights(&path, &tensors, &[("version", "2".into())]).unwrap();
    let err = load_pretrained::<f32>(&AdapterConfig::new(&path)).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("version 2")), "{err}");

    let raw = dir.path().join("raw.safetensors");
    std::fs::write(&raw, b"\x08\x00\x00\x00\x00\x00\x00\x00{}      ").unwrap();
    let err = load_pretrained::<f32>(&AdapterConfig::new(&raw)).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("format")), "{err}");

    std::fs::write(&raw, b"not a checkpoint").unwrap();
    assert!(matches!(load_pretrained::<f32>(&AdapterConfig::new(&raw)), Err(Error::Checkpoint(_))));
}

#[test]
fn missing_tensor_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let tensors: Vec<_> = tiny_tensors(&TinySpec::default())
        .into_iter()
        .filter(|(n, _)| n != "text.empty_context")
        .collect();
    let path = dir.path().join("noctx.safetensors");
    save_weights(&path, &tensors, &[("heads", "2".into()), ("norm_groups", "4".into())]).unwrap();
    let err = load_pretrained::<f32>(&AdapterConfig::new(&path)).err().unwrap();
    assert!(err.to_string().contains("text.empty_context"), "{err}");
}

#[test]
fn only_cpu_is_available() {
    assert_eq!("cpu".parse::<Device>().unwrap(), Device::Cpu);
    assert!("cuda:0".parse::<Device>().is_err());
}

#[test]
fn f32_and_f64_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &TinySpec::default());
    let a: SdBackbone<f32> = load_pretrained(&cfg).unwrap();
    let b: SdBackbone<f64> = load_pretrained(&cfg).unwrap();
    let img = cells(16);
    let xa = a.encode(&img.cast()).unwrap();
    let xb = b.encode(&img).unwrap();
    let ea = a.predict_noise(&xa, 501, &mut NoControl).unwrap();
    let eb = b.predict_noise(&xb, 501, &mut NoControl).unwrap();
    let diff = ea.iter().zip(eb.iter()).map(|(p, q)| (*p as f64 - q).abs()).fold(0.0, f64::max);
    let scale = eb.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-4 * scale.max(1.0), "{diff} vs {scale}");
}

#[test]
fn runs_through_inversion_and_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let sd = load(&tiny(dir.path(), &TinySpec::default()));
    let inv = invert(&sd, &cells(16), sd.schedule(), InversionOptions::default()).unwrap();
    assert_eq!(inv.z_t.dim(), sd.state_shape());
    let back = ddim_sample(&sd, &inv.z_t, sd.schedule(), None).unwrap();
    let img = sd.decode(&back).unwrap();
    assert_eq!(img.dims(), (16, 16));
    assert_eq!(img.channels(), 3);
}

#[test]
fn legacy_autoencoder_attention_names_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &TinySpec::default());
    let renamed: Vec<_> = tiny_tensors(&TinySpec::default())
        .into_iter()
        .map(|(n, a)| {
            let n = if n.starts_with("vae.") {
                n.replace(".to_q.", ".query.")
                    .replace(".to_k.", ".key.")
                    .replace(".to_v.", ".value.")
                    .replace(".to_out.0.", ".proj_attn.")
            } else {
                n
            };
            (n, a)
        })
        .collect();
    let legacy = dir.path().join("legacy.safetensors");
    save_weights(&legacy, &renamed, &[("heads", "2".into()), ("norm_groups", "4".into())]).unwrap();
    let mut legacy_cfg = cfg.clone();
    legacy_cfg.checkpoint = legacy;
    let (a, b) = (load(&cfg), load(&legacy_cfg));
    let img = cells(16);
    assert_eq!(a.encode(&img).unwrap(), b.encode(&img).unwrap());
}

/// Needs converted v1.5 weights: `CELLSTYLE_SD_CHECKPOINT=... cargo test -- --ignored`.
#[test]
#[ignore]
fn pretrained_checkpoint_contract_and_codec_error() {
    let Ok(path) = std::env::var("CELLSTYLE_SD_CHECKPOINT") else {
        eprintln!("CELLSTYLE_SD_CHECKPOINT not set");
        return;
    };
    let mut cfg = AdapterConfig::new(path);
    cfg.latent_size = 32;
    let sd: SdBackbone<f32> = load_pretrained(&cfg).unwrap();
    let img = Image::from_gray(Array2::from_shape_fn(sd.working_size(), |(y, x)| {
        let (dy, dx) = ((y % 64) as f32 - 32.0, (x % 64) as f32 - 32.0);
        if dy * dy + dx * dx < 400.0 { 0.7 } else { 0.1 }
    }))
    .unwrap();
    let x = img.pixels().mapv(|v| v * 2.0 - 1.0);
    let back = sd.decode(&sd.encode(&img).unwrap()).unwrap();
    let y = Image::from_gray(back.luminance()).unwrap().pixels().mapv(|v| v * 2.0 - 1.0);
    let err = cellstyle_core::diffusion::relative_l2(&y.view(), &x.view());
    println!("codec round trip relative L2 {err:.4}");
    check_backbone(&sd, &img, 1e-5).unwrap();
}

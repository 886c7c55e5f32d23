use std::ffi::{c_char, CStr, CString};
use std::ptr;

use lumen::codec::CodecConfig;
use lumen::config::Config;
use lumen::datagen::generate_dataset;
use lumen::denoiser::UNetConfig;
use lumen::ipfm::IpfmConfig;
use lumen::pipeline::{save_checkpoint, train_codec, ModelBundle};
use lumen_ffi::*;

fn small_config() -> Config {
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
    cfg.codec_train.steps = 2;
    cfg.sample.steps = 2;
    cfg
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        lumen_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn load_enhance_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = ModelBundle::new(small_config()).unwrap();
    let samples = generate_dataset(4, 16, 2);
    train_codec(&mut bundle, &samples).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&bundle, None, &ckpt).unwrap();
    let path = CString::new(ckpt.to_str().unwrap()).unwrap();

    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(lumen_model_load(path.as_ptr(), &mut model), LumenStatus::Ok);

        let mut needed = 0usize;
        assert_eq!(
            lumen_model_checkpoint_hash(model, ptr::null_mut(), 0, &mut needed),
            LumenStatus::BufferTooSmall
        );
        assert_eq!(needed, 65);
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(lumen_model_checkpoint_hash(model, buf.as_mut_ptr(), buf.len(), ptr::null_mut()), LumenStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), bundle.checkpoint_hash());

        let rgb = samples[0].y.to_rgb8();
        let mut img = ptr::null_mut();
        assert_eq!(lumen_image_from_rgb8(16, 16, rgb.as_ptr(), rgb.len(), &mut img), LumenStatus::Ok);
        assert_eq!((lumen_image_width(img), lumen_image_height(img)), (16, 16));

        let text = CString::new("soft light from the left.").unwrap();
        let mut job = ptr::null_mut();
        assert_eq!(lumen_enhance(model, img, text.as_ptr(), 2, 3, 0, &mut job), LumenStatus::Ok, "{}", last_error());
        assert_eq!(lumen_job_iterations(job), 2);

        let mut ibuf = vec![0 as c_char; 256];
        assert_eq!(lumen_job_instruction(job, 0, ibuf.as_mut_ptr(), ibuf.len(), ptr::null_mut()), LumenStatus::Ok);
        assert_eq!(CStr::from_ptr(ibuf.as_ptr()).to_str().unwrap(), "soft light from the left.");

        let mut out = ptr::null_mut();
        assert_eq!(lumen_job_image(job, 1, &mut out), LumenStatus::Ok);
        let mut pixels = vec![0u8; 16 * 16 * 3];
        assert_eq!(lumen_image_to_rgb8(out, pixels.as_mut_ptr(), pixels.len()), LumenStatus::Ok);
        let mut db = 0.0;
        assert_eq!(lumen_psnr(out, img, &mut db), LumenStatus::Ok);
        assert!(db.is_finite());

        assert_eq!(lumen_job_image(job, 2, &mut out), LumenStatus::InvalidArgument);
        lumen_image_free(out);
        lumen_job_free(job);
        lumen_image_free(img);
        lumen_model_free(model);
    }
}

#[test]
fn errors_are_codes_with_messages() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(lumen_model_load(ptr::null(), &mut model), LumenStatus::NullPointer);
        let missing = CString::new("/definitely/not/here.ckpt").unwrap();
        assert_eq!(lumen_model_load(missing.as_ptr(), &mut model), LumenStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("not/here"));

        let mut img = ptr::null_mut();
        let short = [0u8; 5];
        assert_eq!(lumen_image_from_rgb8(2, 2, short.as_ptr(), short.len(), &mut img), LumenStatus::InvalidArgument);
        assert_eq!(lumen_image_width(ptr::null()), 0);
        lumen_image_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lumen.h")).unwrap();
    for name in [
        "LUMEN_STATUS_OK",
        "typedef struct LumenModel LumenModel",
        "lumen_model_load",
        "lumen_enhance",
        "lumen_job_instruction",
        "lumen_last_error",
        "lumen_image_free",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use semcom::channel::{budget_for_rate, pack, unpack};
use semcom::decoder::{decoder_config_for, Decoder};
use semcom::masker::{build_mask, extract_cls_attention};
use semcom::tensor::Tensor;
use semcom::vit::VitEncoder;
use semcom_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    encoder: CString,
    decoder: CString,
    config: SemcomVitConfig,
    rust_encoder: VitEncoder,
    rust_decoder: Decoder,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut config = SemcomVitConfig {
        embed_dim: 0,
        heads: 0,
        layers: 0,
        mlp_hidden: 0,
        num_classes: 0,
        patch: 0,
        height: 0,
        width: 0,
        attention_scale: 0,
    };
    assert_eq!(
        unsafe { semcom_vit_config_default(&mut config) },
        SemcomStatus::Ok
    );
    let enc = VitEncoder::new(Default::default(), 3).unwrap();
    let dec = Decoder::new(decoder_config_for(&enc), 4).unwrap();
    let ep = dir.path().join("enc.semc");
    let dp = dir.path().join("dec.semc");
    enc.save(&ep).unwrap();
    dec.save(&dp).unwrap();
    Fixture {
        encoder: CString::new(ep.to_str().unwrap()).unwrap(),
        decoder: CString::new(dp.to_str().unwrap()).unwrap(),
        _dir: dir,
        config,
        rust_encoder: enc,
        rust_decoder: dec,
    }
}

fn image(seed: u32) -> Vec<f32> {
    (0..3 * 32 * 32)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0)
        .collect()
}

fn last_error() -> String {
    let p = semcom_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn roundtrip_matches_core() {
    let fx = fixture();
    let mut enc = ptr::null_mut();
    let mut dec = ptr::null_mut();
    unsafe {
        assert_eq!(
            semcom_encoder_load(fx.encoder.as_ptr(), &fx.config, &mut enc),
            SemcomStatus::Ok
        );
        assert_eq!(
            semcom_decoder_load(fx.decoder.as_ptr(), 32, 32, 32, 8, &mut dec),
            SemcomStatus::Ok
        );
    }
    let px = image(1);
    let mut packet = ptr::null_mut();
    let st = unsafe {
        semcom_encoder_transmit(enc, px.as_ptr(), px.len(), 0.5, 0.85, 11, 42, &mut packet)
    };
    assert_eq!(st, SemcomStatus::Ok);
    unsafe {
        assert_eq!(semcom_packet_n_selected(packet), 8);
        assert_eq!(semcom_packet_num_patches(packet), 16);
        assert_eq!(semcom_packet_image_id(packet), 42);
    }

    let mut len = 0usize;
    let st = unsafe { semcom_packet_serialize(packet, ptr::null_mut(), 0, &mut len) };
    assert_eq!(st, SemcomStatus::BufferTooSmall);
    assert_eq!(len, 10 + 2 + 8 * 32 * 4);
    let mut bytes = vec![0u8; len];
    let st = unsafe { semcom_packet_serialize(packet, bytes.as_mut_ptr(), len, &mut len) };
    assert_eq!(st, SemcomStatus::Ok);

    let mut parsed = ptr::null_mut();
    assert_eq!(
        unsafe { semcom_packet_parse(bytes.as_ptr(), bytes.len(), &mut parsed) },
        SemcomStatus::Ok
    );
    let mut out = vec![0f32; 3 * 32 * 32];
    let st = unsafe { semcom_decoder_reconstruct(dec, parsed, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SemcomStatus::Ok);

    // Same pipeline through the Rust API.
    let x = Tensor::from_f32(&[3, 32, 32], &px).unwrap();
    let e = fx.rust_encoder.encode(&x).unwrap();
    let scores = extract_cls_attention(&e.attn, 4, 4).unwrap();
    let sel = build_mask(&scores, budget_for_rate(0.5, 16).unwrap(), 0.85, 11).unwrap();
    let p = pack(&e.z, &sel.mask, 42).unwrap();
    assert_eq!(p.to_bytes(), bytes);
    let (z_hat, _) = unpack(&p, 4, 4).unwrap();
    let want = fx.rust_decoder.decode(&z_hat).unwrap().to_f32_vec();
    assert_eq!(want, out);

    unsafe {
        semcom_packet_free(packet);
        semcom_packet_free(parsed);
        semcom_encoder_free(enc);
        semcom_decoder_free(dec);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let fx = fixture();
    let mut packet = ptr::null_mut();
    let st = unsafe { semcom_packet_parse([1u8, 2, 3].as_ptr(), 3, &mut packet) };
    assert_eq!(st, SemcomStatus::CorruptPacket);
    assert!(packet.is_null());
    assert!(!last_error().is_empty());

    let mut enc = ptr::null_mut();
    let missing = CString::new("/nonexistent/enc.semc").unwrap();
    let st = unsafe { semcom_encoder_load(missing.as_ptr(), &fx.config, &mut enc) };
    assert_eq!(st, SemcomStatus::Io);

    let mut bad = fx.config;
    bad.heads = 5;
    let st = unsafe { semcom_encoder_load(fx.encoder.as_ptr(), &bad, &mut enc) };
    assert_eq!(st, SemcomStatus::Config);

    assert_eq!(
        unsafe { semcom_encoder_load(fx.encoder.as_ptr(), &fx.config, &mut enc) },
        SemcomStatus::Ok
    );
    assert!(semcom_last_error().is_null());
    let px = image(2);
    let st = unsafe { semcom_encoder_transmit(enc, px.as_ptr(), 10, 0.5, 1.0, 0, 0, &mut packet) };
    assert_eq!(st, SemcomStatus::Shape);
    let st =
        unsafe { semcom_encoder_transmit(enc, px.as_ptr(), px.len(), 1.5, 1.0, 0, 0, &mut packet) };
    assert_eq!(st, SemcomStatus::Argument);
    let st = unsafe { semcom_encoder_transmit(enc, ptr::null(), 0, 0.5, 1.0, 0, 0, &mut packet) };
    assert_eq!(st, SemcomStatus::NullPointer);
    unsafe { semcom_encoder_free(enc) };

    let mut n = 0u32;
    assert_eq!(
        unsafe { semcom_budget_for_rate(0.25, 16, &mut n) },
        SemcomStatus::Ok
    );
    assert_eq!(n, 4);
    assert_eq!(
        unsafe { semcom_budget_for_rate(0.0, 16, &mut n) },
        SemcomStatus::Argument
    );

    let mut dec = ptr::null_mut();
    let st = unsafe { semcom_decoder_load(fx.decoder.as_ptr(), 32, 30, 32, 8, &mut dec) };
    assert_eq!(st, SemcomStatus::Config);
}

#[test]
fn reconstruct_checks_capacity() {
    let fx = fixture();
    let (mut enc, mut dec, mut packet) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        semcom_encoder_load(fx.encoder.as_ptr(), &fx.config, &mut enc);
        semcom_decoder_load(fx.decoder.as_ptr(), 32, 32, 32, 8, &mut dec);
        let px = image(3);
        semcom_encoder_transmit(enc, px.as_ptr(), px.len(), 1.0, 1.0, 0, 7, &mut packet);
        let mut out = vec![0f32; 100];
        let st = semcom_decoder_reconstruct(dec, packet, out.as_mut_ptr(), out.len());
        assert_eq!(st, SemcomStatus::BufferTooSmall);
        semcom_packet_free(packet);
        semcom_encoder_free(enc);
        semcom_decoder_free(dec);
        semcom_packet_free(ptr::null_mut());
        assert_eq!(semcom_packet_n_selected(ptr::null()), 0);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(semcom_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"semcom.h\"\n\
         int probe(void) {\n\
           SemcomVitConfig c;\n\
           uint32_t n = 0;\n\
           semcom_vit_config_default(&c);\n\
           return semcom_budget_for_rate(0.5, 16, &n) == SEMCOM_STATUS_OK ? (int)n : -1;\n\
         }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    assert!(status.success());
}

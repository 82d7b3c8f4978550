use std::ffi::{c_char, CStr, CString};
use std::ptr;

use amsf::*;
use amsf_core::harness::Checkpoint;
use amsf_core::model::{AmsfNet, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { amsf_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

const SMALL: &str = "d_model = 8\ndepth = 1\nheads = 2\n";

fn small_model(seed: u64) -> *mut AmsfModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { amsf_model_new(cfg.as_ptr(), seed, &mut m) }, AmsfStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn dwt_round_trip_and_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for levels in 1..=4 {
        let (rows, cols) = (32, 48);
        let img = random_image(&mut rng, rows, cols);
        let mut packed = vec![0.0; rows * cols];
        let mut back = vec![0.0; rows * cols];
        unsafe {
            assert_eq!(amsf_haar_dwt(img.as_ptr(), rows, cols, levels, packed.as_mut_ptr()), AmsfStatus::Ok);
            assert_eq!(amsf_haar_idwt(packed.as_ptr(), rows, cols, levels, back.as_mut_ptr()), AmsfStatus::Ok);
        }
        let e_in: f64 = img.iter().map(|v| v * v).sum();
        let e_out: f64 = packed.iter().map(|v| v * v).sum();
        assert!((e_in - e_out).abs() < 1e-9 * e_in);
        for (a, b) in img.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_level_layout_matches_block_formula() {
    let (rows, cols) = (4, 6);
    let img: Vec<f64> = (0..rows * cols).map(|i| (i * i % 7) as f64).collect();
    let mut packed = vec![0.0; rows * cols];
    unsafe { amsf_haar_dwt(img.as_ptr(), rows, cols, 1, packed.as_mut_ptr()) };
    let (h, w) = (rows / 2, cols / 2);
    for i in 0..h {
        for j in 0..w {
            let a = img[2 * i * cols + 2 * j];
            let b = img[2 * i * cols + 2 * j + 1];
            let c = img[(2 * i + 1) * cols + 2 * j];
            let d = img[(2 * i + 1) * cols + 2 * j + 1];
            let at = |r: usize, c: usize| packed[r * cols + c];
            assert_eq!(at(i, j), (a + b + c + d) / 2.0);
            assert_eq!(at(i, j + w), (a - b + c - d) / 2.0);
            assert_eq!(at(i + h, j), (a + b - c - d) / 2.0);
            assert_eq!(at(i + h, j + w), (a - b - c + d) / 2.0);
        }
    }
}

#[test]
fn errors_set_status_and_message() {
    let img = vec![0.0; 36];
    let mut out = vec![0.0; 36];
    unsafe {
        assert_eq!(amsf_haar_dwt(ptr::null(), 6, 6, 1, out.as_mut_ptr()), AmsfStatus::NullPointer);
        assert!(last_error().contains("input"));
        assert!(amsf_last_error_length() > 0);
        assert_eq!(amsf_haar_dwt(img.as_ptr(), 6, 6, 2, out.as_mut_ptr()), AmsfStatus::Dimension);
        assert!(last_error().contains("2^2"));
        assert_eq!(amsf_haar_dwt(img.as_ptr(), 6, 6, 5, out.as_mut_ptr()), AmsfStatus::InvalidArgument);
        assert_eq!(amsf_haar_dwt(img.as_ptr(), 6, 6, 1, out.as_mut_ptr()), AmsfStatus::Ok);
        assert_eq!(amsf_last_error_length(), 0);

        amsf_haar_dwt(img.as_ptr(), 6, 6, 2, out.as_mut_ptr());
        let mut tiny = [0 as c_char; 4];
        assert_eq!(amsf_last_error_message(tiny.as_mut_ptr(), 4), AmsfStatus::BufferTooSmall);
        assert_eq!(CStr::from_ptr(tiny.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn model_embed_matches_core() {
    let m = small_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    unsafe {
        assert_eq!(amsf_model_image_size(m), 32);
        assert_eq!(amsf_model_embedding_dim(m), 8);
        let img = random_image(&mut rng, 32, 32);
        let mut emb = vec![0.0; 8];
        assert_eq!(amsf_model_embed(m, img.as_ptr(), 32, 32, emb.as_mut_ptr(), 8), AmsfStatus::Ok);

        let cfg = ModelConfig {
            d_model: 8,
            depth: 1,
            heads: 2,
            ..Default::default()
        };
        let net = AmsfNet::new(cfg, 3).unwrap();
        let view = ndarray::ArrayView2::from_shape((32, 32), &img).unwrap();
        let expect = AmsfNet::pooled(&net.features(&net.prepare(view).unwrap()).unwrap());
        assert_eq!(emb, expect);

        let mut short = vec![0.0; 4];
        assert_eq!(amsf_model_embed(m, img.as_ptr(), 32, 32, short.as_mut_ptr(), 4), AmsfStatus::BufferTooSmall);
        assert_eq!(amsf_model_embed(m, img.as_ptr(), 16, 16, emb.as_mut_ptr(), 8), AmsfStatus::Dimension);
        assert_eq!(amsf_model_embed(ptr::null(), img.as_ptr(), 32, 32, emb.as_mut_ptr(), 8), AmsfStatus::NullPointer);
        amsf_model_free(m);
    }
}

#[test]
fn classify_returns_probabilities_and_argmax() {
    let m = small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, k, q) = (3, 2, 4);
    let support: Vec<f64> = (0..n * k).flat_map(|_| random_image(&mut rng, 32, 32)).collect();
    let queries: Vec<f64> = (0..q).flat_map(|_| random_image(&mut rng, 32, 32)).collect();
    let mut probs = vec![0.0; q * n];
    let mut preds = vec![usize::MAX; q];
    unsafe {
        let st = amsf_model_classify(m, support.as_ptr(), n, k, queries.as_ptr(), q, probs.as_mut_ptr(), preds.as_mut_ptr());
        assert_eq!(st, AmsfStatus::Ok, "{}", last_error());
        for (row, &p) in probs.chunks(n).zip(&preds) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let best = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            assert_eq!(p, best);
        }
        let st = amsf_model_classify(m, support.as_ptr(), 1, k, queries.as_ptr(), q, probs.as_mut_ptr(), ptr::null_mut());
        assert_eq!(st, AmsfStatus::InvalidArgument);
        amsf_model_free(m);
    }
}

#[test]
fn load_from_checkpoint_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net = AmsfNet::new(
        ModelConfig {
            d_model: 8,
            depth: 1,
            heads: 2,
            ..Default::default()
        },
        9,
    )
    .unwrap();
    Checkpoint::new(net, "fp", 0, None).save(&path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    let fresh = small_model(9);
    let img = vec![0.25; 1024];
    let (mut a, mut b) = (vec![0.0; 8], vec![0.0; 8]);
    unsafe {
        assert_eq!(amsf_model_load(c_path.as_ptr(), &mut loaded), AmsfStatus::Ok);
        amsf_model_embed(loaded, img.as_ptr(), 32, 32, a.as_mut_ptr(), 8);
        amsf_model_embed(fresh, img.as_ptr(), 32, 32, b.as_mut_ptr(), 8);
        assert_eq!(a, b);
        amsf_model_free(loaded);
        amsf_model_free(fresh);

        let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(amsf_model_load(missing.as_ptr(), &mut m), AmsfStatus::Io);
        assert!(m.is_null());
        let bad = CString::new("heads = 3").unwrap();
        assert_eq!(amsf_model_new(bad.as_ptr(), 0, &mut m), AmsfStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(amsf_model_new(ptr::null(), 0, &mut m), AmsfStatus::Ok);
        amsf_model_free(m);
        amsf_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/amsf.h")).unwrap();
    for name in [
        "amsf_version",
        "amsf_last_error_length",
        "amsf_last_error_message",
        "amsf_haar_dwt",
        "amsf_haar_idwt",
        "amsf_model_new",
        "amsf_model_load",
        "amsf_model_free",
        "amsf_model_embed",
        "amsf_model_classify",
        "AMSF_STATUS_OK",
        "typedef struct AmsfModel AmsfModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let v = unsafe { CStr::from_ptr(amsf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/amsf.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

use mmpd_core::code::{hamming74, CodeSpec};
use mmpd_core::mmpd::{ModelConfig, ModelParameters};
use mmpd_core::train::{checkpoint_paths, load_checkpoint, save_checkpoint, CheckpointError};
use rand::{Rng, SeedableRng};
use serde_json::Value;
use std::path::{Path, PathBuf};

fn cfg() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        d: 8,
        r: 4,
        ssm_state: 2,
        ssm_expand: 2,
        conv_kernel: 3,
        ffn_mult: 2,
    }
}

/// Parameters with arbitrary bit patterns, including subnormals and signed zero.
fn params(spec: &CodeSpec) -> ModelParameters<f32> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut p = ModelParameters::<f64>::init(spec, &cfg(), &mut rng).unwrap().cast::<f32>();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = match rng.random_range(0..10) {
                0 => -0.0,
                1 => f32::from_bits(rng.random_range(1..0x007f_ffff)),
                _ => rng.random_range(-3.0..3.0),
            };
        }
    }
    p
}

fn saved(dir: &Path) -> (CodeSpec, ModelParameters<f32>, PathBuf) {
    let spec = hamming74();
    let p = params(&spec);
    let base = dir.join("model");
    save_checkpoint(&base, &p, &spec, 17, "abc").unwrap();
    (spec, p, base)
}

fn edit_manifest(base: &Path, f: impl FnOnce(&mut Value)) {
    let (manifest, _) = checkpoint_paths(base);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&manifest, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn tensor_entry<'a>(v: &'a mut Value, name: &str) -> &'a mut Value {
    v["tensors"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|t| t["name"] == name)
        .unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, p, base) = saved(dir.path());
    let loaded = load_checkpoint(&base, Some(&spec)).unwrap();
    assert_eq!(loaded.step, 17);
    assert_eq!(loaded.rng_digest, "abc");
    assert_eq!((loaded.n, loaded.k), (7, 4));
    assert_eq!(loaded.h_sha256, spec.h_hash());
    assert_eq!(loaded.params.config(), p.config());
    assert_eq!(loaded.params.names(), p.names());
    for (a, b) in loaded.params.tensors().iter().zip(p.tensors()) {
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &mmpd_core::numerics::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn output_is_byte_stable_with_sorted_keys() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, p, base) = saved(dir.path());
    let other = dir.path().join("again");
    save_checkpoint(&other, &p, &spec, 17, "abc").unwrap();
    let (m1, b1) = checkpoint_paths(&base);
    let (m2, b2) = checkpoint_paths(&other);
    assert_eq!(std::fs::read(m1.clone()).unwrap(), std::fs::read(m2).unwrap());
    assert_eq!(std::fs::read(b1).unwrap(), std::fs::read(b2).unwrap());
    let text = std::fs::read_to_string(m1).unwrap();
    let keys = ["\"code\"", "\"config\"", "\"format\"", "\"rng_digest\"", "\"step\"", "\"tensors\""];
    let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn truncated_blob_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _, base) = saved(dir.path());
    let (_, blob) = checkpoint_paths(&base);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
    match load_checkpoint(&base, Some(&spec)) {
        Err(CheckpointError::Truncated { tensor, needed, available }) => {
            assert_eq!(tensor, "head.b_out");
            assert_eq!(needed, available + 1);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn edited_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, _, base) = saved(dir.path());
    // Same element count, transposed: only the name/shape check can catch it.
    edit_manifest(&base, |v| {
        let t = tensor_entry(v, "block0.vn_update.ffn.w1");
        t["shape"] = serde_json::json!([8, 16]);
    });
    match load_checkpoint(&base, Some(&spec)) {
        Err(CheckpointError::Shape { tensor, .. }) => assert_eq!(tensor, "block0.vn_update.ffn.w1"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let err = load_checkpoint(&base, None).unwrap_err();
    assert!(err.to_string().contains("block0.vn_update.ffn.w1"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let (spec, _, base) = saved(dir.path());
    edit_manifest(&base, |v| tensor_entry(v, "head.w_out")["shape"] = serde_json::json!([1, 9]));
    match load_checkpoint(&base, Some(&spec)) {
        Err(CheckpointError::Shape { tensor, .. }) => assert_eq!(tensor, "head.w_out"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn code_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, base) = saved(dir.path());
    let other = CodeSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../codes/ldpc_49_24.alist")).unwrap();
    assert!(matches!(load_checkpoint(&base, Some(&other)), Err(CheckpointError::CodeMismatch { .. })));

    // Same size, different H.
    let mut h = hamming74().h.clone();
    h.set(0, 0, !h.get(0, 0));
    h.set(0, 1, !h.get(0, 1));
    let twisted = CodeSpec::from_matrix("twisted", h).unwrap();
    assert_eq!((twisted.n, twisted.k), (7, 4));
    assert!(matches!(load_checkpoint(&base, Some(&twisted)), Err(CheckpointError::CodeMismatch { .. })));
    assert!(load_checkpoint(&base, None).is_ok());
}

#[test]
fn corrupt_files_are_rejected() {
    let cases: [(&str, fn(&Path)); 5] = [
        ("bad json", |b| std::fs::write(checkpoint_paths(b).0, "{ not json").unwrap()),
        ("format", |b| edit_manifest(b, |v| v["format"] = "other".into())),
        ("dtype", |b| edit_manifest(b, |v| tensor_entry(v, "vn_embed")["dtype"] = "f64".into())),
        ("offset", |b| edit_manifest(b, |v| tensor_entry(v, "vn_bias")["offset"] = 4.into())),
        ("trailing bytes", |b| {
            let blob = checkpoint_paths(b).1;
            let mut bytes = std::fs::read(&blob).unwrap();
            bytes.extend([0, 0, 0, 0]);
            std::fs::write(&blob, bytes).unwrap();
        }),
    ];
    for (what, corrupt) in cases {
        let dir = tempfile::tempdir().unwrap();
        let (spec, _, base) = saved(dir.path());
        corrupt(&base);
        match load_checkpoint(&base, Some(&spec)) {
            Err(CheckpointError::Manifest(_)) => {}
            other => panic!("{what}: expected manifest error, got {other:?}"),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let (spec, _, base) = saved(dir.path());
    std::fs::remove_file(checkpoint_paths(&base).1).unwrap();
    assert!(matches!(load_checkpoint(&base, Some(&spec)), Err(CheckpointError::Io { .. })));
}

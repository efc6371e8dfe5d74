use groundkit::bundle::{load_bundle, save_bundle, validate_bundle, ExportManifest, WeightsBundle};
use groundkit::synthetic::{toy_bundle, ToyConfig};
use groundkit::tensor::Tensor;
use proptest::prelude::*;

fn config(resnet: bool, seed: u64) -> ToyConfig {
    if resnet { ToyConfig::resnet() } else { ToyConfig::vit() }.with_seed(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn file_round_trip_is_lossless(
        resnet in any::<bool>(),
        seed in any::<u64>(),
        sigma in 0.001f32..1.0,
        bits in prop::collection::vec(any::<u32>(), 16),
    ) {
        let mut b = toy_bundle(&config(resnet, seed));
        b.sigma_default = sigma;
        // arbitrary finite bit patterns, subnormals and signed zeros included
        let values: Vec<f32> = bits.iter().map(|&u| f32::from_bits(u)).map(|v| if v.is_finite() { v } else { -0.0 }).collect();
        let name = b.tensors.keys().next().unwrap().clone();
        let shape = b.tensors[&name].shape().to_vec();
        let n = b.tensors[&name].len();
        let data = (0..n).map(|i| values[i % values.len()]).collect();
        b.tensors.insert(name, Tensor::new(shape, data).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cgb");
        save_bundle(&b, &path).unwrap();
        let back = WeightsBundle::from_bytes(&std::fs::read(&path).unwrap()).unwrap();
        prop_assert_eq!(back.tensors.len(), b.tensors.len());
        for (k, t) in &b.tensors {
            let u = &back.tensors[k];
            prop_assert_eq!(t.shape(), u.shape());
            let same = t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same, "tensor {} changed", k);
        }
        prop_assert_eq!(&back.dims, &b.dims);
        prop_assert_eq!(back.sigma_default, sigma);
        prop_assert_eq!(&back.preprocess, &b.preprocess);
        prop_assert_eq!(&back.tokenizer, &b.tokenizer);
    }
}

#[test]
fn re_export_is_byte_identical() {
    for resnet in [false, true] {
        let b = toy_bundle(&config(resnet, 11));
        let bytes = b.to_bytes().unwrap();
        let again = WeightsBundle::from_bytes(&bytes).unwrap().to_bytes().unwrap();
        assert_eq!(bytes, again);
    }
}

#[test]
fn manifest_lists_every_tensor() {
    for resnet in [false, true] {
        let b = toy_bundle(&config(resnet, 3));
        let m = ExportManifest::for_bundle("toy", &b);
        assert_eq!(m.tensors.len(), b.tensors.len());
        for row in &m.tensors {
            assert_eq!(row.shape, b.tensors[&row.name].shape());
            assert_eq!(row.sha256.len(), 64);
            assert!(row.sha256.chars().all(|c| c.is_ascii_hexdigit()));
        }
        assert!(m.check(&b).is_valid());
    }
}

#[test]
fn manifest_survives_json_and_the_loaded_bundle_matches() {
    let dir = tempfile::tempdir().unwrap();
    let b = toy_bundle(&ToyConfig::vit().with_seed(6));
    let (bp, mp) = (dir.path().join("m.cgb"), dir.path().join("m.manifest.json"));
    save_bundle(&b, &bp).unwrap();
    std::fs::write(&mp, serde_json::to_string(&ExportManifest::for_bundle("toy", &b)).unwrap()).unwrap();
    let m = ExportManifest::load(&mp).unwrap();
    assert!(m.check(&load_bundle(&bp).unwrap()).is_valid());
}

#[test]
fn tampered_payload_is_caught_by_the_manifest() {
    let b = toy_bundle(&ToyConfig::vit().with_seed(1));
    let m = ExportManifest::for_bundle("toy", &b);
    let mut bytes = b.to_bytes().unwrap();
    // the last bytes belong to the last tensor's payload
    let at = bytes.len() - 3;
    bytes[at] ^= 0x10;
    let tampered = WeightsBundle::from_bytes(&bytes).unwrap();
    let report = m.check(&tampered);
    assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
    assert!(report.violations[0].contains("checksum mismatch"));
}

#[test]
fn manifest_notices_missing_tensors_and_constants() {
    let b = toy_bundle(&ToyConfig::resnet().with_seed(2));
    let m = ExportManifest::for_bundle("toy", &b);
    let mut c = b.clone();
    let gone = c.tensors.keys().nth(4).unwrap().clone();
    c.tensors.remove(&gone);
    c.sigma_default *= 2.0;
    let v = m.check(&c).violations;
    assert!(v.iter().any(|s| s.contains(&gone)));
    assert!(v.iter().any(|s| s.contains("sigma")));
    assert!(!validate_bundle(&c).is_valid());
}

#[test]
fn truncated_file_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = toy_bundle(&ToyConfig::vit()).to_bytes().unwrap();
    let path = dir.path().join("t.cgb");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_bundle(&path).is_err());
}

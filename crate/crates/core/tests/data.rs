use bridgelab::data::{
    generate_synthetic, Container, DType, MultimodalDataset, Section, Split, SyntheticConfig, SyntheticRenderer,
};
use bridgelab::tensor::Tensor;
use bridgelab::Error;
use proptest::prelude::*;

fn small(seed: u64, ambiguity: f64) -> SyntheticConfig {
    SyntheticConfig {
        classes: 12,
        per_class: 5,
        image_size: 8,
        attributes: 6,
        embedding_dim: 4,
        ambiguity,
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn dataset_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.smpx");
    let ds = generate_synthetic(&small(1, 0.3)).unwrap();
    ds.save(&path).unwrap();
    assert_eq!(MultimodalDataset::load(&path).unwrap(), ds);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_synthetic(&small(4, 0.5)).unwrap().to_container().unwrap().to_bytes();
    let b = generate_synthetic(&small(4, 0.5)).unwrap().to_container().unwrap().to_bytes();
    let c = generate_synthetic(&small(5, 0.5)).unwrap().to_container().unwrap().to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn corrupted_payload_fails_its_checksum() {
    let ds = generate_synthetic(&small(2, 0.0)).unwrap();
    let mut bytes = ds.to_container().unwrap().to_bytes();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checksum { .. })));
}

#[test]
fn malformed_containers_are_format_errors() {
    let mut c = Container::new();
    c.push(Section::u64s("ids", &[1, 2, 3])).unwrap();
    let good = c.to_bytes();
    assert_eq!(Container::from_bytes(&good).unwrap(), c);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(Container::from_bytes(&bad_version), Err(Error::Format(_))));

    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(Container::from_bytes(&trailing), Err(Error::Format(_))));

    assert!(Container::from_bytes(&good[..good.len() - 3]).is_err());
    assert!(c.push(Section::u64s("ids", &[4])).is_err());
}

#[test]
fn container_byte_layout() {
    let mut c = Container::new();
    c.push(Section::f64s("x", &[2], &[1.0, -2.0])).unwrap();
    c.push(Section::text("note", "hi")).unwrap();
    let b = c.to_bytes();
    assert_eq!(&b[..4], b"SMPX");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
    // first header: name_len, name, dtype, rank, dims, byte_len, crc
    assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
    assert_eq!(b[14], b'x');
    assert_eq!(b[15], DType::F64 as u8);
    assert_eq!(b[16], 1);
    assert_eq!(u64::from_le_bytes(b[17..25].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(b[25..33].try_into().unwrap()), 16);
    let payload: Vec<u8> = [1.0f64, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(u32::from_le_bytes(b[33..37].try_into().unwrap()), crc32fast::hash(&payload));
    let second_header = 2 + 4 + 1 + 1 + 8 + 8 + 4;
    assert_eq!(&b[b.len() - 2..], b"hi");
    assert_eq!(&b[37 + second_header..37 + second_header + 16], &payload[..]);
}

#[test]
fn renderer_ignores_invisible_attributes() {
    let cfg = small(7, 0.5);
    let r = SyntheticRenderer::new(&cfg).unwrap();
    let visible = r.visible().to_vec();
    assert_eq!(visible.iter().filter(|v| !**v).count(), cfg.invisible_count());
    let base: Vec<f64> = (0..cfg.attributes).map(|j| (j % 2) as f64).collect();
    let img = r.render(&base, 3).unwrap();
    for j in 0..cfg.attributes {
        let mut flipped = base.clone();
        flipped[j] = 1.0 - flipped[j];
        let other = r.render(&flipped, 3).unwrap();
        if visible[j] {
            assert_ne!(img, other, "visible attribute {j} must change the image");
        } else {
            assert_eq!(img, other, "invisible attribute {j} changed the image");
        }
    }
}

#[test]
fn full_ambiguity_makes_images_attribute_free() {
    let cfg = small(8, 1.0);
    let r = SyntheticRenderer::new(&cfg).unwrap();
    assert!(r.visible().iter().all(|v| !v));
    let on = vec![1.0; cfg.attributes];
    let off = vec![0.0; cfg.attributes];
    for instance in [0, 5, 11] {
        assert_eq!(r.render(&on, instance).unwrap(), r.render(&off, instance).unwrap());
    }
    // every stored image is exactly what the renderer produces without attributes
    let ds = generate_synthetic(&cfg).unwrap();
    for i in [0, 17, ds.len() - 1] {
        let stored = ds.gather_images(&[i]).unwrap();
        let fresh = r.render(&off, i).unwrap();
        assert_eq!(stored.data(), fresh.data());
    }
}

#[test]
fn gathered_rows_match_labels() {
    let ds = generate_synthetic(&small(3, 0.0)).unwrap();
    for k in 0..ds.classes() {
        for &i in ds.instances_of(k) {
            assert_eq!(ds.labels()[i], k);
        }
    }
    assert_eq!(ds.gather_attributes(&[0, 1]).unwrap().shape(), &[2, 6]);
    assert_eq!(ds.gather_captions(&[4]).unwrap().shape(), &[1, 4]);
}

#[test]
fn constructor_rejects_overlapping_splits() {
    let ds = generate_synthetic(&small(3, 0.0)).unwrap();
    let mut splits = ds.splits().clone();
    splits.val.push(splits.train[0]);
    let r = MultimodalDataset::new(
        ds.images().clone(),
        ds.labels().to_vec(),
        ds.attributes().clone(),
        ds.captions().clone(),
        splits,
        ds.meta().clone(),
    );
    assert!(r.is_err());
    let r = MultimodalDataset::new(
        ds.images().map(|v| v + 2.0),
        ds.labels().to_vec(),
        ds.attributes().clone(),
        ds.captions().clone(),
        ds.splits().clone(),
        ds.meta().clone(),
    );
    assert!(r.is_err());
}

#[test]
fn invalid_generator_configs_are_rejected() {
    assert!(generate_synthetic(&small(0, 1.5)).is_err());
    assert!(generate_synthetic(&small(0, -0.1)).is_err());
    assert!(generate_synthetic(&SyntheticConfig { classes: 2, ..small(0, 0.0) }).is_err());
    assert!(generate_synthetic(&SyntheticConfig { image_size: 4, ..small(0, 0.0) }).is_err());
}

#[test]
fn tensor_sections_keep_shape() {
    let t = Tensor::new(vec![2, 3], vec![0.5, 1.0, -1.0, 2.0, 3.0, f64::MIN_POSITIVE]).unwrap();
    let s = Section::tensor("t", &t);
    assert_eq!(s.to_tensor().unwrap(), t);
    assert!(s.to_u64s().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splits_partition_the_classes(classes in 5usize..30, seed in 0u64..1000, ambiguity in 0.0f64..=1.0) {
        let cfg = SyntheticConfig { classes, per_class: 2, ambiguity, seed, ..small(0, 0.0) };
        prop_assume!(cfg.validate().is_ok());
        let ds = generate_synthetic(&cfg).unwrap();
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| ds.splits().get(s).to_vec())
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
        prop_assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(ds.attributes().data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(ds.len(), classes * 2);
    }

    #[test]
    fn containers_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..40), ids in prop::collection::vec(any::<u64>(), 0..20), note in "[a-z =\n]{0,30}") {
        let mut c = Container::new();
        c.push(Section::f64s("v", &[values.len()], &values)).unwrap();
        c.push(Section::u64s("ids", &ids)).unwrap();
        c.push(Section::text("note", &note)).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.require("v").unwrap().to_f64s().unwrap(), values);
        prop_assert_eq!(back.require("ids").unwrap().to_u64s().unwrap(), ids);
        prop_assert_eq!(back.require("note").unwrap().to_text().unwrap(), note);
    }
}

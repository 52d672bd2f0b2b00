mod common;

use std::fs;

use ksm_core::data::{
    artifact_from_store, decode_checkpoint, encode_checkpoint, load_checkpoint, load_cifar, mask_section_size,
    save_checkpoint, store_from_artifact, synthetic_tasks, CifarVariant, Companion, Dataset, MaskStore, StoredLayer,
    SyntheticSpec,
};
use ksm_core::mask::{BinaryMask, SoftMask};
use ksm_core::model::{Backbone, BackboneConfig};
use ksm_core::tensor::Tensor;
use ksm_core::trainer::{train_initial, TrainConfig};
use ksm_core::Error;
use proptest::prelude::*;

/// Byte count computed from the layout description alone.
fn expected_size(layers: &[(usize, usize, usize)]) -> usize {
    // (c_out, c_in, zeros)
    34 + layers.iter().map(|&(o, i, z)| 12 + (o * i + 7) / 8 + 4 * z).sum::<usize>()
}

fn layer_strategy() -> impl Strategy<Value = StoredLayer> {
    (1u32..6, 1u32..9)
        .prop_flat_map(|(o, i)| {
            (Just(o), Just(i), prop::collection::vec(any::<bool>(), (o * i) as usize))
        })
        .prop_flat_map(|(o, i, bits)| {
            let zeros = bits.iter().filter(|b| !**b).count();
            (Just(o), Just(i), Just(bits), prop::collection::vec(0.0f32..=1.0, zeros))
        })
        .prop_map(|(c_out, c_in, bits, scales)| StoredLayer {
            id: 0,
            c_out,
            c_in,
            bits,
            scales,
        })
}

fn store_strategy() -> impl Strategy<Value = MaskStore> {
    (
        prop::collection::vec(layer_strategy(), 0..5),
        0.1f64..50.0,
        -0.5f64..0.5,
        0.05f64..4.0,
        prop::option::of((any::<u32>(), any::<[u8; 32]>(), any::<bool>(), prop::collection::vec(-9.0f32..9.0, 0..12))),
    )
        .prop_map(|(mut layers, k, tau, temperature, comp)| {
            for (i, l) in layers.iter_mut().enumerate() {
                l.id = i as u32;
            }
            let companion = comp.map(|(task_id, backbone_hash, gumbel, v)| Companion {
                task_id,
                backbone_hash,
                init_value: 0.01,
                gumbel,
                tensors: vec![("t".into(), Tensor::new([v.len()], v).unwrap())],
            });
            MaskStore {
                k,
                tau,
                temperature,
                layers,
                companion,
            }
        })
}

proptest! {
    #[test]
    fn stores_round_trip_byte_identically(store in store_strategy()) {
        let bytes = store.encode().unwrap();
        let back = MaskStore::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert_eq!(back.encode().unwrap(), bytes.clone());
        let dims: Vec<_> = store
            .layers
            .iter()
            .map(|l| (l.c_out as usize, l.c_in as usize, l.bits.iter().filter(|b| !**b).count()))
            .collect();
        prop_assert_eq!(mask_section_size(&store), expected_size(&dims));
        if store.companion.is_none() {
            prop_assert_eq!(bytes.len(), expected_size(&dims));
        }
    }
}

fn one_layer(bits: Vec<bool>, scales: Vec<f32>) -> MaskStore {
    MaskStore {
        k: 20.0,
        tau: 0.0,
        temperature: 0.5,
        layers: vec![StoredLayer {
            id: 0,
            c_out: 1,
            c_in: bits.len() as u32,
            bits,
            scales,
        }],
        companion: None,
    }
}

#[test]
fn hand_built_layout() {
    let store = one_layer(vec![true, false, true, false], vec![0.25, 0.75]);
    let bytes = store.encode().unwrap();
    assert_eq!(bytes.len(), 34 + 12 + 1 + 8);
    assert_eq!(&bytes[..4], b"KSM1");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(f64::from_le_bytes(bytes[6..14].try_into().unwrap()), 20.0);
    assert_eq!(u32::from_le_bytes(bytes[30..34].try_into().unwrap()), 1);
    assert_eq!(&bytes[34..46], &[0, 0, 0, 0, 1, 0, 0, 0, 4, 0, 0, 0]);
    assert_eq!(bytes[46], 0xA0);
    assert_eq!(f32::from_le_bytes(bytes[47..51].try_into().unwrap()), 0.25);
    assert_eq!(f32::from_le_bytes(bytes[51..55].try_into().unwrap()), 0.75);
}

#[test]
fn all_ones_layer_has_no_scales() {
    let store = one_layer(vec![true; 9], vec![]);
    assert_eq!(store.encode().unwrap().len(), 34 + 12 + 2);
}

#[test]
fn corrupt_inputs_are_typed() {
    let store = one_layer(vec![true, false, true], vec![0.5]);
    let good = store.encode().unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(MaskStore::decode(&bad), Err(Error::BadMagic { .. })));

    let mut v2 = good.clone();
    v2[4] = 2;
    assert!(matches!(MaskStore::decode(&v2), Err(Error::UnsupportedVersion(2))));

    let mut miscount = store.clone();
    miscount.layers[0].scales.push(0.1);
    assert!(matches!(miscount.encode(), Err(Error::CountMismatch(_))));
}

#[test]
fn every_prefix_is_rejected() {
    let mut store = one_layer(vec![false, true, true, false, true], vec![0.1, 0.9]);
    store.companion = Some(Companion {
        task_id: 4,
        backbone_hash: [7; 32],
        init_value: 0.01,
        gumbel: false,
        tensors: vec![("head.bias".into(), Tensor::new([2], vec![1.0, -1.0]).unwrap())],
    });
    let bytes = store.encode().unwrap();
    let section = mask_section_size(&store);
    for n in 0..bytes.len() {
        let r = MaskStore::decode(&bytes[..n]);
        if n == section {
            // a bare mask section is a valid file on its own
            assert!(r.unwrap().companion.is_none());
        } else if n > section && n < section + 4 {
            assert!(r.is_err(), "prefix {n}");
        } else {
            assert!(matches!(r, Err(Error::Truncated { .. })), "prefix {n}: {r:?}");
        }
    }
}

fn tiny_task() -> ksm_core::data::TaskDescriptor {
    synthetic_tasks(&SyntheticSpec::new(1, 2, [3, 8, 8], 9)).unwrap().tasks[0].clone()
}

#[test]
fn artifacts_round_trip_kernel_and_element_wise() {
    let task = tiny_task();
    let cfg = TrainConfig::new(BackboneConfig::preset("tiny", [3, 8, 8]).unwrap()).with_epochs(1);
    let (backbone, mut art) = train_initial::<f32>(&task, &cfg).unwrap();
    let config = backbone.config.clone();
    let store = store_from_artifact(&art);
    let back = artifact_from_store::<f32>(&MaskStore::decode(&store.encode().unwrap()).unwrap(), &config).unwrap();
    assert_eq!(back, art);

    // element-wise masks keep their full shape
    art.masks = config
        .conv_shapes()
        .iter()
        .map(|s| {
            let n = s.iter().product::<usize>();
            let bits: Vec<bool> = (0..n).map(|i| i % 4 != 1).collect();
            let z = bits.iter().filter(|b| !**b).count();
            SoftMask::from_parts(BinaryMask::new(s.to_vec(), bits).unwrap(), &vec![0.5f32; z]).unwrap()
        })
        .collect();
    let store = store_from_artifact(&art);
    assert_eq!(store.layers[0].c_in as usize, config.conv_shapes()[0][1] * 9);
    let back = artifact_from_store::<f32>(&MaskStore::decode(&store.encode().unwrap()).unwrap(), &config).unwrap();
    assert_eq!(back, art);

    let wrong = BackboneConfig::conv_stack([3, 8, 8], &[8], 32);
    assert!(artifact_from_store::<f32>(&store, &wrong).is_err());
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = Backbone::<f32>::init(BackboneConfig::preset("tiny", [3, 8, 8]).unwrap(), &mut common::rng(1)).unwrap();
    b.freeze();
    let path = dir.path().join("b.ksmc");
    save_checkpoint(&path, &b).unwrap();
    let back: Backbone<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.content_hash(), b.content_hash());
    assert!(back.is_frozen());
    let mut bytes = encode_checkpoint(&b).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::HashMismatch(_))));
    assert!(matches!(load_checkpoint::<f32>(&dir.path().join("none")), Err(Error::DataMissing(_)) | Err(Error::Io(_))));
}

#[test]
fn full_size_cifar_batch_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let mut bytes = Vec::with_capacity(10_000 * 3073);
    for i in 0..10_000usize {
        bytes.push((i % 10) as u8);
        bytes.extend(std::iter::repeat_n((i % 256) as u8, 3072));
    }
    assert_eq!(bytes.len(), 30_730_000);
    fs::write(&path, &bytes).unwrap();
    let d = load_cifar(&path, CifarVariant::Cifar10).unwrap();
    assert_eq!(d.len(), 10_000);
    assert_eq!(d.labels[13], 3);
    assert_eq!(d.image(300)[0], 44);
    assert!(matches!(
        load_cifar(&dir.path().join("missing.bin"), CifarVariant::Cifar10),
        Err(Error::DataMissing(_))
    ));
}

/// Nearest-class-mean probe on normalized pixels.
fn probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.num_classes();
    let d = train.image_bytes();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in train.labels.iter().enumerate() {
        counts[l] += 1;
        for (m, &p) in means[l].iter_mut().zip(train.image(i)) {
            *m += p as f64;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *c as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn synthetic_difficulty_follows_separation() {
    let spec = |separation| SyntheticSpec {
        test_per_class: 200,
        separation,
        ..SyntheticSpec::new(2, 2, [3, 8, 8], 17)
    };
    let hard = synthetic_tasks(&spec(0.0)).unwrap();
    let easy = synthetic_tasks(&spec(1.0)).unwrap();
    for t in &hard.tasks {
        let acc = probe_accuracy(&t.train, &t.test);
        assert!((acc - 0.5).abs() < 0.15, "separation 0 probe {acc}");
    }
    for t in &easy.tasks {
        let acc = probe_accuracy(&t.train, &t.test);
        assert!(acc >= 0.99, "separation 1 probe {acc}");
    }
    let again = synthetic_tasks(&spec(1.0)).unwrap();
    assert_eq!(again.tasks[1].train.images, easy.tasks[1].train.images);
}

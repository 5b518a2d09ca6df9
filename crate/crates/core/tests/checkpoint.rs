//! Checkpoint round trips and failure modes.

use moe_conformer::conformer::EncoderConfig;
use moe_conformer::graph::Graph;
use moe_conformer::harness::checkpoint::{decode, encode, load_into, FORMAT_VERSION, MAGIC};
use moe_conformer::harness::{
    load_checkpoint, save_checkpoint, Model, ModelConfig, SyntheticTask, SyntheticTaskSpec,
};
use moe_conformer::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Model<f32> {
    let config = ModelConfig {
        encoder: EncoderConfig::default(),
        num_labels: SyntheticTaskSpec::default().num_labels(),
    };
    let mut m = Model::build(&config, seed).unwrap();
    // move every tensor off its initial value so zero-init gates count too
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
    }
    m
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(4);
    save_checkpoint(&m, 321, &path).unwrap();
    let (back, step) = load_checkpoint(&path).unwrap();
    assert_eq!(step, 321);
    assert_eq!(back.config, m.config);
    assert_eq!(back.params.len(), m.params.len());
    for ((_, na, a), (_, nb, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &moe_conformer::tensor::Tensor<f32>| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b), "{na}");
    }

    // identical logits on a batch
    let task = SyntheticTask::new(&SyntheticTaskSpec::default()).unwrap();
    let batch = task.generate_batch(3, &mut ChaCha8Rng::seed_from_u64(1));
    let logits = |m: &Model<f32>| {
        let mut g = Graph::new(&m.params);
        let f = m.forward(&mut g, &batch).unwrap();
        g.value(f.logits).data().to_vec()
    };
    assert_eq!(logits(&m), logits(&back));
}

#[test]
fn header_layout() {
    let bytes = encode(&model(1), 7);
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        FORMAT_VERSION
    );
    assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 7);
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = encode(&model(2), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cuts: Vec<usize> = (0..200).collect();
    cuts.extend((0..300).map(|_| rng.random_range(0..bytes.len())));
    cuts.push(bytes.len() - 1);
    for cut in cuts {
        assert!(
            matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))),
            "cut at {cut}"
        );
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
}

#[test]
fn bad_magic_and_version_are_rejected() {
    let bytes = encode(&model(3), 1);
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let err = decode(&bad).err().unwrap().to_string();
    assert!(err.contains("magic"), "{err}");
    let mut bad = bytes;
    bad[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = decode(&bad).err().unwrap().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn mismatched_config_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model(4), 1, &path).unwrap();
    let mut encoder = EncoderConfig::default();
    encoder.causal.dim = 32;
    let config = ModelConfig {
        encoder,
        num_labels: SyntheticTaskSpec::default().num_labels(),
    };
    let mut other = Model::<f32>::build(&config, 1).unwrap();
    let err = load_into(&mut other, &path).err().unwrap().to_string();
    assert!(err.contains("causal.proj"), "{err}");
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(&dir.path().join("none")),
        Err(Error::Io { .. })
    ));
}

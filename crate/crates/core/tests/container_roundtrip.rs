//! Property tests for the checkpoint container: write-then-read reproduces
//! arbitrary valid tensor sets byte-exactly.

use proptest::collection::vec;
use proptest::prelude::*;
use pzmoe_core::{Container, TensorData, TensorEntry};

fn tensor_strategy(idx: usize) -> impl Strategy<Value = TensorEntry> {
    let shape = vec(1usize..5, 1..3);
    (shape, 0u8..4).prop_flat_map(move |(shape, kind)| {
        let n: usize = shape.iter().product();
        let name = format!("t{idx}");
        match kind {
            0 => vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n..=n)
                .prop_map(move |data| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: TensorData::F32(data),
                })
                .boxed(),
            1 => vec(any::<u16>(), n..=n)
                .prop_map(move |data| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: TensorData::Bf16(data),
                })
                .boxed(),
            2 => vec(any::<u16>(), n..=n)
                .prop_map(move |data| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: TensorData::Pbf16(data),
                })
                .boxed(),
            _ => (2u32..9, 1u32..6)
                .prop_flat_map(move |(bits, group)| {
                    let name = name.clone();
                    let shape = shape.clone();
                    let bytes = (n * bits as usize).div_ceil(8);
                    vec(any::<u8>(), bytes..=bytes).prop_map(move |mut raw| {
                        // Zero the unused trailing bits so the round trip is
                        // exact byte equality.
                        let used = n * bits as usize;
                        if !used.is_multiple_of(8) {
                            let last = raw.len() - 1;
                            raw[last] &= (1u8 << (used % 8)) - 1;
                        }
                        TensorEntry {
                            name: name.clone(),
                            shape: shape.clone(),
                            data: TensorData::Quant { bits, group, raw },
                        }
                    })
                })
                .boxed(),
        }
    })
}

fn container_strategy() -> impl Strategy<Value = Container> {
    (0usize..6).prop_flat_map(|n| {
        let tensors: Vec<_> = (0..n).map(tensor_strategy).collect();
        tensors.prop_map(|tensors| {
            let mut c = Container::new(serde_json::json!({"k": 1}));
            c.tensors = tensors;
            c
        })
    })
}

proptest! {
    #[test]
    fn write_read_identity(c in container_strategy()) {
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn serialization_is_deterministic(c in container_strategy()) {
        prop_assert_eq!(c.to_bytes().unwrap(), c.to_bytes().unwrap());
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pzm");
    let mut c = Container::new(serde_json::json!({"tau_sim": 0.4}));
    c.tensors.push(TensorEntry {
        name: "x".into(),
        shape: vec![2, 3],
        data: TensorData::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
    });
    c.write(&path).unwrap();
    let back = Container::read(&path).unwrap();
    assert_eq!(back, c);
}

//! End-to-end persistence: generated and compressed models survive the
//! container round trip with bit-identical forward outputs.

use pzmoe_core::compress::{compress, CompressOptions};
use pzmoe_core::model::{
    eval_deviation, gaussian_inputs, generate_toy, ModelMetadata, ToyMoEConfig, ToyMoEModel,
};
use pzmoe_core::{CalibrationStats, Container};

fn config() -> ToyMoEConfig {
    ToyMoEConfig {
        n_layers: 2,
        n_experts: 4,
        top_k: 2,
        d_model: 16,
        d_ff: 32,
        seed: 123,
    }
}

#[test]
fn dense_model_round_trip_is_bit_exact() {
    let model = generate_toy(&config(), false, 0.0).unwrap();
    let c = model
        .to_container(&ModelMetadata::plain(model.config))
        .unwrap();
    let bytes = c.to_bytes().unwrap();
    let (back, meta) =
        ToyMoEModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(meta.config, model.config);
    let inputs = gaussian_inputs(8, 16, 7);
    let a = model.forward(&inputs).unwrap();
    let b = back.forward(&inputs).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn compressed_model_round_trip_preserves_outputs_and_metadata() {
    let model = generate_toy(&config(), false, 0.0).unwrap();
    let out = compress(
        &model,
        &CompressOptions {
            ratio: 0.25,
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let meta = ModelMetadata {
        config: model.config,
        pairing_plan: Some(out.plan.clone()),
        tau_sim: Some(0.4),
        seed: Some(9),
        calib_seed: Some(1),
        calib_tokens: Some(256),
        grouping: Some(pzmoe_core::GroupingStrategy::Random),
    };
    let bytes = out.model.to_container(&meta).unwrap().to_bytes().unwrap();
    let (back, meta2) =
        ToyMoEModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(meta2.pairing_plan.as_ref(), Some(&out.plan));
    assert_eq!(meta2.tau_sim, Some(0.4));

    let inputs = gaussian_inputs(8, 16, 11);
    let a = out.model.forward(&inputs).unwrap();
    let b = back.forward(&inputs).unwrap();
    assert_eq!(a.values(), b.values());

    // Saving is deterministic byte for byte.
    let again = out.model.to_container(&meta).unwrap().to_bytes().unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn compressed_round_trip_then_eval_zero_deviation() {
    let model = generate_toy(&config(), false, 0.0).unwrap();
    let out = compress(&model, &CompressOptions::default()).unwrap();
    let meta = ModelMetadata {
        config: model.config,
        pairing_plan: Some(out.plan.clone()),
        tau_sim: Some(0.4),
        seed: Some(0),
        calib_seed: Some(1),
        calib_tokens: Some(256),
        grouping: Some(pzmoe_core::GroupingStrategy::Random),
    };
    let bytes = out.model.to_container(&meta).unwrap().to_bytes().unwrap();
    let (back, _) = ToyMoEModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    let inputs = gaussian_inputs(16, 16, 3);
    let d = eval_deviation(&out.model, &back, &inputs).unwrap();
    assert_eq!(d.mean_rel_l2, 0.0);
}

#[test]
fn calibration_stats_round_trip() {
    let model = generate_toy(&config(), false, 0.0).unwrap();
    let inputs = gaussian_inputs(32, 16, 5);
    let stats = pzmoe_core::calib::collect_norms(&model, &inputs).unwrap();
    let mut c = Container::new(serde_json::json!({}));
    stats.add_to_container(&mut c);
    let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    let loaded = CalibrationStats::from_container(&back, 2, 4).unwrap();
    for layer in 0..2 {
        for expert in 0..4 {
            for slot in pzmoe_core::Slot::ALL {
                assert_eq!(
                    loaded.norms(layer, expert, slot),
                    stats.norms(layer, expert, slot)
                );
            }
        }
    }
}

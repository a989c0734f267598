mod common;

use skiplab::model::AttentionMode;

#[test]
fn diffusion_decoding_invariants_hold() {
    let ck = common::jittered(&common::small_config(AttentionMode::Bidirectional, 2, 16), 5, 0.1);
    common::check_decode_invariants(&ck).unwrap();
}

#[test]
fn trained_diffusion_model_decodes_cleanly() {
    let ck = common::trained(AttentionMode::Bidirectional, 1, 40);
    common::check_decode_invariants(&ck).unwrap();
}

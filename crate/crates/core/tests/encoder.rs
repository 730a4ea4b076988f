mod common;

use std::ops::ControlFlow;

use common::random_matrix;
use earlyexit::branches::BranchSet;
use earlyexit::checkpoint::{load_checkpoint, save_checkpoint};
use earlyexit::encoder::{Encoder, EncoderConfig};
use earlyexit::numeric::SeededRng;
use earlyexit::policy::ExitPolicy;

/// Parameter hash of the default encoder (seed 42, d=64, L=8), fixed when
/// the initialization scheme was finalized.
const GOLDEN_HASH: u64 = 0xc773a6e1c7da5bb8;

#[test]
fn default_encoder_matches_golden_checksum() {
    let enc = Encoder::init(EncoderConfig::default()).unwrap();
    assert_eq!(enc.param_hash(), GOLDEN_HASH, "got {:016x}", enc.param_hash());
    assert_eq!(enc.param_count(), 268_864);
}

#[test]
fn stopping_early_reproduces_the_full_pass_prefix() {
    let enc = Encoder::init(EncoderConfig::default()).unwrap();
    let mut rng = SeededRng::new(3);
    for _ in 0..10 {
        let t = 1 + rng.below(64);
        let x = random_matrix(&mut rng, t, 16, 1.0);
        let full = enc.forward_all(&x).unwrap();
        for k in 1..=8 {
            let part = enc
                .forward_until(&x, |layer, _| if layer == k { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
                .unwrap();
            assert_eq!(part.layers_computed(), k);
            for j in 0..k {
                let (a, b) = (part.layers()[j].data(), full.layers()[j].data());
                assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()), "layer {} differs", j + 1);
            }
        }
    }
}

#[test]
fn block_counter_tracks_the_exit_layer() {
    let enc = Encoder::init(EncoderConfig::default()).unwrap();
    let branches = BranchSet::zeros(8, 32, 64);
    let mut rng = SeededRng::new(8);
    let x = random_matrix(&mut rng, 10, 16, 1.0);
    // Zero branches have entropy ln 32 everywhere, so only the span decides.
    for k in 1..=8 {
        let policy = ExitPolicy::fixed_layer(k, 8).unwrap();
        enc.reset_block_counter();
        let (hs, trace) = policy.run(&enc, &branches, &x, 0).unwrap();
        assert_eq!(trace.exit_layer, k);
        assert_eq!(hs.layers_computed(), k);
        assert_eq!(enc.blocks_executed(), k as u64);
    }
}

#[test]
fn encoder_checkpoint_round_trips_bit_exactly() {
    let cfg = EncoderConfig {
        seed: 9,
        num_layers: 3,
        ..EncoderConfig::default()
    };
    let enc = Encoder::init(cfg).unwrap();
    let bytes = save_checkpoint(&enc);
    let back = load_checkpoint(&bytes).unwrap();
    assert_eq!(back, enc);
    assert_eq!(save_checkpoint(&back), bytes);
}

#[test]
fn batch_order_does_not_change_per_sample_states() {
    let enc = Encoder::init(EncoderConfig {
        num_layers: 2,
        ..EncoderConfig::default()
    })
    .unwrap();
    let mut rng = SeededRng::new(1);
    let xs: Vec<_> = (0..4).map(|i| random_matrix(&mut rng, 5 + i, 16, 1.0)).collect();
    let forward = enc.forward_batch(&xs).unwrap();
    let mut reversed = xs.clone();
    reversed.reverse();
    let backward = enc.forward_batch(&reversed).unwrap();
    for (i, hs) in forward.iter().enumerate() {
        assert_eq!(hs, &backward[xs.len() - 1 - i]);
    }
}

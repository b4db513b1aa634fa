//! Resuming the toy decoder from its own hidden states reproduces the full
//! forward pass.

use layerlens_core::fit::TokenwiseMap;
use layerlens_core::intervene::{intervene_sequence, InterventionMode, ResumeBackend, ToyBackend};
use layerlens_core::toy::{ToyConfig, ToyModel};
use layerlens_core::Error;

fn tokens(seed: u32, len: usize) -> Vec<u32> {
    (0..len as u32)
        .map(|i| (i.wrapping_mul(2654435761).wrapping_add(seed * 97)) % 256)
        .collect()
}

#[test]
fn resume_from_unmodified_states_matches_forward() {
    for seed in 0..3 {
        let model = ToyModel::random(ToyConfig::default(), seed).unwrap();
        let toks = tokens(seed as u32, 40);
        let pass = model.forward(&toks).unwrap();
        for layer in 1..=model.config().num_layers {
            let resumed = model.resume(&toks, layer, &pass.hidden[layer]).unwrap();
            let worst = resumed
                .iter()
                .zip(&pass.log_probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 1e-5, "layer {layer}: max |Δ log-prob| = {worst}");
        }
    }
}

#[test]
fn null_interventions_have_zero_kl() {
    let model = ToyModel::random(ToyConfig::default(), 5).unwrap();
    let seqs: Vec<(u32, Vec<u32>)> = (0..4).map(|i| (i, tokens(i, 24 + i as usize))).collect();
    let backend = ToyBackend::new(&model, &seqs).unwrap();
    for (id, toks) in &seqs {
        let pass = model.forward(toks).unwrap();
        let positions: Vec<u32> = (0..toks.len() as u32).collect();
        for layer in 1..=backend.num_layers() {
            for kl in backend.kl_at(*id, layer, &pass.hidden[layer], &positions).unwrap() {
                assert!((0.0..=1e-6).contains(&kl), "layer {layer}: KL {kl}");
            }
        }
    }
}

#[test]
fn interventions_are_causal() {
    let model = ToyModel::random(ToyConfig::default(), 6).unwrap();
    let seqs = vec![(0u32, tokens(3, 20))];
    let backend = ToyBackend::new(&model, &seqs).unwrap();
    let case = backend.case(0, 1, (0..20).collect()).unwrap();
    let scaled = |_: u32, _: u32| {
        let mut m = TokenwiseMap::identity(32);
        if let layerlens_core::fit::MapParams::Diagonal(d) = &mut m.params {
            d.iter_mut().for_each(|v| *v = 3.0);
        }
        Some(m)
    };
    let recs = intervene_sequence(&backend, 1, &case, InterventionMode::SinglePosition(12), scaled).unwrap();
    for r in &recs {
        if r.pos < 12 {
            assert!(r.kl <= 1e-6, "position {} before the edit moved by {}", r.pos, r.kl);
        }
    }
    assert!(recs.iter().find(|r| r.pos == 12).unwrap().kl > 1e-4);
}

#[test]
fn unknown_sequences_are_reported() {
    let model = ToyModel::random(ToyConfig::default(), 7).unwrap();
    let backend = ToyBackend::new(&model, &[(1, tokens(1, 8))]).unwrap();
    assert!(matches!(
        backend.kl_at(9, 1, &vec![0.0; 8 * 32], &[0]),
        Err(Error::UnknownSequence { seq_id: 9 })
    ));
}

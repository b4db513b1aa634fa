mod common;

use std::time::Duration;

use common::{dead_endpoint, serve};
use layerlens::client::{decode_states, encode_states, ClientOptions, ResumeClient, ResumeRequest};
use layerlens::{checkpoint, ClientError, LensError};
use layerlens_core::intervene::ResumeBackend;
use layerlens_core::Error as CoreError;

fn sequences() -> Vec<(u32, Vec<u32>)> {
    (0..3u32)
        .map(|i| (i, (0..20u32).map(|t| (t * 31 + i * 7 + 65) % 256).collect()))
        .collect()
}

fn opts() -> ClientOptions {
    ClientOptions {
        timeout: Duration::from_secs(10),
        max_in_flight: 3,
        retries: 2,
    }
}

#[test]
fn states_roundtrip_through_base64() {
    let v = vec![0.0f32, -1.5, f32::MIN_POSITIVE, 3.25e7];
    assert_eq!(decode_states(&encode_states(&v)).unwrap(), v);
    assert!(decode_states("AAA").is_none());
    assert!(decode_states("not base64!").is_none());
}

#[test]
fn null_interventions_report_zero_kl() {
    let model = checkpoint::bundled().unwrap();
    let seqs = sequences();
    let server = serve(model.clone(), seqs.clone(), 0);
    let client = ResumeClient::connect(&server.endpoint, opts()).unwrap();
    assert_eq!(client.info().hidden_dim, 32);
    assert_eq!(client.info().num_layers, 4);
    let mut reqs = Vec::new();
    for (id, toks) in &seqs {
        let pass = model.forward(toks).unwrap();
        for layer in 1..=4u32 {
            reqs.push(ResumeRequest::new(
                *id,
                layer,
                &pass.hidden[layer as usize],
                (0..20).collect(),
            ));
        }
    }
    let out = client.kl_batch(&reqs);
    assert_eq!(out.len(), reqs.len());
    for resp in out {
        let resp = resp.unwrap();
        assert!(resp.kl.iter().all(|&k| (0.0..=1e-5).contains(&k)));
        for (a, b) in resp.baseline_logprob.iter().zip(&resp.perturbed_logprob) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn batch_results_keep_request_order() {
    let model = checkpoint::bundled().unwrap();
    let seqs = sequences();
    let server = serve(model.clone(), seqs.clone(), 0);
    let client = ResumeClient::connect(&server.endpoint, opts()).unwrap();
    let toks = &seqs[0].1;
    let pass = model.forward(toks).unwrap();
    let reqs: Vec<ResumeRequest> = (0..8)
        .map(|i| {
            let states: Vec<f32> = pass.hidden[2].iter().map(|v| v * (1.0 + i as f32 * 0.2)).collect();
            ResumeRequest::new(0, 2, &states, vec![19])
        })
        .collect();
    let kl: Vec<f64> = client.kl_batch(&reqs).into_iter().map(|r| r.unwrap().kl[0]).collect();
    for (i, req) in reqs.iter().enumerate() {
        assert_eq!(client.kl(req).unwrap().kl[0], kl[i]);
    }
    assert!(kl[0] <= 1e-5, "unscaled states are a null intervention");
    assert!(kl[7] > kl[1]);
}

#[test]
fn unknown_sequence_and_bad_shapes_are_distinct_errors() {
    let server = serve(checkpoint::bundled().unwrap(), sequences(), 0);
    let client = ResumeClient::connect(&server.endpoint, opts()).unwrap();
    let err = client
        .kl(&ResumeRequest::new(99, 1, &vec![0.0; 20 * 32], vec![0]))
        .unwrap_err();
    assert!(matches!(err, ClientError::UnknownSequence { seq_id: 99 }));
    let err = client.kl(&ResumeRequest::new(0, 1, &[0.0; 7], vec![0])).unwrap_err();
    assert!(matches!(err, ClientError::Protocol { status: 400, .. }), "{err}");
    assert!(err.to_string().contains("shape"));
    let backend_err = client.kl_at(99, 1, &vec![0.0; 20 * 32], &[0]).unwrap_err();
    assert!(matches!(backend_err, CoreError::UnknownSequence { seq_id: 99 }));
}

#[test]
fn transient_failures_are_retried() {
    let model = checkpoint::bundled().unwrap();
    let seqs = sequences();
    let server = serve(model.clone(), seqs.clone(), 2);
    let client = ResumeClient::connect(&server.endpoint, opts()).unwrap();
    let pass = model.forward(&seqs[1].1).unwrap();
    let resp = client
        .kl(&ResumeRequest::new(1, 3, &pass.hidden[3], vec![0, 5]))
        .unwrap();
    assert_eq!(resp.kl.len(), 2);
    assert_eq!(server.hits.load(std::sync::atomic::Ordering::SeqCst), 3);
}

#[test]
fn retries_give_up_after_the_budget() {
    let model = checkpoint::bundled().unwrap();
    let seqs = sequences();
    let server = serve(model.clone(), seqs.clone(), 100);
    let client = ResumeClient::connect(&server.endpoint, opts()).unwrap();
    let pass = model.forward(&seqs[1].1).unwrap();
    let err = client
        .kl(&ResumeRequest::new(1, 3, &pass.hidden[3], vec![0]))
        .unwrap_err();
    assert!(matches!(err, ClientError::Protocol { status: 503, .. }));
    assert_eq!(server.hits.load(std::sync::atomic::Ordering::SeqCst), 3);
}

#[test]
fn unreachable_service_fails_at_connect() {
    let err = ResumeClient::connect(&dead_endpoint(), opts()).unwrap_err();
    assert!(matches!(err, ClientError::Unreachable { .. }), "{err}");
    assert_eq!(LensError::from(err).exit_code(), 3);
}

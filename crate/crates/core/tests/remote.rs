#![allow(clippy::needless_range_loop)]

use lranker_core::aggregator::ConditioningVector;
use lranker_core::encoder::{featurize_text, Provenance, QueryEncoder, QueryInput};
use lranker_core::remote::{
    encode_query_remote, Client, ClientConfig, RemoteEncoder, StubConfig, StubMode, StubServer,
};
use lranker_core::Error;

fn client_cfg(url: String, out_dim: usize) -> ClientConfig {
    ClientConfig {
        base_url: url,
        out_dim,
        backoff_base_ms: 5,
        timeout_ms: 2_000,
        ..ClientConfig::default()
    }
}

fn cond(v: Vec<f64>) -> ConditioningVector {
    ConditioningVector {
        values: v,
        source_subset: vec![],
        k_used: 0,
    }
}

#[test]
fn fixed_vector_passes_through() {
    let v = vec![0.5, -1.25, 2.0, 0.0];
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            mode: StubMode::Fixed(v.clone()),
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let e = encode_query_remote(
        "hello world",
        &cond(vec![0.0; 4]),
        &client_cfg(stub.url(), 4),
    )
    .unwrap();
    assert_eq!(e.values, v);
    assert_eq!(e.provenance, Provenance::Remote);
}

#[test]
fn featurize_mode_adds_conditioning() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 8,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let client = Client::new(client_cfg(stub.url(), 8)).unwrap();
    let h = client.check_dims().unwrap();
    assert_eq!(h.hidden_size, 8);
    let c: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let e = client
        .embed_query("ranking text", &cond(c.clone()))
        .unwrap();
    let f = featurize_text("ranking text", 8).0;
    for i in 0..8 {
        assert!((e.values[i] - (f[i] + c[i])).abs() < 1e-12);
    }
    let cand = client.embed_candidate("a candidate").unwrap();
    assert_eq!(cand, featurize_text("a candidate", 8).0);
}

#[test]
fn base64_payloads_decode() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 6,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let cfg = ClientConfig {
        b64: true,
        ..client_cfg(stub.url(), 6)
    };
    let e = encode_query_remote("some query", &cond(vec![0.25; 6]), &cfg).unwrap();
    let f = featurize_text("some query", 6).0;
    for i in 0..6 {
        assert_eq!(e.values[i], (f[i] + 0.25) as f32 as f64);
    }
}

#[test]
fn service_down_is_a_connection_error() {
    let url = {
        let stub = StubServer::start(StubConfig::default(), "127.0.0.1:0").unwrap();
        stub.url()
    };
    let err = encode_query_remote("q", &cond(vec![0.0; 32]), &client_cfg(url, 32)).unwrap_err();
    assert!(matches!(err, Error::RemoteConnection(_)), "{err}");
    assert_eq!(err.class().exit_code(), 5);
}

#[test]
fn wrong_dimension_names_both_sizes() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            mode: StubMode::WrongDim(3),
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let err =
        encode_query_remote("q", &cond(vec![0.0; 4]), &client_cfg(stub.url(), 4)).unwrap_err();
    assert!(
        matches!(
            err,
            Error::RemoteDimMismatch {
                expected: 4,
                actual: 3
            }
        ),
        "{err}"
    );
    let msg = err.to_string();
    assert!(msg.contains("dimension mismatch") && msg.contains('4') && msg.contains('3'));
}

#[test]
fn health_dim_check_fails_on_mismatch() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 5,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let err = Client::new(client_cfg(stub.url(), 4))
        .unwrap()
        .check_dims()
        .unwrap_err();
    assert!(matches!(
        err,
        Error::RemoteDimMismatch {
            expected: 4,
            actual: 5
        }
    ));
}

#[test]
fn garbage_response_is_malformed() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            mode: StubMode::Garbage,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let err =
        encode_query_remote("q", &cond(vec![0.0; 4]), &client_cfg(stub.url(), 4)).unwrap_err();
    assert!(matches!(err, Error::RemoteMalformed(_)), "{err}");
}

#[test]
fn slow_service_times_out() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            delay_ms: 600,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let cfg = ClientConfig {
        timeout_ms: 150,
        attempts: 1,
        ..client_cfg(stub.url(), 4)
    };
    let err = encode_query_remote("q", &cond(vec![0.0; 4]), &cfg).unwrap_err();
    assert!(matches!(err, Error::RemoteTimeout(_)), "{err}");
}

#[test]
fn transient_failures_are_retried() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            fail_first: 2,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let e = encode_query_remote("q text", &cond(vec![0.0; 4]), &client_cfg(stub.url(), 4)).unwrap();
    assert_eq!(e.values.len(), 4);
    assert_eq!(stub.requests.load(std::sync::atomic::Ordering::SeqCst), 3);

    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            fail_first: 3,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    assert!(encode_query_remote("q", &cond(vec![0.0; 4]), &client_cfg(stub.url(), 4)).is_err());
    assert_eq!(stub.requests.load(std::sync::atomic::Ordering::SeqCst), 3);
}

#[test]
fn remote_encoder_requires_text() {
    let stub = StubServer::start(
        StubConfig {
            hidden_size: 4,
            ..StubConfig::default()
        },
        "127.0.0.1:0",
    )
    .unwrap();
    let enc = RemoteEncoder::new(client_cfg(stub.url(), 4)).unwrap();
    let no_text = QueryInput {
        id: "q".into(),
        text: None,
        features: Some(vec![1.0; 4]),
    };
    assert!(enc.encode(&no_text, &cond(vec![0.0; 4])).is_err());
    let with_text = QueryInput {
        text: Some("abc def".into()),
        ..no_text
    };
    let a = enc.encode(&with_text, &cond(vec![0.0; 4])).unwrap();
    let b = enc.encode(&with_text, &cond(vec![0.0; 4])).unwrap();
    assert_eq!(a, b);
}

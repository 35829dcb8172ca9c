mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::*;
use driftmem::corpus::{period_batches, Interaction, PeriodBatch};
use driftmem::decode::{decode, DecodeConfig};
use driftmem::drift::SelectionMode;
use driftmem::engine::{
    analyze, build_native, collect_retrieval_scores, infer_period, init_period_zero, run_stream, sweep, train_period,
    RunConfig, RunLayout, SweepAxis, UserState,
};
use driftmem::lm::{
    AdapterState, HttpTransport, LanguageModel, LocalTransport, LogLik, NgramBackend, RemoteBackend, TokenDistribution,
    TokenId, Vocab,
};
use driftmem::{NativeAdapter, Result};

fn model_for(cfg: &RunConfig) -> NgramBackend<f64> {
    build_native(cfg, &two_users()).unwrap()
}

fn batch(period: usize, train: Vec<Interaction>, test: Vec<Interaction>) -> PeriodBatch {
    PeriodBatch {
        period_index: period,
        train,
        test,
    }
}

fn initialized(model: &NgramBackend<f64>, cfg: &RunConfig) -> UserState<f64, NativeAdapter> {
    let stream = single_topic_user("u", 20, Lexicon::A, 1);
    let fresh = UserState::fresh("u", model.fresh_adapter(), cfg.n_max);
    init_period_zero(model, &fresh, &batch(0, stream.interactions, Vec::new()), cfg).unwrap()
}

#[test]
fn drift_set_is_thirty_percent() {
    let cfg = small_config();
    let model = model_for(&cfg);
    let state = initialized(&model, &cfg);
    let train = shifting_user("u", 10, 0.0, 0.5, 2).interactions;
    let out = train_period(&model, &state, &batch(1, train, Vec::new()), &cfg).unwrap();
    assert_eq!(out.drift_indices.len(), 3);
    assert_eq!(out.scored.len(), 10);
    assert!(out.state.buffer.len() <= state.buffer.len() + 3);
    assert_eq!(out.state.last_period, Some(1));
    assert_eq!(out.state.adapter.generation_period(), Some(1));
}

#[test]
fn small_pool_is_kept_whole() {
    let cfg = RunConfig {
        selection_mode: SelectionMode::All,
        top_percent: 100.0,
        ..small_config()
    };
    let cfg = RunConfig { n_max: 50, ..cfg };
    let model = model_for(&cfg);
    let state = initialized(&model, &cfg);
    let train = shifting_user("u", 12, 0.0, 0.5, 3).interactions;
    let out = train_period(&model, &state, &batch(1, train.clone(), Vec::new()), &cfg).unwrap();
    assert_eq!(out.drift_indices, (0..12).collect::<Vec<_>>());
    let kept: Vec<&Interaction> = out.state.buffer.interactions().collect();
    assert_eq!(kept, train.iter().collect::<Vec<_>>());
}

#[test]
fn period_zero_initialization() {
    let cfg = small_config();
    let model = model_for(&cfg);
    let a = initialized(&model, &cfg);
    let b = initialized(&model, &cfg);
    assert_eq!(a, b);
    assert!(a.buffer.is_empty());
    assert!(!a.adapter.is_empty());
    assert_eq!(a.last_period, Some(0));

    let fresh = UserState::fresh("u", model.fresh_adapter(), cfg.n_max);
    let items = single_topic_user("u", 5, Lexicon::A, 1).interactions;
    assert!(init_period_zero(&model, &fresh, &batch(1, items.clone(), Vec::new()), &cfg).is_err());
    assert!(init_period_zero(&model, &a, &batch(0, items, Vec::new()), &cfg).is_err());
}

#[test]
fn period_zero_test_split_is_optional() {
    let cfg = small_config();
    let model = model_for(&cfg);
    let items = single_topic_user("u", 10, Lexicon::A, 4).interactions;
    let b0 = batch(0, items[..8].to_vec(), items[8..].to_vec());
    let fresh = UserState::fresh("u", model.fresh_adapter(), cfg.n_max);
    let without = init_period_zero(&model, &fresh, &b0, &cfg).unwrap();
    let with = init_period_zero(
        &model,
        &fresh,
        &b0,
        &RunConfig {
            period0_include_test: true,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(without.adapter, with.adapter);
}

#[test]
fn empty_train_split_carries_state_over() {
    let cfg = small_config();
    let model = model_for(&cfg);
    let state = initialized(&model, &cfg);
    let s1 = train_period(&model, &state, &batch(1, shifting_user("u", 10, 0.0, 0.5, 5).interactions, Vec::new()), &cfg)
        .unwrap()
        .state;
    let out = train_period(&model, &s1, &batch(2, Vec::new(), Vec::new()), &cfg).unwrap();
    assert_eq!(out.state.buffer, s1.buffer);
    assert_eq!(out.state.last_period, Some(2));
    assert_eq!(out.state.adapter.generation_period(), Some(2));
    assert!(out.scored.is_empty() && out.tau_p.is_none());
}

#[test]
fn periods_must_advance_one_at_a_time() {
    let cfg = small_config();
    let model = model_for(&cfg);
    let state = initialized(&model, &cfg);
    let items = single_topic_user("u", 5, Lexicon::A, 6).interactions;
    assert!(train_period(&model, &state, &batch(2, items.clone(), Vec::new()), &cfg).is_err());
    assert!(train_period(&model, &state, &batch(0, items.clone(), Vec::new()), &cfg).is_err());
    assert!(infer_period(&model, &state, &batch(1, Vec::new(), items.clone()), 0.0, &cfg).is_err());
    assert!(collect_retrieval_scores(&state, &batch(1, Vec::new(), items), &cfg).is_err());
}

#[test]
fn empty_buffer_decodes_like_lambda_zero() {
    let cfg = small_config();
    let model = model_for(&cfg);
    let state = initialized(&model, &cfg);
    let test = shifting_user("u", 6, 0.0, 0.5, 7).interactions;
    let state = train_period(&model, &state, &batch(1, Vec::new(), Vec::new()), &cfg).unwrap().state;
    assert!(state.buffer.is_empty());
    let b = batch(1, Vec::new(), test);
    let sigma = f64::NEG_INFINITY;
    let mixed = infer_period(&model, &state, &b, sigma, &cfg).unwrap();
    let plain = infer_period(&model, &state, &b, sigma, &RunConfig { lambda: 0.0, ..cfg.clone() }).unwrap();
    assert_eq!(mixed, plain);
    assert!(mixed.iter().all(|q| q.c_ret.is_empty() && q.gated == 0));
}

#[test]
fn retrieval_only_changes_queries_with_context() {
    let cfg = RunConfig {
        n_periods: 2,
        train_ratio: 0.7,
        ..small_config()
    };
    let stream = named_user("u", 80, 0.5, 8);
    let model: NgramBackend<f64> = build_native(&cfg, std::slice::from_ref(&stream)).unwrap();
    let batches = period_batches(&stream, 2, 0.7).unwrap();
    let fresh = UserState::fresh("u", model.fresh_adapter(), cfg.n_max);
    let s0 = init_period_zero(&model, &fresh, &batches[0], &cfg).unwrap();
    let s1 = train_period(&model, &s0, &batches[1], &cfg).unwrap().state;
    let sigma = driftmem::retrieval::calibrate_sigma(&collect_retrieval_scores(&s1, &batches[1], &cfg).unwrap());
    let mixed = infer_period(&model, &s1, &batches[1], sigma, &cfg).unwrap();
    let plain = infer_period(&model, &s1, &batches[1], sigma, &RunConfig { lambda: 0.0, ..cfg.clone() }).unwrap();
    assert!(mixed.iter().any(|q| !q.c_ret.is_empty()));
    assert!(mixed.iter().any(|q| q.c_ret.is_empty()));
    for (m, p) in mixed.iter().zip(&plain) {
        assert_eq!(m.c_ret, p.c_ret);
        if m.c_ret.is_empty() {
            assert_eq!(m.hypothesis, p.hypothesis);
        }
    }
}

#[test]
fn gating_off_never_retrieves() {
    let cfg = RunConfig {
        gating: false,
        ..small_config()
    };
    let model = model_for(&cfg);
    let state = initialized(&model, &cfg);
    let items = single_topic_user("u", 10, Lexicon::A, 1).interactions;
    let state = train_period(&model, &state, &batch(1, items.clone(), Vec::new()), &cfg).unwrap().state;
    assert!(!state.buffer.is_empty());
    let b = batch(1, Vec::new(), items);
    assert!(collect_retrieval_scores(&state, &b, &cfg).unwrap().is_empty());
    let out = infer_period(&model, &state, &b, f64::NEG_INFINITY, &cfg).unwrap();
    assert!(out.iter().all(|q| q.c_ret.is_empty()));
}

#[test]
fn full_run_layout_and_report() {
    let streams = two_users();
    let cfg = RunConfig {
        write_traces: true,
        ..small_config()
    };
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = run_stream::<f64, _>(&model, &streams, &cfg, dir.path()).unwrap();
    assert!(out.finished && out.failures.is_empty());
    assert_eq!(out.completed_period, 4);
    assert_eq!(out.report.cells.len(), 8);
    assert_eq!(out.report.per_period.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(out.report.period_avg.is_some());
    assert_eq!(out.sigma_history.len(), 4);

    let layout = RunLayout::new(dir.path());
    let csv = std::fs::read_to_string(layout.report()).unwrap();
    assert_eq!(csv.lines().next(), Some("user_id,period,r1_f1,rl_f1"));
    assert_eq!(csv.lines().count(), 1 + 8 + 4 + 1);
    assert!(csv.lines().last().unwrap().starts_with("ALL,period_avg,"));
    for user in ["alice", "bob"] {
        for t in 0..5 {
            assert!(layout.state(user, t).exists(), "{user} period {t}");
        }
        for t in 1..5 {
            assert!(layout.scatter(user, t).exists());
        }
        assert!(layout.trace(user, 1, 0).exists());
    }
    let outputs = std::fs::read_to_string(layout.outputs(1)).unwrap();
    assert!(outputs.lines().count() > 0);
    for line in outputs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["hypothesis"].is_string());
    }

    let rows = analyze(dir.path()).unwrap();
    assert!(rows.iter().any(|r| r.scope == "all" && r.pair == "s~h"));
    assert!(dir.path().join("analysis.csv").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let streams = two_users();
    let cfg = small_config();
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let whole = dir.path().join("whole");
    run_stream::<f64, _>(&model, &streams, &cfg, &whole).unwrap();
    let parts = dir.path().join("parts");
    for stop in [1, 3] {
        let part = run_stream::<f64, _>(
            &model,
            &streams,
            &RunConfig {
                stop_after_period: Some(stop),
                ..cfg.clone()
            },
            &parts,
        )
        .unwrap();
        assert_eq!(part.completed_period, stop);
        assert!(!part.finished);
    }
    run_stream::<f64, _>(&model, &streams, &cfg, &parts).unwrap();
    let read = |p: &std::path::Path| std::fs::read(p.join("report.csv")).unwrap();
    assert_eq!(read(&whole), read(&parts));
}

#[test]
fn resume_rejects_a_different_config() {
    let streams = two_users();
    let cfg = small_config();
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    run_stream::<f64, _>(
        &model,
        &streams,
        &RunConfig {
            stop_after_period: Some(1),
            ..cfg.clone()
        },
        dir.path(),
    )
    .unwrap();
    let err = run_stream::<f64, _>(&model, &streams, &RunConfig { lambda: 0.9, ..cfg }, dir.path()).unwrap_err();
    assert!(err.to_string().contains("different configuration"));
}

#[test]
fn users_do_not_share_state() {
    let streams = two_users();
    let cfg = small_config();
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    run_stream::<f64, _>(&model, &streams, &cfg, dir.path().join("both")).unwrap();
    run_stream::<f64, _>(&model, &streams[..1], &cfg, dir.path().join("alone")).unwrap();
    let both = RunLayout::new(dir.path().join("both"));
    let alone = RunLayout::new(dir.path().join("alone"));
    for t in 0..5 {
        let a = std::fs::read(both.state("alice", t)).unwrap();
        let b = std::fs::read(alone.state("alice", t)).unwrap();
        assert_eq!(a, b, "period {t}");
    }
}

#[test]
fn failing_user_is_isolated() {
    let mut streams = two_users();
    // too short to fill five periods
    streams.push(single_topic_user("carol", 3, Lexicon::A, 9));
    let cfg = small_config();
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = run_stream::<f64, _>(&model, &streams, &cfg, dir.path()).unwrap();
    assert!(out.failures.contains_key("carol"));
    assert!(!out.all_failed());
    assert_eq!(out.report.cells.len(), 8);
}

#[test]
fn sweeps_produce_one_report_per_value() {
    let streams = two_users();
    let cfg = RunConfig {
        max_tokens: 15,
        ..small_config()
    };
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    for (axis, n) in [
        (SweepAxis::Lambda, 6),
        (SweepAxis::SelectionMode, 4),
        (SweepAxis::RetentionPolicy, 4),
        (SweepAxis::Gating, 2),
    ] {
        let values = axis.default_values();
        let out_dir = dir.path().join(axis.name());
        let results = sweep::<f64, _>(&model, &streams, &cfg, axis, &values, &out_dir).unwrap();
        assert_eq!(results.len(), n);
        assert!(results.iter().all(|r| r.report.cells.len() == 8));
        let summary = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + n * 5);
    }
}

#[test]
fn lambda_one_and_zero_bracket_the_sweep() {
    let streams = two_users();
    let cfg = small_config();
    let model = model_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<String> = ["0", "1.0"].iter().map(|s| s.to_string()).collect();
    let r = sweep::<f64, _>(&model, &streams, &cfg, SweepAxis::Lambda, &values, dir.path()).unwrap();
    assert_ne!(r[0].report, r[1].report);
}

// ---------------------------------------------------------------------------
// remote backend

fn remote_equals_native<Tr: driftmem::lm::Transport>(native: &NgramBackend<f64>, remote: &RemoteBackend<f64, Tr>) {
    let items = single_topic_user("u", 6, Lexicon::A, 10).interactions;
    let samples: Vec<(&str, &str)> = items.iter().map(|i| (i.query.as_str(), i.response.as_str())).collect();
    let na = native.adapt(&native.fresh_adapter(), &samples, 1.0).unwrap();
    let ra = remote.adapt(&remote.fresh_adapter(), &samples, 1.0).unwrap();
    for it in &items {
        let n = native.log_likelihood(Some(&na), &it.query, &it.response).unwrap();
        let r = remote.log_likelihood(Some(&ra), &it.query, &it.response).unwrap();
        assert_eq!(n.token_count, r.token_count);
        assert!((n.total_logprob - r.total_logprob).abs() < 1e-9);
    }
    let cfg = DecodeConfig {
        max_tokens: 20,
        ..Default::default()
    };
    let q = &items[0].query;
    let c_ret = driftmem::retrieval::render_exemplar(driftmem::retrieval::EXEMPLAR_TEMPLATE, &items[1].query, &items[1].response);
    let dn = decode::<f64, _>(native, &na, q, &c_ret, &cfg).unwrap();
    let dr = decode::<f64, _>(remote, &ra, q, &c_ret, &cfg).unwrap();
    assert_eq!(dn.tokens, dr.tokens);
}

#[test]
fn in_process_remote_matches_native() {
    let cfg = small_config();
    let native = model_for(&cfg);
    let vocab = native.vocab().clone();
    let remote = RemoteBackend::new(LocalTransport::new(model_for(&cfg)), vocab, None);
    remote_equals_native(&native, &remote);
}

#[test]
fn remote_run_matches_native_run() {
    let streams = two_users();
    let cfg = RunConfig {
        max_tokens: 15,
        ..small_config()
    };
    let native = model_for(&cfg);
    let remote = RemoteBackend::new(LocalTransport::new(model_for(&cfg)), native.vocab().clone(), None);
    let dir = tempfile::tempdir().unwrap();
    let a = run_stream::<f64, _>(&native, &streams, &cfg, dir.path().join("n")).unwrap();
    let b = run_stream::<f64, _>(&remote, &streams, &cfg, dir.path().join("r")).unwrap();
    for (k, s) in &a.report.cells {
        let t = &b.report.cells[k];
        assert!((s.rl_f1 - t.rl_f1).abs() < 1e-9, "{k:?}");
    }
}

/// Minimal HTTP/1.1 server answering from an in-process transport.
fn serve(transport: Arc<LocalTransport<f64, NgramBackend<f64>>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let transport = Arc::clone(&transport);
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut out = stream;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                    let mut len = 0;
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        if h.trim().is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                len = v.trim().parse().unwrap();
                            }
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let value: serde_json::Value = serde_json::from_slice(&body).unwrap();
                    let (status, reply) = match transport.handle(&path, value) {
                        Ok(v) => ("200 OK", v.to_string()),
                        Err(e) => ("400 Bad Request", serde_json::json!({ "error": e.to_string() }).to_string()),
                    };
                    let head = format!(
                        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
                        reply.len()
                    );
                    if out.write_all(head.as_bytes()).and_then(|_| out.write_all(reply.as_bytes())).is_err() {
                        return;
                    }
                }
            });
        }
    });
    format!("http://{addr}")
}

#[test]
fn http_remote_matches_native() {
    let cfg = small_config();
    let native = model_for(&cfg);
    let url = serve(Arc::new(LocalTransport::new(model_for(&cfg))));
    let transport = HttpTransport::new(url, Duration::from_secs(30)).unwrap();
    let remote = RemoteBackend::new(transport, native.vocab().clone(), None);
    remote_equals_native(&native, &remote);

    let unknown = driftmem::lm::RemoteAdapter {
        adapter_id: Some("missing".into()),
        generation_period: Some(0),
    };
    let err = remote.log_likelihood(Some(&unknown), "q", "the river").unwrap_err();
    assert!(err.to_string().contains("HTTP 400"));
}

// ---------------------------------------------------------------------------
// decoding synchronization

/// Wraps a backend and records every next-token request.
struct Recording<M> {
    inner: M,
    calls: Mutex<Vec<(String, Vec<TokenId>)>>,
}

impl<M: LanguageModel<f64>> LanguageModel<f64> for Recording<M> {
    type Adapter = M::Adapter;
    type Context = (String, M::Context);

    fn vocab(&self) -> &Vocab {
        self.inner.vocab()
    }

    fn fresh_adapter(&self) -> M::Adapter {
        self.inner.fresh_adapter()
    }

    fn encode_context(&self, text: &str) -> Self::Context {
        (text.to_string(), self.inner.encode_context(text))
    }

    fn log_likelihood(&self, adapter: Option<&M::Adapter>, context: &str, response: &str) -> Result<LogLik<f64>> {
        self.inner.log_likelihood(adapter, context, response)
    }

    fn next_token_dist(
        &self,
        adapter: Option<&M::Adapter>,
        context: &Self::Context,
        prefix: &[TokenId],
    ) -> Result<TokenDistribution<f64>> {
        self.calls.lock().unwrap().push((context.0.clone(), prefix.to_vec()));
        self.inner.next_token_dist(adapter, &context.1, prefix)
    }

    fn adapt(&self, adapter: &M::Adapter, samples: &[(&str, &str)], weight: f64) -> Result<M::Adapter> {
        self.inner.adapt(adapter, samples, weight)
    }
}

#[test]
fn both_paths_see_the_same_prefix_each_step() {
    let cfg = small_config();
    let model = Recording {
        inner: model_for(&cfg),
        calls: Mutex::new(Vec::new()),
    };
    let adapter = model.fresh_adapter();
    let c_ret = "Example:\nQuery: describe the lake\nResponse: morning fog settles over the lake\n\n";
    let query = "describe the river and lake scene at dawn";
    let out = decode::<f64, _>(&model, &adapter, query, c_ret, &DecodeConfig { max_tokens: 12, ..Default::default() }).unwrap();
    let calls = model.calls.lock().unwrap();
    assert_eq!(calls.len(), 2 * out.trace.len());
    for (step, pair) in calls.chunks(2).enumerate() {
        assert_eq!(pair[0].0, query);
        assert_eq!(pair[1].0, format!("{c_ret}{query}"));
        assert_eq!(pair[0].1, pair[1].1);
        assert_eq!(pair[0].1, out.tokens[..step]);
    }
}

#[test]
fn parametric_only_decoding_queries_one_path() {
    let cfg = small_config();
    let model = Recording {
        inner: model_for(&cfg),
        calls: Mutex::new(Vec::new()),
    };
    let adapter = model.fresh_adapter();
    let out = decode::<f64, _>(&model, &adapter, "explain the valve", "", &DecodeConfig { max_tokens: 8, ..Default::default() }).unwrap();
    assert_eq!(model.calls.lock().unwrap().len(), out.trace.len());
}

//! The chat-completions client against a scripted in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use erl_core::env::{run_episode, Attempt, EnvInstance, Environment};
use erl_core::policy::{
    Conditioning, Context, PolicyError, RemoteClient, RemoteConfig, RetryPolicy, SamplingParams,
};
use erl_core::qa::{self, QaEnv};
use erl_core::trainer::{erl_iteration, Learner, MemoryState, TrainerConfig};
use erl_core::Policy;

struct Reply {
    status: u16,
    body: String,
    headers: Vec<(&'static str, String)>,
}

impl Reply {
    fn ok(body: Value) -> Self {
        Reply { status: 200, body: body.to_string(), headers: Vec::new() }
    }
}

/// Serves every connection with `respond(index, request_json)` and records
/// the request bodies.
fn serve<F>(respond: F) -> (String, Arc<Mutex<Vec<Value>>>)
where
    F: Fn(usize, &Value) -> Reply + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line.trim_end().to_string());
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let mut request: Value = serde_json::from_slice(&body).unwrap();
            request["_authorization"] = json!(auth);
            let reply = respond(i, &request);
            log.lock().unwrap().push(request);
            let mut head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                reply.status,
                reply.body.len()
            );
            for (k, v) in &reply.headers {
                head.push_str(&format!("{k}: {v}\r\n"));
            }
            head.push_str("\r\n");
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.body.as_bytes());
        }
    });
    (url, seen)
}

fn config(endpoint: String) -> RemoteConfig {
    RemoteConfig {
        endpoint,
        api_key: Some("secret-token".into()),
        retry: RetryPolicy {
            max_retries: 2,
            initial_backoff: Duration::from_millis(5),
            max_backoff: Duration::from_millis(20),
            multiplier: 2.0,
        },
        ..RemoteConfig::default()
    }
}

fn text_reply(content: &str) -> Value {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })
}

fn qa_setup() -> (QaEnv, EnvInstance, String) {
    let record = qa::bundled_records().into_iter().next().unwrap();
    let gold = record.gold_answer.clone();
    (QaEnv::new(Arc::new(qa::bundled_index())), record.into_instance(1), gold)
}

fn first_turn(env: &QaEnv, instance: &EnvInstance, client: &RemoteClient) -> Result<erl_core::Completion, PolicyError> {
    let cond = Conditioning::plain();
    let ep = env.start(instance).unwrap();
    let obs = ep.observation();
    let tools = env.tools();
    let ctx = Context {
        system: env.system_prompt(),
        conditioning: &cond,
        history: &[],
        observation: &obs,
        action_space: env.action_space(),
        tools: tools.as_ref(),
    };
    client.generate(&ctx, &SamplingParams::validation(), &mut ChaCha8Rng::seed_from_u64(0))
}

#[test]
fn rate_limit_then_success() {
    let (url, seen) = serve(|i, _| {
        if i == 0 {
            Reply { status: 429, body: "{}".into(), headers: vec![("Retry-After", "0".into())] }
        } else {
            Reply::ok(json!({
                "choices": [{
                    "message": { "role": "assistant", "content": "\\boxed{Oxford}" },
                    "logprobs": { "content": [
                        { "token": "\\boxed{", "logprob": -0.1 },
                        { "token": "Oxford", "logprob": -0.7 },
                        { "token": "}", "logprob": 0.0 }
                    ] }
                }]
            }))
        }
    });
    let (env, instance, _) = qa_setup();
    let client = RemoteClient::new(config(url)).unwrap();
    let c = first_turn(&env, &instance, &client).unwrap();
    assert_eq!(c.text, "\\boxed{Oxford}");
    assert_eq!(c.logprobs, Some(vec![-0.1, -0.7, 0.0]));
    assert_eq!(c.tokens.len(), 3);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2, "one retry after the 429");
    let req = &seen[1];
    assert_eq!(req["_authorization"], "authorization: Bearer secret-token");
    assert_eq!(req["model"], "default");
    assert_eq!((req["temperature"].as_f64(), req["top_p"].as_f64()), (Some(0.7), Some(0.8)));
    assert_eq!((req["top_k"].as_u64(), req["max_tokens"].as_u64()), (Some(20), Some(8196)));
    assert_eq!(req["logprobs"], true);
    let roles: Vec<&str> = req["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user"]);
    assert_eq!(req["tools"][0]["function"]["name"], qa::TOOL_NAME);
}

#[test]
fn missing_logprobs_are_absent() {
    let (url, _) = serve(|_, _| Reply::ok(text_reply("\\boxed{x}")));
    let (env, instance, _) = qa_setup();
    let c = first_turn(&env, &instance, &RemoteClient::new(config(url)).unwrap()).unwrap();
    assert_eq!(c.logprobs, None);
    assert!(c.tokens.is_empty());
}

#[test]
fn persistent_errors_exhaust_the_retry_budget() {
    let (url, seen) = serve(|_, _| Reply { status: 503, body: "overloaded".into(), headers: Vec::new() });
    let (env, instance, _) = qa_setup();
    let err = first_turn(&env, &instance, &RemoteClient::new(config(url)).unwrap()).unwrap_err();
    assert!(matches!(err, PolicyError::Exhausted { attempts: 3, .. }), "{err:?}");
    assert!(err.is_retryable());
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_share_the_retry_cap() {
    let (url, seen) = serve(|_, _| Reply { status: 400, body: "bad".into(), headers: Vec::new() });
    let (env, instance, _) = qa_setup();
    let err = first_turn(&env, &instance, &RemoteClient::new(config(url)).unwrap()).unwrap_err();
    // Every non-2xx status is retried up to the cap.
    assert!(matches!(err, PolicyError::Exhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn qa_episode_with_native_tool_call() {
    let (env, instance, gold) = qa_setup();
    let answer = gold.clone();
    let (url, seen) = serve(move |i, _| {
        if i == 0 {
            Reply::ok(json!({
                "choices": [{ "message": {
                    "role": "assistant",
                    "content": null,
                    "tool_calls": [{
                        "id": "call-1",
                        "type": "function",
                        "function": { "name": "local_search", "arguments": "{\"query\": \"Hobbit author university\"}" }
                    }]
                } }]
            }))
        } else {
            Reply::ok(text_reply(&format!("\\boxed{{{answer}}}")))
        }
    });
    let client = RemoteClient::new(config(url)).unwrap();
    let trace = run_episode(
        &env,
        &instance,
        &client,
        &Conditioning::plain(),
        &SamplingParams::validation(),
        env.budget(),
        Attempt::First,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(trace.steps.len(), 2);
    assert_eq!(trace.steps[0].feedback, qa::SEARCH_FEEDBACK);
    assert_eq!(trace.final_reward, 1.0);
    let second = &seen.lock().unwrap()[1];
    let roles: Vec<&str> = second["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user", "assistant", "tool"]);
    assert!(second["messages"][3]["content"].as_str().unwrap().contains("Oxford"));
}

#[test]
fn erl_iteration_runs_rollout_only_against_the_endpoint() {
    let (url, seen) = serve(|_, req| {
        // Only attempt turns offer the search tool.
        if req.get("tools").is_none() {
            Reply::ok(text_reply("Search for the author first, then the university."))
        } else {
            Reply::ok(text_reply("\\boxed{Cambridge}"))
        }
    });
    let (env, instance, _) = qa_setup();
    let config_t = TrainerConfig::default();
    let mut learner = Learner::RolloutOnly(Box::new(RemoteClient::new(config(url)).unwrap()));
    let mut memory = MemoryState::default();
    let report = erl_iteration(&config_t, &mut learner, &env, &[instance], &mut memory, 1, 0).unwrap();
    let k = config_t.rollouts_erl_per_attempt;
    assert_eq!(report.attempt1_reward, 0.0);
    assert_eq!(report.counters.reflections, k);
    assert_eq!(report.counters.second_attempts, k);
    assert!(memory.is_empty());
    // k first attempts, k reflections, k second attempts, one turn each.
    assert_eq!(seen.lock().unwrap().len(), 3 * k);
}

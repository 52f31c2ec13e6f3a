// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use talo_core::protocol::{
    decode_message, encode_message, evaluate_remote, BuiltinService, EvalRequest, ItemMode, ItemRef,
    Message, TcpServer,
};
use talo_core::{
    build_toy_model, plant_interference, Endpoint, EvalOracle, InterventionSpec, LocalOracle, McqItem,
    ModelConfig, RemoteOracle, TaskSuite,
};

fn fixture() -> (talo_core::LayerStackModel, TaskSuite) {
    let planted = plant_interference(ModelConfig::default(), 40, 21).unwrap();
    (planted.model, planted.suite)
}

fn start(model: talo_core::LayerStackModel, suite: &TaskSuite) -> Endpoint {
    let server = TcpServer::bind(BuiltinService::new(model, std::slice::from_ref(suite)), "127.0.0.1:0").unwrap();
    let endpoint = server.endpoint().unwrap();
    server.spawn();
    endpoint
}

struct RawClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl RawClient {
    fn connect(endpoint: &Endpoint) -> (Self, Message) {
        let Endpoint::Tcp(addr) = endpoint else { panic!("tcp endpoint expected") };
        let stream = TcpStream::connect(addr).unwrap();
        let mut client = Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        };
        let hello = client.read();
        (client, hello)
    }

    fn send_line(&mut self, line: &[u8]) -> Message {
        self.writer.write_all(line).unwrap();
        self.read()
    }

    fn read(&mut self) -> Message {
        let mut line = Vec::new();
        self.reader.read_until(b'\n', &mut line).unwrap();
        decode_message(&line).unwrap()
    }

    fn eval(&mut self, request_id: u64, interventions: &[&str], items: &[McqItem]) -> Message {
        let request = EvalRequest {
            request_id,
            interventions: interventions.iter().map(|s| s.to_string()).collect(),
            items: items.iter().cloned().map(ItemRef::Inline).collect(),
        };
        self.send_line(&encode_message(&Message::Eval(request)))
    }
}

#[test]
fn hello_reports_layer_count() {
    let (model, suite) = fixture();
    let endpoint = start(model, &suite);
    let (_, hello) = RawClient::connect(&endpoint);
    match hello {
        Message::Hello(h) => {
            assert_eq!(h.layers, 6);
            assert!(h.model.starts_with("builtin:L=6"), "{}", h.model);
        }
        other => panic!("expected hello, got {other:?}"),
    }
}

#[test]
fn server_is_stateless_across_interventions() {
    let (model, suite) = fixture();
    let endpoint = start(model, &suite);
    let items = &suite.items[..20];

    let (mut fresh, _) = RawClient::connect(&endpoint);
    let Message::Result(reference) = fresh.eval(1, &[], items) else { panic!("base request failed") };

    let (mut client, _) = RawClient::connect(&endpoint);
    let Message::Result(zeroed) = client.eval(1, &["zero:attn:2"], items) else { panic!("zero request failed") };
    let Message::Result(after) = client.eval(2, &[], items) else { panic!("base request failed") };
    assert_eq!(after.per_item, reference.per_item);
    assert_eq!(after.correct, reference.correct);
    assert_eq!(zeroed.total, 20);
}

#[test]
fn unknown_intervention_gets_structured_error() {
    let (model, suite) = fixture();
    let endpoint = start(model, &suite);
    let (mut client, _) = RawClient::connect(&endpoint);
    match client.eval(5, &["foo:bar:1"], &suite.items[..2]) {
        Message::Error(e) => {
            assert_eq!(e.request_id, Some(5));
            assert!(e.message.contains("foo"), "{}", e.message);
        }
        other => panic!("expected error, got {other:?}"),
    }
    // the connection stays usable
    assert!(matches!(client.eval(6, &[], &suite.items[..2]), Message::Result(_)));
}

#[test]
fn malformed_and_duplicate_requests_are_rejected() {
    let (model, suite) = fixture();
    let endpoint = start(model, &suite);
    let (mut client, _) = RawClient::connect(&endpoint);
    assert!(matches!(client.send_line(b"{\"version\":1,\"type\":\"eval\"\n"), Message::Error(_)));
    assert!(matches!(client.eval(9, &[], &suite.items[..1]), Message::Result(_)));
    match client.eval(9, &[], &suite.items[..1]) {
        Message::Error(e) => assert!(e.message.contains("duplicate"), "{}", e.message),
        other => panic!("expected duplicate-id error, got {other:?}"),
    }
}

#[test]
fn unknown_fields_are_tolerated_on_the_wire() {
    let (model, suite) = fixture();
    let endpoint = start(model, &suite);
    let (mut client, _) = RawClient::connect(&endpoint);
    let line = format!(
        "{{\"version\":1,\"type\":\"eval\",\"trace\":\"x\",\"payload\":{{\"request_id\":3,\"priority\":9,\"items\":[{{\"id\":\"{}\"}}]}}}}\n",
        suite.items[0].id
    );
    match client.send_line(line.as_bytes()) {
        Message::Result(r) => assert_eq!(r.total, 1),
        other => panic!("expected result, got {other:?}"),
    }
}

#[test]
fn remote_oracle_matches_local_in_both_item_modes() {
    let (model, suite) = fixture();
    let local = LocalOracle::new(model.clone());
    let endpoint = start(model, &suite);
    let specs = [InterventionSpec::zero_attention(1), InterventionSpec::zero_attention(4)];
    for mode in [ItemMode::Inline, ItemMode::ById] {
        let remote = RemoteOracle::connect(&endpoint).unwrap().with_item_mode(mode);
        assert_eq!(remote.num_layers(), 6);
        for specs in [&specs[..0], &specs[..1], &specs[..]] {
            assert_eq!(
                remote.evaluate(specs, &suite.items).unwrap(),
                local.evaluate(specs, &suite.items).unwrap()
            );
        }
    }
}

#[test]
fn evaluate_remote_reports_accuracy_and_rejects_empty_items() {
    let (model, suite) = fixture();
    let local = LocalOracle::new(model.clone());
    let endpoint = start(model, &suite);
    let specs = [InterventionSpec::zero_attention(3)];
    let (score, per_item) = evaluate_remote(&endpoint, &specs, &suite.items).unwrap();
    assert_eq!(score, local.score(&specs, &suite.items).unwrap());
    assert_eq!(per_item.len(), suite.len());
    assert!(evaluate_remote(&endpoint, &specs, &[]).is_err());
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    assert!(RemoteOracle::connect(&Endpoint::Tcp(addr.to_string())).is_err());
}

#[test]
fn item_ids_unknown_to_the_server_fail() {
    let model = build_toy_model(ModelConfig::default()).unwrap();
    let (_, suite) = fixture();
    let endpoint = start(model, &suite);
    let remote = RemoteOracle::connect(&endpoint).unwrap().with_item_mode(ItemMode::ById);
    let stranger = McqItem {
        id: "not-served".into(),
        prompt_tokens: vec![1, 2],
        options: vec![3, 4],
        answer_index: 0,
    };
    assert!(remote.evaluate(&[], &[stranger]).is_err());
}

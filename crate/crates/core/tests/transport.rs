use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use qmfa::authdb::{AuthDatabase, SharedAuthDb};
use qmfa::protocol::{
    AbortReason, ClientOutcome, FailureReason, HonestClient, Message, ServerConfig, ServerMachine,
    Verdict,
};
use qmfa::rng::stream_rng;
use qmfa::token::QuantumToken;
use qmfa::transport::{
    connect, run_handshake, serve, Direction, InProcessChannel, ServiceConfig, ServiceHandle,
};

const WAIT: Duration = Duration::from_secs(10);

fn issue(db: &mut AuthDatabase, k: usize, identity: &str, seed: u64) -> QuantumToken {
    db.issue(k, identity, &mut stream_rng(seed, 0)).unwrap().0
}

fn start(db: SharedAuthDb, config: ServiceConfig) -> ServiceHandle {
    serve("127.0.0.1:0", db, config).expect("bind loopback")
}

fn raw_exchange(handle: &ServiceHandle, lines: &[&str]) -> Vec<String> {
    let mut stream = TcpStream::connect(handle.local_addr()).unwrap();
    stream.set_read_timeout(Some(WAIT)).unwrap();
    for line in lines {
        stream.write_all(line.as_bytes()).unwrap();
        stream.write_all(b"\n").unwrap();
    }
    BufReader::new(stream)
        .lines()
        .map_while(Result::ok)
        .collect()
}

#[test]
fn concurrent_clients_with_distinct_tokens() {
    let mut db = AuthDatabase::new();
    let tokens: Vec<_> = (0..4)
        .map(|i| issue(&mut db, 24, &format!("user{i}"), 100 + i))
        .collect();
    let handle = start(
        SharedAuthDb::new(db),
        ServiceConfig::new(ServerConfig::new(6)),
    );
    let addr = handle.local_addr();

    let workers: Vec<_> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, mut token)| {
            thread::spawn(move || {
                let mut client =
                    HonestClient::new(&mut token, format!("user{i}"), stream_rng(7, i as u64));
                connect(addr)
                    .unwrap()
                    .run_client(&mut client)
                    .unwrap()
                    .outcome
            })
        })
        .collect();
    for w in workers {
        assert_eq!(w.join().unwrap(), ClientOutcome::Accepted);
    }
    let mut verdicts = Vec::new();
    while verdicts.len() < 4 {
        verdicts.push(handle.next_session(WAIT).expect("session logged").verdict);
    }
    assert!(verdicts.iter().all(Verdict::is_success));
    handle.shutdown();
}

#[test]
fn malformed_line_aborts_only_that_connection() {
    let mut db = AuthDatabase::new();
    let mut token = issue(&mut db, 12, "alice", 1);
    let handle = start(
        SharedAuthDb::new(db),
        ServiceConfig::new(ServerConfig::new(3)),
    );

    assert_eq!(
        raw_exchange(&handle, &["HELLO there"]),
        ["ABORT protocol-error"]
    );
    assert_eq!(
        raw_exchange(&handle, &["AUTH  alice x"]),
        ["ABORT protocol-error"]
    );
    let long = "A".repeat(70_000);
    assert_eq!(raw_exchange(&handle, &[&long]), ["ABORT protocol-error"]);

    let mut client = HonestClient::new(&mut token, "alice", stream_rng(2, 0));
    let report = connect(handle.local_addr())
        .unwrap()
        .run_client(&mut client)
        .unwrap();
    assert_eq!(report.outcome, ClientOutcome::Accepted);

    let reasons: Vec<_> = (0..4)
        .map(|_| handle.next_session(WAIT).unwrap().verdict)
        .collect();
    assert_eq!(
        reasons
            .iter()
            .filter(|v| **v == Verdict::Failure(FailureReason::ProtocolError))
            .count(),
        3
    );
    handle.shutdown();
}

#[test]
fn silent_client_times_out() {
    let config = ServerConfig::new(3).with_timeout(Duration::from_millis(200));
    let handle = start(
        SharedAuthDb::new(AuthDatabase::new()),
        ServiceConfig::new(config),
    );
    let stream = TcpStream::connect(handle.local_addr()).unwrap();
    stream.set_read_timeout(Some(WAIT)).unwrap();
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).unwrap();
    assert_eq!(line, "ABORT timeout\n");
    let log = handle.next_session(WAIT).unwrap();
    assert_eq!(log.verdict, Verdict::Failure(FailureReason::Timeout));
    handle.shutdown();
}

#[test]
fn closed_port_is_a_connection_error() {
    let port = {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().port()
    };
    assert!(connect(("127.0.0.1", port)).is_err());
}

#[test]
fn client_disconnect_mid_session_fails_server_side() {
    let mut db = AuthDatabase::new();
    let token = issue(&mut db, 12, "alice", 3);
    let handle = start(
        SharedAuthDb::new(db),
        ServiceConfig::new(ServerConfig::new(3)),
    );
    let lines = {
        let mut stream = TcpStream::connect(handle.local_addr()).unwrap();
        stream.set_read_timeout(Some(WAIT)).unwrap();
        writeln!(stream, "AUTH alice {}", token.token_id()).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        line
    };
    assert!(lines.starts_with("CHALLENGE "));
    let log = handle.next_session(WAIT).unwrap();
    assert_eq!(log.verdict, Verdict::Failure(FailureReason::Disconnected));
    handle.shutdown();
}

#[test]
fn server_disconnect_mid_session_fails_client_side() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut line = String::new();
        BufReader::new(stream).read_line(&mut line).unwrap();
        // drop without replying
    });
    let mut token = issue(&mut AuthDatabase::new(), 12, "alice", 4);
    let mut client = HonestClient::new(&mut token, "alice", stream_rng(4, 1));
    let report = connect(addr).unwrap().run_client(&mut client).unwrap();
    server.join().unwrap();
    assert_eq!(
        report.outcome,
        ClientOutcome::Aborted(AbortReason::ProtocolError)
    );
    assert_eq!(token.used_count(), 0);
}

#[test]
fn in_process_tap_sees_six_lines_matching_server_state() {
    let mut db = AuthDatabase::new();
    let mut token = issue(&mut db, 64, "alice", 5);
    let db = SharedAuthDb::new(db);
    let mut server = ServerMachine::new(db, ServerConfig::new(12), stream_rng(5, 1));
    let mut client = HonestClient::new(&mut token, "alice", stream_rng(5, 2));
    let mut channel = InProcessChannel::new();
    let tap = channel.tap();
    let report = run_handshake(&mut client, &mut server, &mut channel);
    assert!(report.accepted());

    let seen: Vec<_> = tap.try_iter().collect();
    assert_eq!(seen.len(), 6);
    assert_eq!(seen, report.transcript.entries());
    let challenge = seen
        .iter()
        .find_map(|e| match Message::parse(&e.line) {
            Ok(Message::Challenge(c)) => Some(c),
            _ => None,
        })
        .unwrap();
    assert_eq!(&challenge, report.session.unwrap().challenge());
}

#[test]
fn tap_does_not_change_delivery() {
    let run = |tapped: bool| {
        let mut db = AuthDatabase::new();
        let mut token = issue(&mut db, 30, "alice", 6);
        let mut server = ServerMachine::new(
            SharedAuthDb::new(db),
            ServerConfig::new(9),
            stream_rng(6, 1),
        );
        let mut client = HonestClient::new(&mut token, "alice", stream_rng(6, 2));
        let mut channel = InProcessChannel::new();
        let _tap = tapped.then(|| channel.tap());
        let report = run_handshake(&mut client, &mut server, &mut channel);
        (report.verdict, report.transcript.to_text())
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn socket_tap_records_both_directions() {
    let mut db = AuthDatabase::new();
    let mut token = issue(&mut db, 12, "alice", 8);
    let (tx, rx) = mpsc::channel();
    let mut config = ServiceConfig::new(ServerConfig::new(3));
    config.tap = Some(tx);
    let handle = start(SharedAuthDb::new(db), config);
    let mut client = HonestClient::new(&mut token, "alice", stream_rng(8, 1));
    let report = connect(handle.local_addr())
        .unwrap()
        .run_client(&mut client)
        .unwrap();
    handle.next_session(WAIT).unwrap();
    handle.shutdown();

    let tapped: Vec<_> = rx.try_iter().map(|(_, e)| e).collect();
    assert_eq!(tapped.len(), 6);
    for (server_side, client_side) in tapped.iter().zip(report.transcript.entries()) {
        assert_eq!(server_side.direction, client_side.direction);
        assert_eq!(server_side.line, client_side.line);
    }
    assert_eq!(tapped[0].direction, Direction::ClientToServer);
}

/// Same seeds over both carriers give the same bytes and the same verdict.
#[test]
fn transport_transparency() {
    for (k, t, seed) in [(12, 3, 20), (64, 12, 21), (30, 9, 22)] {
        let build = || {
            let mut db = AuthDatabase::new();
            let token = issue(&mut db, k, "alice", seed);
            (db, token)
        };

        let (db, mut token) = build();
        let mut server = ServerMachine::new(
            SharedAuthDb::new(db),
            ServerConfig::new(t),
            stream_rng(seed, 0),
        );
        let mut client = HonestClient::new(&mut token, "alice", stream_rng(seed, 99));
        let local = run_handshake(&mut client, &mut server, &mut InProcessChannel::new());

        let (db, mut token) = build();
        let shared = SharedAuthDb::new(db);
        let mut config = ServiceConfig::new(ServerConfig::new(t));
        config.seed = Some(seed);
        let handle = start(shared.clone(), config);
        let mut client = HonestClient::new(&mut token, "alice", stream_rng(seed, 99));
        let remote = connect(handle.local_addr())
            .unwrap()
            .run_client(&mut client)
            .unwrap();
        let log = handle.next_session(WAIT).unwrap();
        handle.shutdown();

        assert_eq!(local.transcript.to_text(), remote.transcript.to_text());
        assert_eq!(local.verdict, log.verdict);
        assert_eq!(local.client, remote.outcome);
    }
}

#[test]
fn shutdown_closes_idle_connections() {
    let handle = start(
        SharedAuthDb::new(AuthDatabase::new()),
        ServiceConfig::new(ServerConfig::new(3)),
    );
    let _idle = TcpStream::connect(handle.local_addr()).unwrap();
    thread::sleep(Duration::from_millis(50));
    let started = std::time::Instant::now();
    handle.shutdown();
    assert!(started.elapsed() < Duration::from_secs(5));
}

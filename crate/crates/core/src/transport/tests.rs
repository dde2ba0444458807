use std::time::Duration;

use proptest::prelude::*;

use super::*;

const CAP: u64 = 8 << 20;

fn loopback() -> Transport {
    Transport::new(Backend::Loopback, TransportConfig::default())
}

struct Pair {
    client: Worker,
    client_ep: Endpoint,
    listener: Worker,
    server: Worker,
    server_ep: Endpoint,
}

fn connect_pair(transport: &Transport, addr: &str, client_cap: u64, server_cap: u64) -> Pair {
    let mut listener = transport.create_worker().unwrap();
    let bound = listener.listen(addr).unwrap();
    let mut client = transport.create_worker().unwrap();
    let client_ep = client.connect_endpoint(&bound, client_cap).unwrap();
    let mut server = transport.create_worker().unwrap();
    let mut server_ep = None;
    for _ in 0..10_000 {
        client.progress().unwrap();
        listener.progress().unwrap();
        if server_ep.is_none() {
            if let Some(inc) = listener.accept_pending().unwrap() {
                server_ep = Some(server.adopt(inc, server_cap));
            }
        }
        server.progress().unwrap();
        if client.state(client_ep).unwrap() == EndpointState::Established {
            break;
        }
        std::thread::yield_now();
    }
    assert_eq!(client.state(client_ep).unwrap(), EndpointState::Established);
    Pair {
        client,
        client_ep,
        listener,
        server,
        server_ep: server_ep.unwrap(),
    }
}

fn drain(worker: &mut Worker, ep: Endpoint) -> Vec<u8> {
    let mut out = Vec::new();
    while let Some(seg) = worker.recv(ep).unwrap() {
        out.extend_from_slice(&seg);
    }
    out
}

#[test]
fn idle_worker_has_no_events() {
    let t = loopback();
    let mut w = t.create_worker().unwrap();
    assert_eq!(w.progress().unwrap(), 0);
    assert_eq!(t.live_workers(), 1);
    drop(w);
    assert_eq!(t.live_workers(), 0);
}

#[test]
fn backend_names() {
    assert!(matches!(
        Transport::from_name("verbs", TransportConfig::default()),
        Err(TransportError::UnknownBackend(_))
    ));
    let t = Transport::from_name("stream", TransportConfig::default()).unwrap();
    let mut w = t.create_worker().unwrap();
    assert_eq!(w.progress().unwrap(), 0);
}

#[test]
fn loopback_handshake_completes_within_three_cycles() {
    let t = loopback();
    let mut listener = t.create_worker().unwrap();
    listener.listen("svc").unwrap();
    let mut client = t.create_worker().unwrap();
    let ep = client.connect_endpoint("svc", CAP).unwrap();
    let mut server = t.create_worker().unwrap();
    let mut cycles = 0;
    while client.state(ep).unwrap() != EndpointState::Established {
        cycles += 1;
        assert!(cycles <= 3, "handshake needs more than 3 cycles");
        client.progress().unwrap();
        listener.progress().unwrap();
        if let Some(inc) = listener.accept_pending().unwrap() {
            server.adopt(inc, CAP);
        }
        server.progress().unwrap();
    }
    assert_eq!(cycles, 2);
}

#[test]
fn handshake_times_out_without_listener() {
    let t = Transport::new(
        Backend::Loopback,
        TransportConfig {
            handshake_timeout: Duration::from_millis(20),
            ..TransportConfig::default()
        },
    );
    let mut client = t.create_worker().unwrap();
    let ep = client.connect_endpoint("nobody", CAP).unwrap();
    let start = Instant::now();
    while client.state(ep).unwrap() == EndpointState::Handshaking {
        client.progress().unwrap();
        assert!(start.elapsed() < Duration::from_secs(5));
    }
    assert!(matches!(
        client.take_failure(ep).unwrap(),
        Some(TransportError::HandshakeTimeout(_))
    ));
}

#[test]
fn concurrent_connects_get_distinct_ids() {
    let t = loopback();
    let mut listener = t.create_worker().unwrap();
    listener.listen("svc").unwrap();
    let mut c1 = t.create_worker().unwrap();
    let mut c2 = t.create_worker().unwrap();
    let e1 = c1.connect_endpoint("svc", CAP).unwrap();
    let e2 = c2.connect_endpoint("svc", CAP).unwrap();
    c1.progress().unwrap();
    c2.progress().unwrap();
    let mut servers = Vec::new();
    for _ in 0..4 {
        listener.progress().unwrap();
        while let Some(inc) = listener.accept_pending().unwrap() {
            let mut w = t.create_worker().unwrap();
            w.adopt(inc, CAP);
            w.progress().unwrap();
            servers.push(w);
        }
    }
    c1.progress().unwrap();
    c2.progress().unwrap();
    let id1 = c1.endpoint_info(e1).unwrap().connection_id;
    let id2 = c2.endpoint_info(e2).unwrap().connection_id;
    assert_eq!(servers.len(), 2);
    assert_ne!(id1, id2);
}

#[test]
fn send_completes_only_after_progress() {
    let t = loopback();
    let mut p = connect_pair(&t, "svc", CAP, CAP);
    let payload: Vec<u8> = (0..1024u32).map(|i| (i % 251) as u8).collect();
    let handle = p.server.send(p.server_ep, &payload).unwrap();
    assert!(!p.server.is_complete(&handle));
    assert_eq!(p.client.progress().unwrap(), 0, "no progress, no traffic");
    assert!(p.server.progress().unwrap() >= 1);
    assert!(p.server.is_complete(&handle));
    assert!(p.client.progress().unwrap() >= 1);
    assert_eq!(drain(&mut p.client, p.client_ep), payload);
    drop(p.listener);
}

#[test]
fn send_bounds_and_credit() {
    let t = loopback();
    let mut p = connect_pair(&t, "svc", 0, CAP);
    let slice = t.config().slice_length;
    assert!(matches!(
        p.client.send(p.client_ep, &vec![0; slice + 1]),
        Err(TransportError::InvalidLength { .. })
    ));
    assert!(matches!(
        p.client.send(p.client_ep, &[]),
        Err(TransportError::InvalidLength { .. })
    ));
    // The client announced no receive capacity, so the server has no credit.
    assert!(matches!(
        p.server.send(p.server_ep, b"x"),
        Err(TransportError::WouldBlock)
    ));
    let foreign = Tag::new(999, Direction::ToServer, MessageKind::Data, 0);
    assert!(matches!(
        p.client.send_tagged(p.client_ep, foreign, b"x"),
        Err(TransportError::InvalidTag(_))
    ));
    let fin = Tag::new(
        p.client.endpoint_info(p.client_ep).unwrap().connection_id,
        Direction::ToServer,
        MessageKind::Fin,
        0,
    );
    assert!(matches!(
        p.client.send_tagged(p.client_ep, fin, b"x"),
        Err(TransportError::InvalidTag(_))
    ));
}

#[test]
fn credit_returns_after_a_quarter_is_consumed() {
    let t = loopback();
    let cap = 4096u64;
    let mut p = connect_pair(&t, "svc", CAP, cap);
    assert_eq!(p.client.available_credit(p.client_ep).unwrap(), cap);
    for _ in 0..4 {
        p.client.send(p.client_ep, &[1; 1024]).unwrap();
    }
    assert!(matches!(
        p.client.send(p.client_ep, &[1]),
        Err(TransportError::WouldBlock)
    ));
    for _ in 0..8 {
        p.client.progress().unwrap();
        p.server.progress().unwrap();
    }
    let seg = p.server.recv(p.server_ep).unwrap().unwrap();
    p.server.consume(p.server_ep, seg.len() - 1).unwrap();
    p.server.progress().unwrap();
    p.client.progress().unwrap();
    assert_eq!(p.client.available_credit(p.client_ep).unwrap(), 0);
    p.server.consume(p.server_ep, 1).unwrap();
    for _ in 0..2 {
        p.server.progress().unwrap();
        p.client.progress().unwrap();
    }
    assert_eq!(p.client.available_credit(p.client_ep).unwrap(), 1024);
}

#[test]
fn fin_marks_end_of_stream() {
    let t = loopback();
    let mut p = connect_pair(&t, "svc", CAP, CAP);
    p.client.close_endpoint(p.client_ep, CloseMode::Graceful).unwrap();
    assert!(!p.server.is_end_of_stream(p.server_ep).unwrap());
    assert_eq!(p.server.progress().unwrap(), 1);
    assert!(p.server.is_end_of_stream(p.server_ep).unwrap());
}

#[test]
fn graceful_close_drains_pending_sends() {
    let t = loopback();
    let mut p = connect_pair(&t, "svc", CAP, CAP);
    for i in 0..3u8 {
        p.client.send(p.client_ep, &[i; 8]).unwrap();
    }
    p.client.close_endpoint(p.client_ep, CloseMode::Graceful).unwrap();
    for _ in 0..4 {
        p.server.progress().unwrap();
    }
    assert_eq!(
        drain(&mut p.server, p.server_ep),
        [[0u8; 8], [1; 8], [2; 8]].concat()
    );
    assert!(p.server.is_end_of_stream(p.server_ep).unwrap());
}

#[test]
fn abort_close_signals_end_of_stream() {
    let t = loopback();
    let mut p = connect_pair(&t, "svc", CAP, CAP);
    p.client.send(p.client_ep, b"lost").unwrap();
    p.client.close_endpoint(p.client_ep, CloseMode::Abort).unwrap();
    p.server.progress().unwrap();
    assert!(p.server.is_end_of_stream(p.server_ep).unwrap());
    // second close is a no-op
    p.client.close_endpoint(p.client_ep, CloseMode::Abort).unwrap();
    p.client.close_endpoint(p.client_ep, CloseMode::Graceful).unwrap();
    assert_eq!(p.client.state(p.client_ep).unwrap(), EndpointState::Closed);
}

#[test]
fn dropped_peer_reads_as_end_of_stream() {
    let t = loopback();
    let mut p = connect_pair(&t, "svc", CAP, CAP);
    drop(p.client);
    p.server.progress().unwrap();
    assert!(p.server.is_end_of_stream(p.server_ep).unwrap());
}

#[test]
fn listener_address_in_use() {
    let t = loopback();
    let mut a = t.create_worker().unwrap();
    let mut b = t.create_worker().unwrap();
    a.listen("svc").unwrap();
    assert!(matches!(b.listen("svc"), Err(TransportError::AddressInUse(_))));
    drop(a);
    b.listen("svc").unwrap();
}

#[test]
fn stream_backend_round_trip_and_close() {
    let t = Transport::new(Backend::Stream, TransportConfig::default());
    let mut p = connect_pair(&t, "127.0.0.1:0", CAP, CAP);
    let payload = vec![42u8; 10_000];
    p.client.send(p.client_ep, &payload).unwrap();
    let mut got = Vec::new();
    let start = Instant::now();
    while got.len() < payload.len() && start.elapsed() < Duration::from_secs(5) {
        p.client.progress().unwrap();
        p.server.progress().unwrap();
        got.extend(drain(&mut p.server, p.server_ep));
    }
    assert_eq!(got, payload);
    let info = p.server.endpoint_info(p.server_ep).unwrap();
    assert!(info.remote_addr.starts_with("127.0.0.1:"));
    p.client.close_endpoint(p.client_ep, CloseMode::Graceful).unwrap();
    while !p.server.is_end_of_stream(p.server_ep).unwrap() {
        p.server.progress().unwrap();
        assert!(start.elapsed() < Duration::from_secs(5));
    }
}

#[test]
fn stream_connect_refused() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let t = Transport::new(Backend::Stream, TransportConfig::default());
    let mut w = t.create_worker().unwrap();
    let ep = w.connect_endpoint(&format!("127.0.0.1:{port}"), CAP).unwrap();
    let start = Instant::now();
    while w.state(ep).unwrap() == EndpointState::Handshaking {
        w.progress().unwrap();
        assert!(start.elapsed() < Duration::from_secs(5));
    }
    assert!(matches!(
        w.take_failure(ep).unwrap(),
        Some(TransportError::ConnectionRefused { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn data_arrives_in_send_order(
        sizes in proptest::collection::vec(1usize..3000, 1..40),
        interleave in proptest::collection::vec(any::<bool>(), 1..200),
    ) {
        let t = loopback();
        let mut p = connect_pair(&t, "svc", CAP, 16 * 1024);
        let mut expected = Vec::new();
        let mut got = Vec::new();
        let mut queue: VecDeque<Vec<u8>> = sizes.iter().enumerate()
            .map(|(i, &n)| (0..n).map(|j| (i * 31 + j) as u8).collect())
            .collect();
        let mut step = 0usize;
        while !queue.is_empty() || got.len() < expected.len() {
            let send_turn = interleave[step % interleave.len()];
            step += 1;
            if send_turn {
                if let Some(msg) = queue.front() {
                    match p.client.send(p.client_ep, msg) {
                        Ok(_) => {
                            expected.extend_from_slice(msg);
                            queue.pop_front();
                        }
                        Err(TransportError::WouldBlock) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
            }
            let info = p.client.endpoint_info(p.client_ep).unwrap();
            prop_assert!(info.data_bytes_sent <= info.credit_limit);
            p.client.progress().unwrap();
            p.server.progress().unwrap();
            while let Some(seg) = p.server.recv(p.server_ep).unwrap() {
                p.server.consume(p.server_ep, seg.len()).unwrap();
                got.extend_from_slice(&seg);
            }
            prop_assert!(step < 1_000_000);
        }
        prop_assert_eq!(got, expected);
    }
}

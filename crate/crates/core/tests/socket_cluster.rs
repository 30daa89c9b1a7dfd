use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use entropy_core::codec::CodecParams;
use entropy_core::protocol::{ControlRequest, ControlResponse, Node, NodeConfig, OpResult};
use entropy_core::selection::{InMemoryRing, PeerInfo};
use entropy_core::transport::sim::cluster_keys;
use entropy_core::transport::socket::{control, Runtime, Shutdown};

#[test]
fn tcp_cluster_store_and_query() {
    let n = 30;
    let codec = CodecParams {
        k_inner: 4,
        r_group: 10,
        k_outer: 4,
        n_chunks: 6,
        ..CodecParams::default()
    };
    let keys = cluster_keys(n, 11);
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let addrs: Vec<_> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
    let ring = Arc::new(InMemoryRing::new(
        keys.iter()
            .zip(&addrs)
            .map(|(k, a)| PeerInfo::new(k.public(), a.to_string()))
            .collect(),
    ));
    let book: BTreeMap<_, _> = keys.iter().zip(&addrs).map(|(k, a)| (k.node_id(), *a)).collect();
    let ids: Vec<_> = keys.iter().map(|k| k.node_id()).collect();
    let cfg = NodeConfig::with_heartbeat(300, codec, n);
    let shutdown = Shutdown::new();
    let handles: Vec<_> = keys
        .into_iter()
        .zip(listeners)
        .map(|(k, l)| {
            let rt = Runtime::from_listener(Node::new(k, cfg.clone(), ring.clone()), l, book.clone());
            let stop = shutdown.clone();
            thread::spawn(move || rt.run(stop).unwrap())
        })
        .collect();

    let object: Vec<u8> = (0..100_000u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    let addr = addrs[0].to_string();
    let t = Duration::from_secs(60);
    let store = ControlRequest::Store {
        data: object.clone(),
        secret: b"k".to_vec(),
        expiration: 4_000_000_000,
    };
    let recipe = match control(&addr, ids[0], &store, t).unwrap() {
        ControlResponse::Done(OpResult::Stored(r)) => r,
        other => panic!("{other:?}"),
    };
    let addr = addrs[7].to_string();
    let query = ControlRequest::Query {
        recipe,
        secret: b"k".to_vec(),
    };
    match control(&addr, ids[7], &query, t).unwrap() {
        ControlResponse::Done(OpResult::Object(o)) => assert_eq!(o, object),
        other => panic!("{other:?}"),
    }
    shutdown.trigger();
    for h in handles {
        h.join().unwrap();
    }
}

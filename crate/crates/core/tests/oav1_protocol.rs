//! Loopback and golden-frame tests for the OAV1 client and server.
//!
//! Golden files hold the exact bytes each side sent during a scripted session.
//! Regenerate with `OAVCD_BLESS=1 cargo test -p oavcd --test oav1_protocol`.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use oavcd::providers::{
    serve_connection, EvidenceRegion, LogitProvider, MockModelSpec, MockProvider, ProviderError,
    ProviderSource, Rect, RemoteProvider, ViewHandle, ViewInput,
};
use oavcd::tensors::{EvidenceMask, ImageRgb};

fn spec() -> MockModelSpec {
    MockModelSpec {
        vocab: ["<eos>", "<unk>", "yes", "no", "dog", "cat"].map(String::from).to_vec(),
        eos: "<eos>".into(),
        yes: "yes".into(),
        no: "no".into(),
        regions: vec![EvidenceRegion {
            object: "dog".into(),
            rect: Rect::new(0, 0, 4, 4),
            base_logit: 0.5,
            weight: 2.0,
        }],
        scenes: BTreeMap::new(),
        language_prior: BTreeMap::from([("no".into(), 0.25)]),
        cooccurrence_bias: BTreeMap::from([("cat".into(), 1.5)]),
        patch_size: 4,
        eos_ramp: 50.0,
    }
}

fn image() -> ImageRgb {
    let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
    ImageRgb::from_rgb8(8, 8, &bytes).unwrap()
}

fn left_half_mask() -> EvidenceMask {
    EvidenceMask::new(8, 8, (0..64).map(|i| i % 8 < 2).collect()).unwrap()
}

/// Stream wrapper recording everything read and written.
struct Tap<S> {
    inner: S,
    sent: Arc<Mutex<Vec<u8>>>,
    received: Arc<Mutex<Vec<u8>>>,
}

impl<S: Read> Read for Tap<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.received.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

impl<S: Write> Write for Tap<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.sent.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn spawn_mock_server() -> (String, thread::JoinHandle<Result<(), ProviderError>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut mock = MockProvider::open(spec())?;
        serve_connection(stream, &mut mock)
    });
    (addr, handle)
}

#[test]
fn remote_matches_local_mock() {
    let (addr, server) = spawn_mock_server();
    let mut remote = RemoteProvider::connect(&format!("tcp://{addr}"), Duration::from_secs(5)).unwrap();
    let mut local = MockProvider::open(spec()).unwrap();
    assert_eq!(remote.info(), local.info());

    let img = image();
    let mask = left_half_mask();
    for view in [ViewInput::new(&img), ViewInput::new(&img).with_mask(&mask)] {
        let hr = remote.register_view(&view).unwrap();
        let hl = local.register_view(&view).unwrap();
        assert_eq!(hr, hl);
        for prompt in ["is there a dog", "is there a cat", ""] {
            let p = local.tokenize(prompt).unwrap();
            for prefix in [vec![], vec![2u32]] {
                assert_eq!(
                    remote.next_logits(hr, &p, &prefix).unwrap(),
                    local.next_logits(hl, &p, &prefix).unwrap()
                );
            }
        }
        assert_eq!(
            remote.fetch_attention(hr).unwrap(),
            local.fetch_attention(hl).unwrap()
        );
    }
    // Same content registers to the same handle.
    assert_eq!(remote.register_view(&ViewInput::new(&img)).unwrap(), ViewHandle(0));
    remote.close().unwrap();
    server.join().unwrap().unwrap();
}

#[test]
fn provider_errors_travel_as_error_frames() {
    let (addr, server) = spawn_mock_server();
    let mut remote = RemoteProvider::connect(&addr, Duration::from_secs(5)).unwrap();
    let err = remote.next_logits(ViewHandle(42), &[], &[]).unwrap_err();
    assert!(matches!(&err, ProviderError::Remote(m) if m.contains("v42")), "{err}");
    // The session survives a failed request.
    let img = image();
    let h = remote.register_view(&ViewInput::new(&img)).unwrap();
    assert!(matches!(
        remote.next_logits(h, &[], &[99]),
        Err(ProviderError::Remote(_))
    ));
    assert_eq!(remote.next_logits(h, &[], &[]).unwrap().vocab_size(), 6);
    remote.close().unwrap();
    assert!(matches!(remote.fetch_attention(h), Err(ProviderError::Closed)));
    server.join().unwrap().unwrap();
}

#[test]
fn connection_refused_names_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let err = RemoteProvider::connect(&addr, Duration::from_secs(2)).unwrap_err();
    assert!(matches!(&err, ProviderError::Connection { endpoint, .. } if *endpoint == addr));
    assert!(err.to_string().contains(&addr));
}

#[test]
fn version_mismatch_is_a_handshake_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut magic = [0u8; 4];
        s.read_exact(&mut magic).unwrap();
        s.write_all(b"OAV1").unwrap();
        let _ = oavcd::providers::wire::read_message::<oavcd::providers::wire::RequestHeader>(&mut s);
        let reply = oavcd::providers::wire::ResponseHeader::Hello {
            version: 7,
            session_id: "x".into(),
            vocab_size: 1,
            eos_token: 0,
            vocab: vec!["<eos>".into()],
        };
        oavcd::providers::wire::write_message(&mut s, &reply, &[]).unwrap();
    });
    let err = RemoteProvider::connect(&addr, Duration::from_secs(2)).unwrap_err();
    assert!(matches!(err, ProviderError::Handshake(m) if m.contains('7')));
    server.join().unwrap();
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_millis(600));
        drop(s);
    });
    let err = RemoteProvider::connect(&addr, Duration::from_millis(150)).unwrap_err();
    assert!(matches!(err, ProviderError::Timeout { .. }), "{err}");
    server.join().unwrap();
}

#[test]
fn provider_source_opens_remote() {
    let (addr, server) = spawn_mock_server();
    let source = ProviderSource::Remote {
        endpoint: addr,
        timeout: Duration::from_secs(5),
    };
    let mut p = source.open().unwrap();
    assert_eq!(p.info().vocab_size(), 6);
    p.close().unwrap();
    drop(p);
    server.join().unwrap().unwrap();
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check_golden(name: &str, actual: &[u8]) {
    let path = golden_path(name);
    if std::env::var_os("OAVCD_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with OAVCD_BLESS=1 to create)", path.display()));
    assert!(expected == actual, "{name} differs from the recorded frames");
}

#[test]
fn scripted_session_matches_golden_frames() {
    let (addr, server) = spawn_mock_server();
    let sent = Arc::new(Mutex::new(Vec::new()));
    let received = Arc::new(Mutex::new(Vec::new()));
    let stream = TcpStream::connect(&addr).unwrap();
    let tap = Tap {
        inner: stream,
        sent: Arc::clone(&sent),
        received: Arc::clone(&received),
    };
    let mut remote = RemoteProvider::from_stream(Box::new(tap), &addr).unwrap();

    let img = image();
    let mask = left_half_mask();
    let h0 = remote.register_view(&ViewInput::new(&img).with_image_id("img0.png")).unwrap();
    let h1 = remote.register_view(&ViewInput::new(&img).with_mask(&mask)).unwrap();
    let prompt = remote.tokenize("Is there a dog?").unwrap();
    remote.next_logits(h0, &prompt, &[]).unwrap();
    remote.next_logits(h1, &prompt, &[2]).unwrap();
    remote.fetch_attention(h0).unwrap();
    remote.close().unwrap();
    server.join().unwrap().unwrap();

    check_golden("oav1_client_frames.bin", &sent.lock().unwrap());
    check_golden("oav1_server_frames.bin", &received.lock().unwrap());
}

#[test]
fn replaying_golden_client_frames_reproduces_server_frames() {
    let client = std::fs::read(golden_path("oav1_client_frames.bin")).unwrap();
    let expected = std::fs::read(golden_path("oav1_server_frames.bin")).unwrap();

    struct Replay {
        input: io::Cursor<Vec<u8>>,
        output: Vec<u8>,
    }
    impl Read for Replay {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            self.input.read(buf)
        }
    }
    impl Write for Replay {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.output.write(buf)
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }
    let mut replay = Replay {
        input: io::Cursor::new(client),
        output: Vec::new(),
    };
    let mut mock = MockProvider::open(spec()).unwrap();
    serve_connection(&mut replay, &mut mock).unwrap();
    assert!(replay.output == expected);
}

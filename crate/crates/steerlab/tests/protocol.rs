use std::io::{self, Cursor, Read, Write};
use std::net::TcpListener;
use std::thread;

use ndarray::{Array1, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerlab::protocol::*;
use steerlab_core::concepts::ConceptDirection;
use steerlab_core::steering::{Align, Mode, Renorm};
use steerlab_core::surrogate::{Injector, ModelConfig};
use steerlab_core::{LayerId, Surrogate};

const LAYER: LayerId = LayerId(1);

fn model() -> Surrogate {
    let cfg = ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        n_blocks: 2,
        n_heads: 2,
        window_t: 3,
        field_count: 2,
        height: 16,
        width: 16,
        mlp_ratio: 2,
        attention: true,
    };
    Surrogate::new(cfg, 5).unwrap()
}

fn window(m: &Surrogate) -> Array4<f32> {
    let c = &m.config;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    Array4::from_shape_simple_fn((c.window_t, c.field_count, c.height, c.width), || {
        rng.random_range(-1.0..1.0)
    })
}

fn channel_direction(c: usize) -> ConceptDirection<f32> {
    ConceptDirection {
        name: "test".into(),
        full: None,
        channel: Some(Array1::from_shape_fn(c, |i| (i as f32 * 0.7).sin() + 0.1)),
        stats_ref: String::new(),
        layer: LAYER,
    }
}

fn steer_mode(alpha: f64) -> ServeMode {
    ServeMode::Steer {
        direction: channel_direction(16),
        alpha,
        mode: Mode::ChannelBroadcast,
        align: Align::None,
        renorm: Renorm::Global,
    }
}

/// Starts a one-session server and returns its address.
fn spawn(mode: ServeMode) -> (String, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let h = thread::spawn(move || serve(&listener, &mode, Some(1)).unwrap());
    (addr, h)
}

/// Forward pass with the layer routed through a server in `mode`; returns
/// the output and the number of exchanges.
fn remote_forward(m: &Surrogate, w: &Array4<f32>, mode: ServeMode) -> Array4<f32> {
    let (addr, h) = spawn(mode);
    let spec = TensorSpec::new(LAYER.to_string(), m.config.activation_shape());
    let client = Client::connect(addr.as_str(), spec).unwrap();
    let inj = RemoteInjector::new(LAYER, client);
    let out = m.forward(w, Some(&inj as &dyn Injector<f32>), &[]).unwrap().delta;
    inj.into_client().finish().unwrap();
    h.join().unwrap();
    out.insert_axis(ndarray::Axis(0))
}

#[test]
fn echo_server_is_transparent() {
    let m = model();
    let w = window(&m);
    let plain = m.forward(&w, None, &[]).unwrap().delta.insert_axis(ndarray::Axis(0));
    let echoed = remote_forward(&m, &w, ServeMode::Echo);
    assert_eq!(plain, echoed);
}

#[test]
fn zero_alpha_server_is_transparent() {
    let m = model();
    let w = window(&m);
    let plain = m.forward(&w, None, &[]).unwrap().delta.insert_axis(ndarray::Axis(0));
    assert_eq!(plain, remote_forward(&m, &w, steer_mode(0.0)));
}

#[test]
fn steering_server_changes_output() {
    let m = model();
    let w = window(&m);
    let plain = m.forward(&w, None, &[]).unwrap().delta.insert_axis(ndarray::Axis(0));
    let steered = remote_forward(&m, &w, steer_mode(0.3));
    assert_eq!(plain.shape(), steered.shape());
    assert_ne!(plain, steered);
}

#[test]
fn activation_and_injection_lengths_match() {
    let (addr, h) = spawn(steer_mode(0.3));
    let dims = [3, 16, 4, 4];
    let mut client = Client::connect(addr.as_str(), TensorSpec::new("blocks.1", dims)).unwrap();
    let n: usize = dims.iter().product();
    for k in 0..5 {
        let a: Vec<f32> = (0..n).map(|i| ((i + k) as f32).cos()).collect();
        let b = client.exchange(&a).unwrap();
        assert_eq!(b.len(), a.len());
        assert_ne!(a, b);
    }
    client.finish().unwrap();
    client.finish().unwrap();
    h.join().unwrap();
}

#[test]
fn incompatible_spec_is_rejected() {
    let (addr, h) = spawn(steer_mode(0.3));
    // 8 channels where the direction has 16.
    let r = Client::connect(addr.as_str(), TensorSpec::new("blocks.1", [3, 8, 4, 4]));
    assert!(matches!(r, Err(ProtocolError::SpecMismatch(_))), "{:?}", r.err());
    h.join().unwrap();

    let (addr, h) = spawn(ServeMode::Echo);
    let mut spec = TensorSpec::new("blocks.1", [1, 1, 1, 1]);
    spec.dtype = "f16".into();
    assert!(Client::connect(addr.as_str(), spec).is_err());
    h.join().unwrap();
}

/// In-memory stream: reads from a fixed script, collects writes.
struct Scripted {
    input: Cursor<Vec<u8>>,
    output: Vec<u8>,
}

impl Read for Scripted {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.input.read(buf)
    }
}

impl Write for Scripted {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.output.write(buf)
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn replies(output: &[u8]) -> Vec<Message> {
    let mut out = Vec::new();
    let mut rest = output;
    while let Some((m, n)) = parse_message(rest).unwrap() {
        out.push(m);
        rest = &rest[n..];
    }
    assert!(rest.is_empty());
    out
}

fn session_bytes(dims: [usize; 4], activation_len: usize) -> Vec<u8> {
    let spec = serde_json::to_vec(&TensorSpec::new("blocks.0", dims)).unwrap();
    [
        Message::new(MsgType::Hello, b"x".to_vec()),
        Message::new(MsgType::Spec, spec),
        Message::new(MsgType::Activation, vec![0u8; activation_len]),
        Message::new(MsgType::Done, vec![]),
    ]
    .iter()
    .flat_map(|m| m.encode())
    .collect()
}

#[test]
fn wrong_activation_length_gets_error_reply() {
    let mut s = Scripted {
        input: Cursor::new(session_bytes([1, 2, 2, 2], 12)),
        output: Vec::new(),
    };
    assert!(serve_session(&mut s, &ServeMode::Echo).is_err());
    let r = replies(&s.output);
    assert_eq!(r.last().unwrap().kind, MsgType::Error);
}

#[test]
fn scripted_session_completes() {
    let mut s = Scripted {
        input: Cursor::new(session_bytes([1, 2, 2, 2], 32)),
        output: Vec::new(),
    };
    let stats = serve_session(&mut s, &ServeMode::Echo).unwrap();
    assert_eq!(stats, SessionStats { activations: 1, completed: true });
    let kinds: Vec<MsgType> = replies(&s.output).iter().map(|m| m.kind).collect();
    assert_eq!(kinds, [MsgType::Hello, MsgType::Spec, MsgType::Injection, MsgType::Done]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parser_survives_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = parse_message(&bytes);
        let _ = read_message(&mut bytes.as_slice());
    }

    #[test]
    fn parser_survives_corrupted_frames(
        kind in prop::sample::select(vec![1u8, 2, 3, 4, 5, 0x7f]),
        payload in proptest::collection::vec(any::<u8>(), 0..32),
        flip in any::<(usize, u8)>(),
        cut in any::<usize>(),
    ) {
        let mut b = Message::new(MsgType::from_byte(kind).unwrap(), payload.clone()).encode();
        let exact = parse_message(&b).unwrap().unwrap();
        prop_assert_eq!(exact.0.payload, payload);
        let i = flip.0 % b.len();
        b[i] ^= flip.1;
        let b = &b[..cut % (b.len() + 1)];
        if let Ok(Some((m, n))) = parse_message(b) {
            prop_assert_eq!(m.payload.len() + HEADER_LEN, n);
        }
    }

    #[test]
    fn server_survives_garbage_sessions(
        prefix in proptest::collection::vec(any::<u8>(), 0..80),
        valid_start in any::<bool>(),
    ) {
        let mut input = if valid_start { session_bytes([1, 1, 2, 2], 16)[..30].to_vec() } else { Vec::new() };
        input.extend(prefix);
        let mut s = Scripted { input: Cursor::new(input), output: Vec::new() };
        let _ = serve_session(&mut s, &ServeMode::Echo);
        // Whatever the server wrote must itself be well-formed.
        let mut rest = s.output.as_slice();
        while !rest.is_empty() {
            let (_, n) = parse_message(rest).unwrap().unwrap();
            rest = &rest[n..];
        }
    }
}

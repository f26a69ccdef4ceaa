use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use image::{Rgb, RgbImage};
use petri_core::diversity::{
    connect_embedder, decode_png_base64, encode_png_base64, BuiltinEmbedder, EmbedError,
    EmbedRequest, EmbedResponse, Embedder, RemoteEmbedder, ENDPOINT_ENV,
};
use petri_core::metaevo::{MetaConfig, Run};
use petri_core::substrate::WorldConfig;

const TIMEOUT: Duration = Duration::from_secs(10);

/// Serve one connection: send `hello`, then answer each request with
/// `reply(request)`. Returns the bound address.
fn serve(hello: &str, reply: impl Fn(EmbedRequest) -> Option<String> + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let hello = format!("{hello}\n");
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        writer.write_all(hello.as_bytes()).unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            let req: EmbedRequest = serde_json::from_str(&line).unwrap();
            let Some(mut out) = reply(req) else { break };
            out.push('\n');
            if writer.write_all(out.as_bytes()).is_err() {
                break;
            }
        }
    });
    addr
}

const HELLO: &str = r#"{"protocol":1,"dim":4,"model":"mock"}"#;

/// Mean color plus a constant, as a 4-vector.
fn color_features(req: EmbedRequest) -> Option<String> {
    let embeddings = req
        .frames
        .iter()
        .map(|f| {
            let img = decode_png_base64(f).unwrap();
            let n = (img.width() * img.height()) as f32;
            let mut z = vec![0.0f32, 0.0, 0.0, 1.0];
            for p in img.pixels() {
                for c in 0..3 {
                    z[c] += p[c] as f32 / 255.0 / n;
                }
            }
            z
        })
        .collect();
    Some(
        serde_json::to_string(&EmbedResponse {
            id: req.id,
            embeddings,
            error: None,
        })
        .unwrap(),
    )
}

fn solid(rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(6, 5, Rgb(rgb))
}

#[test]
fn png_base64_round_trip() {
    let mut img = solid([10, 20, 30]);
    img.put_pixel(2, 3, Rgb([200, 0, 99]));
    assert_eq!(
        decode_png_base64(&encode_png_base64(&img).unwrap()).unwrap(),
        img
    );
    assert!(matches!(
        decode_png_base64("@@@"),
        Err(EmbedError::Malformed(_))
    ));
}

#[test]
fn embeds_through_the_wire_protocol() {
    let addr = serve(HELLO, color_features);
    let mut e = RemoteEmbedder::connect(&addr, TIMEOUT).unwrap();
    assert_eq!(e.dim(), 4);
    assert_eq!(e.name(), "remote:mock");
    assert_eq!(e.handshake().model, "mock");
    let z = e.embed(&[solid([0, 0, 0]), solid([255, 0, 0])]).unwrap();
    assert_eq!(z.len(), 2);
    assert_eq!(z[0], vec![0.0, 0.0, 0.0, 1.0]);
    let s = 0.5f32.sqrt();
    for (a, b) in z[1].iter().zip([s, 0.0, 0.0, s]) {
        assert!((a - b).abs() < 1e-6);
    }
    // More frames than one request may carry, over the same connection.
    let many: Vec<RgbImage> = (0..300).map(|i| solid([0, (i % 256) as u8, 0])).collect();
    let z = e.embed(&many).unwrap();
    assert_eq!(z.len(), 300);
    assert!(z[299][1] > 0.0);
}

#[test]
fn service_errors_surface() {
    let addr = serve(HELLO, |req| {
        Some(format!(
            r#"{{"id":{},"embeddings":[],"error":"model not loaded"}}"#,
            req.id
        ))
    });
    let mut e = RemoteEmbedder::connect(&addr, TIMEOUT).unwrap();
    match e.embed(&[solid([1, 2, 3])]) {
        Err(EmbedError::Service(msg)) => assert_eq!(msg, "model not loaded"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn protocol_violations_are_rejected() {
    let addr = serve(r#"{"protocol":2,"dim":4,"model":"future"}"#, color_features);
    assert!(matches!(
        RemoteEmbedder::connect(&addr, TIMEOUT),
        Err(EmbedError::Protocol(_))
    ));

    let addr = serve(HELLO, |req| {
        Some(format!(
            r#"{{"id":{},"embeddings":[[1,0,0,0]]}}"#,
            req.id + 7
        ))
    });
    let mut e = RemoteEmbedder::connect(&addr, TIMEOUT).unwrap();
    assert!(matches!(
        e.embed(&[solid([0, 0, 0])]),
        Err(EmbedError::Protocol(_))
    ));

    let addr = serve(HELLO, |req| {
        Some(format!(r#"{{"id":{},"embeddings":[[1,0,0]]}}"#, req.id))
    });
    let mut e = RemoteEmbedder::connect(&addr, TIMEOUT).unwrap();
    assert!(matches!(
        e.embed(&[solid([0, 0, 0])]),
        Err(EmbedError::Protocol(_))
    ));

    let addr = serve(HELLO, |_| None);
    let mut e = RemoteEmbedder::connect(&addr, TIMEOUT).unwrap();
    assert!(e.embed(&[solid([0, 0, 0])]).is_err());
}

#[test]
fn endpoint_selection_and_fallback() {
    // Nothing listens on a port we just released.
    let dead = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string();
    let e = connect_embedder(Some(&dead), Duration::from_millis(500));
    assert_eq!(e.name(), BuiltinEmbedder.name());

    let live = serve(HELLO, color_features);
    let e = connect_embedder(Some(&live), TIMEOUT);
    assert_eq!(e.name(), "remote:mock");

    // The environment variable wins over the configured endpoint.
    let env = serve(
        r#"{"protocol":1,"dim":4,"model":"from-env"}"#,
        color_features,
    );
    std::env::set_var(ENDPOINT_ENV, &env);
    let e = connect_embedder(Some(&dead), TIMEOUT);
    std::env::remove_var(ENDPOINT_ENV);
    assert_eq!(e.name(), "remote:from-env");
}

#[test]
fn run_survives_a_service_that_goes_away() {
    let addr = serve(HELLO, |_| None);
    let world = WorldConfig {
        height: 8,
        width: 8,
        agents: 2,
        ..WorldConfig::default()
    };
    let meta = MetaConfig {
        population: 3,
        iterations: 1,
        world_segments: 2,
        ..MetaConfig::default()
    };
    let remote = RemoteEmbedder::connect(&addr, TIMEOUT).unwrap();
    let mut run = Run::new(world, meta, 4, Box::new(remote)).unwrap();
    let report = run.step().unwrap();
    assert_eq!(run.embedder_name(), BuiltinEmbedder.name());
    assert!(report.records.iter().all(|r| r.diversity.is_finite()));
}

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{normalize, EmbedError, Embedder};

pub const ENDPOINT_ENV: &str = "PETRI_EMBED_ENDPOINT";
pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub dim: usize,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub id: u64,
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub id: u64,
    #[serde(default)]
    pub embeddings: Vec<Vec<f32>>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Client for an embedding service speaking newline-delimited JSON over TCP.
#[derive(Debug)]
pub struct RemoteEmbedder {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    handshake: Handshake,
    name: String,
    next_id: u64,
}

impl RemoteEmbedder {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, EmbedError> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| EmbedError::Protocol(format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let handshake: Handshake = serde_json::from_str(&read_line(&mut reader)?)?;
        if handshake.protocol != PROTOCOL_VERSION {
            return Err(EmbedError::Protocol(format!(
                "server speaks protocol {}, expected {PROTOCOL_VERSION}",
                handshake.protocol
            )));
        }
        if handshake.dim == 0 {
            return Err(EmbedError::Protocol("server advertises dimension 0".into()));
        }
        let name = format!("remote:{}", handshake.model);
        Ok(Self {
            reader,
            writer,
            handshake,
            name,
            next_id: 0,
        })
    }

    /// Connect to the address in `PETRI_EMBED_ENDPOINT`, if set.
    pub fn from_env(timeout: Duration) -> Option<Result<Self, EmbedError>> {
        let addr = std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|a| !a.trim().is_empty())?;
        Some(Self::connect(addr.trim(), timeout))
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn request(&mut self, frames: &[RgbImage]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let id = self.next_id;
        self.next_id += 1;
        let req = EmbedRequest {
            id,
            frames: frames
                .iter()
                .map(encode_png_base64)
                .collect::<Result<_, _>>()?,
        };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;

        let resp: EmbedResponse = serde_json::from_str(&read_line(&mut self.reader)?)?;
        if resp.id != id {
            return Err(EmbedError::Protocol(format!(
                "response id {} for request {id}",
                resp.id
            )));
        }
        if let Some(err) = resp.error {
            return Err(EmbedError::Service(err));
        }
        if resp.embeddings.len() != frames.len() {
            return Err(EmbedError::Protocol(format!(
                "{} embeddings for {} frames",
                resp.embeddings.len(),
                frames.len()
            )));
        }
        let mut out = resp.embeddings;
        for z in &mut out {
            if z.len() != self.handshake.dim {
                return Err(EmbedError::Protocol(format!(
                    "embedding of length {}, handshake said {}",
                    z.len(),
                    self.handshake.dim
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::Protocol("non-finite embedding".into()));
            }
            normalize(z);
        }
        Ok(out)
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.handshake.dim
    }

    fn embed(&mut self, frames: &[RgbImage]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(MAX_BATCH) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }
}

fn read_line(reader: &mut impl BufRead) -> Result<String, EmbedError> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(EmbedError::Protocol("connection closed".into()));
    }
    Ok(line)
}

pub fn encode_png_base64(img: &RgbImage) -> Result<String, EmbedError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| EmbedError::Malformed(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

pub fn decode_png_base64(s: &str) -> Result<RgbImage, EmbedError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| EmbedError::Malformed(e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| EmbedError::Malformed(e.to_string()))?;
    Ok(img.to_rgb8())
}

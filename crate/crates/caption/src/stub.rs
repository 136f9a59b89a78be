//! Scripted HTTP endpoint on localhost for exercising the clients offline.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Clone, Debug)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
    /// Wait before answering.
    pub delay: Duration,
}

impl StubReply {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// 200 with a chat-completions body carrying `caption`.
    pub fn caption(caption: &str) -> Self {
        Self::new(
            200,
            serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": caption } }] }).to_string(),
        )
    }
}

#[derive(Default)]
struct Shared {
    count: AtomicUsize,
    bodies: Mutex<Vec<String>>,
    stop: AtomicBool,
}

/// Answers the n-th request with the n-th scripted reply; the last reply
/// repeats once the script runs out.
pub struct StubServer {
    addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<StubReply>) -> std::io::Result<Self> {
        assert!(!script.is_empty(), "stub needs at least one reply");
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared::default());
        let script = Arc::new(script);
        let sh = shared.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if sh.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let n = sh.count.fetch_add(1, Ordering::SeqCst);
                let reply = script[n.min(script.len() - 1)].clone();
                let sh = sh.clone();
                std::thread::spawn(move || {
                    let _ = serve(stream, &reply, &sh);
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Requests received so far.
    pub fn hits(&self) -> usize {
        self.shared.count.load(Ordering::SeqCst)
    }

    /// Request bodies in arrival order of completion.
    pub fn bodies(&self) -> Vec<String> {
        self.shared.bodies.lock().map(|b| b.clone()).unwrap_or_default()
    }
}

fn serve(stream: TcpStream, reply: &StubReply, shared: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    if let Ok(mut b) = shared.bodies.lock() {
        b.push(String::from_utf8_lossy(&body).into_owned());
    }
    std::thread::sleep(reply.delay);
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )?;
    stream.flush()
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

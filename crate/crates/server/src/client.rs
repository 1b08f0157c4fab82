//! Minimal blocking HTTP/1.1 client over `std::net`.
//!
//! One connection per request. The benchmark needs the instant at which the
//! request body has been fully written, which higher level clients hide.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant, SystemTime};

use thiserror::Error;

use crate::txstamp;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("server unreachable at {addr}: {source}")]
    Unreachable {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// Instants bracketing one exchange.
#[derive(Debug, Clone, Copy)]
pub struct Exchange {
    pub send_start: Instant,
    /// Kernel transmit time of the last request byte when available,
    /// otherwise the return of the final write.
    pub send_done: Instant,
    pub received: Instant,
    pub kernel_stamped: bool,
}

/// Strips an `http://` scheme and trailing slashes: `http://h:1/` -> `h:1`.
pub fn host_port(server: &str) -> &str {
    server
        .strip_prefix("http://")
        .unwrap_or(server)
        .trim_end_matches('/')
}

pub fn request(
    server: &str,
    method: &str,
    path: &str,
    headers: &[(&str, &str)],
    body: &[u8],
    timeout: Duration,
) -> Result<(HttpResponse, Exchange), ClientError> {
    let addr = host_port(server);
    let (host, base) = match addr.find('/') {
        Some(i) => (&addr[..i], &addr[i..]),
        None => (addr, ""),
    };

    let send_start = Instant::now();
    let wall_start = SystemTime::now();
    let mut stream = TcpStream::connect(host).map_err(|source| ClientError::Unreachable {
        addr: host.to_string(),
        source,
    })?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let stamping = txstamp::enable(&stream);

    let mut head = format!(
        "{method} {base}{path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    for (k, v) in headers {
        head.push_str(k);
        head.push_str(": ");
        head.push_str(v);
        head.push_str("\r\n");
    }
    head.push_str("\r\n");
    // one write so the server sees headers and body together
    let mut msg = head.into_bytes();
    msg.extend_from_slice(body);
    stream.write_all(&msg)?;
    stream.flush()?;
    let write_returned = Instant::now();

    let response = read_response(&mut stream)?;
    let received = Instant::now();
    let kernel_done = stamping
        .then(|| txstamp::latest(&stream))
        .flatten()
        .and_then(|t| t.duration_since(wall_start).ok())
        .map(|d| send_start + d)
        .filter(|t| *t <= received);
    Ok((
        response,
        Exchange {
            send_start,
            send_done: kernel_done.unwrap_or(write_returned),
            received,
            kernel_stamped: kernel_done.is_some(),
        },
    ))
}

pub fn get(server: &str, path: &str, timeout: Duration) -> Result<HttpResponse, ClientError> {
    request(server, "GET", path, &[], &[], timeout).map(|(r, _)| r)
}

fn read_response(stream: &mut TcpStream) -> Result<HttpResponse, ClientError> {
    let mut buf = Vec::with_capacity(8192);
    let mut chunk = [0u8; 8192];
    loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(ClientError::Malformed("connection closed before headers".into()));
        }
        buf.extend_from_slice(&chunk[..n]);

        let mut header_buf = [httparse::EMPTY_HEADER; 64];
        let mut parsed = httparse::Response::new(&mut header_buf);
        let status = parsed
            .parse(&buf)
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        let httparse::Status::Complete(header_len) = status else {
            continue;
        };
        let code = parsed.code.unwrap_or(0);
        let headers: Vec<(String, String)> = parsed
            .headers
            .iter()
            .map(|h| (h.name.to_string(), String::from_utf8_lossy(h.value).into_owned()))
            .collect();
        let content_length = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
            .map(|(_, v)| v.trim().parse::<usize>())
            .transpose()
            .map_err(|e| ClientError::Malformed(format!("bad content-length: {e}")))?;
        let chunked = headers.iter().any(|(k, v)| {
            k.eq_ignore_ascii_case("transfer-encoding") && v.to_ascii_lowercase().contains("chunked")
        });

        let mut body = buf.split_off(header_len);
        match content_length {
            Some(len) => {
                while body.len() < len {
                    let n = stream.read(&mut chunk)?;
                    if n == 0 {
                        return Err(ClientError::Malformed("truncated body".into()));
                    }
                    body.extend_from_slice(&chunk[..n]);
                }
                body.truncate(len);
            }
            None => {
                stream.read_to_end(&mut body)?;
                if chunked {
                    body = dechunk(&body)?;
                }
            }
        }
        return Ok(HttpResponse {
            status: code,
            headers,
            body,
        });
    }
}

fn dechunk(mut data: &[u8]) -> Result<Vec<u8>, ClientError> {
    let mut out = Vec::new();
    loop {
        let line_end = data
            .windows(2)
            .position(|w| w == b"\r\n")
            .ok_or_else(|| ClientError::Malformed("bad chunk header".into()))?;
        let size_str = std::str::from_utf8(&data[..line_end])
            .map_err(|_| ClientError::Malformed("bad chunk header".into()))?;
        let size = usize::from_str_radix(size_str.split(';').next().unwrap_or("").trim(), 16)
            .map_err(|_| ClientError::Malformed("bad chunk size".into()))?;
        data = &data[line_end + 2..];
        if size == 0 {
            return Ok(out);
        }
        if data.len() < size + 2 {
            return Err(ClientError::Malformed("truncated chunk".into()));
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}

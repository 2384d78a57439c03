//! Line-delimited JSON request/response protocol over a local TCP socket,
//! for cross-process demos. One JSON object per line in each direction:
//! requests carry {user, text, gen_tokens}, responses carry
//! {ttft_s, token_times_s, text}. Rate-limited requests answer with
//! {"error": "rate_limited"}.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::node::{ServingNode, SubmitError};
use crate::time::VirtualDuration;

#[derive(Debug, Deserialize)]
struct WireRequest {
    user: u64,
    text: String,
    gen_tokens: usize,
}

#[derive(Debug, Serialize)]
struct WireResponse {
    ttft_s: f64,
    token_times_s: Vec<f64>,
    text: String,
}

#[derive(Debug, Serialize)]
struct WireError {
    error: &'static str,
}

/// Serves one connection until EOF. Each served request advances the
/// node's virtual clock by its simulated latency.
pub fn serve_connection(
    node: &mut ServingNode,
    stream: TcpStream,
    rng: &mut ChaCha12Rng,
) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: WireRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                serde_json::to_writer(&mut writer, &WireError { error: "bad_request" })?;
                writer.write_all(b"\n")?;
                continue;
            }
        };
        let now = node.now() + VirtualDuration::from_secs_f64(0.01);
        match node.submit_text(req.user, &req.text, req.gen_tokens.max(1), now, rng) {
            Ok(outcome) => {
                node.advance_clock(VirtualDuration::from_secs_f64(outcome.total_latency_s));
                let resp = WireResponse {
                    ttft_s: outcome.ttft_s,
                    token_times_s: outcome.token_times_s,
                    text: outcome.response_text,
                };
                serde_json::to_writer(&mut writer, &resp)?;
                writer.write_all(b"\n")?;
            }
            Err(SubmitError::RateLimited) => {
                node.advance_clock(VirtualDuration::from_secs(1));
                serde_json::to_writer(&mut writer, &WireError { error: "rate_limited" })?;
                writer.write_all(b"\n")?;
            }
            Err(SubmitError::InvalidGenTokens) => unreachable!(),
        }
        writer.flush()?;
    }
    Ok(())
}

/// Accepts exactly one connection on the listener and serves it to EOF.
pub fn serve_once(
    listener: &TcpListener,
    node: &mut ServingNode,
    rng: &mut ChaCha12Rng,
) -> std::io::Result<()> {
    let (stream, _) = listener.accept()?;
    serve_connection(node, stream, rng)
}

//! Serves any [`Provider`] over the JSON-lines protocol.

use std::io::{self, BufRead, Write};

use super::{ModelRequest, ModelResponse, Provider};

/// Answers request lines from `input` on `output` until `input` closes.
/// Malformed lines and backend failures produce error responses; only I/O
/// failures end the loop early.
pub fn serve<P, R, W>(provider: &P, input: R, mut output: W) -> io::Result<()>
where
    P: Provider + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<ModelRequest>(&line) {
            Ok(req) => match provider.request(&req.query) {
                Ok(mut resp) => {
                    resp.id = req.id;
                    resp
                }
                Err(e) => ModelResponse::error(req.id, e.to_string()),
            },
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
                    .unwrap_or(0);
                ModelResponse::error(id, format!("bad request: {e}"))
            }
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

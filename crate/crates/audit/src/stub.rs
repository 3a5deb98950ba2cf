//! Deterministic in-process stand-in for the auditor endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

use crate::prompt::extract_csv;

/// What the stub answers to one request.
#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Score { score: i64, reasoning: String },
    /// The same JSON object wrapped in a fenced code block.
    Fenced { score: i64, reasoning: String },
    /// Arbitrary message content.
    Content(String),
    /// Error status with no completion.
    Status(u16),
}

type Responder = dyn Fn(usize, &str) -> StubReply + Send + Sync;

pub struct StubServer {
    server: Arc<Server>,
    url: String,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves on an ephemeral local port. The responder sees the zero-based
    /// request index and the system prompt.
    pub fn start(responder: impl Fn(usize, &str) -> StubReply + Send + Sync + 'static) -> std::io::Result<Self> {
        let server = Arc::new(Server::http("127.0.0.1:0").map_err(std::io::Error::other)?);
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub is not on a TCP socket"))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let responder: Arc<Responder> = Arc::new(responder);
        let handle = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let index = requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    let prompt = req
                        .as_reader()
                        .read_to_string(&mut body)
                        .ok()
                        .and_then(|_| serde_json::from_str::<Value>(&body).ok())
                        .and_then(|v| v.pointer("/messages/0/content").and_then(Value::as_str).map(str::to_string));
                    let reply = match prompt {
                        Some(p) => responder(index, &p),
                        None => StubReply::Status(400),
                    };
                    let _ = req.respond(render(reply));
                }
            })
        };
        Ok(Self {
            server,
            url: format!("http://127.0.0.1:{port}/v1"),
            requests,
            handle: Some(handle),
        })
    }

    /// A stub that scores every prompt with [`heuristic_score`].
    pub fn heuristic() -> std::io::Result<Self> {
        Self::start(|_, prompt| {
            let (score, reasoning) = heuristic_score(prompt);
            StubReply::Score { score, reasoning }
        })
    }

    pub fn base_url(&self) -> &str {
        &self.url
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn completion(content: String) -> Response<std::io::Cursor<Vec<u8>>> {
    let body = json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    });
    Response::from_string(body.to_string())
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn render(reply: StubReply) -> Response<std::io::Cursor<Vec<u8>>> {
    let obj = |score, reasoning| json!({"realism_score": score, "reasoning": reasoning}).to_string();
    match reply {
        StubReply::Score { score, reasoning } => completion(obj(score, reasoning)),
        StubReply::Fenced { score, reasoning } => completion(format!("```json\n{}\n```", obj(score, reasoning))),
        StubReply::Content(c) => completion(c),
        StubReply::Status(code) => Response::from_string("injected fault").with_status_code(code),
    }
}

/// Fixed rule-based realism score of a rendered prompt: starts at 9 and
/// deducts for record defects, with one bonus point for records touching
/// every clinical category.
pub fn heuristic_score(prompt: &str) -> (i64, String) {
    let Some(csv_text) = extract_csv(prompt) else {
        return (1, "prompt does not follow the template".into());
    };
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().filter_map(|r| r.ok()).collect();
    let code = |r: &csv::StringRecord| r.get(1).unwrap_or("").to_string();
    let clinical: Vec<&csv::StringRecord> = rows
        .iter()
        .filter(|r| ["DX_", "PR_", "MED_", "LAB_"].iter().any(|p| code(r).starts_with(p)))
        .collect();
    let mut score = 9;
    let mut notes = Vec::new();
    if clinical.is_empty() {
        score -= 2;
        notes.push("no clinical events");
    }
    if rows.windows(2).any(|w| w[0].get(0) > w[1].get(0)) {
        score -= 3;
        notes.push("events out of order");
    }
    if clinical.iter().any(|r| code(r).starts_with("LAB_") && r.get(2).unwrap_or("").is_empty()) {
        score -= 2;
        notes.push("lab without a value");
    }
    if rows.iter().any(|r| code(r) == "SEX_M") && clinical.iter().any(|r| code(r).starts_with("DX_O")) {
        score -= 4;
        notes.push("pregnancy code on a male patient");
    }
    if clinical.windows(6).any(|w| w.iter().all(|r| code(r) == code(w[0]))) {
        score -= 2;
        notes.push("repetitive codes");
    }
    if rows.iter().position(|r| code(r) == "DEATH").is_some_and(|i| i + 1 != rows.len()) {
        score -= 3;
        notes.push("events after death");
    }
    if ["DX_", "PR_", "MED_", "LAB_"].iter().all(|p| clinical.iter().any(|r| code(r).starts_with(p))) {
        score += 1;
    }
    let reasoning = if notes.is_empty() { "no defects found".to_string() } else { notes.join("; ") };
    (score.clamp(1, 10), reasoning)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::render_prompt;

    fn prompt(rows: &[&str]) -> String {
        let mut csv = String::from("time,code,numerical_value,code_label\n");
        for r in rows {
            csv.push_str(r);
            csv.push('\n');
        }
        render_prompt(&csv)
    }

    #[test]
    fn heuristic_deductions() {
        let demo = "2020-01-01T00:00:00Z,SEX_M,,Sex M";
        assert_eq!(heuristic_score(&prompt(&[demo])).0, 7);
        let full = [
            demo,
            "2020-01-01T01:00:00Z,DX_I10,,Hypertension",
            "2020-01-01T02:00:00Z,PR_0,,p",
            "2020-01-01T03:00:00Z,MED_A,,m",
            "2020-01-01T04:00:00Z,LAB_1,5.0,l",
        ];
        assert_eq!(heuristic_score(&prompt(&full)), (10, "no defects found".to_string()));
        let mut pregnant = full.to_vec();
        pregnant.push("2020-01-01T05:00:00Z,DX_O80,,Delivery");
        assert_eq!(heuristic_score(&prompt(&pregnant)).0, 6);
        let disordered = [demo, "2020-01-02T00:00:00Z,DX_I10,,h", "2020-01-01T00:00:00Z,DX_E11,,d"];
        assert_eq!(heuristic_score(&prompt(&disordered)).0, 6);
        assert_eq!(heuristic_score("garbage").0, 1);
    }
}

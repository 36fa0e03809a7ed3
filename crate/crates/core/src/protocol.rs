//! `ei-predict/1`: newline-delimited JSON for out-of-process models.
//!
//! ```text
//! client → {"protocol":"ei-predict/1","task":"regression"}
//! server → {"protocol":"ei-predict/1","task":"regression","concurrent":false}
//! client → {"id":1,"rows":[[1,2],[0,0]],"task":"regression"}
//! server → {"id":1,"outputs":[1.5,1.0]}
//! client → {"bye":true}
//! ```
//!
//! Every message is one line of compact UTF-8 JSON. Rows may differ in
//! length; padding is the server's business. A server that cannot answer a
//! request replies `{"id":..,"error":".."}` and keeps serving.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{PredictError, ProtocolError};
use crate::predictor::{PredictionBatch, Predictor, TaskKind, WIRE_PROBABILITY_TOLERANCE};

pub const PROTOCOL: &str = "ei-predict/1";
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloReply {
    pub protocol: String,
    pub task: TaskKind,
    #[serde(default)]
    pub concurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub id: u64,
    pub rows: Vec<Vec<u32>>,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub id: u64,
    pub outputs: PredictionBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub id: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bye {
    pub bye: bool,
}

/// Capabilities announced by the server during the handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub task: TaskKind,
    pub concurrent: bool,
}

/// A bidirectional line stream. Incoming lines are read on a background
/// thread so that receives can time out.
pub struct LineChannel {
    writer: Option<Box<dyn Write + Send>>,
    lines: Receiver<io::Result<String>>,
}

impl LineChannel {
    pub fn new<R, W>(reader: R, writer: W) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        LineChannel {
            writer: Some(Box::new(writer)),
            lines: rx,
        }
    }

    pub fn send<T: Serialize>(&mut self, message: &T) -> Result<(), PredictError> {
        let writer = self
            .writer
            .as_mut()
            .ok_or_else(|| PredictError::Transport("connection already closed".into()))?;
        let mut line = serde_json::to_string(message)
            .map_err(|e| PredictError::Transport(format!("cannot encode message: {e}")))?;
        line.push('\n');
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| PredictError::Transport(format!("write failed: {e}")))
    }

    /// Next line, without its terminator.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<String, PredictError> {
        let next = match timeout {
            Some(t) => self.lines.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => {
                    PredictError::Transport(format!("no reply within {:.1} s", t.as_secs_f64()))
                }
                RecvTimeoutError::Disconnected => {
                    PredictError::Transport("connection closed".into())
                }
            })?,
            None => self
                .lines
                .recv()
                .map_err(|_| PredictError::Transport("connection closed".into()))?,
        };
        let line = next.map_err(|e| PredictError::Transport(format!("read failed: {e}")))?;
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    }

    /// Drops the write half, signalling end of input to the peer.
    pub fn close(&mut self) {
        self.writer = None;
    }
}

fn parse<'a, T: Deserialize<'a>>(line: &'a str) -> Result<T, PredictError> {
    serde_json::from_str(line)
        .map_err(|e| ProtocolError::Malformed(format!("{e}: {}", truncate(line))).into())
}

fn truncate(line: &str) -> String {
    const MAX: usize = 120;
    if line.len() <= MAX {
        line.to_string()
    } else {
        let cut = (0..=MAX).rev().find(|&i| line.is_char_boundary(i)).unwrap_or(0);
        format!("{}...", &line[..cut])
    }
}

/// Sends the greeting and checks the reply.
pub fn handshake(
    channel: &mut LineChannel,
    task: TaskKind,
    timeout: Duration,
) -> Result<Capabilities, PredictError> {
    channel.send(&Hello {
        protocol: PROTOCOL.into(),
        task,
    })?;
    let line = channel.recv(Some(timeout))?;
    let value: serde_json::Value = parse(&line)?;
    let found = value
        .get("protocol")
        .and_then(|p| p.as_str())
        .ok_or_else(|| ProtocolError::Malformed(format!("handshake reply: {}", truncate(&line))))?;
    if found != PROTOCOL {
        return Err(ProtocolError::VersionMismatch {
            expected: PROTOCOL.into(),
            found: found.into(),
        }
        .into());
    }
    let reply: HelloReply = parse(&line)?;
    if reply.task != task {
        return Err(ProtocolError::TaskMismatch {
            requested: task.as_str().into(),
            served: reply.task.as_str().into(),
        }
        .into());
    }
    Ok(Capabilities {
        task: reply.task,
        concurrent: reply.concurrent,
    })
}

struct Connection {
    channel: LineChannel,
    next_id: u64,
    child: Option<Child>,
}

/// A [`Predictor`] backed by an external process or socket.
///
/// Requests are strictly serial on the connection.
pub struct RemotePredictor {
    capabilities: Capabilities,
    request_timeout: Option<Duration>,
    connection: Mutex<Connection>,
}

impl RemotePredictor {
    /// Performs the handshake over an established channel.
    pub fn connect(
        mut channel: LineChannel,
        task: TaskKind,
        handshake_timeout: Duration,
    ) -> Result<Self, PredictError> {
        let capabilities = handshake(&mut channel, task, handshake_timeout)?;
        Ok(RemotePredictor {
            capabilities,
            request_timeout: None,
            connection: Mutex::new(Connection {
                channel,
                next_id: 1,
                child: None,
            }),
        })
    }

    /// Starts `argv` and talks to it over its standard streams.
    pub fn spawn(
        argv: &[String],
        task: TaskKind,
        handshake_timeout: Duration,
    ) -> Result<Self, PredictError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| PredictError::Transport("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PredictError::Transport(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let channel = LineChannel::new(stdout, stdin);
        match RemotePredictor::connect(channel, task, handshake_timeout) {
            Ok(remote) => {
                remote.connection.lock().expect("fresh lock").child = Some(child);
                Ok(remote)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn connect_tcp(
        address: &str,
        task: TaskKind,
        handshake_timeout: Duration,
    ) -> Result<Self, PredictError> {
        let stream = TcpStream::connect(address)
            .map_err(|e| PredictError::Transport(format!("cannot connect to {address}: {e}")))?;
        let reader = stream
            .try_clone()
            .map_err(|e| PredictError::Transport(e.to_string()))?;
        RemotePredictor::connect(LineChannel::new(reader, stream), task, handshake_timeout)
    }

    pub fn with_request_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.request_timeout = timeout;
        self
    }

    pub fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    /// One request line, one validated response line.
    pub fn remote_predict(&self, rows: &[Vec<u32>]) -> Result<PredictionBatch, PredictError> {
        if rows.is_empty() {
            return Err(PredictError::InvalidRows("a request needs at least one row".into()));
        }
        let mut conn = self
            .connection
            .lock()
            .map_err(|_| PredictError::Transport("connection poisoned".into()))?;
        let id = conn.next_id;
        conn.next_id += 1;
        conn.channel.send(&PredictRequest {
            id,
            rows: rows.to_vec(),
            task: self.capabilities.task,
        })?;
        let line = conn.channel.recv(self.request_timeout)?;
        let value: serde_json::Value = parse(&line)?;
        if let Some(message) = value.get("error") {
            let reply: ErrorResponse = parse(&line)?;
            if let Some(found) = reply.id.filter(|&found| found != id) {
                return Err(ProtocolError::IdMismatch { expected: id, found }.into());
            }
            return Err(PredictError::Model(
                message.as_str().unwrap_or(&reply.error).to_string(),
            ));
        }
        let reply: PredictResponse = parse(&line)?;
        if reply.id != id {
            return Err(ProtocolError::IdMismatch {
                expected: id,
                found: reply.id,
            }
            .into());
        }
        reply
            .outputs
            .validate(self.capabilities.task, rows.len(), WIRE_PROBABILITY_TOLERANCE)?;
        Ok(reply.outputs)
    }

    /// Says goodbye and waits briefly for a spawned server to exit.
    pub fn shutdown(self) {
        drop(self)
    }
}

impl Drop for RemotePredictor {
    fn drop(&mut self) {
        let conn = match self.connection.get_mut() {
            Ok(c) => c,
            Err(p) => p.into_inner(),
        };
        let _ = conn.channel.send(&Bye { bye: true });
        conn.channel.close();
        if let Some(mut child) = conn.child.take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        thread::sleep(Duration::from_millis(10))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

impl Predictor for RemotePredictor {
    fn kind(&self) -> TaskKind {
        self.capabilities.task
    }

    fn predict(&self, rows: &[Vec<u32>]) -> Result<PredictionBatch, PredictError> {
        self.remote_predict(rows)
    }

    fn concurrent(&self) -> bool {
        self.capabilities.concurrent
    }
}

/// Serves `predictor` over a line stream until `{"bye":true}` or end of
/// input. Malformed requests get an error reply and the loop continues.
pub fn serve<P, R, W>(predictor: &P, reader: R, mut writer: W) -> io::Result<()>
where
    P: Predictor + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut lines = reader.lines();

    let Some(first) = lines.next().transpose()? else {
        return Ok(());
    };
    match serde_json::from_str::<Hello>(&first) {
        Ok(_) => reply(
            &mut writer,
            &HelloReply {
                protocol: PROTOCOL.into(),
                task: predictor.kind(),
                concurrent: false,
            },
        )?,
        Err(e) => {
            reply(
                &mut writer,
                &ErrorResponse {
                    id: None,
                    error: format!("bad handshake: {e}"),
                },
            )?;
            return Ok(());
        }
    }

    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                reply(
                    &mut writer,
                    &ErrorResponse {
                        id: None,
                        error: format!("malformed line: {e}"),
                    },
                )?;
                continue;
            }
        };
        if value.get("bye").and_then(|b| b.as_bool()) == Some(true) {
            break;
        }
        let id = value.get("id").and_then(|i| i.as_u64());
        let request: PredictRequest = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                reply(
                    &mut writer,
                    &ErrorResponse {
                        id,
                        error: format!("malformed request: {e}"),
                    },
                )?;
                continue;
            }
        };
        match predictor.predict(&request.rows) {
            Ok(outputs) => reply(
                &mut writer,
                &PredictResponse {
                    id: request.id,
                    outputs,
                },
            )?,
            Err(e) => reply(
                &mut writer,
                &ErrorResponse {
                    id: Some(request.id),
                    error: e.to_string(),
                },
            )?,
        }
    }
    Ok(())
}

fn reply<W: Write, T: Serialize>(writer: &mut W, message: &T) -> io::Result<()> {
    let line = serde_json::to_string(message).expect("protocol messages serialize");
    writer.write_all(line.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::LinearModel;
    use std::io::Cursor;

    fn served(input: &str) -> Vec<serde_json::Value> {
        let model = LinearModel::regression(1.0, [(1, 0.5), (2, 0.0)]);
        let mut out = Vec::new();
        serve(&model, Cursor::new(input.to_string()), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn server_handshake_and_predict() {
        let replies = served(concat!(
            r#"{"protocol":"ei-predict/1","task":"regression"}"#,
            "\n",
            r#"{"id":1,"rows":[[1,2],[0,0]],"task":"regression"}"#,
            "\n",
            r#"{"bye":true}"#,
            "\n",
            r#"{"id":2,"rows":[[1]],"task":"regression"}"#,
            "\n",
        ));
        assert_eq!(
            replies[0],
            serde_json::json!({"protocol":"ei-predict/1","task":"regression","concurrent":false})
        );
        assert_eq!(replies[1], serde_json::json!({"id":1,"outputs":[1.5,1.0]}));
        assert_eq!(replies.len(), 2);
    }

    #[test]
    fn server_recovers_from_bad_lines() {
        let replies = served(concat!(
            r#"{"protocol":"ei-predict/1","task":"regression"}"#,
            "\n",
            "not json\n",
            r#"{"id":5,"rows":"nope"}"#,
            "\n",
            r#"{"id":6,"rows":[[]],"task":"regression"}"#,
            "\n",
            r#"{"id":7,"rows":[[1]],"task":"regression"}"#,
            "\n",
        ));
        assert!(replies[1]["error"].is_string());
        assert_eq!(replies[2]["id"], 5);
        assert!(replies[2]["error"].is_string());
        assert_eq!(replies[3]["id"], 6);
        assert_eq!(replies[4], serde_json::json!({"id":7,"outputs":[1.5]}));
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        let s = "é".repeat(100);
        assert!(truncate(&s).ends_with("..."));
    }
}

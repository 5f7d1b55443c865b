//! External actions over TCP: one newline-delimited JSON request and one
//! reply per connection.

use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thinkact_core::action::{
    admit, denied_record, eval_builtin, result_from_outcome, truncate_payload, ActionKind, CallCounters, Clock,
    DispatchEnv, DispatchRecord, ExternalTransport, NoExternal, Registry, SecurityPolicy, TransportOutcome, Verdict,
    WireRequest, WireResponse,
};
use thinkact_core::context::ContextStore;
use thinkact_core::protocol::{ActionCall, ActionResult, ResultStatus};

/// Longest reply line accepted before the reply is treated as malformed.
pub const MAX_REPLY_BYTES: u64 = 1 << 20;

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock)
}

#[derive(Debug, Clone, Copy)]
pub struct TcpTransport {
    pub addr: SocketAddr,
}

impl TcpTransport {
    pub fn new(addr: SocketAddr) -> Self {
        Self { addr }
    }

    fn exchange(&self, request: &WireRequest, timeout: Duration) -> TransportOutcome {
        let deadline = Instant::now() + timeout;
        let remaining = || {
            deadline
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1))
        };
        let mut stream = match TcpStream::connect_timeout(&self.addr, timeout) {
            Ok(s) => s,
            Err(e) if is_timeout(&e) => return TransportOutcome::Timeout,
            Err(e) => return TransportOutcome::Failed(format!("connect: {e}")),
        };
        let mut line = match serde_json::to_string(request) {
            Ok(l) => l,
            Err(e) => return TransportOutcome::Failed(format!("encode: {e}")),
        };
        line.push('\n');
        let _ = stream.set_write_timeout(Some(remaining()));
        if let Err(e) = stream.write_all(line.as_bytes()) {
            return if is_timeout(&e) {
                TransportOutcome::Timeout
            } else {
                TransportOutcome::Failed(format!("send: {e}"))
            };
        }
        let _ = stream.set_read_timeout(Some(remaining()));
        let mut reader = BufReader::new(stream.take(MAX_REPLY_BYTES));
        let mut reply = String::new();
        match reader.read_line(&mut reply) {
            Err(e) if is_timeout(&e) => return TransportOutcome::Timeout,
            Err(e) => return TransportOutcome::Failed(format!("receive: {e}")),
            Ok(0) => return TransportOutcome::Failed("connection closed without a reply".into()),
            Ok(_) if !reply.ends_with('\n') => return TransportOutcome::Failed("reply is not a complete line".into()),
            Ok(_) => {}
        }
        if Instant::now() > deadline {
            return TransportOutcome::Timeout;
        }
        match serde_json::from_str::<WireResponse>(&reply) {
            Ok(r) => TransportOutcome::Reply(r),
            Err(e) => TransportOutcome::Failed(format!("malformed reply: {e}")),
        }
    }
}

impl ExternalTransport for TcpTransport {
    fn call(&mut self, request: &WireRequest, timeout_ms: u64) -> TransportOutcome {
        self.exchange(request, Duration::from_millis(timeout_ms.max(1)))
    }
}

/// What a [`StubServer`] does with one request.
#[derive(Debug, Clone)]
pub enum StubReply {
    Reply(WireResponse),
    /// Sends these bytes verbatim.
    Raw(String),
    /// Reads the request and never answers.
    Hang,
}

type Handler = dyn Fn(&WireRequest) -> StubReply + Send + Sync;

/// A local action server for tests and demos.
pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    in_flight: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    accept: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    /// Serves on an ephemeral localhost port; each reply is sent after
    /// `delay`.
    pub fn spawn(
        delay: Duration,
        handler: impl Fn(&WireRequest) -> StubReply + Send + Sync + 'static,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let (stop, in_flight, peak) = (stop.clone(), in_flight.clone(), peak.clone());
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let (handler, in_flight, peak) = (handler.clone(), in_flight.clone(), peak.clone());
                    thread::spawn(move || {
                        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        serve_one(conn, delay, &*handler);
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                    });
                }
            })
        };
        Ok(Self {
            addr,
            stop,
            in_flight,
            peak,
            accept: Some(accept),
        })
    }

    /// Echoes `"{name}:{id}"` for every request.
    pub fn echo(delay: Duration) -> std::io::Result<Self> {
        Self::spawn(delay, |r| {
            StubReply::Reply(WireResponse {
                id: r.id,
                status: thinkact_core::action::WireStatus::Ok,
                payload: format!("{}:{}", r.name, r.id),
            })
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Most requests ever handled at the same time.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }
}

fn serve_one(conn: TcpStream, delay: Duration, handler: &Handler) {
    let Ok(write_half) = conn.try_clone() else { return };
    let mut reader = BufReader::new(conn.take(MAX_REPLY_BYTES));
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let Ok(request) = serde_json::from_str::<WireRequest>(&line) else {
        return;
    };
    thread::sleep(delay);
    let mut out = write_half;
    match handler(&request) {
        StubReply::Reply(r) => {
            if let Ok(mut text) = serde_json::to_string(&r) {
                text.push('\n');
                let _ = out.write_all(text.as_bytes());
            }
        }
        StubReply::Raw(bytes) => {
            let _ = out.write_all(bytes.as_bytes());
        }
        StubReply::Hang => {
            let _ = out.set_read_timeout(Some(Duration::from_secs(30)));
            let mut sink = [0u8; 1];
            let _ = reader.get_mut().get_mut().read(&mut sink);
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Runs one turn's calls with external calls in parallel, at most
/// `max_in_flight` at a time.
///
/// Admission happens first, in call order, so verdicts are the same as
/// with sequential dispatch. Built-ins then run in order on the calling
/// thread; records come back in call order.
pub struct ConcurrentDispatcher {
    pub addr: SocketAddr,
    pub max_in_flight: usize,
}

impl ConcurrentDispatcher {
    #[allow(clippy::too_many_arguments)]
    pub fn dispatch_turn(
        &self,
        registry: &Registry,
        policy: &SecurityPolicy,
        calls: &[ActionCall],
        counters: &mut CallCounters,
        clock: &dyn Clock,
        memory: &mut ContextStore,
        turn_index: u32,
    ) -> Vec<DispatchRecord> {
        let verdicts: Vec<Verdict> = calls.iter().map(|c| admit(registry, policy, c, counters)).collect();
        let mut records: Vec<Option<DispatchRecord>> = vec![None; calls.len()];
        let mut external = Vec::new();
        for (i, (call, verdict)) in calls.iter().zip(&verdicts).enumerate() {
            if *verdict != Verdict::Allowed {
                records[i] = Some(denied_record(call, *verdict));
                continue;
            }
            let spec = registry.get(&call.name).expect("admitted calls are registered");
            match spec.kind {
                ActionKind::External => external.push(i),
                ActionKind::BuiltIn => {
                    let mut env = DispatchEnv {
                        clock,
                        memory: &mut *memory,
                        external: &mut NoExternal,
                        turn_index,
                    };
                    let mut result = eval_builtin(call, &mut env).unwrap_or_else(|e| ActionResult {
                        call_id: call.id,
                        status: ResultStatus::Error,
                        payload: e.to_string(),
                    });
                    truncate_payload(&mut result.payload, spec.max_payload_bytes);
                    records[i] = Some(DispatchRecord {
                        call: call.clone(),
                        result,
                        latency_ms: 0,
                        policy_verdict: Verdict::Allowed,
                    });
                }
            }
        }

        let next = AtomicUsize::new(0);
        let finished: Vec<(usize, DispatchRecord)> = thread::scope(|s| {
            let workers: Vec<_> = (0..self.max_in_flight.max(1).min(external.len()))
                .map(|_| {
                    s.spawn(|| {
                        let mut done = Vec::new();
                        let mut transport = TcpTransport::new(self.addr);
                        loop {
                            let k = next.fetch_add(1, Ordering::SeqCst);
                            let Some(&i) = external.get(k) else { break };
                            let call = &calls[i];
                            let spec = registry.get(&call.name).expect("admitted calls are registered");
                            let started = Instant::now();
                            let request = WireRequest {
                                id: call.id,
                                name: call.name.clone(),
                                args: call.args.clone(),
                            };
                            let mut result = result_from_outcome(call, transport.call(&request, spec.timeout_ms));
                            truncate_payload(&mut result.payload, spec.max_payload_bytes);
                            done.push((
                                i,
                                DispatchRecord {
                                    call: call.clone(),
                                    result,
                                    latency_ms: started.elapsed().as_millis() as u64,
                                    policy_verdict: Verdict::Allowed,
                                },
                            ));
                        }
                        done
                    })
                })
                .collect();
            workers
                .into_iter()
                .flat_map(|w| w.join().expect("worker panicked"))
                .collect()
        });
        for (i, record) in finished {
            records[i] = Some(record);
        }
        records
            .into_iter()
            .map(|r| r.expect("every call has a record"))
            .collect()
    }
}

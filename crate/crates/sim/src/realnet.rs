// SPDX-License-Identifier: Apache-2.0

//! Loopback TCP transport. One thread per node, wall-clock timing.
//!
//! Each connection opens with a name preamble (u16 length + UTF-8) so the
//! receiver knows which node it talks to; frames follow.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use fedcrypt_core::wire::{self, Frame};
use fedcrypt_node::{
    Address, Coordinator, CoordinatorEvent, Envelope, GradientSource, JobStatus, Learner, LearnerEvent, LearnerOptions,
};

use crate::report::ReportRow;
use crate::runner::{default_sources, job_config, learner_name, transform_seconds, SimError};
use crate::scenario::{Scenario, ScenarioError, TransformCost};

const COORDINATOR: &str = "coordinator";

#[derive(Debug, thiserror::Error)]
pub enum RealNetError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    #[error("job did not finish within {0:?}")]
    Timeout(Duration),
}

pub struct RealNetOutcome {
    pub rows: Vec<ReportRow>,
    pub status: JobStatus,
    pub completed_rounds: u32,
    pub parameters: BTreeMap<String, Vec<f64>>,
    pub frames: usize,
}

enum Report {
    Learner(Duration, String, LearnerEvent),
    Coordinator(Duration, CoordinatorEvent),
    Done(String, Vec<f64>),
    Frames(usize),
}

fn write_preamble(stream: &mut TcpStream, name: &str) -> io::Result<()> {
    stream.write_all(&(name.len() as u16).to_be_bytes())?;
    stream.write_all(name.as_bytes())
}

fn read_preamble(stream: &mut impl Read) -> io::Result<String> {
    let mut len = [0u8; 2];
    stream.read_exact(&mut len)?;
    let mut name = vec![0u8; u16::from_be_bytes(len) as usize];
    stream.read_exact(&mut name)?;
    String::from_utf8(name).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "peer name is not UTF-8"))
}

/// Accepts connections and forwards `(peer, frame)` into `inbox`.
fn spawn_acceptor(listener: TcpListener, inbox: Sender<(String, Frame)>) {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let inbox = inbox.clone();
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let mut r = BufReader::new(stream);
                let Ok(peer) = read_preamble(&mut r) else { return };
                while let Ok(Some(frame)) = wire::read_frame(&mut r) {
                    if inbox.send((peer.clone(), frame)).is_err() {
                        break;
                    }
                }
            });
        }
    });
}

struct Outbox {
    me: String,
    book: BTreeMap<String, SocketAddr>,
    conns: BTreeMap<String, BufWriter<TcpStream>>,
    sent: usize,
}

impl Outbox {
    fn send(&mut self, env: &Envelope) {
        let to = match &env.to {
            Address::Coordinator => COORDINATOR.to_string(),
            Address::Participant(n) => n.clone(),
        };
        if !self.conns.contains_key(&to) {
            let Some(addr) = self.book.get(&to) else {
                log::warn!("{}: no address for {to}", self.me);
                return;
            };
            match TcpStream::connect(addr).and_then(|mut s| {
                s.set_nodelay(true)?;
                write_preamble(&mut s, &self.me)?;
                Ok(s)
            }) {
                Ok(s) => {
                    self.conns.insert(to.clone(), BufWriter::new(s));
                }
                Err(e) => {
                    log::warn!("{}: cannot reach {to}: {e}", self.me);
                    return;
                }
            }
        }
        let w = self.conns.get_mut(&to).expect("connected above");
        if let Err(e) = wire::write_frame(w, &env.frame).and_then(|_| w.flush().map_err(Into::into)) {
            log::warn!("{}: send to {to} failed: {e}", self.me);
            self.conns.remove(&to);
            return;
        }
        self.sent += 1;
    }
}

/// Runs `s` over loopback sockets. Failure and collusion plans are not
/// supported here; timings are wall-clock and not reproducible.
pub fn run_real(s: &Scenario, deadline: Duration) -> Result<RealNetOutcome, RealNetError> {
    s.validate().map_err(SimError::from)?;
    if !s.failure_plan.is_empty() || s.collusion_plan.is_some() {
        return Err(SimError::Scenario(ScenarioError::Infeasible(
            "failure and collusion plans need the simulated network".into(),
        ))
        .into());
    }
    run_real_with(s, default_sources(s), deadline)
}

pub fn run_real_with(
    s: &Scenario,
    sources: Vec<Box<dyn GradientSource>>,
    deadline: Duration,
) -> Result<RealNetOutcome, RealNetError> {
    let cfg = job_config(s);
    let names: Vec<String> = (0..s.parties).map(|i| learner_name(i, s.parties)).collect();
    let mut book = BTreeMap::new();
    let mut inboxes = Vec::new();
    for name in std::iter::once(COORDINATOR.to_string()).chain(names.iter().cloned()) {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        book.insert(name.clone(), listener.local_addr()?);
        let (tx, rx) = mpsc::channel();
        spawn_acceptor(listener, tx);
        inboxes.push(rx);
    }
    let start = Instant::now();
    let (report_tx, report_rx) = mpsc::channel::<Report>();
    let mut inboxes = inboxes.into_iter();

    let coordinator = Coordinator::new();
    coordinator
        .create_job(cfg.clone())
        .map_err(|e| SimError::Job(e.to_string()))?;
    let c_inbox = inboxes.next().expect("coordinator inbox");
    let c_book = book.clone();
    let c_report = report_tx.clone();
    let job = cfg.job_id;
    let c_handle = thread::spawn(move || {
        let mut out = Outbox {
            me: COORDINATOR.into(),
            book: c_book,
            conns: BTreeMap::new(),
            sent: 0,
        };
        let emit = |fx: fedcrypt_node::Effects, out: &mut Outbox| {
            for e in fx.events {
                let _ = c_report.send(Report::Coordinator(start.elapsed(), e.event));
            }
            for env in &fx.outbound {
                out.send(env);
            }
        };
        let mut last_tick = Duration::ZERO;
        while start.elapsed() < deadline {
            match c_inbox.recv_timeout(Duration::from_millis(20)) {
                Ok((peer, frame)) => {
                    let fx = coordinator.handle_frame(Some(&peer), frame, start.elapsed());
                    emit(fx, &mut out);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            let now = start.elapsed();
            if now - last_tick >= Duration::from_millis(100) {
                last_tick = now;
                emit(coordinator.tick(now), &mut out);
            }
            if matches!(
                coordinator.status(&job),
                Some(JobStatus::Completed | JobStatus::Aborted)
            ) {
                break;
            }
        }
        let _ = c_report.send(Report::Frames(out.sent));
        coordinator.snapshot(&job)
    });

    let mut handles = Vec::new();
    for ((name, source), inbox) in names.iter().cloned().zip(sources).zip(inboxes) {
        let mut o = LearnerOptions::new(name.clone(), cfg.job_id, cfg.token);
        o.endpoint = book[&name].to_string();
        let l_book = book.clone();
        let l_report = report_tx.clone();
        handles.push(thread::spawn(move || {
            let mut learner = Learner::new(o, source);
            let mut out = Outbox {
                me: name.clone(),
                book: l_book,
                conns: BTreeMap::new(),
                sent: 0,
            };
            let emit = |lo: fedcrypt_node::LearnerOutput, out: &mut Outbox| {
                for e in lo.events {
                    let _ = l_report.send(Report::Learner(start.elapsed(), name.clone(), e));
                }
                for env in &lo.outbound {
                    out.send(env);
                }
            };
            let first = learner.register(start.elapsed());
            emit(first, &mut out);
            while !learner.is_done() && start.elapsed() < deadline {
                match inbox.recv_timeout(Duration::from_millis(20)) {
                    Ok((_, frame)) => {
                        let lo = learner.handle_frame(frame, start.elapsed());
                        emit(lo, &mut out);
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
                let lo = learner.tick(start.elapsed());
                emit(lo, &mut out);
            }
            let _ = l_report.send(Report::Frames(out.sent));
            let _ = l_report.send(Report::Done(name, learner.parameters().to_vec()));
        }));
    }
    drop(report_tx);

    let snapshot = c_handle.join().ok().flatten();
    for h in handles {
        let _ = h.join();
    }
    let mut learner_events = Vec::new();
    let mut coordinator_events = Vec::new();
    let mut parameters = BTreeMap::new();
    let mut frames = 0;
    for r in report_rx.try_iter() {
        match r {
            Report::Learner(t, n, e) => learner_events.push((t, n, e)),
            Report::Coordinator(t, e) => coordinator_events.push((t, e)),
            Report::Done(n, p) => {
                parameters.insert(n, p);
            }
            Report::Frames(n) => frames += n,
        }
    }
    let Some(snapshot) = snapshot else {
        return Err(RealNetError::Timeout(deadline));
    };
    if !matches!(snapshot.status, JobStatus::Completed | JobStatus::Aborted) {
        return Err(RealNetError::Timeout(deadline));
    }
    let rows = wall_rows(s, s.transform, &coordinator_events, &learner_events);
    Ok(RealNetOutcome {
        rows,
        status: snapshot.status,
        completed_rounds: snapshot.completed_rounds,
        parameters,
        frames,
    })
}

/// Round rows from wall-clock events. Communication time is the round span
/// minus the slowest learner's transform time.
fn wall_rows(
    s: &Scenario,
    cost: TransformCost,
    coordinator: &[(Duration, CoordinatorEvent)],
    learners: &[(Duration, String, LearnerEvent)],
) -> Vec<ReportRow> {
    coordinator
        .iter()
        .filter_map(|(_, e)| match e {
            CoordinatorEvent::RoundCompleted { round, parties, .. } => Some((*round, *parties)),
            _ => None,
        })
        .map(|(round, parties)| {
            let mut start: Option<Duration> = None;
            let mut end: Option<Duration> = None;
            let mut transform = 0.0f64;
            for (t, _, e) in learners {
                match e {
                    LearnerEvent::RoundStarted { round: r, .. } if *r == round => {
                        start = Some(start.map_or(*t, |s| s.min(*t)));
                    }
                    LearnerEvent::ResultApplied { round: r, .. } if *r == round => {
                        end = Some(end.map_or(*t, |s| s.max(*t)));
                    }
                    LearnerEvent::TransformDone { round: r, stats } if *r == round => {
                        transform = transform.max(transform_seconds(cost, stats));
                    }
                    _ => {}
                }
            }
            let span = match (start, end) {
                (Some(a), Some(b)) => b.saturating_sub(a).as_secs_f64(),
                _ => 0.0,
            };
            ReportRow::new(parties, s.protocol, round, (span - transform).max(0.0), transform)
        })
        .collect()
}

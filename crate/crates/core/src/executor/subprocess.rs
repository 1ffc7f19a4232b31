use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command as Process, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::protocol::{decode_event, encode_command, Command};
use super::{EventKind, Executor, ExecutorError, ExecutorEvent, LaunchSpec, Poll};
use crate::trial::TrialId;

const STDERR_TAIL_BYTES: usize = 4096;
const REAP_GRACE: Duration = Duration::from_secs(2);
const WAIT_POLL: Duration = Duration::from_millis(10);

struct Worker {
    launch: u64,
    child: Arc<Mutex<Child>>,
    stdin: Option<ChildStdin>,
}

/// Runs each trial in its own child process. stdout is read on a dedicated
/// thread per worker and funneled into one channel; stderr goes to
/// `<log_dir>/<trial>.stderr.log` when a log directory is set.
pub struct SubprocessExecutor {
    argv: Vec<String>,
    env: BTreeMap<String, String>,
    workdir: Option<PathBuf>,
    log_dir: Option<PathBuf>,
    tx: Sender<ExecutorEvent>,
    rx: Receiver<ExecutorEvent>,
    live_readers: Arc<AtomicUsize>,
    workers: HashMap<TrialId, Worker>,
}

impl SubprocessExecutor {
    pub fn new(
        argv: Vec<String>,
        env: BTreeMap<String, String>,
        workdir: Option<PathBuf>,
        log_dir: Option<PathBuf>,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            argv,
            env,
            workdir,
            log_dir,
            tx,
            rx,
            live_readers: Arc::new(AtomicUsize::new(0)),
            workers: HashMap::new(),
        }
    }

    fn stderr_sink(&self, trial: &TrialId) -> Option<File> {
        let dir = self.log_dir.as_ref()?;
        fs::create_dir_all(dir).ok()?;
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{trial}.stderr.log")))
            .ok()
    }
}

fn spawn_stderr(
    mut stderr: impl Read + Send + 'static,
    mut sink: Option<File>,
) -> JoinHandle<String> {
    thread::spawn(move || {
        let mut tail: Vec<u8> = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            match stderr.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if let Some(f) = sink.as_mut() {
                        let _ = f.write_all(&buf[..n]);
                    }
                    tail.extend_from_slice(&buf[..n]);
                    if tail.len() > STDERR_TAIL_BYTES {
                        tail.drain(..tail.len() - STDERR_TAIL_BYTES);
                    }
                }
            }
        }
        String::from_utf8_lossy(&tail).into_owned()
    })
}

fn wait_for_exit(child: &Mutex<Child>, deadline: Option<Instant>) -> Option<i32> {
    loop {
        {
            let mut c = child.lock().expect("child lock");
            match c.try_wait() {
                Ok(Some(status)) => return status.code(),
                Ok(None) => {}
                Err(_) => return None,
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                let _ = c.kill();
                return c.wait().ok().and_then(|s| s.code());
            }
        }
        thread::sleep(WAIT_POLL);
    }
}

impl Executor for SubprocessExecutor {
    fn launch(&mut self, spec: LaunchSpec) -> Result<(), ExecutorError> {
        self.retire(&spec.trial);
        let (program, args) = self
            .argv
            .split_first()
            .expect("worker command validated as non-empty");
        let mut process = Process::new(program);
        process
            .args(args)
            .envs(&self.env)
            .env("TUNECORE_TRIAL_ID", spec.trial.as_str())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.workdir {
            process.current_dir(dir);
        }
        let mut child = process.spawn().map_err(|source| ExecutorError::Spawn {
            trial: spec.trial.clone(),
            source,
        })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let stdin = child.stdin.take();
        let child = Arc::new(Mutex::new(child));
        let stderr_handle = spawn_stderr(stderr, self.stderr_sink(&spec.trial));

        let started = Instant::now();
        let tx = self.tx.clone();
        let live = Arc::clone(&self.live_readers);
        live.fetch_add(1, Ordering::SeqCst);
        let reader_child = Arc::clone(&child);
        let trial = spec.trial.clone();
        let launch = spec.launch;
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            let mut line = Vec::new();
            loop {
                line.clear();
                match reader.read_until(b'\n', &mut line) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {}
                }
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let kind = match decode_event(&line) {
                    Ok(ev) => EventKind::Worker(ev),
                    Err(e) => EventKind::Protocol(e),
                };
                let ev = ExecutorEvent {
                    trial: trial.clone(),
                    launch,
                    kind,
                    wall_time: Some(started.elapsed().as_secs_f64()),
                };
                if tx.send(ev).is_err() {
                    break;
                }
            }
            let stderr_tail = stderr_handle.join().unwrap_or_default();
            let code = wait_for_exit(&reader_child, Some(Instant::now() + REAP_GRACE));
            let _ = tx.send(ExecutorEvent {
                trial,
                launch,
                kind: EventKind::Exited { code, stderr_tail },
                wall_time: Some(started.elapsed().as_secs_f64()),
            });
            live.fetch_sub(1, Ordering::SeqCst);
        });

        self.workers.insert(
            spec.trial.clone(),
            Worker {
                launch: spec.launch,
                child,
                stdin,
            },
        );
        let init = spec.init_command();
        if let Err(e) = self.send(&spec.trial, &init) {
            // the reader thread reports the exit
            log::warn!("{e}");
        }
        Ok(())
    }

    fn send(&mut self, trial: &TrialId, cmd: &Command) -> Result<(), ExecutorError> {
        let worker = self
            .workers
            .get_mut(trial)
            .ok_or_else(|| ExecutorError::UnknownTrial(trial.clone()))?;
        let stdin = worker
            .stdin
            .as_mut()
            .ok_or_else(|| ExecutorError::UnknownTrial(trial.clone()))?;
        let bytes = encode_command(cmd);
        let written = stdin.write_all(&bytes).and_then(|_| stdin.flush());
        if matches!(cmd, Command::Stop) {
            worker.stdin = None;
        }
        written.map_err(|source| ExecutorError::Write {
            trial: trial.clone(),
            source,
        })
    }

    fn retire(&mut self, trial: &TrialId) {
        if let Some(mut worker) = self.workers.remove(trial) {
            log::debug!("retiring worker {} of trial {trial}", worker.launch);
            worker.stdin = None;
            let child = worker.child;
            thread::spawn(move || {
                wait_for_exit(&child, Some(Instant::now() + REAP_GRACE));
            });
        }
    }

    fn next_event(&mut self, timeout: Option<Duration>) -> Poll {
        match self.rx.try_recv() {
            Ok(ev) => return Poll::Event(ev),
            Err(TryRecvError::Disconnected) => return Poll::Idle,
            Err(TryRecvError::Empty) => {}
        }
        if self.live_readers.load(Ordering::SeqCst) == 0 {
            return match self.rx.try_recv() {
                Ok(ev) => Poll::Event(ev),
                Err(_) => Poll::Idle,
            };
        }
        match timeout {
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(ev) => Poll::Event(ev),
                Err(RecvTimeoutError::Timeout) => Poll::Timeout,
                Err(RecvTimeoutError::Disconnected) => Poll::Idle,
            },
            None => match self.rx.recv() {
                Ok(ev) => Poll::Event(ev),
                Err(_) => Poll::Idle,
            },
        }
    }

    fn reset(&mut self) {
        let trials: Vec<TrialId> = self.workers.keys().cloned().collect();
        for t in trials {
            self.retire(&t);
        }
        while self.rx.try_recv().is_ok() {}
    }
}

impl Drop for SubprocessExecutor {
    fn drop(&mut self) {
        for (_, worker) in self.workers.drain() {
            if let Ok(mut c) = worker.child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub passage_id: String,
    pub score: f32,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LatencyMs {
    pub retrieve: u64,
    pub generate: u64,
    pub total: u64,
}

/// One chat turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    /// Unix epoch milliseconds.
    pub timestamp: u64,
    pub mode: String,
    pub approach: String,
    pub kb_id: Option<String>,
    pub query: String,
    pub retrieved: Vec<RetrievedRef>,
    pub epw_weight: u8,
    pub prompt_chars: usize,
    pub response: String,
    pub sentence_sim: Vec<f32>,
    pub token_sim: Vec<f32>,
    pub latency_ms: LatencyMs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

enum Msg {
    Append(Box<AnalysisRecord>, mpsc::Sender<io::Result<()>>),
    Export(PathBuf, mpsc::Sender<io::Result<u64>>),
}

/// Append-only JSON-lines log owned by a single writer thread.
pub struct AnalysisLog {
    path: PathBuf,
    tx: Option<mpsc::Sender<Msg>>,
    worker: Option<JoinHandle<()>>,
}

fn open_append(path: &Path) -> io::Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    OpenOptions::new().create(true).append(true).open(path)
}

fn writer_loop(path: PathBuf, rx: mpsc::Receiver<Msg>) {
    let mut file: Option<File> = None;
    for msg in rx {
        match msg {
            Msg::Append(rec, ack) => {
                let res = (|| {
                    if file.is_none() {
                        file = Some(open_append(&path)?);
                    }
                    let mut line = serde_json::to_vec(&rec).map_err(io::Error::other)?;
                    line.push(b'\n');
                    let f = file.as_mut().expect("opened");
                    let r = f.write_all(&line).and_then(|_| f.flush());
                    if r.is_err() {
                        file = None;
                    }
                    r
                })();
                if let Err(e) = &res {
                    tracing::warn!(error = %e, "analysis log append failed");
                }
                let _ = ack.send(res);
            }
            Msg::Export(dest, ack) => {
                let _ = ack.send(copy_atomic(&path, &dest));
            }
        }
    }
}

fn copy_atomic(src: &Path, dest: &Path) -> io::Result<u64> {
    let mut tmp = dest.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let n = if src.exists() {
        fs::copy(src, &tmp)?
    } else {
        File::create(&tmp)?;
        0
    };
    fs::rename(&tmp, dest)?;
    Ok(n)
}

impl AnalysisLog {
    pub fn open(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let (tx, rx) = mpsc::channel();
        let p = path.clone();
        let worker = std::thread::Builder::new()
            .name("analysis-log".into())
            .spawn(move || writer_loop(p, rx))
            .expect("spawn log writer");
        AnalysisLog {
            path,
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn send(&self, msg: Msg) -> io::Result<()> {
        self.tx
            .as_ref()
            .expect("live until drop")
            .send(msg)
            .map_err(|_| io::Error::other("log writer stopped"))
    }

    /// Append and wait until the line is written.
    pub fn append(&self, record: AnalysisRecord) -> io::Result<()> {
        let (ack, done) = mpsc::channel();
        self.send(Msg::Append(Box::new(record), ack))?;
        done.recv().map_err(|_| io::Error::other("log writer stopped"))?
    }

    /// Copy the log as of now to `dest`, atomically. Returns bytes copied.
    pub fn export(&self, dest: &Path) -> io::Result<u64> {
        let (ack, done) = mpsc::channel();
        self.send(Msg::Export(dest.to_path_buf(), ack))?;
        done.recv().map_err(|_| io::Error::other("log writer stopped"))?
    }

    /// Records `offset..offset+limit` in append order.
    pub fn read_page(&self, offset: usize, limit: usize) -> io::Result<(Vec<AnalysisRecord>, usize)> {
        read_log_page(&self.path, offset, limit)
    }
}

impl Drop for AnalysisLog {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Reads a page and the total record count. A missing file is an empty log.
pub fn read_log_page(path: &Path, offset: usize, limit: usize) -> io::Result<(Vec<AnalysisRecord>, usize)> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    let mut total = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if total >= offset && out.len() < limit {
            let rec = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
            out.push(rec);
        }
        total += 1;
    }
    Ok((out, total))
}

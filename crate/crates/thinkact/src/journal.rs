//! Append-only JSONL journals. Every append is synced before it returns;
//! compaction rewrites the journal through a synced temp file and rename.

use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::files::FileError;

pub struct Journal<E> {
    path: PathBuf,
    file: File,
    /// Bytes known to hold complete events.
    len: u64,
    events: usize,
    _event: PhantomData<fn(E)>,
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl<E: Serialize + DeserializeOwned> Journal<E> {
    /// Opens (creating if needed) and replays the journal.
    ///
    /// A final line without its newline is a torn write from a crash: it
    /// was never acknowledged, so it is cut off. Any other unreadable line
    /// is corruption and an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<E>), FileError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| FileError::io(dir, e))?;
        }
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(FileError::io(path, e)),
        };
        let good_len = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        let mut events = Vec::new();
        for (i, line) in bytes[..good_len].split(|b| *b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            events.push(serde_json::from_slice::<E>(line).map_err(|e| FileError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(path)
            .map_err(|e| FileError::io(path, e))?;
        file.set_len(good_len as u64).map_err(|e| FileError::io(path, e))?;
        file.sync_all().map_err(|e| FileError::io(path, e))?;
        let mut file = file;
        file.seek(SeekFrom::End(0)).map_err(|e| FileError::io(path, e))?;
        let n = events.len();
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                len: good_len as u64,
                events: n,
                _event: PhantomData,
            },
            events,
        ))
    }

    /// Appends and syncs; the event is durable when this returns `Ok`.
    pub fn append(&mut self, event: &E) -> Result<(), FileError> {
        let mut line = serde_json::to_string(event).map_err(|e| FileError::Schema {
            path: self.path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        line.push('\n');
        if let Err(e) = self.file.write_all(line.as_bytes()).and_then(|_| self.file.sync_data()) {
            // drop any partial line so later appends start on a boundary
            let _ = self.file.set_len(self.len);
            let _ = self.file.seek(SeekFrom::End(0));
            return Err(FileError::io(&self.path, e));
        }
        self.len += line.len() as u64;
        self.events += 1;
        Ok(())
    }

    /// Events in the file, including superseded ones.
    pub fn len(&self) -> usize {
        self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events == 0
    }

    /// Replaces the journal with `snapshot`, atomically.
    pub fn compact(&mut self, snapshot: &[E]) -> Result<(), FileError> {
        let tmp = self.path.with_extension("jsonl.compact");
        let new_len = {
            let mut f = File::create(&tmp).map_err(|e| FileError::io(&tmp, e))?;
            let mut buf = String::new();
            for ev in snapshot {
                buf.push_str(&serde_json::to_string(ev).map_err(|e| FileError::Schema {
                    path: tmp.clone(),
                    line: 0,
                    message: e.to_string(),
                })?);
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())
                .and_then(|_| f.sync_all())
                .map_err(|e| FileError::io(&tmp, e))?;
            buf.len() as u64
        };
        fs::rename(&tmp, &self.path).map_err(|e| FileError::io(&self.path, e))?;
        if let Some(dir) = self.path.parent() {
            sync_dir(dir);
        }
        self.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| FileError::io(&self.path, e))?;
        self.len = new_len;
        self.events = snapshot.len();
        Ok(())
    }
}

//! Human perceptual studies: trial pool, sessions and an append-only
//! judgment log.
//!
//! The judgment log is a JSON-lines file of [`JudgmentRecord`]s; session
//! metadata lives next to it in `<db>.sessions`. Every mutation is appended
//! and flushed before it is acknowledged, so a crash loses at most the
//! request in flight. A torn final line is ignored on reopen.

pub mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Category, RatingKind, RatingRecord, TwoAfcTrial};
use crate::rng::Rng;

pub use server::{router, serve};

/// Environment variable that overrides the judgment log path.
pub const DB_ENV: &str = "PERCEPTRA_DB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyMode {
    Afc,
    Stars,
}

impl std::str::FromStr for StudyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "afc" => Ok(Self::Afc),
            "stars" => Ok(Self::Stars),
            _ => Err(Error::invalid(format!("mode must be afc or stars, got {s:?}"))),
        }
    }
}

/// One line of a study manifest. 2AFC trials need `x0` and `x1`; rating
/// trials only use `ref` (the image to rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTrial {
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RatingKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_id: Option<String>,
}

impl StudyTrial {
    fn image_refs(&self, mode: StudyMode) -> Result<Vec<&str>> {
        match mode {
            StudyMode::Stars => Ok(vec![&self.reference]),
            StudyMode::Afc => match (&self.x0, &self.x1) {
                (Some(a), Some(b)) => Ok(vec![&self.reference, a, b]),
                _ => Err(Error::invalid(format!("2AFC trial {} lacks x0/x1", self.reference))),
            },
        }
    }
}

pub fn read_study_manifest(path: impl AsRef<Path>) -> Result<Vec<StudyTrial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Image bytes keyed by the SHA-256 of their content.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: HashMap<String, (Vec<u8>, &'static str)>,
}

fn content_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        "image/x-portable-graymap"
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        "image/x-portable-pixmap"
    } else {
        "application/octet-stream"
    }
}

impl ImageStore {
    pub fn insert(&mut self, bytes: Vec<u8>) -> String {
        let id = hex::encode(Sha256::digest(&bytes).as_slice());
        let ct = content_type(&bytes);
        self.images.entry(id.clone()).or_insert((bytes, ct));
        id
    }

    pub fn get(&self, id: &str) -> Option<(&[u8], &'static str)> {
        self.images.get(id).map(|(b, c)| (b.as_slice(), *c))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub session_id: String,
    pub rater_id: String,
    pub trial_id: String,
    pub payload: Value,
    /// RFC 3339 / ISO-8601 timestamp.
    pub wall_time: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub rater_id: String,
    pub mode: StudyMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct Session {
    record: SessionRecord,
    order: Vec<usize>,
    judged: BTreeSet<String>,
}

/// What `next` hands to a rater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextTrial {
    Trial { trial_id: String, images: Vec<String>, mode: StudyMode },
    Done { done: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub judged: usize,
    pub total: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StudyError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("trial {0} already judged in this session")]
    Duplicate(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

/// Sessions, trial pool and the open judgment log. Callers serialize
/// mutations (the server holds it behind a mutex).
pub struct Study {
    mode: StudyMode,
    trials: Vec<StudyTrial>,
    trial_images: Vec<Vec<String>>,
    images: ImageStore,
    sessions: BTreeMap<String, Session>,
    db_path: PathBuf,
    db: File,
    sessions_log: File,
}

pub fn sessions_path(db: &Path) -> PathBuf {
    let mut s = db.as_os_str().to_owned();
    s.push(".sessions");
    PathBuf::from(s)
}

/// Parses complete JSON lines; a final line without a newline (torn write)
/// is dropped.
fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn open_append(path: &Path) -> Result<File> {
    let mut f = OpenOptions::new().create(true).append(true).read(true).open(path).map_err(|e| Error::io(path, e))?;
    // drop a torn tail so the next append starts on a fresh line
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    if len > 0 {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if text.last() != Some(&b'\n') {
            let keep = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            drop(f);
            OpenOptions::new()
                .write(true)
                .open(path)
                .and_then(|w| w.set_len(keep as u64))
                .map_err(|e| Error::io(path, e))?;
            f = OpenOptions::new().append(true).read(true).open(path).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(f)
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> std::result::Result<(), StudyError> {
    let mut line = serde_json::to_vec(value).map_err(|e| StudyError::Storage(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line).and_then(|_| file.sync_data()).map_err(|e| StudyError::Storage(e.to_string()))
}

fn session_order(seed: u64, n: usize) -> Vec<usize> {
    Rng::new(seed).permutation(n)
}

impl Study {
    /// Loads the trial images (paths relative to `base`) and reopens `db`.
    pub fn open(trials: Vec<StudyTrial>, base: impl AsRef<Path>, mode: StudyMode, db: impl AsRef<Path>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::invalid("study manifest has no trials"));
        }
        let base = base.as_ref();
        let mut images = ImageStore::default();
        let mut trial_images = Vec::with_capacity(trials.len());
        let mut by_path: HashMap<String, String> = HashMap::new();
        for t in &trials {
            let mut ids = Vec::new();
            for r in t.image_refs(mode)? {
                let id = match by_path.get(r) {
                    Some(id) => id.clone(),
                    None => {
                        let path = base.join(r);
                        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                        let id = images.insert(bytes);
                        by_path.insert(r.to_string(), id.clone());
                        id
                    }
                };
                ids.push(id);
            }
            trial_images.push(ids);
        }
        let db_path = db.as_ref().to_path_buf();
        if let Some(dir) = db_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let spath = sessions_path(&db_path);
        let session_records: Vec<SessionRecord> = read_log(&spath)?;
        let judgments: Vec<JudgmentRecord> = read_log(&db_path)?;
        let mut sessions = BTreeMap::new();
        for rec in session_records {
            let order = session_order(rec.seed, trials.len());
            sessions.insert(rec.session_id.clone(), Session { record: rec, order, judged: BTreeSet::new() });
        }
        for j in &judgments {
            if let Some(s) = sessions.get_mut(&j.session_id) {
                s.judged.insert(j.trial_id.clone());
            }
        }
        let db = open_append(&db_path)?;
        let sessions_log = open_append(&spath)?;
        Ok(Self { mode, trials, trial_images, images, sessions, db_path, db, sessions_log })
    }

    pub fn mode(&self) -> StudyMode {
        self.mode
    }

    pub fn trials(&self) -> &[StudyTrial] {
        &self.trials
    }

    pub fn images(&self) -> &ImageStore {
        &self.images
    }

    pub fn db_path(&self) -> &Path {
        &self.db_path
    }

    pub fn trial_id(index: usize) -> String {
        format!("t{index:05}")
    }

    fn trial_index(&self, id: &str) -> Option<usize> {
        let i: usize = id.strip_prefix('t')?.parse().ok()?;
        (i < self.trials.len() && Self::trial_id(i) == id).then_some(i)
    }

    /// Registers a session. Without an explicit seed the order seed is
    /// derived from the session id.
    pub fn create_session(&mut self, rater_id: &str, mode: StudyMode, seed: Option<u64>) -> std::result::Result<String, StudyError> {
        if rater_id.trim().is_empty() {
            return Err(StudyError::BadRequest("rater_id must be non-empty".into()));
        }
        if mode != self.mode {
            return Err(StudyError::BadRequest(format!("this study runs in {:?} mode", self.mode)));
        }
        let digest = Sha256::new()
            .chain_update(rater_id.as_bytes())
            .chain_update((self.sessions.len() as u64).to_le_bytes())
            .chain_update(seed.unwrap_or(u64::MAX).to_le_bytes())
            .finalize();
        let session_id = format!("s{}", &hex::encode(digest.as_slice())[..16]);
        let seed = seed.unwrap_or_else(|| u64::from_le_bytes(digest[8..16].try_into().expect("8 bytes")));
        let record = SessionRecord { session_id: session_id.clone(), rater_id: rater_id.to_string(), mode, seed };
        append_line(&mut self.sessions_log, &record)?;
        let order = session_order(seed, self.trials.len());
        self.sessions.insert(session_id.clone(), Session { record, order, judged: BTreeSet::new() });
        Ok(session_id)
    }

    fn session(&self, id: &str) -> std::result::Result<&Session, StudyError> {
        self.sessions.get(id).ok_or_else(|| StudyError::UnknownSession(id.to_string()))
    }

    pub fn next(&self, session_id: &str) -> std::result::Result<NextTrial, StudyError> {
        let s = self.session(session_id)?;
        Ok(s.order
            .iter()
            .map(|&i| (i, Self::trial_id(i)))
            .find(|(_, id)| !s.judged.contains(id))
            .map_or(NextTrial::Done { done: true }, |(i, trial_id)| NextTrial::Trial {
                trial_id,
                images: self.trial_images[i].iter().map(|id| format!("/api/image/{id}")).collect(),
                mode: self.mode,
            }))
    }

    fn check_payload(&self, payload: &Value) -> std::result::Result<(), StudyError> {
        let bad = |m: &str| Err(StudyError::BadRequest(m.to_string()));
        let Some(obj) = payload.as_object() else { return bad("payload must be an object") };
        match self.mode {
            StudyMode::Afc => match obj.get("choice").and_then(Value::as_u64) {
                Some(0 | 1) if !obj.contains_key("stars") => Ok(()),
                _ => bad("afc payload needs choice 0 or 1"),
            },
            StudyMode::Stars => match obj.get("stars").and_then(Value::as_u64) {
                Some(1..=6) if !obj.contains_key("choice") => Ok(()),
                _ => bad("stars payload needs stars in 1..6"),
            },
        }
    }

    /// Validates, appends and acknowledges one judgment.
    pub fn record_judgment(&mut self, session_id: &str, trial_id: &str, payload: Value) -> std::result::Result<JudgmentRecord, StudyError> {
        let rater_id = self.session(session_id)?.record.rater_id.clone();
        if self.trial_index(trial_id).is_none() {
            return Err(StudyError::BadRequest(format!("unknown trial {trial_id}")));
        }
        self.check_payload(&payload)?;
        if self.session(session_id)?.judged.contains(trial_id) {
            return Err(StudyError::Duplicate(trial_id.to_string()));
        }
        let record = JudgmentRecord {
            session_id: session_id.to_string(),
            rater_id,
            trial_id: trial_id.to_string(),
            payload,
            wall_time: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        append_line(&mut self.db, &record)?;
        self.sessions.get_mut(session_id).expect("checked above").judged.insert(trial_id.to_string());
        Ok(record)
    }

    pub fn progress(&self, session_id: &str) -> std::result::Result<Progress, StudyError> {
        let s = self.session(session_id)?;
        Ok(Progress { judged: s.judged.len(), total: self.trials.len() })
    }
}

/// All complete judgment records in a log.
pub fn read_judgments(db: impl AsRef<Path>) -> Result<Vec<JudgmentRecord>> {
    read_log(db.as_ref())
}

pub fn read_sessions(db: impl AsRef<Path>) -> Result<Vec<SessionRecord>> {
    read_log(&sessions_path(db.as_ref()))
}

/// Copies the judgment log to `out` (one record per line). Returns the count.
pub fn export(db: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<usize> {
    let records = read_judgments(db)?;
    let out = out.as_ref();
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(out, buf).map_err(|e| Error::io(out, e))?;
    Ok(records.len())
}

/// Per-trial fraction of judgments choosing `x1`, over trials with at least
/// one judgment.
pub fn pool_afc(records: &[JudgmentRecord]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        if let Some(c) = r.payload.get("choice").and_then(Value::as_u64) {
            let e = counts.entry(r.trial_id.clone()).or_default();
            e.0 += (c == 1) as usize;
            e.1 += 1;
        }
    }
    counts.into_iter().map(|(k, (ones, n))| (k, ones as f64 / n as f64)).collect()
}

/// 2AFC trials with pooled human `p`, ready for metric evaluation.
pub fn pooled_trials(trials: &[StudyTrial], records: &[JudgmentRecord]) -> Vec<TwoAfcTrial> {
    let pooled = pool_afc(records);
    trials
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let p = *pooled.get(&Study::trial_id(i))?;
            Some(TwoAfcTrial {
                reference: t.reference.clone(),
                x0: t.x0.clone()?,
                x1: t.x1.clone()?,
                p,
                category: t.category.unwrap_or(Category::Synthetic),
            })
        })
        .collect()
}

/// Star judgments as rating records; trial metadata supplies kind and set.
pub fn rating_records(trials: &[StudyTrial], records: &[JudgmentRecord]) -> Vec<RatingRecord> {
    records
        .iter()
        .filter_map(|r| {
            let stars = r.payload.get("stars").and_then(Value::as_u64)? as u8;
            let i: usize = r.trial_id.strip_prefix('t')?.parse().ok()?;
            let t = trials.get(i)?;
            Some(RatingRecord {
                rater_id: r.rater_id.clone(),
                image_id: t.reference.clone(),
                kind: t.kind.unwrap_or(RatingKind::Synthetic),
                stars,
                set_id: t.set_id.clone().unwrap_or_else(|| "set1".into()),
            })
        })
        .collect()
}

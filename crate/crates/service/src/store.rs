//! Feedback records, jobs and checkpoint metadata in one SQLite file.
//! Checkpoints and PNGs live next to it as flat files.

use std::collections::HashSet;
use std::path::Path;

use rusqlite::{params, Connection, OptionalExtension};
use saliencytune::metrics::MetricsReport;
use saliencytune::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS feedback (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    sample_id TEXT NOT NULL,
    corrected_label INTEGER,
    mask_file TEXT,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT NOT NULL UNIQUE,
    status TEXT NOT NULL,
    input_checkpoint TEXT NOT NULL,
    output_checkpoint TEXT,
    config TEXT NOT NULL,
    feedback_ids TEXT NOT NULL,
    before_metrics TEXT,
    after_metrics TEXT,
    error TEXT,
    created_at INTEGER NOT NULL,
    updated_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS checkpoints (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT NOT NULL UNIQUE,
    parent TEXT,
    job_id TEXT,
    file TEXT NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn as_str(self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        }
    }

    fn rank(self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Done | JobStatus::Failed => 2,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "queued" => JobStatus::Queued,
            "running" => JobStatus::Running,
            "done" => JobStatus::Done,
            "failed" => JobStatus::Failed,
            other => return Err(Error::State(format!("unknown job status `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FineTuneJob {
    pub job_id: String,
    pub status: JobStatus,
    pub input_checkpoint: String,
    pub output_checkpoint: Option<String>,
    pub feedback_ids: Vec<i64>,
    pub config: TrainingConfig,
    pub before: Option<MetricsReport>,
    pub after: Option<MetricsReport>,
    pub error: Option<String>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoredFeedback {
    pub id: i64,
    pub sample_id: String,
    pub corrected_label: Option<usize>,
    pub mask_file: Option<String>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub parent: Option<String>,
    pub job_id: Option<String>,
    pub file: String,
    pub created_at: u64,
}

pub fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct JobRow {
    id: String,
    status: String,
    input_checkpoint: String,
    output_checkpoint: Option<String>,
    config: String,
    feedback_ids: String,
    before: Option<String>,
    after: Option<String>,
    error: Option<String>,
    created_at: i64,
    updated_at: i64,
}

pub struct Store {
    conn: Connection,
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn })
    }

    pub fn insert_feedback(&self, sample_id: &str, label: Option<usize>, mask_file: Option<&str>) -> Result<i64> {
        self.conn.execute(
            "INSERT INTO feedback (sample_id, corrected_label, mask_file, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![sample_id, label.map(|l| l as i64), mask_file, now() as i64],
        )?;
        Ok(self.conn.last_insert_rowid())
    }

    pub fn feedback(&self, ids: &[i64]) -> Result<Vec<Option<StoredFeedback>>> {
        let mut stmt = self.conn.prepare(
            "SELECT id, sample_id, corrected_label, mask_file, created_at FROM feedback WHERE id = ?1",
        )?;
        ids.iter()
            .map(|id| {
                Ok(stmt
                    .query_row([id], |r| {
                        Ok(StoredFeedback {
                            id: r.get(0)?,
                            sample_id: r.get(1)?,
                            corrected_label: r.get::<_, Option<i64>>(2)?.map(|l| l as usize),
                            mask_file: r.get(3)?,
                            created_at: r.get::<_, i64>(4)? as u64,
                        })
                    })
                    .optional()?)
            })
            .collect()
    }

    /// Feedback not claimed by any job that is queued, running or done.
    pub fn pending_feedback(&self) -> Result<Vec<i64>> {
        let mut claimed = HashSet::new();
        for job in self.jobs()? {
            if job.status != JobStatus::Failed {
                claimed.extend(job.feedback_ids);
            }
        }
        let mut stmt = self.conn.prepare("SELECT id FROM feedback ORDER BY id")?;
        let ids = stmt
            .query_map([], |r| r.get::<_, i64>(0))?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(ids.into_iter().filter(|id| !claimed.contains(id)).collect())
    }

    pub fn create_job(&self, input_checkpoint: &str, config: &TrainingConfig, feedback_ids: &[i64]) -> Result<String> {
        let t = now() as i64;
        let tx = self.conn.unchecked_transaction()?;
        let seq: i64 = tx.query_row("SELECT COALESCE(MAX(seq), 0) + 1 FROM jobs", [], |r| r.get(0))?;
        let id = format!("job-{seq:04}");
        tx.execute(
            "INSERT INTO jobs (seq, id, status, input_checkpoint, config, feedback_ids, created_at, updated_at)
             VALUES (?1, ?2, 'queued', ?3, ?4, ?5, ?6, ?6)",
            params![
                seq,
                id,
                input_checkpoint,
                serde_json::to_string(config)?,
                serde_json::to_string(feedback_ids)?,
                t
            ],
        )?;
        tx.commit()?;
        Ok(id)
    }

    /// Moves a job from `from` to `to`; statuses never move backwards.
    pub fn transition(&self, id: &str, from: JobStatus, to: JobStatus) -> Result<()> {
        if to.rank() <= from.rank() {
            return Err(Error::State(format!("job {id}: {from:?} → {to:?} is not forward")));
        }
        let n = self.conn.execute(
            "UPDATE jobs SET status = ?3, updated_at = ?4 WHERE id = ?1 AND status = ?2",
            params![id, from.as_str(), to.as_str(), now() as i64],
        )?;
        if n != 1 {
            return Err(Error::State(format!("job {id} is not {}", from.as_str())));
        }
        Ok(())
    }

    pub fn finish_job(
        &self,
        id: &str,
        output_checkpoint: &str,
        before: &MetricsReport,
        after: &MetricsReport,
    ) -> Result<()> {
        let n = self.conn.execute(
            "UPDATE jobs SET status = 'done', output_checkpoint = ?2, before_metrics = ?3, after_metrics = ?4,
             updated_at = ?5 WHERE id = ?1 AND status = 'running'",
            params![
                id,
                output_checkpoint,
                serde_json::to_string(before)?,
                serde_json::to_string(after)?,
                now() as i64
            ],
        )?;
        if n != 1 {
            return Err(Error::State(format!("job {id} is not running")));
        }
        Ok(())
    }

    pub fn fail_job(&self, id: &str, error: &str) -> Result<()> {
        self.conn.execute(
            "UPDATE jobs SET status = 'failed', error = ?2, updated_at = ?3
             WHERE id = ?1 AND status IN ('queued', 'running')",
            params![id, error, now() as i64],
        )?;
        Ok(())
    }

    /// Jobs a previous process left unfinished.
    pub fn fail_interrupted(&self) -> Result<usize> {
        Ok(self.conn.execute(
            "UPDATE jobs SET status = 'failed', error = 'interrupted by restart', updated_at = ?1
             WHERE status IN ('queued', 'running')",
            [now() as i64],
        )?)
    }

    fn job_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<JobRow> {
        Ok(JobRow {
            id: r.get(0)?,
            status: r.get(1)?,
            input_checkpoint: r.get(2)?,
            output_checkpoint: r.get(3)?,
            config: r.get(4)?,
            feedback_ids: r.get(5)?,
            before: r.get(6)?,
            after: r.get(7)?,
            error: r.get(8)?,
            created_at: r.get(9)?,
            updated_at: r.get(10)?,
        })
    }

    fn finish_row(row: JobRow) -> Result<FineTuneJob> {
        let metrics = |s: Option<String>| s.map(|s| serde_json::from_str(&s)).transpose();
        Ok(FineTuneJob {
            job_id: row.id,
            status: JobStatus::parse(&row.status)?,
            input_checkpoint: row.input_checkpoint,
            output_checkpoint: row.output_checkpoint,
            feedback_ids: serde_json::from_str(&row.feedback_ids)?,
            config: serde_json::from_str(&row.config)?,
            before: metrics(row.before)?,
            after: metrics(row.after)?,
            error: row.error,
            created_at: row.created_at as u64,
            updated_at: row.updated_at as u64,
        })
    }

    const JOB_COLUMNS: &'static str = "id, status, input_checkpoint, output_checkpoint, config, feedback_ids,
        before_metrics, after_metrics, error, created_at, updated_at";

    pub fn job(&self, id: &str) -> Result<Option<FineTuneJob>> {
        let row = self
            .conn
            .query_row(
                &format!("SELECT {} FROM jobs WHERE id = ?1", Self::JOB_COLUMNS),
                [id],
                Self::job_from_row,
            )
            .optional()?;
        row.map(Self::finish_row).transpose()
    }

    pub fn jobs(&self) -> Result<Vec<FineTuneJob>> {
        let mut stmt = self
            .conn
            .prepare(&format!("SELECT {} FROM jobs ORDER BY seq", Self::JOB_COLUMNS))?;
        let rows = stmt
            .query_map([], Self::job_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter().map(Self::finish_row).collect()
    }

    /// Reserves the next checkpoint id and records where its file lives.
    pub fn add_checkpoint(&self, parent: Option<&str>, job_id: Option<&str>) -> Result<CheckpointInfo> {
        let tx = self.conn.unchecked_transaction()?;
        let seq: i64 = tx.query_row("SELECT COALESCE(MAX(seq), 0) + 1 FROM checkpoints", [], |r| r.get(0))?;
        let info = CheckpointInfo {
            id: format!("ckpt-{seq:04}"),
            parent: parent.map(String::from),
            job_id: job_id.map(String::from),
            file: format!("ckpt-{seq:04}.json"),
            created_at: now(),
        };
        tx.execute(
            "INSERT INTO checkpoints (seq, id, parent, job_id, file, created_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![seq, info.id, info.parent, info.job_id, info.file, info.created_at as i64],
        )?;
        tx.commit()?;
        Ok(info)
    }

    pub fn checkpoints(&self) -> Result<Vec<CheckpointInfo>> {
        let mut stmt = self
            .conn
            .prepare("SELECT id, parent, job_id, file, created_at FROM checkpoints ORDER BY seq")?;
        let rows = stmt
            .query_map([], |r| {
                Ok(CheckpointInfo {
                    id: r.get(0)?,
                    parent: r.get(1)?,
                    job_id: r.get(2)?,
                    file: r.get(3)?,
                    created_at: r.get::<_, i64>(4)? as u64,
                })
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    pub fn active_checkpoint(&self) -> Result<Option<String>> {
        Ok(self
            .conn
            .query_row("SELECT value FROM meta WHERE key = 'active_checkpoint'", [], |r| r.get(0))
            .optional()?)
    }

    pub fn set_active_checkpoint(&self, id: &str) -> Result<()> {
        self.conn.execute(
            "INSERT INTO meta (key, value) VALUES ('active_checkpoint', ?1)
             ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            [id],
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_only_move_forward() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("db")).unwrap();
        let id = store.create_job("ckpt-0001", &TrainingConfig::default(), &[1]).unwrap();
        assert!(store.transition(&id, JobStatus::Running, JobStatus::Queued).is_err());
        assert!(store.transition(&id, JobStatus::Running, JobStatus::Done).is_err());
        store.transition(&id, JobStatus::Queued, JobStatus::Running).unwrap();
        assert!(store.transition(&id, JobStatus::Queued, JobStatus::Running).is_err());
        store.fail_job(&id, "boom").unwrap();
        let job = store.job(&id).unwrap().unwrap();
        assert_eq!(job.status, JobStatus::Failed);
        // terminal jobs are not touched again
        store.fail_job(&id, "again").unwrap();
        assert_eq!(store.job(&id).unwrap().unwrap().error.as_deref(), Some("boom"));
    }

    #[test]
    fn failed_jobs_release_their_feedback() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("db")).unwrap();
        for _ in 0..3 {
            store.insert_feedback("s", Some(0), None).unwrap();
        }
        let a = store.create_job("c", &TrainingConfig::default(), &[1, 2]).unwrap();
        assert_eq!(store.pending_feedback().unwrap(), vec![3]);
        store.fail_job(&a, "x").unwrap();
        assert_eq!(store.pending_feedback().unwrap(), vec![1, 2, 3]);
        assert_eq!(store.feedback(&[2, 9]).unwrap()[1], None);
    }
}

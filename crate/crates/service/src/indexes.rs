use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use ragforge_core::runner::{IndexKind, IndexSummary};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct IndexRequest {
    /// Name of a corpus listed by `GET /corpora`.
    pub corpus: String,
    pub index: IndexKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum IndexStatus {
    Building,
    Ready,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct IndexJob {
    pub index_id: String,
    pub corpus: String,
    pub status: IndexStatus,
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    #[schemars(with = "Option<serde_json::Value>")]
    pub summary: Option<IndexSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Index builds, at most one in flight per corpus.
#[derive(Default)]
pub struct IndexRegistry {
    jobs: Mutex<BTreeMap<String, IndexJob>>,
}

pub enum Claim {
    Started(IndexJob),
    /// Another build for the same corpus is still running.
    Busy(IndexJob),
}

impl IndexRegistry {
    pub fn claim(&self, index_id: String, corpus: &str, dir: PathBuf) -> Claim {
        let mut jobs = self.jobs.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(busy) = jobs
            .values()
            .find(|j| j.corpus == corpus && j.status == IndexStatus::Building)
        {
            return Claim::Busy(busy.clone());
        }
        let job = IndexJob {
            index_id: index_id.clone(),
            corpus: corpus.to_string(),
            status: IndexStatus::Building,
            dir,
            summary: None,
            error: None,
        };
        jobs.insert(index_id, job.clone());
        Claim::Started(job)
    }

    pub fn complete(&self, index_id: &str, result: Result<IndexSummary, String>) {
        let mut jobs = self.jobs.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(job) = jobs.get_mut(index_id) {
            match result {
                Ok(s) => {
                    job.status = IndexStatus::Ready;
                    job.summary = Some(s);
                    job.error = None;
                }
                Err(e) => {
                    job.status = IndexStatus::Failed;
                    job.error = Some(e);
                }
            }
        }
    }

    pub fn get(&self, index_id: &str) -> Option<IndexJob> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).get(index_id).cloned()
    }

    pub fn list(&self) -> Vec<IndexJob> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner()).values().cloned().collect()
    }
}

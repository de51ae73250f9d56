//! Majority-vote annotation study over correctly predicted samples.
//!
//! A study directory holds `study.json` (the task list) and `votes.jsonl`
//! (an append-only vote log). All state is derived by replaying the log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::Evaluation;

pub const DEFAULT_VOTES_NEEDED: usize = 3;
pub const STUDY_FILE: &str = "study.json";
pub const VOTE_LOG_FILE: &str = "votes.jsonl";
pub const ANNOTATORS_FILE: &str = "annotators.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("unknown study {0:?}")]
    UnknownStudy(String),
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("annotator id must be non-empty and contain no control characters")]
    InvalidAnnotator,
    #[error("sample {0:?} is not a task of this study")]
    UnknownTask(String),
    #[error("annotator {annotator_id:?} already voted on {sample_id:?}")]
    DuplicateVote { sample_id: String, annotator_id: String },
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(i64),
    #[error("task {0:?} is already resolved")]
    ResolvedTask(String),
    #[error("overlay missing for samples {0:?}")]
    MissingOverlay(Vec<String>),
    #[error("no correctly predicted samples to study")]
    EmptyStudy,
    #[error("no resolved tasks yet")]
    NoResolvedTasks,
    #[error("votes_needed must be a positive odd number, got {0}")]
    InvalidQuorum(usize),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed study data: {0}")]
    Format(String),
}

/// One correctly predicted sample awaiting judgments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyTask {
    pub sample_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub image: PathBuf,
    pub overlay: PathBuf,
    pub votes_needed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub sample_id: String,
    pub annotator_id: String,
    /// 1 when the highlighted evidence is event-related.
    pub label: u8,
    pub timestamp: DateTime<Utc>,
}

/// Contents of `study.json`. Tasks are sorted by sample id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDefinition {
    pub study_id: String,
    pub votes_needed: usize,
    pub class_names: Vec<String>,
    pub tasks: Vec<StudyTask>,
}

/// Request accepted by [`StudyStore::create_study`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateStudy {
    pub evaluation: Evaluation,
    /// Dataset root the sample ids are relative to.
    pub image_root: PathBuf,
    /// Directory holding one overlay per sample, see [`overlay_path`].
    pub overlay_dir: PathBuf,
    #[serde(default = "default_votes_needed")]
    pub votes_needed: usize,
}

fn default_votes_needed() -> usize {
    DEFAULT_VOTES_NEEDED
}

/// Overlay location for a sample: same relative path, `.png` extension.
pub fn overlay_path(overlay_dir: &Path, sample_id: &str) -> PathBuf {
    overlay_dir.join(sample_id).with_extension("png")
}

/// Majority of an odd number of binary labels.
pub fn majority(labels: &[u8]) -> u8 {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    u8::from(2 * ones > labels.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_name: String,
    pub resolved: usize,
    pub positive: usize,
    /// `None` when the class has no resolved task.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    pub per_class: Vec<ClassAccuracy>,
    /// Per-class accuracies weighted by resolved-task counts.
    pub weighted_average: f64,
    pub resolved_tasks: usize,
    pub unresolved_tasks: usize,
    pub total_votes: usize,
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Status of a task as served to annotators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub task: StudyTask,
    pub votes_received: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

/// Outcome of an accepted vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    pub sample_id: String,
    pub votes_received: usize,
    pub resolved_label: Option<u8>,
}

/// In-memory study state; every transition goes through [`StudyState::apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudyState {
    pub definition: StudyDefinition,
    index: BTreeMap<String, usize>,
    votes: Vec<Vec<VoteRecord>>,
}

impl StudyState {
    pub fn new(definition: StudyDefinition) -> Self {
        let index = definition.tasks.iter().enumerate().map(|(i, t)| (t.sample_id.clone(), i)).collect();
        let votes = vec![Vec::new(); definition.tasks.len()];
        Self { definition, index, votes }
    }

    /// Rebuilds the state from a vote log.
    pub fn replay(definition: StudyDefinition, records: &[VoteRecord]) -> Result<Self, StudyError> {
        let mut state = Self::new(definition);
        for r in records {
            state.check(&r.sample_id, &r.annotator_id, i64::from(r.label))?;
            state.apply(r.clone());
        }
        Ok(state)
    }

    fn votes_needed(&self) -> usize {
        self.definition.votes_needed
    }

    /// Validates a vote without changing state.
    pub fn check(&self, sample_id: &str, annotator_id: &str, label: i64) -> Result<usize, StudyError> {
        if !(0..=1).contains(&label) {
            return Err(StudyError::InvalidLabel(label));
        }
        let &i = self.index.get(sample_id).ok_or_else(|| StudyError::UnknownTask(sample_id.to_string()))?;
        if self.votes[i].iter().any(|v| v.annotator_id == annotator_id) {
            return Err(StudyError::DuplicateVote {
                sample_id: sample_id.to_string(),
                annotator_id: annotator_id.to_string(),
            });
        }
        if self.votes[i].len() >= self.votes_needed() {
            return Err(StudyError::ResolvedTask(sample_id.to_string()));
        }
        Ok(i)
    }

    fn apply(&mut self, record: VoteRecord) -> VoteAck {
        let i = self.index[&record.sample_id];
        self.votes[i].push(record);
        VoteAck {
            sample_id: self.definition.tasks[i].sample_id.clone(),
            votes_received: self.votes[i].len(),
            resolved_label: self.resolution(i),
        }
    }

    fn resolution(&self, i: usize) -> Option<u8> {
        let votes = &self.votes[i];
        (votes.len() >= self.votes_needed())
            .then(|| majority(&votes.iter().map(|v| v.label).collect::<Vec<_>>()))
    }

    pub fn resolved_label(&self, sample_id: &str) -> Option<u8> {
        self.index.get(sample_id).and_then(|&i| self.resolution(i))
    }

    pub fn votes_for(&self, sample_id: &str) -> &[VoteRecord] {
        self.index.get(sample_id).map_or(&[], |&i| &self.votes[i])
    }

    pub fn task(&self, sample_id: &str) -> Option<&StudyTask> {
        self.index.get(sample_id).map(|&i| &self.definition.tasks[i])
    }

    /// Fewest votes first, ties by sample id; skips resolved tasks and tasks
    /// the annotator already judged.
    pub fn next_task(&self, annotator_id: &str) -> Option<TaskStatus> {
        self.definition
            .tasks
            .iter()
            .zip(&self.votes)
            .filter(|(_, v)| v.len() < self.votes_needed() && v.iter().all(|r| r.annotator_id != annotator_id))
            .min_by(|(ta, va), (tb, vb)| va.len().cmp(&vb.len()).then_with(|| ta.sample_id.cmp(&tb.sample_id)))
            .map(|(t, v)| TaskStatus { task: t.clone(), votes_received: v.len() })
    }

    /// Tasks this annotator has judged, out of all tasks.
    pub fn progress(&self, annotator_id: &str) -> Progress {
        Progress {
            answered: self.votes.iter().filter(|v| v.iter().any(|r| r.annotator_id == annotator_id)).count(),
            total: self.definition.tasks.len(),
        }
    }

    pub fn report(&self) -> Result<StudyReport, StudyError> {
        let names = &self.definition.class_names;
        let mut resolved = vec![0usize; names.len()];
        let mut positive = vec![0usize; names.len()];
        let mut unresolved = 0;
        for (i, task) in self.definition.tasks.iter().enumerate() {
            match self.resolution(i) {
                Some(label) => {
                    resolved[task.class_id] += 1;
                    positive[task.class_id] += usize::from(label);
                }
                None => unresolved += 1,
            }
        }
        let total: usize = resolved.iter().sum();
        if total == 0 {
            return Err(StudyError::NoResolvedTasks);
        }
        let per_class: Vec<ClassAccuracy> = names
            .iter()
            .enumerate()
            .map(|(c, name)| ClassAccuracy {
                class_name: name.clone(),
                resolved: resolved[c],
                positive: positive[c],
                accuracy: (resolved[c] > 0).then(|| positive[c] as f64 / resolved[c] as f64),
            })
            .collect();
        let weighted_average = per_class
            .iter()
            .filter_map(|c| c.accuracy.map(|a| a * c.resolved as f64))
            .sum::<f64>()
            / total as f64;
        Ok(StudyReport {
            study_id: self.definition.study_id.clone(),
            per_class,
            weighted_average,
            resolved_tasks: total,
            unresolved_tasks: unresolved,
            total_votes: self.votes.iter().map(Vec::len).sum(),
        })
    }
}

/// Builds the task list for a study: one task per correct prediction.
pub fn define_study(request: &CreateStudy) -> Result<StudyDefinition, StudyError> {
    let n = request.votes_needed;
    if n == 0 || n.is_multiple_of(2) {
        return Err(StudyError::InvalidQuorum(n));
    }
    let class_names = request.evaluation.report.class_names.clone();
    let mut correct: Vec<_> = request.evaluation.predictions.iter().filter(|p| p.is_correct()).collect();
    if correct.is_empty() {
        return Err(StudyError::EmptyStudy);
    }
    correct.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let missing: Vec<String> = correct
        .iter()
        .filter(|p| !overlay_path(&request.overlay_dir, &p.sample_id).is_file())
        .map(|p| p.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(StudyError::MissingOverlay(missing));
    }
    let mut tasks = Vec::with_capacity(correct.len());
    for p in correct {
        let class_name = class_names
            .get(p.true_class)
            .ok_or_else(|| StudyError::Format(format!("class {} of {} has no name", p.true_class, p.sample_id)))?;
        tasks.push(StudyTask {
            sample_id: p.sample_id.clone(),
            class_id: p.true_class,
            class_name: class_name.clone(),
            image: request.image_root.join(&p.sample_id),
            overlay: overlay_path(&request.overlay_dir, &p.sample_id),
            votes_needed: n,
        });
    }
    let mut definition = StudyDefinition { study_id: String::new(), votes_needed: n, class_names, tasks };
    let digest = Sha256::digest(serde_json::to_vec(&definition).expect("definition serializes"));
    definition.study_id = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok(definition)
}

pub fn read_vote_log(path: &Path) -> Result<Vec<VoteRecord>, StudyError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    BufReader::new(File::open(path)?)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(n, line)| {
            serde_json::from_str(&line?).map_err(|e| StudyError::Format(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Replays a study directory into a report.
pub fn replay_report(study_dir: &Path) -> Result<StudyReport, StudyError> {
    let definition = read_definition(&study_dir.join(STUDY_FILE))?;
    let votes = read_vote_log(&study_dir.join(VOTE_LOG_FILE))?;
    StudyState::replay(definition, &votes)?.report()
}

fn read_definition(path: &Path) -> Result<StudyDefinition, StudyError> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| StudyError::Format(format!("{}: {e}", path.display())))
}

fn append_line(path: &Path, line: &str) -> Result<(), StudyError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{line}\n").as_bytes())?;
    f.sync_data()?;
    Ok(())
}

struct LiveStudy {
    state: StudyState,
    log: PathBuf,
}

/// Persistent, thread-safe collection of studies and registered annotators.
pub struct StudyStore {
    root: PathBuf,
    studies: Mutex<BTreeMap<String, Arc<Mutex<LiveStudy>>>>,
    annotators: Mutex<BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotatorRecord {
    annotator_id: String,
    registered: DateTime<Utc>,
}

impl StudyStore {
    /// Opens (or creates) a store rooted at `root`, replaying every study log.
    pub fn open(root: &Path) -> Result<Self, StudyError> {
        fs::create_dir_all(root.join("studies"))?;
        let mut studies = BTreeMap::new();
        let mut dirs: Vec<_> = fs::read_dir(root.join("studies"))?.collect::<Result<_, _>>()?;
        dirs.sort_by_key(|e| e.file_name());
        for entry in dirs {
            let dir = entry.path();
            if !dir.join(STUDY_FILE).is_file() {
                continue;
            }
            let definition = read_definition(&dir.join(STUDY_FILE))?;
            let log = dir.join(VOTE_LOG_FILE);
            let state = StudyState::replay(definition, &read_vote_log(&log)?)?;
            studies.insert(state.definition.study_id.clone(), Arc::new(Mutex::new(LiveStudy { state, log })));
        }
        let mut annotators = BTreeSet::new();
        let path = root.join(ANNOTATORS_FILE);
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: AnnotatorRecord =
                    serde_json::from_str(&line).map_err(|e| StudyError::Format(format!("{}: {e}", path.display())))?;
                annotators.insert(rec.annotator_id);
            }
        }
        Ok(Self { root: root.to_path_buf(), studies: Mutex::new(studies), annotators: Mutex::new(annotators) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn study_dir(&self, study_id: &str) -> PathBuf {
        self.root.join("studies").join(study_id)
    }

    /// Creates a study; re-creating an identical study returns the same id.
    pub fn create_study(&self, request: &CreateStudy) -> Result<String, StudyError> {
        let definition = define_study(request)?;
        let id = definition.study_id.clone();
        let mut studies = self.studies.lock().expect("store lock");
        if studies.contains_key(&id) {
            return Ok(id);
        }
        let dir = self.study_dir(&id);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join(format!("{STUDY_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&definition).expect("definition serializes"))?;
        fs::rename(&tmp, dir.join(STUDY_FILE))?;
        let log = dir.join(VOTE_LOG_FILE);
        File::create(&log)?;
        studies.insert(id.clone(), Arc::new(Mutex::new(LiveStudy { state: StudyState::new(definition), log })));
        Ok(id)
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.studies.lock().expect("store lock").keys().cloned().collect()
    }

    /// Registers an annotator id; registering twice is a no-op.
    pub fn register_annotator(&self, annotator_id: &str) -> Result<(), StudyError> {
        if annotator_id.trim().is_empty() || annotator_id.chars().any(char::is_control) {
            return Err(StudyError::InvalidAnnotator);
        }
        let mut set = self.annotators.lock().expect("annotator lock");
        if set.contains(annotator_id) {
            return Ok(());
        }
        let rec = AnnotatorRecord { annotator_id: annotator_id.to_string(), registered: Utc::now() };
        append_line(&self.root.join(ANNOTATORS_FILE), &serde_json::to_string(&rec).expect("record serializes"))?;
        set.insert(annotator_id.to_string());
        Ok(())
    }

    pub fn is_annotator(&self, annotator_id: &str) -> bool {
        self.annotators.lock().expect("annotator lock").contains(annotator_id)
    }

    fn study(&self, study_id: &str) -> Result<Arc<Mutex<LiveStudy>>, StudyError> {
        self.studies
            .lock()
            .expect("store lock")
            .get(study_id)
            .cloned()
            .ok_or_else(|| StudyError::UnknownStudy(study_id.to_string()))
    }

    fn require_annotator(&self, annotator_id: &str) -> Result<(), StudyError> {
        if self.is_annotator(annotator_id) {
            Ok(())
        } else {
            Err(StudyError::UnknownAnnotator(annotator_id.to_string()))
        }
    }

    pub fn next_task(&self, study_id: &str, annotator_id: &str) -> Result<Option<TaskStatus>, StudyError> {
        Ok(self.next_task_with_progress(study_id, annotator_id)?.0)
    }

    /// Next task plus the annotator's progress, read under one lock.
    pub fn next_task_with_progress(
        &self,
        study_id: &str,
        annotator_id: &str,
    ) -> Result<(Option<TaskStatus>, Progress), StudyError> {
        let study = self.study(study_id)?;
        self.require_annotator(annotator_id)?;
        let live = study.lock().expect("study lock");
        Ok((live.state.next_task(annotator_id), live.state.progress(annotator_id)))
    }

    /// Validates, appends to the log and applies the vote as one step under
    /// the study lock.
    pub fn submit_vote(
        &self,
        study_id: &str,
        annotator_id: &str,
        sample_id: &str,
        label: i64,
    ) -> Result<VoteAck, StudyError> {
        let study = self.study(study_id)?;
        self.require_annotator(annotator_id)?;
        let mut live = study.lock().expect("study lock");
        live.state.check(sample_id, annotator_id, label)?;
        let record = VoteRecord {
            sample_id: sample_id.to_string(),
            annotator_id: annotator_id.to_string(),
            label: label as u8,
            timestamp: Utc::now(),
        };
        append_line(&live.log, &serde_json::to_string(&record).expect("vote serializes"))?;
        Ok(live.state.apply(record))
    }

    pub fn report(&self, study_id: &str) -> Result<StudyReport, StudyError> {
        self.study(study_id)?.lock().expect("study lock").state.report()
    }

    pub fn task(&self, study_id: &str, sample_id: &str) -> Result<StudyTask, StudyError> {
        let study = self.study(study_id)?;
        let live = study.lock().expect("study lock");
        live.state.task(sample_id).cloned().ok_or_else(|| StudyError::UnknownTask(sample_id.to_string()))
    }

    /// Finds a task by sample id in any study (lowest study id first).
    pub fn find_task(&self, sample_id: &str) -> Option<StudyTask> {
        let studies: Vec<_> = self.studies.lock().expect("store lock").values().cloned().collect();
        studies.iter().find_map(|s| s.lock().expect("study lock").state.task(sample_id).cloned())
    }

    pub fn state(&self, study_id: &str) -> Result<StudyState, StudyError> {
        Ok(self.study(study_id)?.lock().expect("study lock").state.clone())
    }
}

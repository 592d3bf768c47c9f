//! The orchestration pipeline. Stages run phase by phase — every item's
//! initial rationale, then every review, then every caption — with up to P
//! concurrent backend calls inside a phase. Results are applied to the
//! store in dataset order by a single writer, so the store bytes are
//! independent of P and of completion order.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use crate::data::VQAItem;
use crate::orchestrator::{
    LlmBackend, OrchestratorError, PromptTemplates, RationaleRecord, RecordStore, Stage, Verdict,
};

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Concurrent backend calls within a phase (≥ 1).
    pub parallelism: usize,
    /// Rerun stages whose results already exist.
    pub force: bool,
    /// Extra verdict requests after an unparseable review reply.
    pub max_reasks: u32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            parallelism: 1,
            force: false,
            max_reasks: 2,
        }
    }
}

/// What a pipeline run did. Returned only when every item resolved.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    /// Final records in dataset order.
    pub records: Vec<RationaleRecord>,
    pub initial_generated: usize,
    pub verdicts_resolved: usize,
    /// Subset of resolved verdicts that were Ineffective and regenerated.
    pub regenerated: usize,
    pub captions_generated: usize,
    /// Stage executions skipped because a prior run already did the work.
    pub skipped_stages: usize,
}

#[derive(Debug)]
pub struct PipelineFailure {
    pub item_id: String,
    pub stage: Stage,
    pub message: String,
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "item '{}' [{}]: {}",
            self.item_id, self.stage, self.message
        )
    }
}

/// Generate R_î for one item. `Ok(None)` means the existing record already
/// has one and `force` is off.
pub fn generate_initial_rationale(
    item: &VQAItem,
    existing: Option<&RationaleRecord>,
    backend: &dyn LlmBackend,
    templates: &PromptTemplates,
    force: bool,
) -> Result<Option<RationaleRecord>, OrchestratorError> {
    let needed = force || existing.is_none_or(|r| r.initial_rationale.is_empty());
    if !needed {
        return Ok(None);
    }
    let prompt = templates.render(Stage::Initial, item, None)?;
    let response = backend.send(Stage::Initial, &item.id, &prompt, &item.image_features)?;
    if response.trim().is_empty() {
        return Err(OrchestratorError::EmptyResponse {
            stage: Stage::Initial,
            item_id: item.id.clone(),
        });
    }
    let mut record = existing
        .cloned()
        .unwrap_or_else(|| RationaleRecord::fresh(&item.id));
    record.initial_rationale = response;
    // A new rationale invalidates any earlier review of the old one.
    record.verdict = Verdict::Unresolved;
    record.followup_rationale = String::new();
    record.attempt_count += 1;
    Ok(Some(record))
}

fn strip_prefix_ignore_ascii_case<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix)
        .then(|| &s[prefix.len()..])
}

/// A verdict is a whole line reading `VERDICT: EFFECTIVE` or
/// `VERDICT: INEFFECTIVE` (case-insensitive, surrounding whitespace
/// ignored). Free-text verdicts are deliberately not inferred.
fn parse_verdict(reply: &str) -> Option<Verdict> {
    for line in reply.lines() {
        let line = line.trim();
        let Some(rest) = strip_prefix_ignore_ascii_case(line, "VERDICT:") else {
            continue;
        };
        let rest = rest.trim();
        if rest.eq_ignore_ascii_case("EFFECTIVE") {
            return Some(Verdict::Effective);
        }
        if rest.eq_ignore_ascii_case("INEFFECTIVE") {
            return Some(Verdict::Ineffective);
        }
    }
    None
}

/// Review R_î. Effective keeps it: R_f̂ is set to the byte-identical text.
/// Ineffective triggers one regeneration call whose reply becomes R_f̂.
/// An unparseable reply is re-asked up to `max_reasks` times, then fails.
pub fn follow_up_review(
    item: &VQAItem,
    record: &RationaleRecord,
    backend: &dyn LlmBackend,
    templates: &PromptTemplates,
    force: bool,
    max_reasks: u32,
) -> Result<Option<RationaleRecord>, OrchestratorError> {
    if record.initial_rationale.is_empty() {
        return Err(OrchestratorError::MissingInitial {
            item_id: item.id.clone(),
        });
    }
    let resolved = matches!(record.verdict, Verdict::Effective | Verdict::Ineffective);
    if resolved && !force {
        return Ok(None);
    }
    let prompt = templates.render(Stage::Followup, item, Some(&record.initial_rationale))?;
    let mut attempts = 0u32;
    while attempts <= max_reasks {
        attempts += 1;
        let reply = backend.send(Stage::Followup, &item.id, &prompt, &item.image_features)?;
        match parse_verdict(&reply) {
            Some(Verdict::Effective) => {
                let mut updated = record.clone();
                updated.verdict = Verdict::Effective;
                updated.followup_rationale = updated.initial_rationale.clone();
                return Ok(Some(updated));
            }
            Some(Verdict::Ineffective) => {
                let regen_prompt =
                    templates.render(Stage::Regen, item, Some(&record.initial_rationale))?;
                let replacement =
                    backend.send(Stage::Regen, &item.id, &regen_prompt, &item.image_features)?;
                if replacement.trim().is_empty() {
                    return Err(OrchestratorError::EmptyResponse {
                        stage: Stage::Regen,
                        item_id: item.id.clone(),
                    });
                }
                let mut updated = record.clone();
                updated.verdict = Verdict::Ineffective;
                updated.followup_rationale = replacement;
                return Ok(Some(updated));
            }
            _ => {}
        }
    }
    Err(OrchestratorError::UnresolvedVerdict {
        item_id: item.id.clone(),
        attempts,
    })
}

/// Caption the item's image. `Ok(None)` when already captioned and not
/// forced.
pub fn generate_caption(
    item: &VQAItem,
    record: &RationaleRecord,
    backend: &dyn LlmBackend,
    templates: &PromptTemplates,
    force: bool,
) -> Result<Option<RationaleRecord>, OrchestratorError> {
    if !record.caption.is_empty() && !force {
        return Ok(None);
    }
    let prompt = templates.render(Stage::Caption, item, None)?;
    let caption = backend.send(Stage::Caption, &item.id, &prompt, &item.image_features)?;
    if caption.trim().is_empty() {
        return Err(OrchestratorError::EmptyResponse {
            stage: Stage::Caption,
            item_id: item.id.clone(),
        });
    }
    let mut updated = record.clone();
    updated.caption = caption;
    Ok(Some(updated))
}

struct PhaseOutcome {
    updated: usize,
    skipped: usize,
}

/// Apply one phase's per-item results in dataset order. Only records that
/// actually changed are appended, so a rerun over finished work writes
/// nothing and the store file stays byte-identical.
fn apply_phase(
    items: &[VQAItem],
    results: Vec<Result<Option<RationaleRecord>, OrchestratorError>>,
    stage: Stage,
    state: &mut BTreeMap<String, RationaleRecord>,
    failed: &mut HashSet<String>,
    failures: &mut Vec<PipelineFailure>,
    store: &RecordStore,
) -> Result<PhaseOutcome, OrchestratorError> {
    let mut changed = Vec::new();
    let mut outcome = PhaseOutcome {
        updated: 0,
        skipped: 0,
    };
    let upsert = |record: RationaleRecord,
                  state: &mut BTreeMap<String, RationaleRecord>,
                  changed: &mut Vec<RationaleRecord>| {
        if state.get(&record.item_id) != Some(&record) {
            changed.push(record.clone());
            state.insert(record.item_id.clone(), record);
        }
    };
    for (item, result) in items.iter().zip(results) {
        match result {
            Ok(Some(record)) => {
                outcome.updated += 1;
                upsert(record, state, &mut changed);
            }
            Ok(None) => outcome.skipped += 1,
            Err(e) => {
                failures.push(PipelineFailure {
                    item_id: item.id.clone(),
                    stage,
                    message: e.to_string(),
                });
                failed.insert(item.id.clone());
                let mut record = state
                    .get(&item.id)
                    .cloned()
                    .unwrap_or_else(|| RationaleRecord::fresh(&item.id));
                if matches!(stage, Stage::Initial | Stage::Followup) {
                    record.verdict = Verdict::Unresolved;
                    record.followup_rationale = String::new();
                }
                upsert(record, state, &mut changed);
            }
        }
    }
    store.append(&changed)?;
    Ok(outcome)
}

/// Run all stages over a dataset against one backend, persisting progress
/// after each phase. Fails — after processing everything it can — if any
/// item ends without an Effective/Ineffective verdict or any stage call
/// failed; the error message is the failure report.
pub fn run_pipeline(
    items: &[VQAItem],
    backend: &dyn LlmBackend,
    templates: &PromptTemplates,
    store: &RecordStore,
    opts: &PipelineOptions,
) -> Result<PipelineReport, OrchestratorError> {
    if opts.parallelism == 0 {
        return Err(OrchestratorError::Config("parallelism must be ≥ 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| OrchestratorError::Config(format!("thread pool: {e}")))?;

    let mut state = store.load()?;
    let mut failures = Vec::new();
    let mut failed: HashSet<String> = HashSet::new();
    let mut skipped_stages = 0usize;

    // Phase 1: initial rationales.
    let snapshot = state.clone();
    let results = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                generate_initial_rationale(
                    item,
                    snapshot.get(&item.id),
                    backend,
                    templates,
                    opts.force,
                )
            })
            .collect::<Vec<_>>()
    });
    let initial = apply_phase(
        items,
        results,
        Stage::Initial,
        &mut state,
        &mut failed,
        &mut failures,
        store,
    )?;
    skipped_stages += initial.skipped;

    // Phase 2: validity review and regeneration.
    let failed_before_review = failed.len();
    let snapshot = state.clone();
    let results = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                if failed.contains(&item.id) {
                    return Ok(None);
                }
                let record =
                    snapshot
                        .get(&item.id)
                        .ok_or_else(|| OrchestratorError::MissingInitial {
                            item_id: item.id.clone(),
                        })?;
                follow_up_review(
                    item,
                    record,
                    backend,
                    templates,
                    opts.force,
                    opts.max_reasks,
                )
            })
            .collect::<Vec<_>>()
    });
    let regenerated = results
        .iter()
        .filter(|r| matches!(r, Ok(Some(rec)) if rec.verdict == Verdict::Ineffective))
        .count();
    let review = apply_phase(
        items,
        results,
        Stage::Followup,
        &mut state,
        &mut failed,
        &mut failures,
        store,
    )?;
    // Items skipped because an earlier phase failed are not idle skips.
    skipped_stages += review.skipped - failed_before_review;

    // Phase 3: captions.
    let failed_before_caption = failed.len();
    let snapshot = state.clone();
    let results = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                if failed.contains(&item.id) {
                    return Ok(None);
                }
                let record =
                    snapshot
                        .get(&item.id)
                        .ok_or_else(|| OrchestratorError::MissingInitial {
                            item_id: item.id.clone(),
                        })?;
                generate_caption(item, record, backend, templates, opts.force)
            })
            .collect::<Vec<_>>()
    });
    let caption = apply_phase(
        items,
        results,
        Stage::Caption,
        &mut state,
        &mut failed,
        &mut failures,
        store,
    )?;
    skipped_stages += caption.skipped - failed_before_caption;

    // Aggregate verdict: every item must be resolved.
    let unresolved: Vec<&str> = items
        .iter()
        .filter(|it| {
            state
                .get(&it.id)
                .is_none_or(|r| r.verdict == Verdict::Unresolved)
        })
        .map(|it| it.id.as_str())
        .collect();
    if !failures.is_empty() || !unresolved.is_empty() {
        let mut report = String::new();
        for f in &failures {
            report.push_str(&f.to_string());
            report.push('\n');
        }
        report.push_str(&format!("unresolved items: {}", unresolved.join(", ")));
        return Err(OrchestratorError::Pipeline(unresolved.len(), report));
    }

    Ok(PipelineReport {
        records: items
            .iter()
            .filter_map(|it| state.get(&it.id).cloned())
            .collect(),
        initial_generated: initial.updated,
        verdicts_resolved: review.updated,
        regenerated,
        captions_generated: caption.updated,
        skipped_stages,
    })
}

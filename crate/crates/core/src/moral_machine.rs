//! Preprocessing of raw Moral Machine session records into a binary-gender
//! label matrix and attribute table.
//!
//! A task is an automated vehicle choosing which of two character groups to
//! save. The pipeline keeps voters with usable survey answers, restricts to
//! male/female voters, identifies tasks by their character multisets alone,
//! encodes "save the male characters" as class 1 and "save the female
//! characters" as class 2 (zero-based 0/1 internally, male voters attribute
//! 0, female voters attribute 1), filters sparse voters and tasks, and
//! balances each task's labels across voter genders.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Serialize;

use crate::data::{AttributeTable, LabelMatrix, LoadedLabels};
use crate::error::{Error, Result};

/// Character multiset of one scenario side.
pub type CharacterGroup = BTreeMap<String, u32>;

/// Scenario fields that never contribute to task identity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioContext {
    pub intervention: String,
    pub barrier: String,
    pub crossing_signal: String,
}

/// A voter's survey answer within one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveyResponse {
    /// Normalized (lowercased, trimmed) gender answer.
    pub gender: String,
    /// True when the answer equals a configured survey default, meaning the
    /// voter likely never touched the field.
    pub is_default: bool,
}

/// One scenario response: a voter, within a session, chose which of two
/// character groups an automated vehicle should save.
#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: String,
    pub voter_id: String,
    pub survey: Option<SurveyResponse>,
    pub scenario: [CharacterGroup; 2],
    /// Index (0 or 1) of the saved group.
    pub choice: usize,
    pub extra: ScenarioContext,
}

/// Pipeline settings. The survey's default values are configurable because
/// the raw export does not flag untouched answers explicitly.
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub min_labels_female_voter: usize,
    pub min_labels_task: usize,
    /// Gender strings treated as the survey default (normalized form).
    pub default_gender_values: Vec<String>,
    pub male_values: Vec<String>,
    pub female_values: Vec<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_labels_female_voter: 10,
            min_labels_task: 10,
            default_gender_values: vec!["default".into()],
            male_values: vec!["male".into()],
            female_values: vec!["female".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepCounts {
    pub step: String,
    pub voters: usize,
    pub tasks: usize,
    pub labels: usize,
}

/// Retention after every pipeline step, plus skip counters.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RetentionReport {
    pub steps: Vec<StepCounts>,
    pub non_gender_scenarios: usize,
    pub duplicate_labels: usize,
    pub unparseable_rows: usize,
}

#[derive(Debug)]
pub struct PreprocessOutput {
    pub labels: LoadedLabels,
    pub attrs: AttributeTable,
    pub report: RetentionReport,
}

const MALE_CHARACTERS: [&str; 7] = [
    "man",
    "oldman",
    "boy",
    "largeman",
    "maleexecutive",
    "maleathlete",
    "maledoctor",
];
const FEMALE_CHARACTERS: [&str; 8] = [
    "woman",
    "oldwoman",
    "girl",
    "largewoman",
    "femaleexecutive",
    "femaleathlete",
    "femaledoctor",
    "pregnant",
];

fn side_gender(group: &CharacterGroup) -> Option<u8> {
    let mut male = 0u32;
    let mut female = 0u32;
    for (character, &count) in group {
        let c = character.to_lowercase();
        if MALE_CHARACTERS.contains(&c.as_str()) {
            male += count;
        } else if FEMALE_CHARACTERS.contains(&c.as_str()) {
            female += count;
        }
    }
    match male.cmp(&female) {
        std::cmp::Ordering::Greater => Some(0),
        std::cmp::Ordering::Less => Some(1),
        std::cmp::Ordering::Equal => None,
    }
}

fn canonical_side(group: &CharacterGroup) -> String {
    group
        .iter()
        .filter(|&(_, &count)| count > 0)
        .map(|(character, count)| format!("{}:{}", character.to_lowercase(), count))
        .collect::<Vec<_>>()
        .join(";")
}

/// Task identity from character multisets alone, male side first, so
/// mirrored scenarios and context variations (intervention, barrier,
/// crossing signal) collapse onto one task. Returns `(task_id, male_side)`.
fn gender_task_id(scenario: &[CharacterGroup; 2]) -> Option<(String, usize)> {
    let g0 = side_gender(&scenario[0])?;
    let g1 = side_gender(&scenario[1])?;
    if g0 == g1 {
        return None;
    }
    let male_side = usize::from(g0 != 0);
    let female_side = 1 - male_side;
    Some((
        format!(
            "{}|{}",
            canonical_side(&scenario[male_side]),
            canonical_side(&scenario[female_side])
        ),
        male_side,
    ))
}

/// Resolves a voter's gender from their per-session survey answers:
/// a single surveyed session, default answers in all but one session, or
/// identical answers every time. Conflicting answers disqualify the voter.
fn resolve_gender(surveys: &[SurveyResponse]) -> Option<String> {
    match surveys.len() {
        0 => None,
        1 => Some(surveys[0].gender.clone()),
        _ => {
            let non_default: Vec<&SurveyResponse> =
                surveys.iter().filter(|s| !s.is_default).collect();
            if non_default.len() == 1 {
                return Some(non_default[0].gender.clone());
            }
            let first = &surveys[0].gender;
            if surveys.iter().all(|s| &s.gender == first) {
                return Some(first.clone());
            }
            None
        }
    }
}

/// Runs the seven-step pipeline over scenario records.
pub fn preprocess_mm<I>(records: I, config: &PreprocessConfig) -> Result<PreprocessOutput>
where
    I: IntoIterator<Item = SessionRecord>,
{
    let mut report = RetentionReport::default();

    // Gather records per voter and survey answers per (voter, session).
    let mut record_list = Vec::new();
    let mut session_surveys: HashMap<(String, String), SurveyResponse> = HashMap::new();
    let mut sessions_seen: HashMap<String, Vec<String>> = HashMap::new();
    for record in records {
        if record.choice > 1 {
            report.unparseable_rows += 1;
            continue;
        }
        let sessions = sessions_seen.entry(record.voter_id.clone()).or_default();
        if !sessions.contains(&record.session_id) {
            sessions.push(record.session_id.clone());
        }
        if let Some(survey) = &record.survey {
            session_surveys
                .entry((record.voter_id.clone(), record.session_id.clone()))
                .or_insert_with(|| survey.clone());
        }
        record_list.push(record);
    }
    let parsed_voters = sessions_seen.len();
    report.steps.push(StepCounts {
        step: "parsed".into(),
        voters: parsed_voters,
        tasks: 0,
        labels: record_list.len(),
    });

    // Step 1: voters with usable survey answers.
    let mut voter_gender: HashMap<String, String> = HashMap::new();
    for (voter, sessions) in &sessions_seen {
        let surveys: Vec<SurveyResponse> = sessions
            .iter()
            .filter_map(|s| session_surveys.get(&(voter.clone(), s.clone())).cloned())
            .collect();
        if let Some(gender) = resolve_gender(&surveys) {
            voter_gender.insert(voter.clone(), gender);
        }
    }
    record_list.retain(|r| voter_gender.contains_key(&r.voter_id));
    report.steps.push(StepCounts {
        step: "usable_survey".into(),
        voters: voter_gender.len(),
        tasks: 0,
        labels: record_list.len(),
    });

    // Step 2: male/female voters only.
    let attr_of = |gender: &str| -> Option<u8> {
        if config.male_values.iter().any(|v| v == gender) {
            Some(0)
        } else if config.female_values.iter().any(|v| v == gender) {
            Some(1)
        } else {
            None
        }
    };
    let voter_attr: HashMap<String, u8> = voter_gender
        .iter()
        .filter_map(|(voter, gender)| attr_of(gender).map(|a| (voter.clone(), a)))
        .collect();
    record_list.retain(|r| voter_attr.contains_key(&r.voter_id));
    report.steps.push(StepCounts {
        step: "binary_gender".into(),
        voters: voter_attr.len(),
        tasks: 0,
        labels: record_list.len(),
    });

    // Steps 3-4: task identities and labels (0 = saved male side).
    // A voter answering the same task again keeps only the first response.
    let mut labels: Vec<(String, String, usize)> = Vec::new();
    let mut seen_pair: HashMap<(String, String), ()> = HashMap::new();
    for record in &record_list {
        let Some((task_id, male_side)) = gender_task_id(&record.scenario) else {
            report.non_gender_scenarios += 1;
            continue;
        };
        let class = usize::from(record.choice != male_side);
        if seen_pair
            .insert((record.voter_id.clone(), task_id.clone()), ())
            .is_some()
        {
            report.duplicate_labels += 1;
            continue;
        }
        labels.push((record.voter_id.clone(), task_id, class));
    }
    let count_distinct = |labels: &[(String, String, usize)]| -> (usize, usize) {
        let voters: std::collections::HashSet<&String> = labels.iter().map(|l| &l.0).collect();
        let tasks: std::collections::HashSet<&String> = labels.iter().map(|l| &l.1).collect();
        (voters.len(), tasks.len())
    };
    let (v, t) = count_distinct(&labels);
    report.steps.push(StepCounts {
        step: "gender_tasks".into(),
        voters: v,
        tasks: t,
        labels: labels.len(),
    });

    // Step 5: female voters need at least `min_labels_female_voter` labels.
    let mut per_voter_count: HashMap<&String, usize> = HashMap::new();
    for (voter, _, _) in &labels {
        *per_voter_count.entry(voter).or_default() += 1;
    }
    let keep_voter: std::collections::HashSet<String> = per_voter_count
        .iter()
        .filter(|(voter, &count)| {
            voter_attr[voter.as_str()] == 0 || count >= config.min_labels_female_voter
        })
        .map(|(voter, _)| (*voter).clone())
        .collect();
    let labels: Vec<(String, String, usize)> = labels
        .into_iter()
        .filter(|(voter, _, _)| keep_voter.contains(voter))
        .collect();
    let (v, t) = count_distinct(&labels);
    report.steps.push(StepCounts {
        step: "female_min_labels".into(),
        voters: v,
        tasks: t,
        labels: labels.len(),
    });

    // Step 6: tasks need at least `min_labels_task` female labels.
    let mut female_per_task: HashMap<&String, usize> = HashMap::new();
    for (voter, task, _) in &labels {
        if voter_attr[voter.as_str()] == 1 {
            *female_per_task.entry(task).or_default() += 1;
        }
    }
    let keep_task: std::collections::HashSet<String> = female_per_task
        .iter()
        .filter(|(_, &count)| count >= config.min_labels_task)
        .map(|(task, _)| (*task).clone())
        .collect();
    let labels: Vec<(String, String, usize)> = labels
        .into_iter()
        .filter(|(_, task, _)| keep_task.contains(task))
        .collect();
    let (v, t) = count_distinct(&labels);
    report.steps.push(StepCounts {
        step: "task_min_labels".into(),
        voters: v,
        tasks: t,
        labels: labels.len(),
    });

    // Step 7: per task, equal numbers of male and female labels. All
    // qualifying female labels are taken (truncated by voter id only if
    // males are scarcer); males are picked by descending overall label
    // count, ties broken by voter id.
    let mut male_total: HashMap<&String, usize> = HashMap::new();
    for (voter, _, _) in &labels {
        if voter_attr[voter.as_str()] == 0 {
            *male_total.entry(voter).or_default() += 1;
        }
    }
    let male_total: HashMap<String, usize> = male_total
        .into_iter()
        .map(|(voter, count)| (voter.clone(), count))
        .collect();

    let mut by_task: BTreeMap<&String, Vec<&(String, String, usize)>> = BTreeMap::new();
    for label in &labels {
        by_task.entry(&label.1).or_default().push(label);
    }
    let mut balanced: Vec<(String, String, usize)> = Vec::new();
    for (_, task_labels) in by_task {
        let mut females: Vec<&(String, String, usize)> = task_labels
            .iter()
            .filter(|l| voter_attr[l.0.as_str()] == 1)
            .cloned()
            .collect();
        let mut males: Vec<&(String, String, usize)> = task_labels
            .iter()
            .filter(|l| voter_attr[l.0.as_str()] == 0)
            .cloned()
            .collect();
        females.sort_by(|a, b| a.0.cmp(&b.0));
        males.sort_by(|a, b| {
            male_total[&b.0]
                .cmp(&male_total[&a.0])
                .then_with(|| a.0.cmp(&b.0))
        });
        let n = females.len().min(males.len());
        balanced.extend(females.into_iter().take(n).cloned());
        balanced.extend(males.into_iter().take(n).cloned());
    }
    let (v, t) = count_distinct(&balanced);
    report.steps.push(StepCounts {
        step: "balanced".into(),
        voters: v,
        tasks: t,
        labels: balanced.len(),
    });

    if balanced.is_empty() {
        return Err(Error::Validation(
            "no tasks survived preprocessing; check thresholds and survey configuration".into(),
        ));
    }

    // Dense indexing in first-appearance order.
    let mut voter_ids = Vec::new();
    let mut task_ids = Vec::new();
    let mut voter_index = HashMap::new();
    let mut task_index = HashMap::new();
    let mut entries = Vec::with_capacity(balanced.len());
    for (voter, task, class) in &balanced {
        let next = voter_index.len();
        let vi = *voter_index.entry(voter.clone()).or_insert_with(|| {
            voter_ids.push(voter.clone());
            next
        });
        let next = task_index.len();
        let ti = *task_index.entry(task.clone()).or_insert_with(|| {
            task_ids.push(task.clone());
            next
        });
        entries.push((vi, ti, *class));
    }
    let matrix = LabelMatrix::from_entries(voter_ids.len(), task_ids.len(), 2, entries)?;
    let attributes = voter_ids.iter().map(|voter| voter_attr[voter]).collect();
    let attrs = AttributeTable::balanced(attributes)?;
    Ok(PreprocessOutput {
        labels: LoadedLabels {
            matrix,
            voter_ids,
            task_ids,
        },
        attrs,
        report,
    })
}

/// Columns of the published Moral Machine response export that carry the
/// character counts of one scenario side.
const CHARACTER_COLUMNS: [&str; 20] = [
    "Man",
    "Woman",
    "Pregnant",
    "Stroller",
    "OldMan",
    "OldWoman",
    "Boy",
    "Girl",
    "Homeless",
    "LargeWoman",
    "LargeMan",
    "Criminal",
    "MaleExecutive",
    "FemaleExecutive",
    "FemaleAthlete",
    "MaleAthlete",
    "FemaleDoctor",
    "MaleDoctor",
    "Dog",
    "Cat",
];

/// Parses a Moral Machine response CSV (two rows per ResponseID, one per
/// scenario side, `Saved` marking the chosen side) into session records.
/// Rows that cannot be interpreted are skipped and counted.
pub fn parse_mm_csv(path: &Path, config: &PreprocessConfig) -> Result<(Vec<SessionRecord>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let response_col = column("ResponseID")
        .ok_or_else(|| Error::parse(path, 1, "missing ResponseID column"))?;
    let session_col = column("ExtendedSessionID")
        .ok_or_else(|| Error::parse(path, 1, "missing ExtendedSessionID column"))?;
    let user_col = column("UserID").ok_or_else(|| Error::parse(path, 1, "missing UserID column"))?;
    let saved_col = column("Saved").ok_or_else(|| Error::parse(path, 1, "missing Saved column"))?;
    let gender_col = column("Review_gender");
    let intervention_col = column("Intervention");
    let barrier_col = column("Barrier");
    let crossing_col = column("CrossingSignal");
    let character_cols: Vec<(String, usize)> = CHARACTER_COLUMNS
        .iter()
        .filter_map(|&name| column(name).map(|idx| (name.to_string(), idx)))
        .collect();

    struct Side {
        saved: bool,
        characters: CharacterGroup,
        session: String,
        user: String,
        gender: Option<String>,
        context: ScenarioContext,
    }

    let mut skipped = 0usize;
    let mut pending: HashMap<String, Vec<Side>> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let get = |idx: usize| record.get(idx).unwrap_or("").to_string();
        let response_id = get(response_col);
        if response_id.is_empty() {
            skipped += 1;
            continue;
        }
        let saved = match get(saved_col).as_str() {
            "0" => false,
            "1" => true,
            _ => {
                skipped += 1;
                continue;
            }
        };
        let mut characters = CharacterGroup::new();
        let mut malformed = false;
        for (name, idx) in &character_cols {
            let raw = get(*idx);
            if raw.is_empty() {
                continue;
            }
            match raw.parse::<u32>() {
                Ok(0) => {}
                Ok(count) => {
                    characters.insert(name.to_lowercase(), count);
                }
                Err(_) => {
                    malformed = true;
                    break;
                }
            }
        }
        if malformed {
            skipped += 1;
            continue;
        }
        let gender = gender_col.map(&get).filter(|g| !g.is_empty());
        if !pending.contains_key(&response_id) {
            order.push(response_id.clone());
        }
        pending.entry(response_id).or_default().push(Side {
            saved,
            characters,
            session: get(session_col),
            user: get(user_col),
            gender,
            context: ScenarioContext {
                intervention: intervention_col.map(&get).unwrap_or_default(),
                barrier: barrier_col.map(&get).unwrap_or_default(),
                crossing_signal: crossing_col.map(get).unwrap_or_default(),
            },
        });
    }

    let mut records = Vec::new();
    for response_id in order {
        let sides = pending.remove(&response_id).unwrap_or_default();
        if sides.len() != 2 || sides[0].saved == sides[1].saved {
            skipped += sides.len();
            continue;
        }
        let choice = usize::from(sides[1].saved);
        let gender = sides
            .iter()
            .find_map(|s| s.gender.clone())
            .map(|g| g.trim().to_lowercase());
        let survey = gender.map(|g| SurveyResponse {
            is_default: config.default_gender_values.iter().any(|d| d == &g),
            gender: g,
        });
        let [side0, side1]: [Side; 2] = sides.try_into().ok().expect("length checked");
        records.push(SessionRecord {
            session_id: side0.session.clone(),
            voter_id: side0.user.clone(),
            survey,
            scenario: [side0.characters, side1.characters],
            choice,
            extra: side0.context,
        });
    }
    Ok((records, skipped))
}

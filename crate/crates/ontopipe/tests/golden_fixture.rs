//! Keeps the bundled golden annotation fixture in sync with the library.
//!
//! `fixtures/golden_record.jsonl` is the canonical example of a fully
//! annotated document: one record per ontology concept for a voice-treatment
//! case study, with realistic explorer/evaluator transcripts. The builder
//! here is the source of truth; the checked-in file must be byte-identical
//! to what [`write_records`] produces for the built records, so the fixture
//! round-trips losslessly and tracks every schema change.
//!
//! After changing the record schema or the fixture contents, regenerate with:
//!
//! ```text
//! cargo test -p ontopipe --test golden_fixture regenerate -- --ignored
//! ```

use std::path::PathBuf;

use ontopipe::agents::{
    consistency_rounds_of, read_records, write_records, DebateTranscript, RoundRecord,
    TerminatedBy,
};
use ontopipe::metrics::verify_consistency_rounds;
use ontopipe::ontology::AnnotationMode;
use ontopipe::{
    AnnotationRecord, AnnotationStatus, AnnotationValue, OntologyGraph, Protocol, Verdict,
    SCHEMA_VERSION,
};

pub const GOLDEN_DOC_ID: &str = "dysarthria-stroke-2012";

const INTERVENTION: &str = "Lee Silverman Voice Treatment (LSVT LOUD)";

const CASE_STUDY: &str = "Case studies and experiments regarding the Lee Silverman Voice Treatment (LSVT LOUD) intervention in the paper include studies on people diagnosed with stroke, ataxia, multiple sclerosis, and traumatic brain injury (TBI). These studies have shown improvement in articulatory features as well as loudness.";

const THERAPY_ACTIVITIES: [&str; 4] = [
    "Maximal sustained vowel phonation",
    "Pitch range exercises",
    "Reading 10 functional phrases at individual target loudness levels",
    "Functional speech tasks progressing from words and phrases to conversation",
];

const PROCEDURE: &str = "The therapy process of conducting the Lee Silverman Voice Treatment (LSVT LOUD) intervention involves intensive high-effort exercises aimed at increasing vocal loudness to a level within normal limits using healthy and efficient voice techniques. The treatment protocol includes sessions four times a week for 4 weeks, totaling 16 individual one-hour sessions. Each session consists of tasks such as maximal sustained vowel phonation, pitch range exercises, and reading functional phrases at individual target loudness levels. The second half of each session progresses to functional speech tasks, moving from words and phrases to conversation over the course of the 16 sessions. Additionally, participants are assigned daily homework to practice using normal loudness and facilitate generalization of normal loudness outside the treatment room.";

const SETTING: &str = "home";

const THEME: &str = "speech articulation";

const PARTICIPANT: &str = "Four participants (P01 to P04).";

const DOSAGE: &str = "one-hour session.";

const DURATION: &str = "4 weeks, totaling 16 individual one-hour sessions.";

const EFFICACY: &str = "The outcome of the Lee Silverman Voice Treatment (LSVT LOUD) intervention in this study showed positive changes in acoustic variables of speech for all participants with dysarthria secondary to stroke. There were statistically significant increases in vocal dB SPL for sustained vowel phonation and speech tasks, indicating improvements in loudness levels and phonatory stability. Additionally, post-treatment speech samples were rated as having better voice quality and sounding more natural, suggesting an amelioration of dysarthria characteristics. Participants also reported increased confidence in their speech during post-treatment interviews.";

const EFFICACY_DRAFT: &str = "The intervention produced positive changes in acoustic variables of speech for all participants.";

const FREQUENCY: &str = "four times a week";

const THERAPY_GOALS: [&str; 4] = [
    "Increase vocal loudness to a level within normal limits",
    "Use healthy and efficient voice techniques",
    "Progress from words and phrases to conversation over 16 sessions",
    "Facilitate generalization of normal loudness outside the treatment room",
];

const AGE: &str = "Participants in the study ranged in age from 50 to 74 years.";

const DISORDERS: [&str; 4] = ["stroke", "ataxia", "multiple sclerosis", "traumatic brain injury (TBI)"];

const LANGUAGE: &str = "assume to be English.";

fn round(
    round_no: u32,
    answer: &str,
    rationale: Option<&str>,
    feedback: &str,
    verdict: Option<Verdict>,
    aspects_added: &[&str],
) -> RoundRecord {
    RoundRecord {
        round_no,
        explorer_answer: answer.to_string(),
        explorer_rationale: rationale.map(str::to_string),
        evaluator_feedback: feedback.to_string(),
        verdict,
        aspects_added: aspects_added.iter().map(|s| s.to_string()).collect(),
    }
}

struct Golden {
    concept: &'static str,
    mode: AnnotationMode,
    question: String,
    template_id: String,
    value: AnnotationValue,
    rationale: Option<&'static str>,
    rounds: Vec<RoundRecord>,
}

fn record(doc_seq: usize, golden: Golden) -> AnnotationRecord {
    let transcript = DebateTranscript {
        doc_id: GOLDEN_DOC_ID.to_string(),
        concept: golden.concept.to_string(),
        mode: golden.mode,
        protocol: Protocol::Duo,
        rounds: golden.rounds,
        terminated_by: TerminatedBy::Consistency,
        used_chunks: Vec::new(),
    };
    AnnotationRecord {
        schema_version: SCHEMA_VERSION,
        doc_id: GOLDEN_DOC_ID.to_string(),
        concept: golden.concept.to_string(),
        doc_seq,
        question: golden.question,
        template_id: golden.template_id,
        status: AnnotationStatus::Ok,
        value: golden.value,
        rationale: golden.rationale.map(str::to_string),
        consistency_rounds: consistency_rounds_of(&transcript),
        error: None,
        transcript,
    }
}

/// One round of grounded answering and one accepting review.
fn accepted(concept: &'static str, mode: AnnotationMode, question: String, template_id: String, answer: String, value: AnnotationValue, rationale: &'static str) -> Golden {
    Golden {
        concept,
        mode,
        question,
        template_id,
        value,
        rationale: Some(rationale),
        rounds: vec![
            round(1, &answer, Some(rationale), "", None, &[]),
            round(
                2,
                &answer,
                Some(rationale),
                "The rationale points at the passage that states the answer.",
                Some(Verdict::Accept),
                &[],
            ),
        ],
    }
}

/// A single grounded shot, as produced for plain value concepts.
fn single_shot(concept: &'static str, question: String, template_id: String, value: &'static str, rationale: &'static str) -> Golden {
    Golden {
        concept,
        mode: AnnotationMode::Value,
        question,
        template_id,
        value: AnnotationValue::Text(value.to_string()),
        rationale: Some(rationale),
        rounds: vec![round(1, value, Some(rationale), "", None, &[])],
    }
}

/// Builds the golden records in the order the bundled-ontology traversal
/// annotates them. Consistency-round counts span 0 (single shots and
/// one-pass aspect collection), 1 (accept on first review, one aspect
/// expansion), and 2 (one revision then acceptance).
pub fn golden_records() -> Vec<AnnotationRecord> {
    let mut records = Vec::new();
    let mut seq = 0usize;
    let mut push = |golden: Golden| {
        records.push(record(seq, golden));
        seq += 1;
    };

    push(accepted(
        "Intervention",
        AnnotationMode::Rationality,
        "What is the intervention described in this document?".to_string(),
        "Intervention|fallback".to_string(),
        INTERVENTION.to_string(),
        AnnotationValue::Text(INTERVENTION.to_string()),
        "The abstract names the treatment programme administered to all participants.",
    ));

    push(accepted(
        "CaseStudy",
        AnnotationMode::Rationality,
        format!("Which case study does {INTERVENTION} studied in?"),
        "CaseStudy|Intervention|d0|2f8c14aa".to_string(),
        CASE_STUDY.to_string(),
        AnnotationValue::Text(CASE_STUDY.to_string()),
        "The introduction reviews the populations the treatment has been studied on.",
    ));

    push(Golden {
        concept: "TherapyActivity",
        mode: AnnotationMode::Completeness,
        question: format!("Which therapy activity does {INTERVENTION} uses?"),
        template_id: "TherapyActivity|Intervention|d0|91c03b7e".to_string(),
        value: AnnotationValue::List(THERAPY_ACTIVITIES.iter().map(|s| s.to_string()).collect()),
        rationale: Some("The protocol section lists the daily treatment tasks."),
        rounds: vec![
            round(
                1,
                &format!("{} and {}.", THERAPY_ACTIVITIES[0], THERAPY_ACTIVITIES[1]),
                Some("The protocol section lists the daily treatment tasks."),
                &format!("{}; {}", THERAPY_ACTIVITIES[0], THERAPY_ACTIVITIES[1]),
                Some(Verdict::NewAspects),
                &[THERAPY_ACTIVITIES[0], THERAPY_ACTIVITIES[1]],
            ),
            round(
                2,
                &format!("{} and {}.", THERAPY_ACTIVITIES[2], THERAPY_ACTIVITIES[3]),
                Some("The second half of each session adds functional tasks."),
                &format!("{}; {}", THERAPY_ACTIVITIES[2], THERAPY_ACTIVITIES[3]),
                Some(Verdict::NewAspects),
                &[THERAPY_ACTIVITIES[2], THERAPY_ACTIVITIES[3]],
            ),
            round(3, "NOT_FOUND", None, "", Some(Verdict::NoNewAspects), &[]),
        ],
    });

    push(Golden {
        concept: "Procedure",
        mode: AnnotationMode::Completeness,
        question: format!("Which procedure does {INTERVENTION} has procedure?"),
        template_id: "Procedure|Intervention|d0|5d77e0b3".to_string(),
        value: AnnotationValue::Text(PROCEDURE.to_string()),
        rationale: Some("The methods section walks through the full treatment protocol."),
        rounds: vec![
            round(
                1,
                PROCEDURE,
                Some("The methods section walks through the full treatment protocol."),
                PROCEDURE,
                Some(Verdict::NewAspects),
                &[PROCEDURE],
            ),
            round(2, "NOT_FOUND", None, "", Some(Verdict::NoNewAspects), &[]),
        ],
    });

    push(accepted(
        "Setting",
        AnnotationMode::Rationality,
        format!("Which setting does {INTERVENTION} implemented in?"),
        "Setting|Intervention|d0|c4a91f02".to_string(),
        SETTING.to_string(),
        AnnotationValue::Text(SETTING.to_string()),
        "Daily homework places practice in the participants' homes.",
    ));

    push(accepted(
        "Theme",
        AnnotationMode::Rationality,
        format!("Which theme does {INTERVENTION} has theme?"),
        "Theme|Intervention|d0|7b3d55c9".to_string(),
        THEME.to_string(),
        AnnotationValue::Text(THEME.to_string()),
        "The treatment trains the physical production of loud, clear speech.",
    ));

    push(single_shot(
        "Participant",
        format!("Which participant does {CASE_STUDY} include?"),
        "Participant|CaseStudy|d0|e8d2406f".to_string(),
        PARTICIPANT,
        "The participants section enumerates P01 through P04.",
    ));

    push(single_shot(
        "Dosage",
        format!("Which dosage does {CASE_STUDY} used with?"),
        "Dosage|CaseStudy|d0|19fb8a31".to_string(),
        DOSAGE,
        "Each treatment visit is described as a one-hour session.",
    ));

    push(single_shot(
        "Duration",
        format!("Which duration does {CASE_STUDY} used with?"),
        "Duration|CaseStudy|d0|ab60f274".to_string(),
        DURATION,
        "The protocol spans four weeks of sixteen sessions.",
    ));

    push(Golden {
        concept: "Efficacy",
        mode: AnnotationMode::Rationality,
        question: format!("Which efficacy does {CASE_STUDY} demonstrates?"),
        template_id: "Efficacy|CaseStudy|d0|63c7d918".to_string(),
        value: AnnotationValue::Text(EFFICACY.to_string()),
        rationale: Some("The results section reports the acoustic measurements and listener ratings."),
        rounds: vec![
            round(
                1,
                EFFICACY_DRAFT,
                Some("The results section reports improvements."),
                "",
                None,
                &[],
            ),
            round(
                2,
                EFFICACY,
                Some("The results section reports the acoustic measurements and listener ratings."),
                "Name the measured variables and how the ratings changed instead of summarising.",
                Some(Verdict::Revise),
                &[],
            ),
            round(
                3,
                EFFICACY,
                Some("The results section reports the acoustic measurements and listener ratings."),
                "The rationale cites the reported measurements and supports the answer.",
                Some(Verdict::Accept),
                &[],
            ),
        ],
    });

    push(single_shot(
        "Frequency",
        format!("Which frequency does {CASE_STUDY} used with?"),
        "Frequency|CaseStudy|d0|0d45c8e7".to_string(),
        FREQUENCY,
        "The schedule section states the weekly session count.",
    ));

    let activities_bound = THERAPY_ACTIVITIES.join(", ");
    push(Golden {
        concept: "TherapyGoal",
        mode: AnnotationMode::Completeness,
        question: format!("Which therapy goal does {activities_bound} addresses?"),
        template_id: "TherapyGoal|TherapyActivity|d0|f163a92b".to_string(),
        value: AnnotationValue::List(THERAPY_GOALS.iter().map(|s| s.to_string()).collect()),
        rationale: Some("The aims paragraph states what the exercises target."),
        rounds: vec![
            round(
                1,
                &THERAPY_GOALS.join("; "),
                Some("The aims paragraph states what the exercises target."),
                &THERAPY_GOALS.join("; "),
                Some(Verdict::NewAspects),
                &THERAPY_GOALS,
            ),
            round(2, "NOT_FOUND", None, "", Some(Verdict::NoNewAspects), &[]),
        ],
    });

    push(single_shot(
        "Age",
        format!("Which age does {PARTICIPANT} has age?"),
        "Age|Participant|d0|35e9b1d0".to_string(),
        AGE,
        "The participants table gives the age range.",
    ));

    push(accepted(
        "Disorder",
        AnnotationMode::Rationality,
        format!("Which disorder does {PARTICIPANT} has?"),
        "Disorder|Participant|d0|84fa2c56".to_string(),
        DISORDERS.join("; "),
        AnnotationValue::List(DISORDERS.iter().map(|s| s.to_string()).collect()),
        "The background lists the diagnoses the treatment has been applied to.",
    ));

    push(single_shot(
        "Language",
        format!("Which language does {PARTICIPANT} speaks?"),
        "Language|Participant|d0|47d08e9c".to_string(),
        LANGUAGE,
        "No language is stated; the study was conducted in English.",
    ));

    records
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden_record.jsonl")
}

#[test]
fn golden_fixture_file_matches_builder() {
    let records = golden_records();
    let dir = tempfile::tempdir().unwrap();
    let rebuilt = dir.path().join("golden.jsonl");
    write_records(&rebuilt, &records).unwrap();
    let expected = std::fs::read(&rebuilt).unwrap();
    let actual = std::fs::read(fixture_path()).unwrap_or_default();
    assert!(
        expected == actual,
        "fixtures/golden_record.jsonl is out of sync with the builder; \
         regenerate with `cargo test -p ontopipe --test golden_fixture regenerate -- --ignored`"
    );
}

#[test]
fn golden_fixture_parses_and_round_trips() {
    let records = read_records(&fixture_path()).unwrap();
    assert_eq!(records.len(), 15);
    verify_consistency_rounds(&records).unwrap();

    let graph = OntologyGraph::bundled_default();
    let plan = graph.traverse(2).unwrap();
    for record in &records {
        assert_eq!(record.status, AnnotationStatus::Ok, "{}", record.concept);
        assert!(graph.contains(&record.concept), "{}", record.concept);
        assert_eq!(
            graph.concept(&record.concept).unwrap().annotation_mode,
            record.transcript.mode,
            "{}",
            record.concept
        );
    }
    // records arrive in traversal order, one per concept except the
    // catalog-only AgeGroup, which is derived from Age by catalog linking
    let expected_order: Vec<&str> = plan
        .order
        .iter()
        .map(String::as_str)
        .filter(|c| *c != "AgeGroup")
        .collect();
    let actual_order: Vec<&str> = records.iter().map(|r| r.concept.as_str()).collect();
    assert_eq!(actual_order, expected_order);

    // the refinement-count spectrum is represented: single shots (0),
    // first-review acceptance (1), and a revision before acceptance (2)
    let cr = |concept: &str| {
        records.iter().find(|r| r.concept == concept).unwrap().consistency_rounds
    };
    assert_eq!(cr("Frequency"), Some(0));
    assert_eq!(cr("Intervention"), Some(1));
    assert_eq!(cr("TherapyActivity"), Some(1));
    assert_eq!(cr("Procedure"), Some(0));
    assert_eq!(cr("Efficacy"), Some(2));

    // lossless round-trip through the line format
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.jsonl");
    write_records(&copy, &records).unwrap();
    assert_eq!(read_records(&copy).unwrap(), records);
}

#[test]
#[ignore = "writes fixtures/golden_record.jsonl; run explicitly after schema changes"]
fn regenerate() {
    let path = fixture_path();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_records(&path, &golden_records()).unwrap();
    println!("wrote {}", path.display());
}

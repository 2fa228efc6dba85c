//! Checklist-driven physical-plausibility judging and preference mining.
//!
//! Two decoupled service roles drive the protocol: a *proposer* generates a
//! clip-specific yes/no checklist from the first frame and instruction, and
//! a *scorer* answers those questions (or compares two clips directly). The
//! checklist score `S_v` is the fraction of answers matching ground truth;
//! tier-1 questions carry single-vote veto power, so one fatal physical
//! violation disqualifies a clip from ever winning a preference pair.
//!
//! Winner/loser pairs are mined in linear time by a knockout tournament for
//! the best candidate and a loser bracket for the worst, instead of all-pairs
//! comparison. The resulting triplets feed a logistic preference loss over
//! policy-versus-reference denoising-error gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::vlm::{response_str, VlmTransport};

// ---------------------------------------------------------------------------
// Checklists
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

/// Question severity. Tier 1 marks fatal physical violations (penetration,
/// anti-gravity); tier 2 covers micro-physical fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QuestionTier {
    Tier1,
    Tier2,
}

impl TryFrom<u8> for QuestionTier {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(QuestionTier::Tier1),
            2 => Ok(QuestionTier::Tier2),
            other => Err(format!("tier must be 1 or 2, got {other}")),
        }
    }
}

impl From<QuestionTier> for u8 {
    fn from(t: QuestionTier) -> u8 {
        match t {
            QuestionTier::Tier1 => 1,
            QuestionTier::Tier2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistQuestion {
    pub question_id: String,
    pub text: String,
    pub polarity: Polarity,
    pub tier: QuestionTier,
    /// The answer a physics-compliant clip produces.
    pub gt_answer: Answer,
}

/// A proposer-generated checklist for one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checklist {
    pub instruction: String,
    pub first_frame_ref: String,
    pub questions: Vec<ChecklistQuestion>,
}

/// A violated checklist invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum ChecklistViolation {
    NoQuestions,
    /// Negative-polarity share outside [0.30, 0.50].
    NegativeRatio { negatives: usize, total: usize },
    NoTier1Question,
    EmptyText { question_id: String },
}

impl std::fmt::Display for ChecklistViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChecklistViolation::NoQuestions => write!(f, "no questions"),
            ChecklistViolation::NegativeRatio { negatives, total } => write!(
                f,
                "negative ratio {:.2} outside [0.30, 0.50] ({negatives} of {total})",
                *negatives as f64 / *total as f64
            ),
            ChecklistViolation::NoTier1Question => write!(f, "no tier-1 question"),
            ChecklistViolation::EmptyText { question_id } => {
                write!(f, "question {question_id:?} has empty text")
            }
        }
    }
}

/// Checks every checklist invariant and reports all violations.
///
/// The negative-question share must lie within [30%, 50%]; the bounds are
/// compared in integer arithmetic so 0.30 and 0.50 are accepted exactly.
pub fn validate_checklist(checklist: &Checklist) -> Vec<ChecklistViolation> {
    let mut violations = Vec::new();
    let total = checklist.questions.len();
    if total == 0 {
        violations.push(ChecklistViolation::NoQuestions);
        return violations;
    }
    let negatives = checklist
        .questions
        .iter()
        .filter(|q| q.polarity == Polarity::Negative)
        .count();
    if negatives * 100 < total * 30 || negatives * 100 > total * 50 {
        violations.push(ChecklistViolation::NegativeRatio { negatives, total });
    }
    if !checklist
        .questions
        .iter()
        .any(|q| q.tier == QuestionTier::Tier1)
    {
        violations.push(ChecklistViolation::NoTier1Question);
    }
    for q in &checklist.questions {
        if q.text.trim().is_empty() {
            violations.push(ChecklistViolation::EmptyText {
                question_id: q.question_id.clone(),
            });
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub predicted: Answer,
    pub matched: bool,
}

/// Per-clip checklist score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub clip_id: String,
    pub per_question: BTreeMap<String, QuestionOutcome>,
    /// Fraction of questions whose prediction matches ground truth.
    pub s_v: f64,
    /// True when any tier-1 prediction asserts a fatal violation.
    pub tier1_violated: bool,
}

/// Scores one clip's predictions against the checklist ground truth.
///
/// Ground truth encodes the physics-compliant answer, so a tier-1 mismatch
/// means the scorer saw the fatal condition: the clip is vetoed.
pub fn score_sv(
    checklist: &Checklist,
    clip_id: &str,
    predictions: &BTreeMap<String, Answer>,
) -> Result<ScoreReport> {
    for qid in predictions.keys() {
        if !checklist.questions.iter().any(|q| &q.question_id == qid) {
            return Err(Error::PredictionMismatch {
                message: format!("prediction for unknown question {qid:?}"),
            });
        }
    }
    let mut per_question = BTreeMap::new();
    let mut matches = 0usize;
    let mut tier1_violated = false;
    for q in &checklist.questions {
        let Some(&predicted) = predictions.get(&q.question_id) else {
            return Err(Error::PredictionMismatch {
                message: format!("missing prediction for question {:?}", q.question_id),
            });
        };
        let matched = predicted == q.gt_answer;
        if matched {
            matches += 1;
        } else if q.tier == QuestionTier::Tier1 {
            tier1_violated = true;
        }
        per_question.insert(q.question_id.clone(), QuestionOutcome { predicted, matched });
    }
    Ok(ScoreReport {
        clip_id: clip_id.to_string(),
        per_question,
        s_v: matches as f64 / checklist.questions.len() as f64,
        tier1_violated,
    })
}

// ---------------------------------------------------------------------------
// Tournament mining
// ---------------------------------------------------------------------------

/// Outcome of one pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    First,
    Second,
    Tie,
}

/// Pairwise judgment over clips, plus the veto/margin knowledge a backend
/// may carry.
pub trait ClipComparator {
    fn prefer(&mut self, a: &str, b: &str) -> Result<Preference>;

    /// Tier-1 veto knowledge; pairwise-only backends have none.
    fn is_vetoed(&self, _clip_id: &str) -> bool {
        false
    }

    /// Preference margin for a mined pair; backends without a numeric score
    /// report 1.0.
    fn margin(&self, _winner: &str, _loser: &str) -> f64 {
        1.0
    }
}

/// Comparator over precomputed checklist scores. Scores within 1e-9 count
/// as a tie.
pub struct SvComparator<'a> {
    pub reports: &'a BTreeMap<String, ScoreReport>,
}

impl SvComparator<'_> {
    fn score(&self, id: &str) -> Result<f64> {
        self.reports
            .get(id)
            .map(|r| r.s_v)
            .ok_or_else(|| Error::PredictionMismatch {
                message: format!("no score report for clip {id:?}"),
            })
    }
}

impl ClipComparator for SvComparator<'_> {
    fn prefer(&mut self, a: &str, b: &str) -> Result<Preference> {
        let (sa, sb) = (self.score(a)?, self.score(b)?);
        Ok(if (sa - sb).abs() < 1e-9 {
            Preference::Tie
        } else if sa > sb {
            Preference::First
        } else {
            Preference::Second
        })
    }

    fn is_vetoed(&self, clip_id: &str) -> bool {
        self.reports
            .get(clip_id)
            .is_some_and(|r| r.tier1_violated)
    }

    fn margin(&self, winner: &str, loser: &str) -> f64 {
        match (self.reports.get(winner), self.reports.get(loser)) {
            (Some(w), Some(l)) => w.s_v - l.s_v,
            _ => 1.0,
        }
    }
}

/// Comparator calling the scorer's pairwise endpoint directly.
pub struct PairwiseVlmComparator<'a> {
    pub transport: &'a mut dyn VlmTransport,
    /// Forwarded verbatim so the scorer sees the checklist being judged.
    pub checklist: serde_json::Value,
}

impl ClipComparator for PairwiseVlmComparator<'_> {
    fn prefer(&mut self, a: &str, b: &str) -> Result<Preference> {
        let request = json!({
            "video_a": a,
            "video_b": b,
            "checklist": self.checklist,
        });
        let response = self.transport.call("/compare", &request)?;
        match response_str(&response, "preferred")? {
            "a" => Ok(Preference::First),
            "b" => Ok(Preference::Second),
            "tie" => Ok(Preference::Tie),
            other => Err(Error::MalformedResponse {
                message: format!("unknown preference {other:?}"),
            }),
        }
    }
}

/// Checklist scores first, the pairwise endpoint only to break ties.
pub struct HybridComparator<'a> {
    pub sv: SvComparator<'a>,
    pub pairwise: PairwiseVlmComparator<'a>,
}

impl ClipComparator for HybridComparator<'_> {
    fn prefer(&mut self, a: &str, b: &str) -> Result<Preference> {
        match self.sv.prefer(a, b)? {
            Preference::Tie => self.pairwise.prefer(a, b),
            decided => Ok(decided),
        }
    }

    fn is_vetoed(&self, clip_id: &str) -> bool {
        self.sv.is_vetoed(clip_id)
    }

    fn margin(&self, winner: &str, loser: &str) -> f64 {
        self.sv.margin(winner, loser)
    }
}

/// Knockout result: the champion plus everyone who did not win a
/// first-round match (for odd fields that includes the bye candidate, which
/// is exactly the pool the loser bracket must consider).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnockoutOutcome {
    pub winner: usize,
    pub first_round_losers: Vec<usize>,
    pub comparisons: usize,
}

/// Single-elimination over the input order. Adjacent candidates are paired
/// per round; an odd field gives the final slot a bye. Ties advance the
/// lower-index candidate. Exactly `n - 1` comparisons.
pub fn knockout_tournament(
    candidates: &[String],
    compare: &mut dyn ClipComparator,
) -> Result<KnockoutOutcome> {
    if candidates.len() < 2 {
        return Err(Error::EmptyInput("knockout needs at least two candidates"));
    }
    let mut comparisons = 0;
    let mut first_round_losers = Vec::new();
    let mut round: Vec<usize> = (0..candidates.len()).collect();
    let mut first_round = true;
    while round.len() > 1 {
        let mut next = Vec::with_capacity(round.len().div_ceil(2));
        for pair in round.chunks(2) {
            match *pair {
                [a, b] => {
                    comparisons += 1;
                    let winner = match compare.prefer(&candidates[a], &candidates[b])? {
                        Preference::First => a,
                        Preference::Second => b,
                        Preference::Tie => a.min(b),
                    };
                    let loser = if winner == a { b } else { a };
                    if first_round {
                        first_round_losers.push(loser);
                    }
                    next.push(winner);
                }
                [bye] => {
                    if first_round {
                        // Never won a round-1 match, so the loser bracket
                        // must still consider it.
                        first_round_losers.push(bye);
                    }
                    next.push(bye);
                }
                _ => unreachable!("chunks(2)"),
            }
        }
        round = next;
        first_round = false;
    }
    Ok(KnockoutOutcome {
        winner: round[0],
        first_round_losers,
        comparisons,
    })
}

/// Single-elimination with the comparison inverted: the *worse* candidate
/// advances, ties advancing the lower index. `losers.len() - 1` comparisons.
pub fn loser_bracket(
    losers: &[usize],
    candidates: &[String],
    compare: &mut dyn ClipComparator,
) -> Result<(usize, usize)> {
    if losers.is_empty() {
        return Err(Error::EmptyInput("loser bracket needs at least one entry"));
    }
    let mut comparisons = 0;
    let mut round: Vec<usize> = losers.to_vec();
    while round.len() > 1 {
        let mut next = Vec::with_capacity(round.len().div_ceil(2));
        for pair in round.chunks(2) {
            match *pair {
                [a, b] => {
                    comparisons += 1;
                    let worse = match compare.prefer(&candidates[a], &candidates[b])? {
                        Preference::First => b,
                        Preference::Second => a,
                        Preference::Tie => a.min(b),
                    };
                    next.push(worse);
                }
                [bye] => next.push(bye),
                _ => unreachable!("chunks(2)"),
            }
        }
        round = next;
    }
    Ok((round[0], comparisons))
}

/// One mined preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoTriplet {
    pub condition_ref: String,
    #[serde(rename = "winner")]
    pub winner_clip_id: String,
    #[serde(rename = "loser")]
    pub loser_clip_id: String,
    pub margin: f64,
}

/// Triplet plus mining diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub triplet: DpoTriplet,
    pub comparisons: usize,
}

/// Mines the best/worst preference pair from `candidates` in linear time.
///
/// The knockout runs over non-vetoed candidates only; vetoed candidates are
/// eligible solely as the loser, joining the first-round-loser pool for the
/// loser bracket. Errors when every candidate is vetoed.
pub fn mine_triplet(
    condition_ref: &str,
    candidates: &[String],
    compare: &mut dyn ClipComparator,
) -> Result<MiningOutcome> {
    if candidates.len() < 2 {
        return Err(Error::EmptyInput("mining needs at least two candidates"));
    }
    let (eligible, vetoed): (Vec<usize>, Vec<usize>) =
        (0..candidates.len()).partition(|&i| !compare.is_vetoed(&candidates[i]));
    if eligible.is_empty() {
        return Err(Error::AllVetoed);
    }

    let mut comparisons = 0;
    let (winner, mut loser_pool) = if eligible.len() == 1 {
        (eligible[0], Vec::new())
    } else {
        let field: Vec<String> = eligible
            .iter()
            .map(|&i| candidates[i].clone())
            .collect();
        let outcome = knockout_tournament(&field, compare)?;
        comparisons += outcome.comparisons;
        (
            eligible[outcome.winner],
            outcome
                .first_round_losers
                .iter()
                .map(|&j| eligible[j])
                .collect(),
        )
    };
    loser_pool.extend(&vetoed);
    if loser_pool.is_empty() {
        return Err(Error::EmptyInput("no loser candidates available"));
    }
    let (worst, bracket_comparisons) = loser_bracket(&loser_pool, candidates, compare)?;
    comparisons += bracket_comparisons;
    if worst == winner {
        return Err(Error::InconsistentComparator);
    }

    Ok(MiningOutcome {
        triplet: DpoTriplet {
            condition_ref: condition_ref.to_string(),
            winner_clip_id: candidates[winner].clone(),
            loser_clip_id: candidates[worst].clone(),
            margin: compare.margin(&candidates[winner], &candidates[worst]),
        },
        comparisons,
    })
}

// ---------------------------------------------------------------------------
// Preference loss
// ---------------------------------------------------------------------------

/// Precomputed single-step denoising errors for one triplet, policy and
/// reference models. Latents, noise, and timesteps live offline in whatever
/// produced these scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoLossInputs {
    pub l_theta_w: f64,
    pub l_theta_l: f64,
    pub l_ref_w: f64,
    pub l_ref_l: f64,
    /// Divergence-control strength.
    pub beta: f64,
}

impl DpoLossInputs {
    pub const DEFAULT_BETA: f64 = 5000.0;

    pub fn validate(&self) -> Result<()> {
        let values = [
            self.l_theta_w,
            self.l_theta_l,
            self.l_ref_w,
            self.l_ref_l,
            self.beta,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("preference loss inputs"));
        }
        if self.l_theta_w < 0.0 || self.l_theta_l < 0.0 || self.l_ref_w < 0.0 || self.l_ref_l < 0.0
        {
            return Err(Error::InvalidConfig {
                field: "dpo.errors".into(),
                message: "denoising errors are squared norms and cannot be negative".into(),
            });
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidConfig {
                field: "dpo.beta".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softplus, `log(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// The preference-alignment loss
/// `-log sigmoid(-(beta/2) * [(Lθ(w) - Lθ(l)) - (Lref(w) - Lref(l))])`,
/// evaluated in softplus form so extreme `beta` cannot overflow.
pub fn dpo_loss(inputs: &DpoLossInputs) -> Result<f64> {
    inputs.validate()?;
    let policy_diff = inputs.l_theta_w - inputs.l_theta_l;
    let ref_diff = inputs.l_ref_w - inputs.l_ref_l;
    let z = 0.5 * inputs.beta * (policy_diff - ref_diff);
    Ok(softplus(z))
}

// ---------------------------------------------------------------------------
// Service clients
// ---------------------------------------------------------------------------

/// Asks the proposer for a checklist and enforces its invariants.
pub fn propose_checklist(
    instruction: &str,
    first_frame_b64: &str,
    transport: &mut dyn VlmTransport,
) -> Result<Checklist> {
    let request = json!({
        "instruction": instruction,
        "first_frame_b64": first_frame_b64,
    });
    let response = transport.call("/propose", &request)?;
    let checklist: Checklist =
        serde_json::from_value(response).map_err(|e| Error::MalformedResponse {
            message: format!("proposer response is not a checklist: {e}"),
        })?;
    let violations = validate_checklist(&checklist);
    if !violations.is_empty() {
        let joined = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::MalformedResponse {
            message: format!("proposer checklist violates invariants: {joined}"),
        });
    }
    Ok(checklist)
}

/// Asks the scorer one question about one clip.
pub fn answer_question(
    video_ref: &str,
    question: &str,
    transport: &mut dyn VlmTransport,
) -> Result<Answer> {
    let request = json!({
        "video_ref": video_ref,
        "question": question,
    });
    let response = transport.call("/answer", &request)?;
    match response_str(&response, "answer")? {
        "yes" => Ok(Answer::Yes),
        "no" => Ok(Answer::No),
        other => Err(Error::MalformedResponse {
            message: format!("answer must be yes or no, got {other:?}"),
        }),
    }
}

/// Runs the full per-question VQA pass for one clip and scores it.
pub fn score_with_vlm(
    checklist: &Checklist,
    video_ref: &str,
    transport: &mut dyn VlmTransport,
) -> Result<ScoreReport> {
    let mut predictions = BTreeMap::new();
    for q in &checklist.questions {
        let answer = answer_question(video_ref, &q.text, transport)?;
        predictions.insert(q.question_id.clone(), answer);
    }
    score_sv(checklist, video_ref, &predictions)
}

//! Key-estimation attack simulation.
//!
//! An attacker holding the protected model and a labeled test set scores
//! candidate keys by test accuracy and greedily swaps pairs of key positions
//! while accuracy improves.
//!
//! One pass enumerates index pairs `(i, j)`, `i < j`, in lexicographic
//! order. Pairs whose bits are equal are skipped without a query. A swap is
//! committed when the candidate's accuracy strictly exceeds the best so far,
//! and the pass continues from the committed key. Passes repeat until one
//! commits nothing, the oracle budget runs out, or `max_passes` is reached.
//!
//! A swap never changes the Hamming weight, so the plain attack only
//! explores keys with the initial key's weight. If the true key has a
//! different weight it cannot be reached. [`AttackOptions::allow_flips`]
//! appends single-bit flip moves to each pass; this goes beyond the swap
//! attack and is off by default.

pub mod oracle;
pub mod protocol;
pub mod synthetic;

use serde::Serialize;
use thiserror::Error;

use crate::key::{serialize_key, Key, KeyError, KeyFingerprint};
pub use oracle::{AccuracySource, Oracle, OracleError};
pub use protocol::{make_external_oracle, Endpoint, ExternalAccuracy};
pub use synthetic::{make_synthetic_oracle, SyntheticAccuracy, SyntheticOracleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Swap(usize, usize),
    Flip(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub candidate: KeyFingerprint,
    /// `None` for the initial evaluation.
    pub mv: Option<Move>,
    pub accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
    MaxPasses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub initial_key: Key,
    pub queries: Vec<QueryRecord>,
    pub best_key: Key,
    pub best_accuracy: f64,
    pub passes_completed: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackOptions {
    pub max_passes: usize,
    pub allow_flips: bool,
}

impl AttackOptions {
    pub fn swaps(max_passes: usize) -> Self {
        Self { max_passes, allow_flips: false }
    }
}

/// State of an attack interrupted by an oracle failure.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialTrace {
    pub initial_key: Key,
    pub queries: Vec<QueryRecord>,
    /// Best key and accuracy, if the initial evaluation succeeded.
    pub best: Option<(Key, f64)>,
    pub passes_completed: usize,
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Shape(#[from] KeyError),
    #[error("invalid attack parameter: {0}")]
    Parameter(String),
    #[error("oracle failed at query {query_index}: {source}")]
    Oracle {
        query_index: usize,
        #[source]
        source: OracleError,
        partial: Box<PartialTrace>,
    },
}

struct Search<'a> {
    oracle: &'a mut Oracle,
    initial: Key,
    queries: Vec<QueryRecord>,
    current: Key,
    best: f64,
    passes: usize,
}

/// The oracle budget ran out before the next query.
struct OutOfBudget;

impl Search<'_> {
    fn fail(&mut self, source: OracleError) -> AttackError {
        let best = (!self.queries.is_empty()).then(|| (self.current.clone(), self.best));
        AttackError::Oracle {
            query_index: self.queries.len(),
            source,
            partial: Box::new(PartialTrace {
                initial_key: self.initial.clone(),
                queries: std::mem::take(&mut self.queries),
                best,
                passes_completed: self.passes,
            }),
        }
    }

    /// Queries `candidate`; commits it on strict improvement.
    fn try_move(&mut self, candidate: Key, mv: Move) -> Result<Result<bool, OutOfBudget>, AttackError> {
        if self.oracle.remaining() == Some(0) {
            return Ok(Err(OutOfBudget));
        }
        let accuracy = self.oracle.evaluate(&candidate).map_err(|e| self.fail(e))?;
        let accepted = accuracy > self.best;
        self.queries.push(QueryRecord {
            candidate: candidate.fingerprint(),
            mv: Some(mv),
            accuracy,
            accepted,
        });
        if accepted {
            self.current = candidate;
            self.best = accuracy;
        }
        Ok(Ok(accepted))
    }

    fn pass(&mut self, allow_flips: bool) -> Result<Result<bool, OutOfBudget>, AttackError> {
        let n = self.current.len();
        let mut improved = false;
        for i in 0..n {
            for j in i + 1..n {
                if self.current.bit(i) == self.current.bit(j) {
                    continue;
                }
                match self.try_move(self.current.with_swapped(i, j), Move::Swap(i, j))? {
                    Ok(acc) => improved |= acc,
                    Err(stop) => return Ok(Err(stop)),
                }
            }
        }
        if allow_flips {
            for i in 0..n {
                match self.try_move(self.current.with_flipped(i), Move::Flip(i))? {
                    Ok(acc) => improved |= acc,
                    Err(stop) => return Ok(Err(stop)),
                }
            }
        }
        Ok(Ok(improved))
    }
}

/// Runs the pairwise-swap key search from `initial`.
pub fn swap_attack(oracle: &mut Oracle, initial: &Key, options: AttackOptions) -> Result<AttackTrace, AttackError> {
    oracle.check_shape(initial)?;
    if options.max_passes == 0 {
        return Err(AttackError::Parameter("max_passes must be at least 1".into()));
    }
    if oracle.remaining() == Some(0) {
        return Err(AttackError::Parameter("oracle budget is already exhausted".into()));
    }

    let mut search = Search {
        oracle,
        initial: initial.clone(),
        queries: Vec::new(),
        current: initial.clone(),
        best: 0.0,
        passes: 0,
    };
    let accuracy = search.oracle.evaluate(initial).map_err(|e| search.fail(e))?;
    search.best = accuracy;
    search.queries.push(QueryRecord {
        candidate: initial.fingerprint(),
        mv: None,
        accuracy,
        accepted: false,
    });

    let stop_reason = loop {
        if search.passes == options.max_passes {
            break StopReason::MaxPasses;
        }
        match search.pass(options.allow_flips)? {
            Err(_) => break StopReason::BudgetExhausted,
            Ok(improved) => {
                search.passes += 1;
                if !improved {
                    break StopReason::Converged;
                }
            }
        }
    };

    Ok(AttackTrace {
        initial_key: search.initial,
        queries: search.queries,
        best_key: search.current,
        best_accuracy: search.best,
        passes_completed: search.passes,
        stop_reason,
    })
}

#[derive(Serialize)]
struct QueryLine {
    record: &'static str,
    index: usize,
    candidate: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    swap: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flip: Option<usize>,
    accuracy: f64,
    accepted: bool,
}

#[derive(Serialize)]
struct SummaryLine {
    record: &'static str,
    queries: usize,
    accepted: usize,
    initial_key_fingerprint: String,
    best_key_fingerprint: String,
    /// Hex of the serialized key file for the estimated key.
    best_key: String,
    best_weight: usize,
    best_accuracy: f64,
    passes_completed: usize,
    stop_reason: StopReason,
}

fn query_lines(queries: &[QueryRecord]) -> String {
    let mut out = String::new();
    for (index, q) in queries.iter().enumerate() {
        let (swap, flip) = match q.mv {
            Some(Move::Swap(i, j)) => (Some([i, j]), None),
            Some(Move::Flip(i)) => (None, Some(i)),
            None => (None, None),
        };
        let line = QueryLine {
            record: "query",
            index,
            candidate: q.candidate.to_hex(),
            swap,
            flip,
            accuracy: q.accuracy,
            accepted: q.accepted,
        };
        out.push_str(&serde_json::to_string(&line).expect("query serializes"));
        out.push('\n');
    }
    out
}

impl PartialTrace {
    /// Query lines only; an interrupted attack has no summary.
    pub fn to_jsonl(&self) -> String {
        query_lines(&self.queries)
    }
}

impl AttackTrace {
    pub fn accepted_count(&self) -> usize {
        self.queries.iter().filter(|q| q.accepted).count()
    }

    /// One JSON object per query followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = query_lines(&self.queries);
        out.push_str(&serde_json::to_string(&self.summary_line()).expect("summary serializes"));
        out.push('\n');
        out
    }

    fn summary_line(&self) -> SummaryLine {
        SummaryLine {
            record: "summary",
            queries: self.queries.len(),
            accepted: self.accepted_count(),
            initial_key_fingerprint: self.initial_key.fingerprint().to_hex(),
            best_key_fingerprint: self.best_key.fingerprint().to_hex(),
            best_key: hex::encode(serialize_key(&self.best_key)),
            best_weight: self.best_key.weight(),
            best_accuracy: self.best_accuracy,
            passes_completed: self.passes_completed,
            stop_reason: self.stop_reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub acc_correct: f64,
    pub acc_incorrect: f64,
    pub acc_plain: f64,
}

/// Scores the correct key, an incorrect key and plain images.
///
/// Plain images are the all-zero key: with no bits set the transform is the
/// identity.
pub fn evaluate_key_protocol(oracle: &mut Oracle, correct: &Key, incorrect: &Key) -> Result<ProtocolReport, OracleError> {
    oracle.check_shape(correct)?;
    oracle.check_shape(incorrect)?;
    let plain = Key::zeros(correct.channels(), correct.block_size())?;
    Ok(ProtocolReport {
        acc_correct: oracle.evaluate(correct)?,
        acc_incorrect: oracle.evaluate(incorrect)?,
        acc_plain: oracle.evaluate(&plain)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(truth: &Key, budget: Option<usize>) -> Oracle {
        make_synthetic_oracle(SyntheticOracleParams::noiseless(truth.clone(), 0.001, 0.73), budget).unwrap()
    }

    #[test]
    fn starting_at_the_truth_converges_immediately() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let mut oracle = noiseless(&truth, None);
        let trace = swap_attack(&mut oracle, &truth, AttackOptions::swaps(10)).unwrap();
        assert_eq!(trace.accepted_count(), 0);
        assert_eq!(trace.stop_reason, StopReason::Converged);
        assert_eq!(trace.passes_completed, 1);
        assert_eq!(trace.best_key, truth);
        assert_eq!(trace.best_accuracy, 0.73);
        // 4 ones x 4 zeros = 16 unequal pairs, plus the initial query.
        assert_eq!(trace.queries.len(), 17);
        assert_eq!(oracle.call_count(), 17);
    }

    #[test]
    fn matched_weight_reaches_the_truth() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let start = Key::from_bit_str(2, 2, "01001101").unwrap();
        let mut oracle = noiseless(&truth, None);
        let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(100)).unwrap();
        assert_eq!(trace.best_key, truth);
        assert_eq!(trace.best_accuracy, 0.73);
        assert_eq!(trace.stop_reason, StopReason::Converged);
    }

    #[test]
    fn equal_bit_pairs_are_never_queried() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let start = Key::from_bit_str(2, 2, "00000000").unwrap();
        let mut oracle = noiseless(&truth, None);
        let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(5)).unwrap();
        assert_eq!(trace.queries.len(), 1);
        assert_eq!(trace.stop_reason, StopReason::Converged);
    }

    #[test]
    fn budget_stops_the_search() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let start = truth.complement();
        let mut oracle = noiseless(&truth, Some(5));
        let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(100)).unwrap();
        assert_eq!(trace.stop_reason, StopReason::BudgetExhausted);
        assert_eq!(trace.queries.len(), 5);
        assert_eq!(oracle.call_count(), 5);
    }

    #[test]
    fn max_passes_stops_the_search() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let start = truth.complement();
        let mut oracle = noiseless(&truth, None);
        let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(1)).unwrap();
        assert_eq!(trace.passes_completed, 1);
        assert!(matches!(trace.stop_reason, StopReason::MaxPasses | StopReason::Converged));
        assert!(trace.accepted_count() > 0);
    }

    #[test]
    fn flips_cross_weight_classes() {
        let truth = Key::from_bit_str(2, 2, "11110010").unwrap();
        let start = Key::from_bit_str(2, 2, "00000000").unwrap();
        let mut oracle = noiseless(&truth, None);
        let opts = AttackOptions { max_passes: 50, allow_flips: true };
        let trace = swap_attack(&mut oracle, &start, opts).unwrap();
        assert_eq!(trace.best_key, truth);
        assert!(trace.queries.iter().any(|q| matches!(q.mv, Some(Move::Flip(_)))));
    }

    #[test]
    fn invalid_inputs() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let mut oracle = noiseless(&truth, None);
        assert!(matches!(
            swap_attack(&mut oracle, &Key::zeros(1, 2).unwrap(), AttackOptions::swaps(1)),
            Err(AttackError::Shape(_))
        ));
        assert!(matches!(
            swap_attack(&mut oracle, &truth, AttackOptions::swaps(0)),
            Err(AttackError::Parameter(_))
        ));
    }

    struct FailsAfter {
        inner: SyntheticAccuracy,
        left: usize,
    }

    impl AccuracySource for FailsAfter {
        fn shape(&self) -> (usize, usize) {
            self.inner.shape()
        }

        fn accuracy(&mut self, key: &Key) -> Result<f64, OracleError> {
            if self.left == 0 {
                return Err(OracleError::Connection("link down".into()));
            }
            self.left -= 1;
            self.inner.score(key)
        }
    }

    #[test]
    fn transport_failure_keeps_partial_trace() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let inner = SyntheticAccuracy::new(SyntheticOracleParams::noiseless(truth.clone(), 0.0, 1.0)).unwrap();
        let mut oracle = Oracle::new(Box::new(FailsAfter { inner, left: 3 }), None).unwrap();
        let err = swap_attack(&mut oracle, &truth.complement(), AttackOptions::swaps(10)).unwrap_err();
        match err {
            AttackError::Oracle { query_index, source, partial } => {
                assert_eq!(query_index, 3);
                assert!(matches!(source, OracleError::Connection(_)));
                assert_eq!(partial.queries.len(), 3);
                assert!(partial.best.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trace_lines() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let mut oracle = noiseless(&truth, None);
        let start = Key::from_bit_str(2, 2, "01110010").unwrap();
        let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(10)).unwrap();
        let text = trace.to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), trace.queries.len() + 1);
        assert_eq!(lines[0]["record"], "query");
        assert!(lines[0].get("swap").is_none());
        assert_eq!(lines[1]["swap"], serde_json::json!([0, 1]));
        assert_eq!(lines[1]["accepted"], true);
        let summary = lines.last().unwrap();
        assert_eq!(summary["record"], "summary");
        assert_eq!(summary["stop_reason"], "converged");
        assert_eq!(summary["best_key"], hex::encode(serialize_key(&truth)));
    }

    #[test]
    fn protocol_triple() {
        let truth = Key::from_bit_str(2, 2, "10110010").unwrap();
        let mut oracle = noiseless(&truth, None);
        let report = evaluate_key_protocol(&mut oracle, &truth, &truth.complement()).unwrap();
        assert_eq!(report.acc_correct, 0.73);
        assert_eq!(report.acc_incorrect, 0.001);
        // plain: distance = weight(truth) = 4 of 8
        assert!((report.acc_plain - (0.001 + 0.729 * 0.5)).abs() < 1e-12);
        assert_eq!(oracle.call_count(), 3);

        let zero = Key::zeros(2, 2).unwrap();
        let mut oracle = noiseless(&zero, None);
        let report = evaluate_key_protocol(&mut oracle, &zero, &zero.complement()).unwrap();
        assert_eq!(report.acc_plain, report.acc_correct);
    }
}

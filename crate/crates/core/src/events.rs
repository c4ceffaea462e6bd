//! Event sequences, JSON Lines ingestion and dataset statistics.
//!
//! Each line of a data file holds one sequence:
//!
//! ```text
//! {"marks": [0, 2, 1], "times": [0.4, 1.25, 1.25]}
//! ```
//!
//! Times are absolute, non-decreasing and measured from zero, so the first
//! event's preceding interval is its own timestamp. Equal timestamps are legal
//! and kept in file order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequences longer than this are cut to their first events.
pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub mark: usize,
    pub time: f64,
}

/// A non-empty, time-ordered realization of a marked point process.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
}

impl EventSequence {
    /// Validates ordering and non-negativity. Marks are checked against a
    /// mark count separately, see [`EventSequence::check_marks`].
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::Validation("sequence has no events".into()));
        }
        for (i, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::Validation(format!("event {i} has time {}", e.time)));
            }
            if i > 0 && e.time < events[i - 1].time {
                return Err(Error::Validation(format!(
                    "times decrease at event {i}: {} after {}",
                    e.time,
                    events[i - 1].time
                )));
            }
        }
        Ok(EventSequence { events })
    }

    pub fn from_parts(marks: &[usize], times: &[f64]) -> Result<Self> {
        if marks.len() != times.len() {
            return Err(Error::Validation(format!(
                "{} marks but {} times",
                marks.len(),
                times.len()
            )));
        }
        Self::new(marks.iter().zip(times).map(|(&mark, &time)| Event { mark, time }).collect())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn marks(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().map(|e| e.mark)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().map(|e| e.time)
    }

    /// Interval preceding each event, with the first measured from zero.
    pub fn intervals_from_zero(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.events
            .iter()
            .map(|e| {
                let dt = e.time - prev;
                prev = e.time;
                dt
            })
            .collect()
    }

    /// Gaps between consecutive events (`len - 1` values).
    pub fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.windows(2).map(|w| w[1].time - w[0].time)
    }

    pub fn check_marks(&self, num_marks: usize) -> Result<()> {
        match self.events.iter().position(|e| e.mark >= num_marks) {
            Some(i) => Err(Error::Validation(format!(
                "event {i} has mark {} but there are only {num_marks} marks",
                self.events[i].mark
            ))),
            None => Ok(()),
        }
    }

    /// Keeps the first `max_len` events.
    pub fn truncate(&mut self, max_len: usize) {
        self.events.truncate(max_len.max(1));
    }

    /// Multiplies every timestamp by `s`.
    pub fn scaled(&self, s: f64) -> EventSequence {
        EventSequence {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    mark: e.mark,
                    time: e.time * s,
                })
                .collect(),
        }
    }
}

/// Train/validation/test splits over a shared mark alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<EventSequence>,
    pub valid: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub num_marks: usize,
    /// Factor already applied to every timestamp.
    pub time_scale: f64,
}

impl Dataset {
    pub fn new(
        train: Vec<EventSequence>,
        valid: Vec<EventSequence>,
        test: Vec<EventSequence>,
        num_marks: usize,
    ) -> Result<Self> {
        if num_marks == 0 {
            return Err(Error::Argument("number of marks must be positive".into()));
        }
        for seq in train.iter().chain(&valid).chain(&test) {
            seq.check_marks(num_marks)?;
        }
        Ok(Dataset {
            train,
            valid,
            test,
            num_marks,
            time_scale: 1.0,
        })
    }

    /// Loads three JSON Lines files.
    pub fn from_files(
        train: impl AsRef<Path>,
        valid: impl AsRef<Path>,
        test: impl AsRef<Path>,
        num_marks: usize,
        max_len: usize,
    ) -> Result<Self> {
        Dataset::new(
            load_jsonl(train, num_marks, max_len)?,
            load_jsonl(valid, num_marks, max_len)?,
            load_jsonl(test, num_marks, max_len)?,
            num_marks,
        )
    }

    pub fn split(&self, split: Split) -> &[EventSequence] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Interval statistics over the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Mean gap between consecutive events.
    pub delta: f64,
    pub min_interval: f64,
    pub max_interval: f64,
    pub num_intervals: usize,
    pub num_sequences: usize,
    pub num_events: usize,
}

#[derive(Deserialize)]
struct Record {
    marks: Vec<i64>,
    times: Vec<f64>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    marks: Vec<usize>,
    times: &'a [f64],
}

/// Parses JSON Lines from a reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_jsonl<R: BufRead>(reader: R, num_marks: usize, max_len: usize) -> Result<Vec<EventSequence>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.marks.len() != rec.times.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("{} marks but {} times", rec.marks.len(), rec.times.len()),
            });
        }
        let at_line = |e: Error| Error::Validation(format!("line {line_no}: {e}"));
        let mut events = Vec::with_capacity(rec.marks.len());
        for (&m, &t) in rec.marks.iter().zip(&rec.times) {
            if m < 0 || m as u64 >= num_marks as u64 {
                return Err(Error::Validation(format!(
                    "line {line_no}: mark {m} outside [0, {num_marks})"
                )));
            }
            events.push(Event {
                mark: m as usize,
                time: t,
            });
        }
        let mut seq = EventSequence::new(events).map_err(at_line)?;
        seq.truncate(max_len);
        out.push(seq);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>, num_marks: usize, max_len: usize) -> Result<Vec<EventSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), num_marks, max_len)
}

pub fn write_jsonl_to<W: Write>(mut writer: W, seqs: &[EventSequence]) -> Result<()> {
    for seq in seqs {
        let times: Vec<f64> = seq.times().collect();
        let rec = RecordOut {
            marks: seq.marks().collect(),
            times: &times,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_jsonl(path: impl AsRef<Path>, seqs: &[EventSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(&mut w, seqs)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Statistics of the gaps between consecutive events. Single-event sequences
/// contribute nothing.
pub fn interval_stats(seqs: &[EventSequence]) -> Result<DatasetStats> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for gap in seqs.iter().flat_map(EventSequence::gaps) {
        sum += gap;
        count += 1;
        min = min.min(gap);
        max = max.max(gap);
    }
    if count == 0 {
        return Err(Error::NoIntervals);
    }
    Ok(DatasetStats {
        delta: sum / count as f64,
        min_interval: min,
        max_interval: max,
        num_intervals: count,
        num_sequences: seqs.len(),
        num_events: seqs.iter().map(EventSequence::len).sum(),
    })
}

/// Interval statistics of the training split.
pub fn compute_stats(dataset: &Dataset) -> Result<DatasetStats> {
    interval_stats(&dataset.train)
}

/// Multiplies every timestamp by `s > 0` and records the factor.
///
/// A density fitted on the scaled data assigns each interval a negative
/// log-likelihood larger by exactly `ln s` than the equivalent density in the
/// original units, so subtract `ln s` per event to compare across scales.
pub fn rescale_times(dataset: &Dataset, s: f64) -> Result<Dataset> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Argument(format!("time scale must be positive, got {s}")));
    }
    let scale = |v: &[EventSequence]| v.iter().map(|q| q.scaled(s)).collect();
    Ok(Dataset {
        train: scale(&dataset.train),
        valid: scale(&dataset.valid),
        test: scale(&dataset.test),
        num_marks: dataset.num_marks,
        time_scale: dataset.time_scale * s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str, k: usize) -> Result<Vec<EventSequence>> {
        read_jsonl(text.as_bytes(), k, DEFAULT_MAX_LEN)
    }

    #[test]
    fn minimal_record() {
        let seqs = parse(r#"{"marks":[0],"times":[0.5]}"#, 1).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].events(), &[Event { mark: 0, time: 0.5 }]);
    }

    #[test]
    fn decreasing_times_rejected() {
        let err = parse(r#"{"marks":[0,2],"times":[1.0,0.5]}"#, 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn mark_out_of_range_rejected() {
        let err = parse(r#"{"marks":[0,3],"times":[0.0,0.5]}"#, 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = parse(r#"{"marks":[-1],"times":[0.0]}"#, 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_record_names_line() {
        let text = "{\"marks\":[0],\"times\":[0.1]}\n\n{\"marks\":[0],\"times\":\n";
        match parse(text, 1).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        match parse(r#"{"marks":[0,0],"times":[0.1]}"#, 1).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn long_records_keep_their_prefix() {
        let marks: Vec<usize> = (0..300).map(|i| i % 2).collect();
        let times: Vec<f64> = (0..300).map(|i| i as f64 * 0.5).collect();
        let seq = EventSequence::from_parts(&marks, &times).unwrap();
        let mut buf = Vec::new();
        write_jsonl_to(&mut buf, std::slice::from_ref(&seq)).unwrap();
        let back = read_jsonl(buf.as_slice(), 2, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(back[0].len(), 256);
        assert_eq!(back[0].events(), &seq.events()[..256]);
    }

    #[test]
    fn simultaneous_events_are_kept_in_order() {
        let seqs = parse(r#"{"marks":[1,0,1],"times":[0.0,0.0,2.0]}"#, 2).unwrap();
        assert_eq!(seqs[0].marks().collect::<Vec<_>>(), vec![1, 0, 1]);
    }

    #[test]
    fn stats_examples() {
        let one = EventSequence::from_parts(&[0, 0, 0], &[0.0, 1.0, 2.0]).unwrap();
        let s = interval_stats(&[one]).unwrap();
        assert_eq!((s.delta, s.min_interval, s.max_interval), (1.0, 1.0, 1.0));

        let a = EventSequence::from_parts(&[0, 0], &[0.0, 1.0]).unwrap();
        let b = EventSequence::from_parts(&[0, 0], &[0.0, 3.0]).unwrap();
        assert_eq!(interval_stats(&[a, b]).unwrap().delta, 2.0);

        let single = EventSequence::from_parts(&[0], &[4.0]).unwrap();
        assert!(matches!(interval_stats(&[single]), Err(Error::NoIntervals)));
    }

    fn dataset(times: &[f64]) -> Dataset {
        let seq = EventSequence::from_parts(&vec![0; times.len()], times).unwrap();
        Dataset::new(vec![seq], vec![], vec![], 1).unwrap()
    }

    #[test]
    fn rescale_examples() {
        let d = dataset(&[0.0, 2.0, 4.0]);
        let half = rescale_times(&d, 0.5).unwrap();
        assert_eq!(half.train[0].times().collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        assert_eq!(half.time_scale, 0.5);
        assert_eq!(rescale_times(&d, 1.0).unwrap(), d);
        assert!(rescale_times(&d, 0.0).is_err());
        assert!(rescale_times(&d, -2.0).is_err());
    }

    /// A fixed log-normal density evaluated on scaled intervals versus the same
    /// density pulled back to the original units.
    #[test]
    fn rescaled_nll_shifts_by_log_scale() {
        let (mu, sigma) = (0.3, 0.8);
        let nll = |tau: f64| {
            let z = (tau.ln() - mu) / sigma;
            tau.ln() + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * z * z
        };
        let d = dataset(&[0.5, 1.7, 2.0, 4.5]);
        for s in [0.25, 1.0, 3.0] {
            let scaled = rescale_times(&d, s).unwrap();
            let n = scaled.train[0].gaps().count() as f64;
            let on_scaled: f64 = scaled.train[0].gaps().map(nll).sum::<f64>() / n;
            // pulled-back density: p(τ) = s·q(sτ)
            let composed: f64 = d.train[0].gaps().map(|t| nll(s * t) - s.ln()).sum::<f64>() / n;
            assert!((on_scaled - s.ln() - composed).abs() < 1e-12);
        }
    }

    fn arb_sequence() -> impl Strategy<Value = EventSequence> {
        prop::collection::vec((0usize..4, 0.0f64..5.0), 1..40).prop_map(|raw| {
            let mut t = 0.0;
            let events = raw
                .into_iter()
                .map(|(mark, gap)| {
                    t += gap;
                    Event { mark, time: t }
                })
                .collect();
            EventSequence::new(events).unwrap()
        })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_exact(seqs in prop::collection::vec(arb_sequence(), 1..8)) {
            let mut buf = Vec::new();
            write_jsonl_to(&mut buf, &seqs).unwrap();
            let back = read_jsonl(buf.as_slice(), 4, DEFAULT_MAX_LEN).unwrap();
            prop_assert_eq!(&back, &seqs);
            let mut again = Vec::new();
            write_jsonl_to(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn delta_scales_linearly(seqs in prop::collection::vec(arb_sequence(), 1..6), s in 0.01f64..100.0) {
            let d = Dataset::new(seqs, vec![], vec![], 4).unwrap();
            if let Ok(base) = compute_stats(&d) {
                let scaled = compute_stats(&rescale_times(&d, s).unwrap()).unwrap();
                let expect = s * base.delta;
                prop_assert!((scaled.delta - expect).abs() <= 1e-12 * expect.abs().max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn truncation_preserves_order(seq in arb_sequence(), n in 1usize..50) {
            let mut t = seq.clone();
            t.truncate(n);
            prop_assert_eq!(t.events(), &seq.events()[..n.min(seq.len())]);
        }
    }
}

//! Fixation and transcript parsing, word-level time alignment and
//! sentence-level aggregation.
//!
//! Fixation files are CSV with the header `t_start_ms,t_end_ms,x_norm,y_norm`.
//! Transcripts are line-delimited JSON records
//! `{"sentence_id", "word", "t_start_ms", "t_end_ms"}`.
//!
//! A fixation belongs to a word when its interval midpoint falls inside the
//! word's half-open span `[t_start_ms, t_end_ms)`. Fixations outside every
//! word are kept in an unattributed bucket rather than dropped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIXATION_HEADER: [&str; 4] = ["t_start_ms", "t_end_ms", "x_norm", "y_norm"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixationEvent {
    pub t_start_ms: i64,
    pub t_end_ms: i64,
    pub x_norm: f64,
    pub y_norm: f64,
}

impl FixationEvent {
    pub fn new(t_start_ms: i64, t_end_ms: i64, x_norm: f64, y_norm: f64) -> Self {
        Self {
            t_start_ms,
            t_end_ms,
            x_norm,
            y_norm,
        }
    }

    pub fn duration_ms(&self) -> i64 {
        self.t_end_ms - self.t_start_ms
    }

    /// Twice the interval midpoint; keeps midpoint comparisons in integers.
    fn midpoint_x2(&self) -> i64 {
        self.t_start_ms + self.t_end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptWord {
    pub sentence_id: u32,
    pub word: String,
    pub t_start_ms: i64,
    pub t_end_ms: i64,
}

impl TranscriptWord {
    fn contains_x2(&self, midpoint_x2: i64) -> bool {
        2 * self.t_start_ms <= midpoint_x2 && midpoint_x2 < 2 * self.t_end_ms
    }
}

/// Gaze pooled over one spoken sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceGazeGroup {
    pub sentence_id: u32,
    /// Duration-weighted midpoint of the member word intervals.
    pub t_mid_ms: i64,
    pub samples: Vec<FixationEvent>,
}

/// Result of assigning fixations to transcript words.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alignment {
    pub words: Vec<TranscriptWord>,
    /// `per_word[i]` holds the fixations attributed to `words[i]`.
    pub per_word: Vec<Vec<FixationEvent>>,
    pub unattributed: Vec<FixationEvent>,
}

impl Alignment {
    pub fn total_fixations(&self) -> usize {
        self.per_word.iter().map(Vec::len).sum::<usize>() + self.unattributed.len()
    }
}

fn clamp_unit(value: f64, what: &str, line: usize) -> f64 {
    if (0.0..=1.0).contains(&value) {
        value
    } else {
        let clamped = value.clamp(0.0, 1.0);
        warn!("line {line}: {what}={value} outside [0,1], clamped to {clamped}");
        clamped
    }
}

/// Reads a fixation CSV. Rows are returned sorted by start time.
pub fn parse_fixations(path: impl AsRef<Path>) -> Result<Vec<FixationEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_fixations(file, path)
}

pub(crate) fn read_fixations(reader: impl std::io::Read, path: &Path) -> Result<Vec<FixationEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers.iter().ne(FIXATION_HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!(
                "expected header `{}`, found `{}`",
                FIXATION_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let int = |i: usize| -> Result<i64> {
            record[i]
                .parse::<i64>()
                .map_err(|e| parse_err(line, format!("{}: {e}", FIXATION_HEADER[i])))
        };
        let real = |i: usize| -> Result<f64> {
            let v = record[i]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("{}: {e}", FIXATION_HEADER[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("{}: non-finite value", FIXATION_HEADER[i])))
            }
        };
        let (t_start_ms, t_end_ms) = (int(0)?, int(1)?);
        if t_end_ms < t_start_ms {
            return Err(Error::Validation(format!(
                "{}:{line}: fixation ends ({t_end_ms}) before it starts ({t_start_ms})",
                path.display()
            )));
        }
        let x_norm = clamp_unit(real(2)?, "x_norm", line);
        let y_norm = clamp_unit(real(3)?, "y_norm", line);
        events.push(FixationEvent::new(t_start_ms, t_end_ms, x_norm, y_norm));
    }

    events.sort_by_key(|e| (e.t_start_ms, e.t_end_ms));
    if let Some(w) = events.windows(2).find(|w| w[1].t_start_ms < w[0].t_end_ms) {
        return Err(Error::Validation(format!(
            "{}: overlapping fixations [{}, {}) and [{}, {})",
            path.display(),
            w[0].t_start_ms,
            w[0].t_end_ms,
            w[1].t_start_ms,
            w[1].t_end_ms
        )));
    }
    Ok(events)
}

/// Reads a word-timestamped transcript. Words come back grouped by sentence,
/// keeping file order within each sentence.
pub fn parse_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptWord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_transcript(BufReader::new(file), path)
}

pub(crate) fn read_transcript(reader: impl BufRead, path: &Path) -> Result<Vec<TranscriptWord>> {
    let mut words: Vec<TranscriptWord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let word: TranscriptWord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        if word.t_end_ms < word.t_start_ms {
            return Err(Error::Validation(format!(
                "{}:{line_no}: word `{}` ends ({}) before it starts ({})",
                path.display(),
                word.word,
                word.t_end_ms,
                word.t_start_ms
            )));
        }
        words.push(word);
    }

    words.sort_by_key(|w| w.sentence_id);
    for pair in words.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.sentence_id == b.sentence_id && b.t_start_ms < a.t_end_ms {
            return Err(Error::Validation(format!(
                "{}: sentence {}: word `{}` [{}, {}) overlaps or precedes `{}` [{}, {})",
                path.display(),
                a.sentence_id,
                b.word,
                b.t_start_ms,
                b.t_end_ms,
                a.word,
                a.t_start_ms,
                a.t_end_ms
            )));
        }
    }
    Ok(words)
}

/// Assigns each fixation to the word whose span contains its midpoint.
///
/// When words from different sentences overlap in time, the word that starts
/// first claims the fixation, so every fixation lands in exactly one bucket.
pub fn align_words(fixations: &[FixationEvent], words: &[TranscriptWord]) -> Alignment {
    let mut by_time: Vec<usize> = (0..words.len()).collect();
    by_time.sort_by_key(|&i| (words[i].t_start_ms, i));

    let mut per_word = vec![Vec::new(); words.len()];
    let mut unattributed = Vec::new();
    for fix in fixations {
        let mid = fix.midpoint_x2();
        match by_time.iter().find(|&&i| words[i].contains_x2(mid)) {
            Some(&i) => per_word[i].push(*fix),
            None => unattributed.push(*fix),
        }
    }
    Alignment {
        words: words.to_vec(),
        per_word,
        unattributed,
    }
}

/// Pools word-level gaze into one group per sentence, ordered by the
/// sentence's duration-weighted temporal midpoint.
pub fn aggregate_sentences(alignment: &Alignment) -> Vec<SentenceGazeGroup> {
    struct Acc {
        weighted_mid_x2: i128,
        total_duration: i128,
        mid_x2_sum: i128,
        n_words: i128,
        samples: Vec<FixationEvent>,
    }

    let mut sentences: BTreeMap<u32, Acc> = BTreeMap::new();
    for (word, fixations) in alignment.words.iter().zip(&alignment.per_word) {
        let acc = sentences.entry(word.sentence_id).or_insert_with(|| Acc {
            weighted_mid_x2: 0,
            total_duration: 0,
            mid_x2_sum: 0,
            n_words: 0,
            samples: Vec::new(),
        });
        let duration = i128::from(word.t_end_ms - word.t_start_ms);
        let mid_x2 = i128::from(word.t_start_ms + word.t_end_ms);
        acc.weighted_mid_x2 += duration * mid_x2;
        acc.total_duration += duration;
        acc.mid_x2_sum += mid_x2;
        acc.n_words += 1;
        acc.samples.extend_from_slice(fixations);
    }

    let mut groups: Vec<SentenceGazeGroup> = sentences
        .into_iter()
        .map(|(sentence_id, mut acc)| {
            // zero-length words only: fall back to the plain mean of midpoints
            let (num, den) = if acc.total_duration > 0 {
                (acc.weighted_mid_x2, 2 * acc.total_duration)
            } else {
                (acc.mid_x2_sum, 2 * acc.n_words)
            };
            acc.samples.sort_by_key(|f| (f.t_start_ms, f.t_end_ms));
            SentenceGazeGroup {
                sentence_id,
                t_mid_ms: div_round(num, den) as i64,
                samples: acc.samples,
            }
        })
        .collect();
    groups.sort_by_key(|g| (g.t_mid_ms, g.sentence_id));
    groups
}

fn div_round(num: i128, den: i128) -> i128 {
    (2 * num + den).div_euclid(2 * den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn fixations_from(text: &str) -> Result<Vec<FixationEvent>> {
        read_fixations(Cursor::new(text.to_string()), Path::new("fixations.csv"))
    }

    fn transcript_from(text: &str) -> Result<Vec<TranscriptWord>> {
        read_transcript(Cursor::new(text.to_string()), Path::new("transcript.jsonl"))
    }

    fn word(sid: u32, w: &str, start: i64, end: i64) -> TranscriptWord {
        TranscriptWord {
            sentence_id: sid,
            word: w.to_string(),
            t_start_ms: start,
            t_end_ms: end,
        }
    }

    #[test]
    fn parses_single_row() {
        let got = fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n0,120,0.50,0.50\n").unwrap();
        assert_eq!(got, vec![FixationEvent::new(0, 120, 0.5, 0.5)]);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn clamps_out_of_range_coordinates() {
        let got = fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n0,120,1.2,-0.1\n").unwrap();
        assert_eq!(got[0].x_norm, 1.0);
        assert_eq!(got[0].y_norm, 0.0);
    }

    #[test]
    fn malformed_row_names_line() {
        let err = fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n0,120,0.5,0.5\n10,abc,0.5,0.5\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_header_rejected() {
        let err = fixations_from("start,end,x,y\n0,1,0.5,0.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn reversed_or_overlapping_fixations_rejected() {
        let err = fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n100,50,0.5,0.5\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n0,100,0.5,0.5\n50,150,0.5,0.5\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rows_are_sorted_by_start() {
        let got = fixations_from("t_start_ms,t_end_ms,x_norm,y_norm\n200,300,0.1,0.1\n0,100,0.2,0.2\n").unwrap();
        assert_eq!(got[0].t_start_ms, 0);
        assert_eq!(got[1].t_start_ms, 200);
    }

    #[test]
    fn parses_transcript_record() {
        let got = transcript_from(r#"{"sentence_id":0,"word":"opacity","t_start_ms":100,"t_end_ms":450}"#).unwrap();
        assert_eq!(got, vec![word(0, "opacity", 100, 450)]);
    }

    #[test]
    fn two_sentences_of_three_words() {
        let mut text = String::new();
        for sid in 0..2 {
            for i in 0..3 {
                let start = sid * 1000 + i * 100;
                text.push_str(&format!(
                    "{{\"sentence_id\":{sid},\"word\":\"w{i}\",\"t_start_ms\":{start},\"t_end_ms\":{}}}\n",
                    start + 90
                ));
            }
        }
        let got = transcript_from(&text).unwrap();
        assert_eq!(got.len(), 6);
        let ids: std::collections::BTreeSet<u32> = got.iter().map(|w| w.sentence_id).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn reversed_word_rejected() {
        let err = transcript_from(r#"{"sentence_id":0,"word":"x","t_start_ms":500,"t_end_ms":100}"#).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn overlapping_words_in_sentence_rejected() {
        let text = concat!(
            r#"{"sentence_id":0,"word":"a","t_start_ms":0,"t_end_ms":100}"#,
            "\n",
            r#"{"sentence_id":0,"word":"b","t_start_ms":50,"t_end_ms":150}"#,
            "\n"
        );
        assert!(matches!(transcript_from(text).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn midpoint_assignment() {
        let words = vec![word(0, "opacity", 100, 450), word(0, "fast", 500, 510)];
        let fix = vec![
            FixationEvent::new(150, 250, 0.5, 0.5), // midpoint 200
            FixationEvent::new(600, 700, 0.5, 0.5), // midpoint 650, outside every word
        ];
        let a = align_words(&fix, &words);
        assert_eq!(a.per_word[0], vec![fix[0]]);
        assert!(a.per_word[1].is_empty());
        assert_eq!(a.unattributed, vec![fix[1]]);
    }

    #[test]
    fn word_end_is_exclusive() {
        let words = vec![word(0, "a", 0, 100), word(0, "b", 100, 200)];
        let fix = vec![FixationEvent::new(50, 150, 0.5, 0.5)]; // midpoint exactly 100
        let a = align_words(&fix, &words);
        assert!(a.per_word[0].is_empty());
        assert_eq!(a.per_word[1].len(), 1);
    }

    #[test]
    fn sentence_pools_member_words() {
        let words = vec![word(0, "a", 0, 500), word(0, "b", 500, 1000)];
        let fix: Vec<_> = [0, 100, 200, 600, 800]
            .iter()
            .map(|&t| FixationEvent::new(t, t + 50, 0.5, 0.5))
            .collect();
        let a = align_words(&fix, &words);
        assert_eq!(a.per_word[0].len(), 3);
        assert_eq!(a.per_word[1].len(), 2);
        let groups = aggregate_sentences(&a);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].samples.len(), 5);
        assert_eq!(groups[0].t_mid_ms, 500);
    }

    #[test]
    fn dropout_sentence_has_empty_group() {
        let words = vec![word(0, "a", 0, 100), word(1, "b", 200, 300)];
        let fix = vec![FixationEvent::new(20, 60, 0.5, 0.5)];
        let groups = aggregate_sentences(&align_words(&fix, &words));
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].samples.len(), 1);
        assert!(groups[1].samples.is_empty());
    }

    #[test]
    fn weighted_midpoint_favours_long_words() {
        // mids 50 (dur 100) and 950 (dur 100) -> 500; then a long word pulls it.
        let words = vec![word(0, "a", 0, 100), word(0, "b", 900, 1000), word(0, "c", 1000, 1800)];
        let groups = aggregate_sentences(&align_words(&[], &words));
        // (100*50 + 100*950 + 800*1400) / 1000 = 1220
        assert_eq!(groups[0].t_mid_ms, 1220);
    }

    #[test]
    fn groups_sorted_by_midpoint_not_id() {
        let words = vec![word(0, "late", 1000, 1100), word(1, "early", 0, 100)];
        let groups = aggregate_sentences(&align_words(&[], &words));
        assert_eq!(groups[0].sentence_id, 1);
        assert_eq!(groups[1].sentence_id, 0);
    }
}

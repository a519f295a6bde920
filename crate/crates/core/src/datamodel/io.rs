//! Line-oriented dataset files.
//!
//! Pre-training record: `user_id<TAB>ev1;ev2;...` with each event written as
//! `f1,...,fM|b1,...,bN`. Fine-tuning records append
//! `<TAB>t1,...,tM<TAB>c1,...,cC<TAB>label`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{Corpus, CtrExample, FeatureSchema, InteractionEvent, InteractionSequence};
use crate::error::{Error, Result};

fn write_ids(out: &mut String, ids: &[u32]) {
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{id}").unwrap();
    }
}

fn write_sequence(out: &mut String, seq: &InteractionSequence) {
    write!(out, "{}\t", seq.user_id).unwrap();
    for (i, e) in seq.events.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        write_ids(out, &e.item_features);
        out.push('|');
        write_ids(out, &e.behavior_features);
    }
}

pub fn format_sequences(seqs: &[InteractionSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        write_sequence(&mut out, s);
        out.push('\n');
    }
    out
}

pub fn format_examples(examples: &[CtrExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        write_sequence(&mut out, &ex.sequence);
        out.push('\t');
        write_ids(&mut out, &ex.target_item);
        out.push('\t');
        write_ids(&mut out, &ex.context_features);
        writeln!(out, "\t{}", ex.label).unwrap();
    }
    out
}

fn parse_ids(field: &str, line: usize, what: &str) -> Result<Vec<u32>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|t| {
            t.trim().parse::<u32>().map_err(|_| Error::Parse {
                line,
                message: format!("{what}: `{t}` is not a non-negative integer"),
            })
        })
        .collect()
}

fn parse_sequence(user: &str, events: &str, line: usize) -> Result<InteractionSequence> {
    let user_id = user.trim().parse::<u32>().map_err(|_| Error::Parse {
        line,
        message: format!("user id `{user}` is not an integer"),
    })?;
    let mut out = Vec::new();
    if !events.is_empty() {
        for ev in events.split(';') {
            let (items, behaviors) = ev.split_once('|').ok_or_else(|| Error::Parse {
                line,
                message: format!("event `{ev}` lacks the `|` separator"),
            })?;
            out.push(InteractionEvent::new(
                parse_ids(items, line, "item features")?,
                parse_ids(behaviors, line, "behavior features")?,
            ));
        }
    }
    Ok(InteractionSequence {
        user_id,
        events: out,
    })
}

/// Parses dataset text; records are validated against `schema` when given.
pub fn parse_dataset(text: &str, schema: Option<&FeatureSchema>) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut last_seq: Option<Arc<InteractionSequence>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let invalid = |message: String| Error::Validation { line, message };
        match fields.as_slice() {
            [user, events] => {
                let seq = parse_sequence(user, events, line)?;
                if let Some(s) = schema {
                    for e in &seq.events {
                        s.check_event(e).map_err(invalid)?;
                    }
                }
                corpus.sequences.push(seq);
            }
            [user, events, target, context, label] => {
                let seq = parse_sequence(user, events, line)?;
                let sequence = match &last_seq {
                    Some(prev) if **prev == seq => prev.clone(),
                    _ => Arc::new(seq),
                };
                last_seq = Some(sequence.clone());
                let label = match label.trim() {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("label `{other}` is not 0 or 1"),
                        })
                    }
                };
                let ex = CtrExample {
                    sequence,
                    target_item: parse_ids(target, line, "target")?,
                    context_features: parse_ids(context, line, "context")?,
                    label,
                };
                if let Some(s) = schema {
                    s.check_example(&ex).map_err(invalid)?;
                }
                corpus.examples.push(ex);
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 2 or 5 tab-separated fields, got {}", fields.len()),
                })
            }
        }
    }
    Ok(corpus)
}

pub fn load_dataset(path: &Path, schema: Option<&FeatureSchema>) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, schema)
}

/// Writes sequences then examples to one file.
pub fn save_dataset(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut text = format_sequences(&corpus.sequences);
    text.push_str(&format_examples(&corpus.examples));
    write_file(path, &text)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the canonical text encoding.
pub fn corpus_digest(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update(format_sequences(&corpus.sequences));
    h.update(format_examples(&corpus.examples));
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            item_vocab: vec![10, 4],
            behavior_vocab: vec![6],
            context_vocab: vec![3],
        }
    }

    #[test]
    fn empty_text_is_empty_corpus() {
        assert!(parse_dataset("", Some(&schema())).unwrap().is_empty());
    }

    #[test]
    fn hand_written_fixture() {
        let text = "7\t3,1|5;9,2|1\n7\t3,1|5;9,2|1\t4,3\t2\t1\n";
        let c = parse_dataset(text, Some(&schema())).unwrap();
        assert_eq!(c.sequences.len(), 1);
        assert_eq!(c.sequences[0].user_id, 7);
        assert_eq!(
            c.sequences[0].events,
            vec![
                InteractionEvent::new(vec![3, 1], vec![5]),
                InteractionEvent::new(vec![9, 2], vec![1]),
            ]
        );
        let ex = &c.examples[0];
        assert_eq!(ex.target_item, vec![4, 3]);
        assert_eq!(ex.context_features, vec![2]);
        assert_eq!(ex.label, 1);
        assert_eq!(*ex.sequence, c.sequences[0]);
        assert_eq!(format_sequences(&c.sequences) + &format_examples(&c.examples), text);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "1\t1,1|1\n2\t1,1-1\n";
        match parse_dataset(text, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_vocab_is_validation_error() {
        let text = "1\t1,1|1\n1\t10,1|1\n";
        match parse_dataset(text, Some(&schema())) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}

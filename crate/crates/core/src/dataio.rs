//! File formats and data plumbing.
//!
//! - transition logs: JSON Lines, one [`Transition`] per line
//! - MDP specs, value tables, training configs: single JSON documents
//! - models: `ENGMODEL` magic, little-endian `u64` manifest length, JSON
//!   manifest, then every tensor as little-endian `f32` in manifest order
//! - training traces: CSV `step,quantile_loss,bce_loss,total`
//!
//! Parsers fail on the first malformed line and report its number.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qrlearn::{EngagementModel, ModelSpec, Tensor, TraceRow};
use crate::simenv::{stream_rng, Transition};

/// A raw log row before successor pairing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: u64,
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: u8,
}

/// Pairs consecutive records of each session into transitions.
///
/// Output is ordered by `(session_id, step)` regardless of input order; the
/// last record of each session becomes the terminal transition.
pub fn build_transitions(records: &[SessionRecord]) -> Result<Vec<Transition>> {
    let mut sessions: BTreeMap<u64, Vec<&SessionRecord>> = BTreeMap::new();
    for r in records {
        sessions.entry(r.session_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for (id, mut rows) in sessions {
        rows.sort_by_key(|r| r.step);
        for (expected, r) in rows.iter().enumerate() {
            if r.step != expected {
                let problem = if r.step < expected { "duplicate" } else { "missing" };
                return Err(Error::data(format!(
                    "session {id}: {problem} step {expected} (found step {})",
                    r.step
                )));
            }
        }
        for (i, r) in rows.iter().enumerate() {
            let next = rows.get(i + 1);
            out.push(Transition {
                session_id: id,
                step: r.step,
                state: r.state,
                action: r.action,
                reward: r.reward,
                terminal: next.is_none(),
                next_state: next.map(|n| n.state),
                next_action: next.map(|n| n.action),
            });
        }
    }
    Ok(out)
}

/// Seeded minibatch index stream.
///
/// Epoch `k` visits a permutation of `0..n` drawn from stream `k` of the
/// seed; the final short batch of an epoch is kept.
#[derive(Debug, Clone)]
pub struct BatchIndices {
    n: usize,
    batch_size: usize,
    seed: u64,
    epochs: usize,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIndices {
    pub fn new(n: usize, batch_size: usize, seed: u64, epochs: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        Ok(BatchIndices { n, batch_size, seed, epochs, epoch: 0, order: Vec::new(), pos: n })
    }

    /// Total number of batches this iterator yields.
    pub fn total_batches(&self) -> usize {
        self.epochs * self.n.div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIndices {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.n == 0 {
            return None;
        }
        if self.pos >= self.n {
            if self.epoch >= self.epochs {
                return None;
            }
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut stream_rng(self.seed, self.epoch as u64));
            self.epoch += 1;
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Minibatches of references into `items`.
pub fn batch_iterator<T>(
    items: &[T],
    batch_size: usize,
    seed: u64,
    epochs: usize,
) -> Result<impl Iterator<Item = Vec<&T>>> {
    Ok(BatchIndices::new(items.len(), batch_size, seed, epochs)?
        .map(move |idx| idx.into_iter().map(|i| &items[i]).collect()))
}

fn parse_err(line: Option<usize>, e: impl std::fmt::Display) -> Error {
    Error::Parse { line, message: e.to_string() }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| parse_err(None, e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON Lines; blank lines are skipped, anything else must parse.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(Some(i + 1), e))?);
    }
    Ok(out)
}

/// Reads a transition log and checks every successor field.
pub fn read_transitions<R: BufRead>(input: R) -> Result<Vec<Transition>> {
    let logs: Vec<Transition> = read_jsonl(input)?;
    for (i, t) in logs.iter().enumerate() {
        t.successor().map_err(|e| parse_err(Some(i + 1), e))?;
    }
    Ok(logs)
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| parse_err(None, e))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned, R: Read>(input: R) -> Result<T> {
    serde_json::from_reader(input).map_err(|e| parse_err(Some(e.line()), e))
}

pub const MODEL_MAGIC: &[u8; 8] = b"ENGMODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    /// Free-form provenance: the training config and command-line settings.
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_model<W: Write>(model: &EngagementModel, config: &serde_json::Value, mut out: W) -> Result<()> {
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        spec: model.spec().clone(),
        config: config.clone(),
        tensors: model
            .tensors()
            .iter()
            .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| parse_err(None, e))?;
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for t in model.tensors() {
        let mut buf = Vec::with_capacity(4 * t.data.len());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<(EngagementModel, ModelManifest)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(parse_err(None, "not a model file (bad magic)"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|e| parse_err(None, e))?;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let manifest: ModelManifest = serde_json::from_slice(&header).map_err(|e| parse_err(None, e))?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(parse_err(
            None,
            format!("unsupported model format version {}", manifest.format_version),
        ));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        input.read_exact(&mut bytes).map_err(|e| {
            parse_err(None, format!("tensor '{}' is truncated: {e}", entry.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(parse_err(None, format!("{} trailing bytes after tensors", rest.len())));
    }
    let model = EngagementModel::from_tensors(manifest.spec.clone(), tensors)?;
    Ok((model, manifest))
}

pub const TRACE_HEADER: &str = "step,quantile_loss,bce_loss,total";

pub fn write_trace<W: Write>(trace: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for row in trace {
        writeln!(out, "{},{:?},{:?},{:?}", row.step, row.quantile_loss, row.bce_loss, row.total)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != TRACE_HEADER {
        return Err(parse_err(Some(1), format!("expected header '{TRACE_HEADER}'")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = Some(i + 2);
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(lineno, e));
        out.push(TraceRow {
            step: fields[0].parse().map_err(|e| parse_err(lineno, e))?,
            quantile_loss: num(fields[1])?,
            bce_loss: num(fields[2])?,
            total: num(fields[3])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(session_id: u64, step: usize, state: usize) -> SessionRecord {
        SessionRecord { session_id, step, state, action: state % 2, reward: (step % 2) as u8 }
    }

    #[test]
    fn single_record_is_terminal() {
        let out = build_transitions(&[rec(4, 0, 1)]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].terminal && out[0].next_state.is_none());
    }

    #[test]
    fn three_records_only_last_terminal() {
        let out = build_transitions(&[rec(0, 0, 1), rec(0, 1, 2), rec(0, 2, 3)]).unwrap();
        assert_eq!(out.iter().map(|t| t.terminal).collect::<Vec<_>>(), vec![false, false, true]);
        assert_eq!(out[0].next_state, Some(2));
        assert_eq!(out[1].next_action, Some(1));
    }

    #[test]
    fn interleaved_sessions_match_separate_processing() {
        let a = vec![rec(1, 0, 0), rec(1, 1, 1), rec(1, 2, 2)];
        let b = vec![rec(2, 0, 3), rec(2, 1, 4)];
        let interleaved = vec![b[1].clone(), a[0].clone(), b[0].clone(), a[2].clone(), a[1].clone()];
        let mut separate = build_transitions(&a).unwrap();
        separate.extend(build_transitions(&b).unwrap());
        assert_eq!(build_transitions(&interleaved).unwrap(), separate);
    }

    #[test]
    fn gap_names_session_and_step() {
        let err = build_transitions(&[rec(7, 0, 0), rec(7, 2, 0)]).unwrap_err().to_string();
        assert!(err.contains("session 7") && err.contains("step 1"), "{err}");
        let dup = build_transitions(&[rec(3, 0, 0), rec(3, 0, 1)]).unwrap_err().to_string();
        assert!(dup.contains("session 3") && dup.contains("duplicate"), "{dup}");
    }

    #[test]
    fn batches_keep_short_tail() {
        let sizes: Vec<usize> = BatchIndices::new(10, 3, 1, 1).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(BatchIndices::new(10, 0, 1, 1).is_err());
    }

    #[test]
    fn batches_are_seeded_and_cover_each_epoch() {
        let items: Vec<u32> = (0..25).collect();
        let run = |seed| -> Vec<Vec<u32>> {
            batch_iterator(&items, 4, seed, 3).unwrap().map(|b| b.into_iter().copied().collect()).collect()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        let all = run(5);
        assert_eq!(all.len(), 3 * 7);
        for epoch in all.chunks(7) {
            let mut seen: Vec<u32> = epoch.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, items);
        }
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "{\"session_id\":0,\"step\":0,\"state\":0,\"action\":0,\"reward\":1,\"terminal\":1}\n\nnot json\n";
        match read_transitions(text.as_bytes()) {
            Err(Error::Parse { line: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_successor_is_rejected() {
        let text = "{\"session_id\":0,\"step\":0,\"state\":0,\"action\":0,\"reward\":1,\"terminal\":0}\n";
        assert!(matches!(read_transitions(text.as_bytes()), Err(Error::Parse { line: Some(1), .. })));
    }

    #[test]
    fn terminal_line_omits_successor_keys() {
        let t = Transition {
            session_id: 3,
            step: 1,
            state: 2,
            action: 0,
            reward: 1,
            terminal: true,
            next_state: None,
            next_action: None,
        };
        let mut buf = Vec::new();
        write_jsonl(&[t], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"session_id\":3,\"step\":1,\"state\":2,\"action\":0,\"reward\":1,\"terminal\":1}\n"
        );
    }

    #[test]
    fn bad_model_magic() {
        assert!(matches!(read_model(&b"NOTAMODELxxxxxxxx"[..]), Err(Error::Parse { .. })));
    }
}

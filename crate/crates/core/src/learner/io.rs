//! Trace files: one trace per line, `LABEL;obs|obs|...`, where each
//! observation is a comma-separated atom list (possibly empty). Blank lines
//! and lines starting with `#` are ignored.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{Label, LearnError, TraceExample};
use crate::logic::{Observation, Signature};

pub fn format_trace(t: &TraceExample, sig: &Signature) -> String {
    let obs: Vec<String> = t.observations.iter().map(|o| o.format(sig)).collect();
    format!("{};{}", t.label.as_str(), obs.join("|"))
}

pub fn parse_trace(line: &str, sig: &Signature) -> Result<TraceExample, LearnError> {
    let (label, rest) =
        line.split_once(';').ok_or_else(|| LearnError::Format { line: 0, msg: "expected `LABEL;observations`".into() })?;
    let label: Label = label.parse()?;
    let observations = rest
        .split('|')
        .map(|o| Observation::parse(o, sig))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| LearnError::Format { line: 0, msg: e.to_string() })?;
    Ok(TraceExample { observations, label })
}

pub fn parse_traces(text: &str, sig: &Signature) -> Result<Vec<TraceExample>, LearnError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_trace(line, sig).map_err(|e| match e {
            LearnError::Format { msg, .. } => LearnError::Format { line: i + 1, msg },
            e => e,
        })?);
    }
    Ok(out)
}

pub fn read_traces(path: impl AsRef<Path>, sig: &Signature) -> Result<Vec<TraceExample>, LearnError> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_traces(&text, sig)
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[TraceExample], sig: &Signature) -> Result<(), LearnError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        writeln!(f, "{}", format_trace(t, sig))?;
    }
    f.flush()?;
    Ok(())
}

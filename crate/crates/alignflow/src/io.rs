//! CSV readers and writers for grids, corpora and metrics.

use std::path::Path;

use alignflow_core::duration::DurationRecord;
use alignflow_core::harness::{Instance, MainRecord};
use alignflow_core::numerics::Tensor;

use crate::error::{Error, Result};

pub const MAIN_HEADER: [&str; 5] = ["step", "loss", "noise_scale", "exact_match", "mae"];
pub const DURATION_HEADER: [&str; 4] = ["step", "loss_d", "loss_g_adv", "loss_g_mse"];

fn parse_f64(field: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("row {row}: {field:?} is not a number")))
}

fn parse_usize(field: &str, row: usize) -> Result<usize> {
    field.trim().parse().map_err(|_| {
        Error::Format(format!(
            "row {row}: {field:?} is not a non-negative integer"
        ))
    })
}

/// A headerless numeric CSV as a `(rows, cols)` tensor.
pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .map(|f| parse_f64(f, r + 1))
            .collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(values.len()) != values.len() {
            return Err(Error::Format(format!(
                "row {} has {} columns",
                r + 1,
                values.len()
            )));
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    Ok(Tensor::new(&[rows, cols], data)?)
}

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for r in 0..t.rows() {
        w.write_record((0..t.cols()).map(|c| t.at(r, c).to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_durations(path: &Path, durations: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["token", "duration"])?;
    for (i, d) in durations.iter().enumerate() {
        w.write_record([i.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation columns are empty on steps without an evaluation.
pub fn write_main_metrics(path: &Path, records: &[MainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MAIN_HEADER)?;
    for r in records {
        let (em, mae) = r.eval.map_or((String::new(), String::new()), |e| {
            (e.exact_match.to_string(), e.mae.to_string())
        });
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.noise_scale.to_string(),
            em,
            mae,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_duration_metrics(path: &Path, records: &[DurationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DURATION_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.loss_d.to_string(),
            r.loss_g_adv.to_string(),
            r.loss_g_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format, one row per frame:
/// `instance,speaker,token_index,token,frame,c0,...,c{C-1}`.
pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let channels = instances.first().map_or(0, |i| i.frames.rows());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["instance", "speaker", "token_index", "token", "frame"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..channels).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for (n, inst) in instances.iter().enumerate() {
        let mut frame = 0;
        for (i, (&tok, &d)) in inst.tokens.iter().zip(&inst.durations).enumerate() {
            for _ in 0..d {
                let mut row = vec![
                    n.to_string(),
                    inst.speaker.to_string(),
                    i.to_string(),
                    tok.to_string(),
                    frame.to_string(),
                ];
                row.extend((0..channels).map(|c| inst.frames.at(c, frame).to_string()));
                w.write_record(&row)?;
                frame += 1;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_instances`]; durations are recovered by counting
/// frames per token index.
pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let fixed = ["instance", "speaker", "token_index", "token", "frame"];
    if header.len() <= fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(Error::Format(format!(
            "{}: header must start with {} followed by channel columns",
            path.display(),
            fixed.join(",")
        )));
    }
    let channels = header.len() - fixed.len();
    let mut out: Vec<Instance> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2;
        let idx = parse_usize(&record[0], row)?;
        let speaker = parse_usize(&record[1], row)?;
        let token_index = parse_usize(&record[2], row)?;
        let token = parse_usize(&record[3], row)?;
        let frame = parse_usize(&record[4], row)?;
        if idx == out.len() {
            out.push(Instance {
                tokens: Vec::new(),
                speaker,
                frames: Tensor::zeros(&[channels, 0]),
                durations: Vec::new(),
            });
            columns.push(Vec::new());
        } else if idx + 1 != out.len() {
            return Err(Error::Format(format!(
                "row {row}: instances must be numbered consecutively"
            )));
        }
        let inst = out.last_mut().expect("pushed above");
        let frames = columns.last_mut().expect("pushed above");
        if inst.speaker != speaker || frame != frames.len() / channels {
            return Err(Error::Format(format!(
                "row {row}: inconsistent speaker or frame index"
            )));
        }
        if token_index == inst.tokens.len() {
            inst.tokens.push(token);
            inst.durations.push(1);
        } else if token_index + 1 == inst.tokens.len() && inst.tokens[token_index] == token {
            inst.durations[token_index] += 1;
        } else {
            return Err(Error::Format(format!(
                "row {row}: token indices must be consecutive"
            )));
        }
        for c in 0..channels {
            frames.push(parse_f64(&record[fixed.len() + c], row)?);
        }
    }
    for (inst, flat) in out.iter_mut().zip(columns) {
        let j = flat.len() / channels;
        let mut t = Tensor::zeros(&[channels, j]);
        for f in 0..j {
            for c in 0..channels {
                t.data_mut()[c * j + f] = flat[f * channels + c];
            }
        }
        inst.frames = t;
    }
    if out.is_empty() {
        return Err(Error::Format(format!(
            "{} holds no instances",
            path.display()
        )));
    }
    Ok(out)
}

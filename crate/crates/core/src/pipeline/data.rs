//! Dataset directories, label tables and augmented sample files.
//!
//! A dataset directory holds one tractogram per subject (`<subject>.txt` or
//! `<subject>.trk`) and a `labels.tsv` table:
//!
//! ```text
//! subject	index	label
//! sub01	0	1
//! sub01	1	0
//! ```
//!
//! `index` is the streamline's position in the subject's tractogram and
//! `label` is 1 for the target class. Every streamline needs a label.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::LabeledStreamline;
use crate::streamline::{arc_length, mean_fa, resample_uniform, Class, FeatureSample};
use crate::tract_io::{self, Tractogram};

use super::{PipelineError, Result};

pub const LABELS_FILE: &str = "labels.tsv";
pub const SAMPLES_FILE: &str = "samples.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub name: String,
    pub tractogram: Tractogram,
    /// One label per streamline of `tractogram`.
    pub labels: Vec<Class>,
}

/// One row of a label or prediction table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub subject: String,
    pub index: usize,
    pub label: Class,
    /// Target-class probability; present in prediction tables.
    pub score: Option<f64>,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if line.trim().is_empty() || (lineno == 1 && fields[0] == "subject") {
            continue;
        }
        let err = |message: String| PipelineError::LabelsFile {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        if fields.len() < 3 {
            return Err(err(format!("expected at least 3 tab-separated fields, got {}", fields.len())));
        }
        let index = fields[1]
            .parse::<usize>()
            .map_err(|e| err(format!("index {:?}: {e}", fields[1])))?;
        let label = fields[2]
            .parse::<usize>()
            .ok()
            .and_then(Class::from_id)
            .ok_or_else(|| err(format!("label must be 0 or 1, got {:?}", fields[2])))?;
        let score = match fields.get(3) {
            Some(s) => Some(s.parse::<f64>().map_err(|e| err(format!("score {s:?}: {e}")))?),
            None => None,
        };
        rows.push(LabelRow {
            subject: fields[0].to_string(),
            index,
            label,
            score,
        });
    }
    Ok(rows)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let with_scores = rows.iter().any(|r| r.score.is_some());
    if with_scores {
        writeln!(w, "subject\tindex\tlabel\tscore")?;
    } else {
        writeln!(w, "subject\tindex\tlabel")?;
    }
    for r in rows {
        write!(w, "{}\t{}\t{}", r.subject, r.index, r.label.id())?;
        if with_scores {
            write!(w, "\t{:?}", r.score.unwrap_or(f64::NAN))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Subject>> {
    let rows = read_labels(&dir.join(LABELS_FILE))?;
    let mut by_subject: BTreeMap<String, Vec<(usize, Class)>> = BTreeMap::new();
    for r in rows {
        by_subject.entry(r.subject).or_default().push((r.index, r.label));
    }
    let mut subjects = Vec::with_capacity(by_subject.len());
    for (name, entries) in by_subject {
        let txt = dir.join(format!("{name}.txt"));
        let path = if txt.exists() { txt } else { dir.join(format!("{name}.trk")) };
        let tractogram = tract_io::load(&path)?;
        let mut labels: Vec<Option<Class>> = vec![None; tractogram.len()];
        for (index, label) in entries {
            let slot = labels.get_mut(index).ok_or_else(|| {
                PipelineError::InvalidDataset(format!(
                    "{name}: label for streamline {index} but the tractogram has {}",
                    tractogram.len()
                ))
            })?;
            if slot.replace(label).is_some() {
                return Err(PipelineError::InvalidDataset(format!(
                    "{name}: streamline {index} is labeled twice"
                )));
            }
        }
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    PipelineError::InvalidDataset(format!("{name}: streamline {i} has no label"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        subjects.push(Subject {
            name,
            tractogram,
            labels,
        });
    }
    Ok(subjects)
}

/// Writes each subject as `<name>.txt` plus the shared label table.
pub fn save_dataset(dir: &Path, subjects: &[Subject]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for s in subjects {
        tract_io::save(&dir.join(format!("{}.txt", s.name)), &s.tractogram)?;
        rows.extend(s.labels.iter().enumerate().map(|(index, &label)| LabelRow {
            subject: s.name.clone(),
            index,
            label,
            score: None,
        }));
    }
    write_labels(&dir.join(LABELS_FILE), &rows)
}

/// Streamlines that pass the length filter, with their labels and mean FA.
pub fn labeled_streamlines(
    subjects: &[Subject],
    min_length_mm: f64,
    fa_channel: &str,
) -> Result<Vec<LabeledStreamline>> {
    let mut out = Vec::new();
    for s in subjects {
        for (st, &label) in s.tractogram.streamlines.iter().zip(&s.labels) {
            if !arc_length(&st.points).is_ok_and(|l| l >= min_length_mm) {
                continue;
            }
            out.push(LabeledStreamline {
                mean_fa: mean_fa(&s.tractogram, st, fa_channel)?,
                streamline: st.clone(),
                label,
            });
        }
    }
    Ok(out)
}

/// Un-augmented fixed-length samples, one per streamline, in input order.
pub fn resampled_samples(streamlines: &[LabeledStreamline], points: usize) -> Result<Vec<FeatureSample>> {
    streamlines
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(FeatureSample {
                coords: resample_uniform(&s.streamline.points, points)?,
                mean_fa: s.mean_fa,
                label: s.label,
                source_index: i,
            })
        })
        .collect()
}

/// Splits whole subjects into train/validation/test groups. Group sizes
/// follow `fractions` by largest remainder; which subjects land where is a
/// seeded shuffle.
pub fn split_dataset<S: Clone>(
    subjects: &[S],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let n = subjects.len();
    if n < 3 {
        return Err(PipelineError::TooFewSubjects(n));
    }
    let total: f64 = fractions.iter().sum();
    if !(total > 0.0) || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(PipelineError::InvalidConfig(format!(
            "split fractions must be non-negative with a positive sum, got {fractions:?}"
        )));
    }
    let exact = fractions.map(|f| f / total * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0usize, 1, 2];
    // stable sort keeps train before validation before test on equal remainders
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(n - assigned) {
        counts[k] += 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| {
        let mut chosen: Vec<usize> = idx[range].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| subjects[i].clone()).collect::<Vec<_>>()
    };
    let (a, b) = (counts[0], counts[0] + counts[1]);
    Ok((pick(0..a), pick(a..b), pick(b..n)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesHeader {
    format: String,
    points: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    label: usize,
    mean_fa: f64,
    source: usize,
    coords: Vec<[f64; 3]>,
}

const SAMPLES_FORMAT: &str = "tractscl-samples";

/// Writes fixed-length samples as JSON lines: a header, then one sample per line.
pub fn write_samples(path: &Path, samples: &[FeatureSample]) -> Result<()> {
    let points = samples.first().map_or(0, |s| s.coords.len());
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = SamplesHeader {
        format: SAMPLES_FORMAT.to_string(),
        points,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    writeln!(w)?;
    for s in samples {
        let rec = SampleRecord {
            label: s.label.id(),
            mean_fa: s.mean_fa,
            source: s.source_index,
            coords: s.coords.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<FeatureSample>> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let err = |line: usize, message: String| PipelineError::SamplesFile { line, message };
    let first = lines.next().ok_or_else(|| err(1, "empty file".into()))??;
    let header: SamplesHeader = serde_json::from_str(&first).map_err(|e| err(1, e.to_string()))?;
    if header.format != SAMPLES_FORMAT {
        return Err(err(1, format!("format is {:?}", header.format)));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let lineno = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| err(lineno, e.to_string()))?;
        let label = Class::from_id(rec.label)
            .ok_or_else(|| err(lineno, format!("label must be 0 or 1, got {}", rec.label)))?;
        if rec.coords.len() != header.points {
            return Err(err(
                lineno,
                format!("{} points, header says {}", rec.coords.len(), header.points),
            ));
        }
        out.push(FeatureSample {
            coords: rec.coords,
            mean_fa: rec.mean_fa,
            label,
            source_index: rec.source,
        });
    }
    Ok(out)
}

/// Matches predictions to ground truth by (subject, index). Every prediction
/// needs a truth row; truth rows without a prediction (for example streamlines
/// removed by the length filter) are ignored.
pub fn join_labels(pred: &[LabelRow], truth: &[LabelRow]) -> Result<(Vec<Class>, Vec<Class>)> {
    let lookup: HashMap<(&str, usize), Class> = truth
        .iter()
        .map(|r| ((r.subject.as_str(), r.index), r.label))
        .collect();
    let mut p = Vec::with_capacity(pred.len());
    let mut t = Vec::with_capacity(pred.len());
    for r in pred {
        let label = lookup.get(&(r.subject.as_str(), r.index)).ok_or_else(|| {
            PipelineError::InvalidDataset(format!(
                "no ground truth for subject {} streamline {}",
                r.subject, r.index
            ))
        })?;
        p.push(r.label);
        t.push(*label);
    }
    Ok((p, t))
}

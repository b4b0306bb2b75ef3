//! Append-only training log and its CSV encodings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricsSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub l_hs: f64,
    pub l_ls: f64,
    pub l_n: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub selected: Vec<String>,
    /// The selected subset was empty, so `l_ls` is 0 by convention.
    pub ls_empty: bool,
}

/// Mean foreground Dice against the clean labels of LQ training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub noisy: f64,
    pub pseudo: f64,
    pub refined: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub heldout: MetricsSummary,
    pub label_quality: Option<LabelQuality>,
}

/// Per-sample score of one selection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub sample_id: String,
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub selections: Vec<SelectionRecord>,
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

impl RunLog {
    /// `step,lambda,l_hs,l_ls,l_n,l_c,l_total,selected`; ids joined by `;`.
    /// Floats use the shortest round-trip representation.
    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        w.write_record(["step", "lambda", "l_hs", "l_ls", "l_n", "l_c", "l_total", "selected"])?;
        for r in &self.steps {
            w.write_record([
                r.step.to_string(),
                r.lambda.to_string(),
                r.l_hs.to_string(),
                r.l_ls.to_string(),
                r.l_n.to_string(),
                r.l_c.to_string(),
                r.l_total.to_string(),
                r.selected.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_evals_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        w.write_record([
            "step",
            "dice",
            "jaccard",
            "hd95",
            "asd",
            "noisy_label_dice",
            "pseudo_label_dice",
            "refined_label_dice",
        ])?;
        for e in &self.evals {
            let q = e.label_quality;
            w.write_record([
                e.step.to_string(),
                e.heldout.dice.to_string(),
                e.heldout.jaccard.to_string(),
                opt(e.heldout.hd95),
                opt(e.heldout.asd),
                opt(q.map(|q| q.noisy)),
                opt(q.map(|q| q.pseudo)),
                opt(q.map(|q| q.refined)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `epoch,sample_id,score,selected`
    pub fn write_selection_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        w.write_record(["epoch", "sample_id", "score", "selected"])?;
        for s in &self.selections {
            w.write_record([
                s.epoch.to_string(),
                s.sample_id.clone(),
                s.score.to_string(),
                (s.selected as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `runlog.csv` back into step records.
pub fn read_steps_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| crate::error::Error::Format(format!("bad number `{}`", &row[i])))
        };
        let selected: Vec<String> = if row[7].is_empty() {
            Vec::new()
        } else {
            row[7].split(';').map(String::from).collect()
        };
        out.push(StepRecord {
            step: num(0)? as usize,
            lambda: num(1)?,
            l_hs: num(2)?,
            l_ls: num(3)?,
            l_n: num(4)?,
            l_c: num(5)?,
            l_total: num(6)?,
            ls_empty: selected.is_empty(),
            selected,
        });
    }
    Ok(out)
}

/// Reads `evals.csv` back into eval records.
pub fn read_evals_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let opt = |i: usize| -> Result<Option<f64>> {
            match &row[i] {
                "NA" => Ok(None),
                v => v
                    .parse()
                    .map(Some)
                    .map_err(|_| crate::error::Error::Format(format!("bad number `{v}`"))),
            }
        };
        let req = |i: usize| -> Result<f64> {
            opt(i)?.ok_or_else(|| crate::error::Error::Format(format!("missing value in column {i}")))
        };
        let label_quality = match (opt(5)?, opt(6)?, opt(7)?) {
            (Some(noisy), Some(pseudo), Some(refined)) => Some(LabelQuality {
                noisy,
                pseudo,
                refined,
                samples: 0,
            }),
            _ => None,
        };
        out.push(EvalRecord {
            step: req(0)? as usize,
            heldout: MetricsSummary {
                dice: req(1)?,
                jaccard: req(2)?,
                hd95: opt(3)?,
                asd: opt(4)?,
                n: 0,
            },
            label_quality,
        });
    }
    Ok(out)
}

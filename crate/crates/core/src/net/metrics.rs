use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged row of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    #[serde(with = "lossless_f64")]
    pub train_loss: f64,
    #[serde(with = "lossless_f64")]
    pub val_ppl: f64,
    #[serde(with = "lossless_f64")]
    pub lr: f64,
    #[serde(with = "lossless_f64")]
    pub grad_norm: f64,
    #[serde(with = "lossless_f64")]
    pub state_norm: f64,
    /// Set on rows logged at a restart or an abort; JSON lines only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    train_loss: f64,
    val_ppl: f64,
    lr: f64,
    grad_norm: f64,
    state_norm: f64,
}

pub const CSV_HEADER: &str = "step,train_loss,val_ppl,lr,grad_norm,state_norm";

pub fn write_csv<W: Write>(out: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(CsvRow {
            step: r.step,
            train_loss: r.train_loss,
            val_ppl: r.val_ppl,
            lr: r.lr,
            grad_norm: r.grad_norm,
            state_norm: r.state_norm,
        })
        .map_err(csv_err)?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Event tags are not part of the CSV, so parsed rows carry `event: None`.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!(
            "unexpected metrics header {:?}",
            header.join(",")
        )));
    }
    rd.deserialize::<CsvRow>()
        .map(|row| {
            let r = row.map_err(csv_err)?;
            Ok(MetricRecord {
                step: r.step,
                train_loss: r.train_loss,
                val_ppl: r.val_ppl,
                lr: r.lr,
                grad_norm: r.grad_norm,
                state_norm: r.state_norm,
                event: None,
            })
        })
        .collect()
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("metrics csv: {e}"))
}

/// JSON numbers for finite values, strings for NaN and infinities.
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricRecord> {
        vec![
            MetricRecord {
                step: 0,
                train_loss: 4.1588830833596715,
                val_ppl: 64.00000000000001,
                lr: 0.0,
                grad_norm: 0.1 + 0.2,
                state_norm: 0.0,
                event: None,
            },
            MetricRecord {
                step: 200,
                train_loss: f64::NAN,
                val_ppl: f64::INFINITY,
                lr: 1e-300,
                grad_norm: 5e-324,
                state_norm: 1.0 / 3.0,
                event: Some("restart".into()),
            },
        ]
    }

    fn same(a: &MetricRecord, b: &MetricRecord) -> bool {
        let eq = |x: f64, y: f64| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan());
        a.step == b.step
            && eq(a.train_loss, b.train_loss)
            && eq(a.val_ppl, b.val_ppl)
            && eq(a.lr, b.lr)
            && eq(a.grad_norm, b.grad_norm)
            && eq(a.state_norm, b.state_norm)
    }

    #[test]
    fn csv_round_trip_and_header() {
        let recs = sample();
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let back = read_csv(buf.as_slice()).unwrap();
        assert!(recs.iter().zip(&back).all(|(a, b)| same(a, b)));
    }

    #[test]
    fn jsonl_round_trip_with_events() {
        let recs = sample();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert!(recs.iter().zip(&back).all(|(a, b)| same(a, b)));
        assert_eq!(back[1].event.as_deref(), Some("restart"));
        assert_eq!(back[0].event, None);
    }

    #[test]
    fn empty_csv_keeps_header() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), CSV_HEADER);
    }
}

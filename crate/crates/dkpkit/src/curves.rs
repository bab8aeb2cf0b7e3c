//! Training curves as CSV, one row per [`CurvePoint`].
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a written
//! file gives back the same values bit for bit. An empty `valid_ppl` field
//! means no validation ran at that point.

use std::io::{Read, Write};

use dkpkit_core::report::{bcd_phase_label, parse_bcd_phase, CurvePoint};

pub const HEADER: [&str; 7] = ["epoch", "step", "train_ppl", "valid_ppl", "sparsity", "keep_prob", "bcd_phase"];

#[derive(Debug, thiserror::Error)]
pub enum CurveError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
}

pub fn write_curves<W: Write>(out: W, points: &[CurvePoint]) -> Result<(), CurveError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(HEADER)?;
    for p in points {
        w.write_record([
            p.epoch.to_string(),
            p.step.to_string(),
            p.train_ppl.to_string(),
            p.valid_ppl.map(|v| v.to_string()).unwrap_or_default(),
            p.sparsity.to_string(),
            p.keep_prob.to_string(),
            bcd_phase_label(p.bcd_phase).to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_curves<R: Read>(input: R) -> Result<Vec<CurvePoint>, CurveError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(CurveError::Parse {
            row: 0,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |field: &str| CurveError::Parse {
            row,
            msg: format!("bad {field}"),
        };
        let f = |k: usize| rec.get(k).unwrap_or("");
        points.push(CurvePoint {
            epoch: f(0).parse().map_err(|_| bad("epoch"))?,
            step: f(1).parse().map_err(|_| bad("step"))?,
            train_ppl: f(2).parse().map_err(|_| bad("train_ppl"))?,
            valid_ppl: match f(3) {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("valid_ppl"))?),
            },
            sparsity: f(4).parse().map_err(|_| bad("sparsity"))?,
            keep_prob: f(5).parse().map_err(|_| bad("keep_prob"))?,
            bcd_phase: parse_bcd_phase(f(6)).ok_or_else(|| bad("bcd_phase"))?,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dkpkit_core::BcdPhase;

    #[test]
    fn round_trip_is_exact() {
        let points = vec![
            CurvePoint {
                epoch: 0,
                step: 50,
                train_ppl: 12.345678901234567,
                valid_ppl: None,
                sparsity: 0.1 + 0.2,
                keep_prob: 0.5,
                bcd_phase: Some(BcdPhase::TrainSpOnly),
            },
            CurvePoint {
                epoch: 1,
                step: 100,
                train_ppl: 1e-300,
                valid_ppl: Some(f64::MAX),
                sparsity: 0.99,
                keep_prob: 1.0,
                bcd_phase: None,
            },
        ];
        let mut buf = Vec::new();
        write_curves(&mut buf, &points).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,step,train_ppl,valid_ppl,sparsity,keep_prob,bcd_phase\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_curves(buf.as_slice()).unwrap(), points);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(read_curves("a,b\n1,2\n".as_bytes()).is_err());
    }
}

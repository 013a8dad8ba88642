//! Plain-text gradient dump used for fixtures and for replaying externally
//! produced gradients.
//!
//! ```text
//! m B layer_count
//! <name> <size>        (layer_count lines)
//! <m reals>            (B lines)
//! ```
//!
//! Reals are written with 17 significant digits so a dump round-trips
//! bit-exactly. Several dumps may be concatenated in one file.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad::{GradientVector, Layout, SampleBatchGradients};

pub fn write_dump(batch: &SampleBatchGradients) -> String {
    let layout = batch.layout();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {}",
        layout.len(),
        batch.len(),
        layout.layers().len()
    );
    for spec in layout.layers() {
        let _ = writeln!(out, "{} {}", spec.name, spec.size);
    }
    for row in batch.rows() {
        let mut first = true;
        for x in row.values() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{x:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Parses every dump block in `text`.
pub fn parse_dumps(text: &str) -> Result<Vec<SampleBatchGradients>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut batches = Vec::new();
    while let Some((line, header)) = lines.next() {
        let fields = parse_fields::<usize>(header, line)?;
        let [m, b, layer_count] = fields[..] else {
            return Err(parse_err(line, "header must be `m B layer_count`"));
        };
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let (line, text) = lines
                .next()
                .ok_or_else(|| parse_err(line, "missing layer line"))?;
            let mut parts = text.split_whitespace();
            let (Some(name), Some(size), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(line, "layer line must be `name size`"));
            };
            let size = size
                .parse::<usize>()
                .map_err(|e| parse_err(line, &format!("bad layer size: {e}")))?;
            layers.push((name.to_string(), size));
        }
        let layout = Arc::new(Layout::new(layers).map_err(|e| parse_err(line, &e.to_string()))?);
        if layout.len() != m {
            return Err(parse_err(line, "layer sizes do not sum to m"));
        }
        let mut rows = Vec::with_capacity(b);
        for _ in 0..b {
            let (line, text) = lines
                .next()
                .ok_or_else(|| parse_err(line, "missing gradient row"))?;
            let values = parse_fields::<f64>(text, line)?;
            if values.len() != m {
                return Err(parse_err(
                    line,
                    &format!("expected {m} values, found {}", values.len()),
                ));
            }
            rows.push(
                GradientVector::new(values, layout.clone())
                    .map_err(|e| parse_err(line, &e.to_string()))?,
            );
        }
        batches.push(SampleBatchGradients::new(rows).map_err(|e| parse_err(line, &e.to_string()))?);
    }
    Ok(batches)
}

/// Parses a text holding exactly one dump.
pub fn parse_dump(text: &str) -> Result<SampleBatchGradients> {
    let mut all = parse_dumps(text)?;
    match all.len() {
        1 => Ok(all.pop().expect("length checked")),
        n => Err(parse_err(1, &format!("expected one dump, found {n}"))),
    }
}

fn parse_fields<T: std::str::FromStr>(text: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split_whitespace()
        .map(|f| {
            f.parse::<T>()
                .map_err(|e| parse_err(line, &format!("{f:?}: {e}")))
        })
        .collect()
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_handwritten_dump() {
        let text = "3 2 2\nw 2\nb 1\n1 2 3\n-0.5 0 1e-3\n";
        let batch = parse_dump(text).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.layout().layers()[1].name, "b");
        assert_eq!(batch.rows()[1].values(), &[-0.5, 0.0, 1e-3]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_dump("3 1 1\nw 2\n1 2\n").is_err());
        assert!(parse_dump("2 1 1\nw 2\n1 x\n").is_err());
        assert!(parse_dump("2 2 1\nw 2\n1 2\n").is_err());
        assert!(parse_dump("2 1\n").is_err());
    }

    #[test]
    fn concatenated_dumps() {
        let text = "1 1 1\na 1\n5\n2 1 1\nb 2\n1 2\n";
        let all = parse_dumps(text).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].dim(), 2);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 6), 1..5)) {
            let layout = Arc::new(Layout::new([("w", 4), ("b", 2)]).unwrap());
            let batch = SampleBatchGradients::new(
                rows.into_iter().map(|r| GradientVector::new(r, layout.clone()).unwrap()).collect()
            ).unwrap();
            let back = parse_dump(&write_dump(&batch)).unwrap();
            for (a, b) in batch.rows().iter().zip(back.rows()) {
                let xa: Vec<u64> = a.values().iter().map(|x| x.to_bits()).collect();
                let xb: Vec<u64> = b.values().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(xa, xb);
            }
            prop_assert_eq!(batch.layout(), back.layout());
        }
    }
}

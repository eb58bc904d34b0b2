//! Versioned plain-text checkpoints.
//!
//! ```text
//! mmlf-ckpt v1 H=3
//! evidence_head_3d.weight 3 3
//! 25 0 0
//! ...
//! ```
//!
//! Each block header `<name> <rows> <cols>` is followed by `rows` lines of
//! `cols` decimal floats. Floats are written in shortest round-trip form so a
//! save/load cycle is lossless.

use super::linear::Linear;
use super::{ModelParams, NetError};
use std::fmt::Write;

pub const MAGIC: &str = "mmlf-ckpt";
pub const VERSION: &str = "v1";

fn blocks(params: &ModelParams) -> Vec<(String, &Linear)> {
    let mut out = vec![
        ("evidence_head_3d".to_string(), &params.head3d.linear),
        ("evidence_head_2d".to_string(), &params.head2d.linear),
    ];
    for (name, layer) in params.score.layers() {
        out.push((name.to_string(), layer));
    }
    out
}

pub fn save_checkpoint(params: &ModelParams) -> String {
    let mut out = format!("{MAGIC} {VERSION} H={}\n", params.num_classes());
    for (name, layer) in blocks(params) {
        let _ = writeln!(out, "{name}.weight {} {}", layer.outputs(), layer.inputs());
        for row in layer.weight.chunks_exact(layer.inputs()) {
            push_row(&mut out, row);
        }
        let _ = writeln!(out, "{name}.bias {} 1", layer.outputs());
        for v in &layer.bias {
            push_row(&mut out, std::slice::from_ref(v));
        }
    }
    out
}

fn push_row(out: &mut String, row: &[f64]) {
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn err(line: usize, message: impl Into<String>) -> NetError {
    NetError::Checkpoint {
        line,
        message: message.into(),
    }
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), NetError> {
        loop {
            match self.lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => return Ok((i + 1, l.trim())),
                None => return Err(err(0, "unexpected end of checkpoint")),
            }
        }
    }

    fn block(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>, NetError> {
        let (ln, header) = self.next()?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let expected = [name.to_string(), rows.to_string(), cols.to_string()];
        if fields.len() != 3 || fields.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(err(
                ln,
                format!("expected block header `{name} {rows} {cols}`, found `{header}`"),
            ));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, line) = self.next()?;
            let row: Vec<&str> = line.split_whitespace().collect();
            if row.len() != cols {
                return Err(err(
                    ln,
                    format!("expected {cols} values, found {}", row.len()),
                ));
            }
            for tok in row {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(ln, format!("invalid number `{tok}`")))?;
                if !v.is_finite() {
                    return Err(err(ln, format!("non-finite value `{tok}`")));
                }
                values.push(v);
            }
        }
        Ok(values)
    }
}

pub fn load_checkpoint(text: &str) -> Result<ModelParams, NetError> {
    let mut reader = Reader {
        lines: text.lines().enumerate(),
    };
    let (ln, header) = reader.next()?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != MAGIC || fields[1] != VERSION {
        return Err(err(
            ln,
            format!("expected `{MAGIC} {VERSION} H=<H>` header"),
        ));
    }
    let num_classes: usize = fields[2]
        .strip_prefix("H=")
        .and_then(|h| h.parse().ok())
        .filter(|&h| (2..=1024).contains(&h))
        .ok_or_else(|| err(ln, format!("invalid class count `{}`", fields[2])))?;
    let mut params = ModelParams::zeros(num_classes);
    let names: Vec<String> = blocks(&params).into_iter().map(|(n, _)| n).collect();
    let mut layers: Vec<&mut Linear> = vec![&mut params.head3d.linear, &mut params.head2d.linear];
    layers.extend(params.score.layers_mut().into_iter().map(|(_, l)| l));
    for (name, layer) in names.iter().zip(layers) {
        let (rows, cols) = (layer.outputs(), layer.inputs());
        layer.weight = reader.block(&format!("{name}.weight"), rows, cols)?;
        layer.bias = reader.block(&format!("{name}.bias"), rows, 1)?;
    }
    if let Ok((ln, extra)) = reader.next() {
        return Err(err(ln, format!("trailing content `{extra}`")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_net::init_params;

    #[test]
    fn lossless_roundtrip() {
        let params = init_params(42, 3, 25.0);
        let text = save_checkpoint(&params);
        assert!(text.starts_with("mmlf-ckpt v1 H=3\n"));
        let back = load_checkpoint(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(save_checkpoint(&back), text);
    }

    #[test]
    fn shape_errors_are_reported() {
        let text = save_checkpoint(&init_params(1, 3, 25.0));
        let broken = text.replacen("score.layer2.weight 36 18", "score.layer2.weight 36 17", 1);
        match load_checkpoint(&broken) {
            Err(NetError::Checkpoint { line, .. }) => assert!(line > 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_checkpoint("mmlf-ckpt v2 H=3\n").is_err());
        assert!(load_checkpoint("").is_err());
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(load_checkpoint(&truncated).is_err());
        assert!(load_checkpoint(&format!("{text}junk\n")).is_err());
    }
}

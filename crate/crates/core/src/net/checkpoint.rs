//! Plain-text checkpoints: a `layer_dims` header line, then for each layer
//! its weight rows followed by one bias row, all at 17 significant digits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::datagen::fmt_f64;
use crate::error::{parse_err, Result};
use crate::matrix::Matrix;

use super::{Classifier, Layer};

pub fn write_model<W: Write>(model: &Classifier, w: &mut W) -> Result<()> {
    let dims: Vec<String> = model.layer_dims().iter().map(usize::to_string).collect();
    writeln!(w, "{}", dims.join(","))?;
    for layer in model.layers() {
        for row in layer.weights.iter_rows() {
            write_row(w, row)?;
        }
        write_row(w, &layer.bias)?;
    }
    Ok(())
}

fn write_row<W: Write>(w: &mut W, row: &[f64]) -> Result<()> {
    let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
    writeln!(w, "{}", cells.join(","))?;
    Ok(())
}

pub fn save_model(model: &Classifier, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: BufRead>(reader: R) -> Result<Classifier> {
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let header = lines.first().ok_or_else(|| parse_err(1, "missing layer_dims header"))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| parse_err(1, format!("malformed layer dim {s:?}"))))
        .collect::<Result<_>>()?;
    if dims.len() < 2 {
        return Err(parse_err(1, "layer_dims needs at least two entries"));
    }
    let mut cursor = 1;
    let mut next_row = |width: usize| -> Result<Vec<f64>> {
        let line_no = cursor + 1;
        let line = lines
            .get(cursor)
            .ok_or_else(|| parse_err(line_no, "unexpected end of checkpoint"))?;
        cursor += 1;
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse().map_err(|_| parse_err(line_no, format!("malformed value {s:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != width {
            return Err(parse_err(line_no, format!("expected {width} values, found {}", row.len())));
        }
        Ok(row)
    };
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut data = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_out {
            data.extend(next_row(fan_in)?);
        }
        let bias = next_row(fan_out)?;
        layers.push(Layer {
            weights: Matrix::from_vec(fan_out, fan_in, data)?,
            bias,
        });
    }
    Classifier::from_layers(layers)
}

pub fn load_model(path: &Path) -> Result<Classifier> {
    read_model(BufReader::new(fs::File::open(path)?))
}

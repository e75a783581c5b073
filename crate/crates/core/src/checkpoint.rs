//! Plain-text checkpoint container for an encoder and an optional negative bank.
//!
//! ```text
//! adco-checkpoint 1
//! encoder <L+1> <d_0> <d_1> … <d_L>
//! weight <l> <rows> <cols>
//! <one line per row, space-separated>
//! bias <l> <len>
//! <one line>
//! …                               (weight/bias pair for every layer)
//! bank <K> <d>                    (optional)
//! <one line per row>
//! end
//! ```
//!
//! Numbers are written in shortest round-trip exponent form, so save → load
//! is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::MlpEncoder;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &str = "adco-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: MlpEncoder,
    pub bank: Option<Matrix>,
}

fn write_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

fn write_matrix(out: &mut String, m: &Matrix) {
    for row in m.row_iter() {
        write_row(out, row);
    }
    if m.cols() == 0 {
        for _ in 0..m.rows() {
            out.push('\n');
        }
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let dims = self.encoder.dims();
        let _ = write!(out, "encoder {}", dims.len());
        for d in dims {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for (l, (w, b)) in self.encoder.weights().iter().zip(self.encoder.biases()).enumerate() {
            let _ = writeln!(out, "weight {l} {} {}", w.rows(), w.cols());
            write_matrix(&mut out, w);
            let _ = writeln!(out, "bias {l} {}", b.len());
            write_row(&mut out, b);
        }
        if let Some(bank) = &self.bank {
            let _ = writeln!(out, "bank {} {}", bank.rows(), bank.cols());
            write_matrix(&mut out, bank);
        }
        out.push_str("end\n");
        out
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut p = Parser {
            lines: text.lines().enumerate(),
            path,
            line: 0,
        };
        let magic = p.next_line()?;
        if magic.trim() != MAGIC {
            return Err(p.error(format!("expected `{MAGIC}` header")));
        }
        let header = p.header("encoder")?;
        let count = *header.first().ok_or_else(|| p.error("missing layer count".into()))?;
        let dims = &header[1..];
        if dims.len() != count || count < 2 {
            return Err(p.error(format!("expected {count} widths (at least 2), found {}", dims.len())));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let wh = p.header("weight")?;
            if wh != [l, pair[0], pair[1]] {
                return Err(p.error(format!("weight header {wh:?} does not match layer {l}")));
            }
            weights.push(p.matrix(pair[0], pair[1])?);
            let bh = p.header("bias")?;
            if bh != [l, pair[1]] {
                return Err(p.error(format!("bias header {bh:?} does not match layer {l}")));
            }
            biases.push(p.matrix(1, pair[1])?.into_vec());
        }
        let encoder = MlpEncoder::from_parts(weights, biases)?;
        let next = p.next_line()?;
        let bank = if next.starts_with("bank") {
            let fields = parse_usizes(&next["bank".len()..]).map_err(|m| p.error(m))?;
            let [k, d] = fields[..] else {
                return Err(p.error("bank header needs K and d".into()));
            };
            let m = p.matrix(k, d)?;
            let end = p.next_line()?;
            if end.trim() != "end" {
                return Err(p.error("expected `end`".into()));
            }
            Some(m)
        } else if next.trim() == "end" {
            None
        } else {
            return Err(p.error(format!("unexpected line `{next}`")));
        };
        Ok(Self { encoder, bank })
    }
}

fn parse_usizes(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format!("`{t}` is not a count")))
        .collect()
}

struct Parser<'a, I> {
    lines: I,
    path: &'a Path,
    line: u64,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Parser<'a, I> {
    fn error(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i as u64 + 1;
                Ok(l)
            }
            None => Err(self.error("unexpected end of checkpoint".into())),
        }
    }

    fn header(&mut self, tag: &str) -> Result<Vec<usize>> {
        let line = self.next_line()?;
        let rest = line
            .strip_prefix(tag)
            .ok_or_else(|| self.error(format!("expected `{tag}` section")))?;
        parse_usizes(rest).map_err(|m| self.error(m))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next_line()?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.error(format!("`{tok}` is not a number")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(self.error(format!("expected {cols} values, found {}", data.len() - before)));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }
}

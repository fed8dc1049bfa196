use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Word vectors parsed from a `token v1 … ve` text file.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    parse_embedding_text(&std::fs::read_to_string(path)?)
}

pub fn parse_embedding_text(text: &str) -> Result<EmbeddingFile> {
    let mut out = EmbeddingFile::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad float `{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("token `{token}` has no vector"),
            });
        }
        if out.dim == 0 {
            out.dim = values.len();
        } else if values.len() != out.dim {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} values, found {}", out.dim, values.len()),
            });
        }
        out.vectors.insert(token.to_string(), values);
    }
    Ok(out)
}

impl EmbeddingFile {
    /// Copies the vector of every token in `vocab` that the file knows into
    /// the matching row of `table`. Returns the number of rows replaced.
    pub fn apply<T: Scalar>(&self, table: &mut Tensor<T>, vocab: &[String]) -> Result<usize> {
        let width = table.last_dim();
        if width != self.dim || table.shape()[0] < vocab.len() {
            return Err(Error::dim(
                "embedding file",
                table.shape(),
                &[vocab.len(), self.dim],
            ));
        }
        let mut hits = 0;
        for (row, token) in vocab.iter().enumerate() {
            if let Some(v) = self.vectors.get(token) {
                for (dst, &x) in table.data_mut()[row * width..(row + 1) * width].iter_mut().zip(v) {
                    *dst = T::lit(x);
                }
                hits += 1;
            }
        }
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_match_parsed_text() {
        let text = "red 0.5 -1.25 3\nblue 1e-3 2 0\n";
        let f = parse_embedding_text(text).unwrap();
        assert_eq!(f.dim, 3);
        let mut table = Tensor::<f64>::zeros(&[3, 3]);
        let vocab = vec!["<pad>".to_string(), "blue".to_string(), "red".to_string()];
        assert_eq!(f.apply(&mut table, &vocab).unwrap(), 2);
        assert_eq!(table.data(), &[0.0, 0.0, 0.0, 1e-3, 2.0, 0.0, 0.5, -1.25, 3.0]);
    }

    #[test]
    fn ragged_line_reports_line_number() {
        let err = parse_embedding_text("a 1 2\nb 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_embedding_text("a 1 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}

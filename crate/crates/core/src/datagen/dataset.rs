use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::schema::{Covariate, FieldKind, FieldSchema};
use crate::error::{Error, Result};
use crate::rng;

/// Covariates and responses. Rows are stored field-encoded (level index or
/// real value) and expanded to one-hot form on demand, so every categorical
/// block of an expanded row has exactly one active column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: FieldSchema,
    covariates: Vec<Covariate>,
    response: Vec<f64>,
}

impl Dataset {
    pub fn new(
        schema: FieldSchema,
        covariates: Vec<Covariate>,
        response: Vec<f64>,
    ) -> Result<Self> {
        let n = response.len();
        if n == 0 {
            return Err(Error::Schema("dataset must have at least one row".into()));
        }
        if covariates.len() != n * schema.len() {
            return Err(Error::Schema(format!(
                "expected {} covariate values for {n} rows, got {}",
                n * schema.len(),
                covariates.len()
            )));
        }
        for (i, row) in covariates.chunks(schema.len()).enumerate() {
            schema
                .check_row(row)
                .map_err(|e| Error::Schema(format!("row {i}: {e}")))?;
        }
        if let Some(i) = response.iter().position(|y| !y.is_finite()) {
            return Err(Error::Schema(format!("response of row {i} is not finite")));
        }
        Ok(Dataset {
            schema,
            covariates,
            response,
        })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    /// One-hot width.
    pub fn p(&self) -> usize {
        self.schema.width()
    }

    pub fn row(&self, i: usize) -> &[Covariate] {
        let k = self.schema.len();
        &self.covariates[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[Covariate]> {
        self.covariates.chunks(self.schema.len())
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn one_hot_row(&self, i: usize) -> Vec<f64> {
        self.schema.one_hot(self.row(i))
    }

    /// Dense n × p one-hot matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let p = self.p();
        let mut out = vec![0.0; self.n() * p];
        for (i, row) in self.rows().enumerate() {
            for (c, v) in self.schema.active(row) {
                out[i * p + c] = v;
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let k = self.schema.len();
        let mut cov = Vec::with_capacity(indices.len() * k);
        let mut resp = Vec::with_capacity(indices.len());
        for &i in indices {
            cov.extend_from_slice(self.row(i));
            resp.push(self.response[i]);
        }
        Dataset {
            schema: self.schema.clone(),
            covariates: cov,
            response: resp,
        }
    }

    /// Random split into (train, test) with `train_fraction` of the rows in
    /// the training part.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::domain(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let n = self.n();
        let n_train = ((n as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::domain(format!(
                "cannot split {n} rows at {train_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::seeded(seed));
        Ok((self.subset(&idx[..n_train]), self.subset(&idx[n_train..])))
    }

    /// Content hash over schema, covariates and responses.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.schema).unwrap_or_default());
        for v in &self.covariates {
            match v {
                Covariate::Level(l) => {
                    h.update([0u8]);
                    h.update(l.to_le_bytes());
                }
                Covariate::Value(x) => {
                    h.update([1u8]);
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
        for y in &self.response {
            h.update(y.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Writes the dataset in the ingest dialect: header row of field names
    /// plus the response column, categorical cells as level names.
    pub fn write_csv<W: Write>(&self, out: W, delimiter: u8, response_column: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(out);
        let mut header: Vec<&str> = self
            .schema
            .fields()
            .iter()
            .map(|f| f.name.as_str())
            .collect();
        header.push(response_column);
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for (row, y) in self.rows().zip(&self.response) {
            rec.clear();
            for (f, v) in self.schema.fields().iter().zip(row) {
                rec.push(match (&f.kind, v) {
                    (FieldKind::Categorical { levels }, Covariate::Level(l)) => {
                        levels[*l as usize].clone()
                    }
                    (_, Covariate::Value(x)) => format!("{x}"),
                    (_, Covariate::Level(l)) => format!("{l}"),
                });
            }
            rec.push(format!("{y}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, delimiter: u8, response_column: &str) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), delimiter, response_column)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::schema::Field;

    fn toy() -> Dataset {
        let s =
            FieldSchema::new(vec![Field::categorical_n("c", 2), Field::continuous("x")]).unwrap();
        let cov = vec![
            Covariate::Level(0),
            Covariate::Value(1.5),
            Covariate::Level(1),
            Covariate::Value(-2.0),
            Covariate::Level(1),
            Covariate::Value(0.0),
        ];
        Dataset::new(s, cov, vec![1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn dense_rows_are_one_hot() {
        let d = toy();
        assert_eq!(d.p(), 3);
        assert_eq!(
            d.to_dense(),
            vec![1.0, 0.0, 1.5, 0.0, 1.0, -2.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn rejects_out_of_range_level_and_nan() {
        let s = FieldSchema::new(vec![Field::categorical_n("c", 2)]).unwrap();
        assert!(Dataset::new(s.clone(), vec![Covariate::Level(2)], vec![1.0]).is_err());
        assert!(Dataset::new(s.clone(), vec![Covariate::Level(1)], vec![f64::NAN]).is_err());
        assert!(Dataset::new(s, vec![], vec![]).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let d = toy();
        let (a, b) = d.split(0.67, 3).unwrap();
        assert_eq!(a.n() + b.n(), 3);
        let mut ys: Vec<f64> = a.response().iter().chain(b.response()).copied().collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hash_changes_with_content() {
        let d = toy();
        let e = d.subset(&[0, 1]);
        assert_ne!(d.content_hash(), e.content_hash());
        assert_eq!(d.content_hash(), toy().content_hash());
    }
}

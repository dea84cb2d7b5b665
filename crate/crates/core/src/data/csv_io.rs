use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CovariateTable, EligibilityRule, PooledSample};
use crate::error::{Error, Result};

/// Column-role map for a pooled cohort CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub id: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub eligibility: Vec<EligibilityRule>,
}

impl Schema {
    fn validate(&self) -> Result<()> {
        let roles = [&self.id, &self.treatment, &self.outcome];
        let mut seen = HashSet::new();
        for name in roles.into_iter().chain(&self.covariates) {
            if name.trim().is_empty() {
                return Err(Error::Validation("schema contains an empty column name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("column `{name}` assigned to two roles")));
            }
        }
        if self.covariates.is_empty() {
            return Err(Error::Validation("schema lists no covariates".into()));
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

pub fn load_pooled(path: impl AsRef<Path>, schema: &Schema) -> Result<PooledSample> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    read_pooled(file, schema)
}

/// Parses a pooled cohort. Rows are numbered from 1 (first data row) in errors.
pub fn read_pooled<R: Read>(reader: R, schema: &Schema) -> Result<PooledSample> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers =
        rdr.headers().map_err(|e| Error::Parse { row: 0, column: "<header>".into(), message: e.to_string() })?.clone();
    let locate = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Validation(format!("column `{name}` not found in header")))
    };
    let id_col = locate(&schema.id)?;
    let a_col = locate(&schema.treatment)?;
    let y_col = locate(&schema.outcome)?;
    let x_cols = schema.covariates.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut treated = Vec::new();
    let mut outcome = Vec::new();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); x_cols.len()];

    for (k, record) in rdr.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| Error::Parse { row, column: "<record>".into(), message: e.to_string() })?;
        let cell = |j: usize| record.get(j).unwrap_or("");
        let number = |j: usize, name: &str| -> Result<Option<f64>> {
            let raw = cell(j);
            if is_missing(raw) {
                return Ok(None);
            }
            raw.trim().parse::<f64>().map(Some).map_err(|_| Error::Parse {
                row,
                column: name.to_string(),
                message: format!("`{raw}` is not a number"),
            })
        };

        let id = cell(id_col).trim();
        if id.is_empty() {
            return Err(Error::Validation(format!("row {row}: empty subject id")));
        }
        ids.push(id.to_string());

        match number(a_col, &schema.treatment)? {
            Some(a) if a == 1.0 => treated.push(true),
            Some(a) if a == 0.0 => treated.push(false),
            Some(a) => return Err(Error::Validation(format!("row {row}: treatment value {a} outside {{0,1}}"))),
            None => return Err(Error::Validation(format!("row {row}: treatment is missing"))),
        }
        match number(y_col, &schema.outcome)? {
            Some(y) => outcome.push(y),
            None => return Err(Error::Validation(format!("row {row}: outcome is missing"))),
        }
        for (c, (&j, name)) in x_cols.iter().zip(&schema.covariates).enumerate() {
            columns[c].push(number(j, name)?);
        }
    }

    let table = CovariateTable::new(schema.covariates.iter().cloned().zip(columns).collect())?;
    PooledSample::new(table, treated, outcome, ids)
}

/// Writes a sample in the layout `read_pooled` accepts. Missing cells become `NA`.
pub fn write_pooled<W: Write>(sample: &PooledSample, schema: &Schema, writer: W) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io { path: "<writer>".into(), source: std::io::Error::other(e.to_string()) };
    let mut w = csv::Writer::from_writer(writer);
    let x = sample.covariates();
    let mut header = vec![schema.id.clone(), schema.treatment.clone(), schema.outcome.clone()];
    header.extend(x.names().iter().cloned());
    w.write_record(&header).map_err(to_io)?;
    for i in 0..sample.n() {
        let mut rec = vec![
            sample.subject_ids()[i].clone(),
            if sample.treated()[i] { "1".into() } else { "0".into() },
            format!("{}", sample.outcome()[i]),
        ];
        for j in 0..x.n_cols() {
            rec.push(match x.get(i, j) {
                Some(v) => format!("{v}"),
                None => "NA".into(),
            });
        }
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            id: "id".into(),
            treatment: "A".into(),
            outcome: "Y".into(),
            covariates: vec!["age".into(), "bmi".into()],
            eligibility: vec![],
        }
    }

    #[test]
    fn loads_minimal_file() {
        let csv = "id,A,Y,age,bmi\ns1,1,3.0,40,22\ns2,1,2.5,50,NA\ns3,0,1.0,45,\ns4,0,1.5,60,30\n";
        let s = read_pooled(csv.as_bytes(), &schema()).unwrap();
        assert_eq!((s.n1(), s.n0()), (2, 2));
        let bmi = s.covariates().index_of("bmi").unwrap();
        assert!(s.covariates().is_missing(1, bmi));
        assert!(s.covariates().is_missing(2, bmi));
        assert_eq!(s.covariates().get(3, bmi), Some(30.0));
        assert_eq!(s.subject_ids()[2], "s3");
    }

    #[test]
    fn treatment_out_of_domain_names_row() {
        let csv = "id,A,Y,age,bmi\ns1,1,3,40,22\ns2,1,2,50,21\ns3,2,1,45,20\ns4,0,1,60,30\n";
        let err = read_pooled(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("row 3")), "{err}");
    }

    #[test]
    fn malformed_number_reports_row_and_column() {
        let csv = "id,A,Y,age,bmi\ns1,1,3,40,22\ns2,1,2,abc,21\ns3,0,1,45,20\ns4,0,1,60,30\n";
        match read_pooled(csv.as_bytes(), &schema()).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "age");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let csv = "id,A,Y,age,bmi\ns1,1,3,40,22\ns1,1,2,50,21\ns3,0,1,45,20\ns4,0,1,60,30\n";
        assert!(matches!(read_pooled(csv.as_bytes(), &schema()), Err(Error::Validation(_))));
    }

    #[test]
    fn forty_percent_missing_loads() {
        let mut csv = String::from("id,A,Y,age,bmi\n");
        for i in 0..10 {
            let bmi = if i % 5 < 2 { "NA".to_string() } else { format!("{}", 20 + i) };
            csv.push_str(&format!("s{i},{},{},{},{bmi}\n", i % 2, i, 30 + i));
        }
        let s = read_pooled(csv.as_bytes(), &schema()).unwrap();
        let bmi = s.covariates().index_of("bmi").unwrap();
        let missing = (0..s.n()).filter(|&i| s.covariates().is_missing(i, bmi)).count();
        assert_eq!(missing, 4);
    }
}

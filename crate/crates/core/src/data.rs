//! Aligned input/output records and their CSV form.

use std::fs::File;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::stats::Dataset;

/// Input and output samples of one experiment, row `k` of each belonging to
/// the same time step.
#[derive(Debug, Clone, PartialEq)]
pub struct IoDataset {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub sample_time: f64,
}

impl IoDataset {
    pub fn new(
        inputs: Vec<DVector<f64>>,
        outputs: Vec<DVector<f64>>,
        input_names: Vec<String>,
        output_names: Vec<String>,
        sample_time: f64,
    ) -> Result<Self> {
        check_dim("dataset output rows", inputs.len(), outputs.len())?;
        for u in &inputs {
            check_dim("dataset input width", input_names.len(), u.len())?;
        }
        for y in &outputs {
            check_dim("dataset output width", output_names.len(), y.len())?;
        }
        if !(sample_time > 0.0) {
            return Err(Error::InvalidInput(format!("sample time must be positive, got {sample_time}")));
        }
        Ok(Self {
            inputs,
            outputs,
            input_names,
            output_names,
            sample_time,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_size(&self) -> usize {
        self.input_names.len()
    }

    pub fn output_size(&self) -> usize {
        self.output_names.len()
    }

    /// The input rows as a stand-alone dataset (what benchmarks are fit on).
    pub fn input_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), self.input_names.clone(), self.sample_time)
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            inputs: self.inputs[range.clone()].to_vec(),
            outputs: self.outputs[range].to_vec(),
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            sample_time: self.sample_time,
        }
    }

    /// Writes a header row of channel names followed by one row per step.
    /// The sample time goes into a leading `# sample_time=` comment line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        use std::io::Write;
        writeln!(file, "# sample_time={}", self.sample_time).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let header: Vec<&str> = self
            .input_names
            .iter()
            .chain(&self.output_names)
            .map(String::as_str)
            .collect();
        w.write_record(&header).map_err(|e| Error::format(path, e))?;
        for (u, y) in self.inputs.iter().zip(&self.outputs) {
            let row: Vec<String> = u.iter().chain(y.iter()).map(|v| v.to_string()).collect();
            w.write_record(&row).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`write_csv`](Self::write_csv). Input
    /// channels are the leading columns named `T0_s`, `q_tes` or `P<j>_c`;
    /// every later column is an output.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sample_time = None;
        let mut body = String::with_capacity(text.len());
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("sample_time=") {
                    sample_time = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::format(path, format!("bad sample_time: {e}")))?,
                    );
                }
                continue;
            }
            body.push_str(line);
            body.push('\n');
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let header: Vec<String> = r
            .headers()
            .map_err(|e| Error::format(path, e))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let n_u = header.iter().take_while(|h| is_input_channel(h)).count();
        if n_u == 0 || n_u == header.len() {
            return Err(Error::format(path, "header must list input channels, then output channels"));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e))?;
            if rec.len() != header.len() {
                return Err(Error::format(path, format!("row {} has {} fields", line + 1, rec.len())));
            }
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
            check_finite("dataset row", &vals)?;
            inputs.push(DVector::from_column_slice(&vals[..n_u]));
            outputs.push(DVector::from_column_slice(&vals[n_u..]));
        }
        Self::new(
            inputs,
            outputs,
            header[..n_u].to_vec(),
            header[n_u..].to_vec(),
            sample_time.unwrap_or(300.0),
        )
    }
}

fn is_input_channel(name: &str) -> bool {
    name == "T0_s"
        || name == "q_tes"
        || (name.starts_with('P')
            && name.ends_with("_c")
            && name[1..name.len() - 2].chars().all(|c| c.is_ascii_digit())
            && name.len() > 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = IoDataset::new(
            vec![DVector::from_vec(vec![70.1, -2.5, 1.0 / 3.0]); 3],
            vec![DVector::from_vec(vec![55.0, 0.1 + 0.2]); 3],
            vec!["T0_s".into(), "q_tes".into(), "P1_c".into()],
            vec!["T0_r".into(), "q0".into()],
            300.0,
        )
        .unwrap();
        data.write_csv(&path).unwrap();
        assert_eq!(IoDataset::read_csv(&path).unwrap(), data);
    }

    #[test]
    fn input_channel_names() {
        assert!(is_input_channel("P12_c"));
        assert!(!is_input_channel("P_c"));
        assert!(!is_input_channel("T0_r"));
        assert!(!is_input_channel("q1_c"));
    }
}

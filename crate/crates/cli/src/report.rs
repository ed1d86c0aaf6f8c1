//! Run reports: a config echo, scalar results, and inequality checks,
//! serialized to JSON (and the scalar table additionally to CSV).

use serde::Serialize;

use gcalc::decomp::InequalityReport;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize)]
pub struct ScalarRow {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub command: String,
    /// Configuration echo with every default filled in.
    pub config: ExperimentConfig,
    pub scalars: Vec<ScalarRow>,
    pub checks: Vec<InequalityReport>,
    /// Wall-clock duration; excluded from reproducibility comparisons.
    pub timing_ms: u64,
}

impl RunReport {
    pub fn new(command: &str, config: ExperimentConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            scalars: Vec::new(),
            checks: Vec::new(),
            timing_ms: 0,
        }
    }

    pub fn push_scalar(
        &mut self,
        name: impl Into<String>,
        value: f64,
        std_error: Option<f64>,
        detail: impl Into<String>,
    ) {
        self.scalars.push(ScalarRow {
            name: name.into(),
            value,
            std_error,
            detail: detail.into(),
        });
    }

    /// 0 when every check holds, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.checks.iter().all(|c| c.holds) {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn scalars_csv(&self) -> String {
        let mut out = String::from("name,value,std_error,detail\n");
        for row in &self.scalars {
            let se = row.std_error.map_or(String::new(), |s| format!("{s}"));
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.name,
                row.value,
                se,
                row.detail.replace(',', ";")
            ));
        }
        out
    }
}

//! Result tables and their CSV serialization (RFC-4180-style, header row,
//! '.' decimal separator).

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub case: String,
    /// PSR in dB, or "clean".
    pub psr_db: String,
    pub snr_db: f64,
    pub model_id: String,
    pub accuracy: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn push(&mut self, row: MetricRow) {
        debug_assert!((0.0..=1.0).contains(&row.accuracy));
        debug_assert!(row.sample_count > 0);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,psr_db,snr_db,model_id,accuracy,sample_count\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.case, r.psr_db, r.snr_db, r.model_id, r.accuracy, r.sample_count
            ));
        }
        out
    }

    /// Accuracy of one (model, psr) cell, if present.
    pub fn accuracy_of(&self, model_id: &str, psr_db: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.psr_db == psr_db)
            .map(|r| r.accuracy)
    }
}

/// One verification row: a model (or the ensemble) at one region radius.
#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub model_id: String,
    pub rho: f64,
    pub norm: String,
    pub robustness: f64,
    pub mc_violations: usize,
    pub distortion: Vec<f64>,
}

pub fn verify_csv(rows: &[VerifyRow], classes: usize) -> String {
    let mut out = String::from("model_id,rho,p,r,mc_violations");
    for c in 0..classes {
        out.push_str(&format!(",b_{c}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{},{:.9},{}",
            r.model_id, r.rho, r.norm, r.robustness, r.mc_violations
        ));
        for b in &r.distortion {
            out.push_str(&format!(",{b:.9}"));
        }
        out.push('\n');
    }
    out
}

/// Eye-diagram table: mean detector output per budget.
#[derive(Debug, Clone)]
pub struct EyeTable {
    pub eps: Vec<f64>,
    /// `mean_pd[i][level]` for budget `eps[i]`.
    pub mean_pd: Vec<Vec<f64>>,
}

impl EyeTable {
    pub fn to_csv(&self) -> String {
        let levels = self.mean_pd.first().map_or(0, |r| r.len());
        let mut out = String::from("eps");
        for l in 0..levels {
            out.push_str(&format!(",pd_{l}"));
        }
        out.push('\n');
        for (e, row) in self.eps.iter().zip(&self.mean_pd) {
            out.push_str(&format!("{e:.9}"));
            for v in row {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_csv_shape() {
        let mut t = MetricTable::default();
        t.push(MetricRow {
            case: "general".into(),
            psr_db: "clean".into(),
            snr_db: 20.0,
            model_id: "g0".into(),
            accuracy: 0.9375,
            sample_count: 400,
        });
        let csv = t.to_csv();
        assert!(csv.starts_with("case,psr_db,snr_db,model_id,accuracy,sample_count\n"));
        assert!(csv.contains("general,clean,20,g0,0.937500,400"));
        assert_eq!(t.accuracy_of("g0", "clean"), Some(0.9375));
    }

    #[test]
    fn eye_csv_row_per_budget() {
        let table = EyeTable {
            eps: vec![0.0, 0.5],
            mean_pd: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        };
        let csv = table.to_csv();
        assert!(csv.starts_with("eps,pd_0,pd_1\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}

//! Selection heat maps: row-normalize a selection CSV and render it as text.
//!
//! The CSV is the canonical product (`layer,expert_0,...`, fractions with
//! six decimals); the text rendering uses ten shading levels and needs no
//! graphics dependency.

use molex_core::error::{Error, Result};

const SHADES: [char; 10] = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub experts: usize,
    /// (layer index, normalized fractions)
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Parse a selection CSV and row-normalize it. Rows already summing to one
/// within 1e-6 pass through unchanged, so feeding a heat map its own output
/// reproduces it byte for byte.
pub fn normalize_csv(text: &str) -> Result<HeatMap> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"layer") || cols.len() < 2 {
        return Err(Error::Input(format!("bad CSV header {header:?}")));
    }
    for (j, col) in cols[1..].iter().enumerate() {
        if *col != format!("expert_{j}") {
            return Err(Error::Input(format!("bad CSV header column {col:?}")));
        }
    }
    let experts = cols.len() - 1;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != experts + 1 {
            return Err(Error::Input(format!(
                "CSV row {}: expected {} fields, got {}",
                i + 2,
                experts + 1,
                fields.len()
            )));
        }
        let layer: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("CSV row {}: bad layer index", i + 2)))?;
        let mut values = Vec::with_capacity(experts);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("CSV row {}: bad value {f:?}", i + 2)))?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Input(format!("CSV row {}: negative or non-finite", i + 2)));
            }
            values.push(v);
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Input(format!("CSV row {}: all-zero row", i + 2)));
        }
        if (sum - 1.0).abs() > 1e-6 {
            for v in values.iter_mut() {
                *v /= sum;
            }
        }
        rows.push((layer, values));
    }
    if rows.is_empty() {
        return Err(Error::Input("CSV has no data rows".into()));
    }
    Ok(HeatMap { experts, rows })
}

pub fn to_csv(map: &HeatMap) -> String {
    let mut out = String::from("layer");
    for j in 0..map.experts {
        out.push_str(&format!(",expert_{j}"));
    }
    out.push('\n');
    for (layer, values) in &map.rows {
        out.push_str(&layer.to_string());
        for v in values {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Ten-level text rendering; rows are sequential layers, columns experts.
pub fn render_text(map: &HeatMap) -> String {
    let mut out = String::new();
    out.push_str("        ");
    for j in 0..map.experts {
        out.push_str(&format!("{:>3}", j % 100));
    }
    out.push('\n');
    for (layer, values) in &map.rows {
        out.push_str(&format!("layer {layer:>2}"));
        for &v in values {
            let idx = ((v * 10.0) as usize).min(9);
            out.push_str(&format!("  {}", SHADES[idx]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_unnormalized_rows() {
        let csv = "layer,expert_0,expert_1\n0,2,2\n1,1,3\n";
        let map = normalize_csv(csv).unwrap();
        assert_eq!(map.rows[0].1, vec![0.5, 0.5]);
        assert_eq!(map.rows[1].1, vec![0.25, 0.75]);
        for (_, row) in &map.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn own_output_round_trips_byte_for_byte() {
        let csv = "layer,expert_0,expert_1,expert_2\n0,0.333333,0.333333,0.333333\n1,1.000000,0.000000,0.000000\n";
        let once = to_csv(&normalize_csv(csv).unwrap());
        let twice = to_csv(&normalize_csv(&once).unwrap());
        assert_eq!(once, twice);
        assert_eq!(once, csv); // already normalized input passes through
    }

    #[test]
    fn single_decision_rows_have_one_hot() {
        let csv = "layer,expert_0,expert_1\n0,0.000000,1.000000\n";
        let map = normalize_csv(csv).unwrap();
        assert_eq!(map.rows[0].1.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(normalize_csv("").is_err());
        assert!(normalize_csv("wrong,expert_0\n0,1\n").is_err());
        assert!(normalize_csv("layer,expert_0\n0\n").is_err());
        assert!(normalize_csv("layer,expert_0,expert_1\n0,0,0\n").is_err());
        assert!(normalize_csv("layer,expert_0,expert_1\n0,a,b\n").is_err());
    }

    #[test]
    fn renders_shades() {
        let csv = "layer,expert_0,expert_1\n0,1.000000,0.000000\n";
        let text = render_text(&normalize_csv(csv).unwrap());
        assert!(text.contains('@'));
        assert!(text.contains("layer  0"));
    }
}

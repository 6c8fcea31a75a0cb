//! Parameter and multiply-accumulate accounting, standard vs ALF.
//!
//! For a `K×K×Ci×Co` convolution replaced by `C_code` code filters and a
//! point-wise expansion:
//!
//! ```text
//! params_standard = K²·Ci·Co             params_alf = K²·Ci·C_code + C_code·Co
//! ops_standard    = Ho·Wo·params_std     ops_alf    = Ho·Wo·params_alf
//! gain            = K²·Ci·Co / (C_code·(K²·Ci + Co))
//! C_code,max      = ⌊K²·Ci·Co / (K²·Ci + Co)⌋
//! ```
//!
//! Everything is exact integer/rational arithmetic: the floor in
//! `C_code,max` sits exactly on the break-even point, so float rounding
//! could misclassify a layer. One MAC counts as one OP; biases and
//! activations are excluded on both sides.

use std::io::Write;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{AlfError, Result};

pub type Gain = Ratio<u64>;

/// Largest code width at which the ALF layer is not more expensive than the
/// standard convolution. Zero means no code width pays off.
pub fn code_max(ci: u64, co: u64, k: u64) -> u64 {
    let k2 = k * k;
    (ci * co * k2) / (ci * k2 + co)
}

/// `K²·Ci·Co / (C_code·(K²·Ci + Co))`; above one iff the ALF layer is cheaper.
pub fn gain_ratio(ci: u64, co: u64, k: u64, code: u64) -> Result<Gain> {
    if code == 0 || ci == 0 || co == 0 || k == 0 {
        return Err(AlfError::Geometry(format!(
            "gain ratio needs positive Ci, Co, K and C_code (got {ci}, {co}, {k}, {code})"
        )));
    }
    let k2 = k * k;
    Ok(Ratio::new(ci * co * k2, code * (ci * k2 + co)))
}

pub fn gain_to_f64(g: &Gain) -> f64 {
    *g.numer() as f64 / *g.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Factorized layer.
    Alf,
    /// Plain convolution, reported at full width.
    Conv,
}

/// Shape of one convolution as seen by the cost model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub id: String,
    pub kind: LayerKind,
    pub ci: u64,
    pub co: u64,
    pub k: u64,
    pub ho: u64,
    pub wo: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub id: String,
    pub kind: LayerKind,
    pub ci: u64,
    pub co: u64,
    pub k: u64,
    pub ho: u64,
    pub wo: u64,
    pub c_code_eff: u64,
    pub c_code_max: u64,
    pub params_standard: u64,
    pub params_alf: u64,
    pub ops_standard: u64,
    pub ops_alf: u64,
    pub gain_params: Gain,
    pub gain_ops: Gain,
}

impl CostEntry {
    /// Strictly cheaper than the standard convolution.
    pub fn economical(&self) -> bool {
        self.gain_params > Gain::from_integer(1)
    }
}

/// Costs of one layer at effective code width `c_code_eff`. `Conv` layers
/// are not factorized: their ALF columns repeat the standard cost and
/// `c_code_eff` must equal `Co`.
pub fn layer_cost(desc: &LayerDesc, c_code_eff: u64) -> Result<CostEntry> {
    let LayerDesc { ci, co, k, ho, wo, .. } = *desc;
    if ci == 0 || co == 0 || k == 0 || ho == 0 || wo == 0 {
        return Err(AlfError::Geometry(format!(
            "layer {} has a zero extent (Ci={ci}, Co={co}, K={k}, Ho={ho}, Wo={wo})",
            desc.id
        )));
    }
    if c_code_eff == 0 || c_code_eff > co {
        return Err(AlfError::Geometry(format!(
            "layer {}: effective code width {c_code_eff} outside 1..={co}",
            desc.id
        )));
    }
    let k2 = k * k;
    let params_standard = k2 * ci * co;
    let ops_standard = ho * wo * params_standard;
    let (params_alf, ops_alf, gain) = match desc.kind {
        LayerKind::Alf => {
            let p = k2 * ci * c_code_eff + c_code_eff * co;
            (p, ho * wo * p, gain_ratio(ci, co, k, c_code_eff)?)
        }
        LayerKind::Conv => {
            if c_code_eff != co {
                return Err(AlfError::Geometry(format!(
                    "plain conv layer {} reported with code width {c_code_eff} != Co {co}",
                    desc.id
                )));
            }
            (params_standard, ops_standard, Gain::from_integer(1))
        }
    };
    Ok(CostEntry {
        id: desc.id.clone(),
        kind: desc.kind,
        ci,
        co,
        k,
        ho,
        wo,
        c_code_eff,
        c_code_max: code_max(ci, co, k),
        params_standard,
        params_alf,
        ops_standard,
        ops_alf,
        gain_params: gain,
        gain_ops: Ratio::new(ops_standard, ops_alf),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostTotals {
    pub params_standard: u64,
    pub params_alf: u64,
    pub ops_standard: u64,
    pub ops_alf: u64,
}

impl CostTotals {
    pub fn gain_params(&self) -> Option<Gain> {
        (self.params_alf > 0).then(|| Ratio::new(self.params_standard, self.params_alf))
    }

    pub fn gain_ops(&self) -> Option<Gain> {
        (self.ops_alf > 0).then(|| Ratio::new(self.ops_standard, self.ops_alf))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "layer",
    "kind",
    "ci",
    "co",
    "k",
    "ho",
    "wo",
    "c_code_eff",
    "c_code_max",
    "params_standard",
    "params_alf",
    "ops_standard",
    "ops_alf",
    "gain_params",
    "gain_ops",
    "economical",
];

fn fmt_gain(g: Option<Gain>) -> String {
    g.map(|g| format!("{:.6}", gain_to_f64(&g))).unwrap_or_default()
}

impl CostReport {
    pub fn new(entries: Vec<CostEntry>) -> Self {
        Self { entries }
    }

    pub fn totals(&self) -> CostTotals {
        self.entries.iter().fold(CostTotals::default(), |t, e| CostTotals {
            params_standard: t.params_standard + e.params_standard,
            params_alf: t.params_alf + e.params_alf,
            ops_standard: t.ops_standard + e.ops_standard,
            ops_alf: t.ops_alf + e.ops_alf,
        })
    }

    /// One row per layer in [`CSV_COLUMNS`] order, then a `total` row.
    /// Gains are printed to six decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for e in &self.entries {
            let kind = match e.kind {
                LayerKind::Alf => "alf",
                LayerKind::Conv => "conv",
            };
            w.write_record([
                e.id.clone(),
                kind.to_string(),
                e.ci.to_string(),
                e.co.to_string(),
                e.k.to_string(),
                e.ho.to_string(),
                e.wo.to_string(),
                e.c_code_eff.to_string(),
                e.c_code_max.to_string(),
                e.params_standard.to_string(),
                e.params_alf.to_string(),
                e.ops_standard.to_string(),
                e.ops_alf.to_string(),
                fmt_gain(Some(e.gain_params)),
                fmt_gain(Some(e.gain_ops)),
                e.economical().to_string(),
            ])?;
        }
        let t = self.totals();
        let economical = t.gain_params().map(|g| (g > Gain::from_integer(1)).to_string()).unwrap_or_default();
        let blank = String::new;
        w.write_record([
            "total".to_string(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            t.params_standard.to_string(),
            t.params_alf.to_string(),
            t.ops_standard.to_string(),
            t.ops_alf.to_string(),
            fmt_gain(t.gain_params()),
            fmt_gain(t.gain_ops()),
            economical,
        ])?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(ci: u64, co: u64, k: u64, hw: u64, kind: LayerKind) -> LayerDesc {
        LayerDesc {
            id: "l".into(),
            kind,
            ci,
            co,
            k,
            ho: hw,
            wo: hw,
        }
    }

    #[test]
    fn code_max_examples() {
        assert_eq!(code_max(64, 128, 3), 104);
        assert_eq!(code_max(1, 2, 1), 0);
        assert_eq!(code_max(8, 8, 1), 4);
    }

    #[test]
    fn gain_examples() {
        let g = gain_ratio(64, 128, 3, 52).unwrap();
        assert_eq!(g, Ratio::new(73728, 36608));
        assert!((gain_to_f64(&g) - 2.013986).abs() < 1e-6);
        assert!(gain_ratio(64, 128, 3, 104).unwrap() >= Gain::from_integer(1));
        assert!(gain_ratio(64, 128, 3, 105).unwrap() < Gain::from_integer(1));
        assert_eq!(gain_ratio(8, 8, 1, 4).unwrap(), Gain::from_integer(1));
        assert!(gain_ratio(8, 8, 1, 0).is_err());
    }

    #[test]
    fn layer_cost_example() {
        let e = layer_cost(&desc(64, 128, 3, 16, LayerKind::Alf), 52).unwrap();
        assert_eq!(e.params_standard, 73728);
        assert_eq!(e.params_alf, 36608);
        assert_eq!(e.ops_standard, 73728 * 256);
        assert_eq!(e.ops_alf, 36608 * 256);
        assert_eq!(e.gain_params, e.gain_ops);
        assert!(e.economical());
    }

    #[test]
    fn one_past_code_max_is_uneconomical() {
        let e = layer_cost(&desc(64, 128, 3, 16, LayerKind::Alf), 105).unwrap();
        assert!(e.gain_params < Gain::from_integer(1));
        assert!(!e.economical());
    }

    #[test]
    fn symmetric_case_breaks_even() {
        let e = layer_cost(&desc(8, 8, 1, 4, LayerKind::Alf), 4).unwrap();
        assert_eq!(e.gain_params, Gain::from_integer(1));
        assert!(!e.economical());
    }

    #[test]
    fn plain_conv_rows_are_unfactorized() {
        let e = layer_cost(&desc(3, 16, 3, 8, LayerKind::Conv), 16).unwrap();
        assert_eq!(e.params_alf, e.params_standard);
        assert!(layer_cost(&desc(3, 16, 3, 8, LayerKind::Conv), 8).is_err());
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(layer_cost(&desc(3, 16, 3, 0, LayerKind::Alf), 4).is_err());
        assert!(layer_cost(&desc(3, 16, 3, 8, LayerKind::Alf), 17).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = CostReport::new(vec![layer_cost(&desc(64, 128, 3, 16, LayerKind::Alf), 52).unwrap()]);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(
            lines[1],
            "l,alf,64,128,3,16,16,52,104,73728,36608,18874368,9371648,2.013986,2.013986,true"
        );
        assert!(lines[2].starts_with("total,"));
        assert_eq!(lines.len(), 3);
    }
}

//! Flag grids over a base configuration.
//!
//! A grid is either a named preset or a custom spec of the form
//! `key=v1,v2;other.key=a,b`, expanded as a cartesian product. Keys are
//! dotted config paths; values are TOML literals, with bare words taken as
//! strings.

use std::collections::HashMap;
use std::path::Path;

use super::config::ExperimentConfig;
use super::metrics::MetricsRecord;
use super::run::{prepare, run_prepared, write_outputs, Prepared};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, toml::Value)>,
}

fn cell(name: &str, overrides: &[(&str, toml::Value)]) -> Cell {
    Cell { name: name.into(), overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect() }
}

pub const NAMED_GRIDS: &[&str] = &["forgetting", "losses", "aggregation", "heads", "pet", "gamma"];

pub fn named_grid(name: &str) -> Option<Vec<Cell>> {
    use toml::Value::{Boolean as B, Float as F, String as S};
    let s = |v: &str| S(v.into());
    Some(match name {
        "forgetting" => vec![
            cell("finetune_directly", &[("ablation.disable_cos", B(true)), ("ablation.disable_cross", B(true))]),
            cell("finetune_cross", &[("ablation.disable_cos", B(true))]),
            cell("full", &[]),
        ],
        "losses" => vec![
            cell("full", &[]),
            cell("no_diag", &[("ablation.disable_diag", B(true))]),
            cell("no_rdn", &[("ablation.disable_rdn", B(true))]),
            cell("no_slow_transfer", &[("ablation.disable_slow_transfer", B(true))]),
            cell("no_cos", &[("ablation.disable_cos", B(true))]),
            cell("no_cross", &[("ablation.disable_cross", B(true))]),
            cell("slow_only", &[("ablation.disable_fast", B(true))]),
        ],
        "aggregation" => ["entropy", "add", "max"].iter().map(|m| cell(m, &[("aggregation.mode", s(m))])).collect(),
        "heads" => {
            let mut v: Vec<Cell> = ["full", "ridge", "ncm"].iter().map(|m| cell(m, &[("head.mode", s(m))])).collect();
            v.push(cell("disabled", &[("ablation.disable_heads", B(true))]));
            v
        }
        "pet" => ["adapter", "ssf", "vpt", "none"].iter().map(|k| cell(k, &[("pet.kind", s(k))])).collect(),
        "gamma" => [0.0, 0.5, 1.0, 2.0, 5.0].iter().map(|g| cell(&format!("gamma_{g}"), &[("aggregation.gamma", F(*g))])).collect(),
        _ => return None,
    })
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(text.into()))
}

/// Parses a named grid or a custom `key=v1,v2;...` spec.
pub fn parse_grid(spec: &str) -> Result<Vec<Cell>> {
    if let Some(g) = named_grid(spec.trim()) {
        return Ok(g);
    }
    let mut axes: Vec<(String, Vec<(String, toml::Value)>)> = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part.split_once('=').ok_or_else(|| Error::Config(format!("grid axis `{part}` is not `key=v1,v2,...` and `{spec}` is not a named grid ({})", NAMED_GRIDS.join(", "))))?;
        let key = key.trim();
        let vals: Vec<(String, toml::Value)> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| (v.to_string(), parse_value(v))).collect();
        if key.is_empty() || vals.is_empty() {
            return Err(Error::Config(format!("grid axis `{part}` needs a key and at least one value")));
        }
        axes.push((key.to_string(), vals));
    }
    if axes.is_empty() {
        return Err(Error::Config("empty grid spec".into()));
    }
    let mut cells = vec![Cell { name: String::new(), overrides: vec![] }];
    for (key, vals) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |(raw, v)| {
                    let mut n = c.clone();
                    if !n.name.is_empty() {
                        n.name.push('_');
                    }
                    n.name.push_str(&format!("{key}={raw}"));
                    n.overrides.push((key.clone(), v.clone()));
                    n
                })
            })
            .collect();
    }
    Ok(cells)
}

/// Sets a dotted key inside a TOML table, creating intermediate tables.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}` does not name a table field")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply(base: &toml::Value, cell: &Cell) -> Result<ExperimentConfig> {
    let mut v = base.clone();
    for (k, val) in &cell.overrides {
        set_dotted(&mut v, k, val.clone())?;
    }
    ExperimentConfig::from_toml_value(v).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("grid cell `{}`: {m}", cell.name)),
        other => other,
    })
}

/// Directory-safe form of a cell name.
pub fn cell_dir(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Runs every cell, reusing the surrogate and stream across cells that
/// share them. With `out`, each cell's metrics and manifest go to
/// `out/<cell>/` and a summary CSV to `out/ablation.csv`.
pub fn run_grid(base_text: &str, cells: &[Cell], out: Option<&Path>) -> Result<Vec<(String, MetricsRecord)>> {
    let base: toml::Value = toml::from_str::<toml::Table>(base_text).map(toml::Value::Table).map_err(|e| Error::Config(e.to_string()))?;
    let configs: Vec<ExperimentConfig> = cells.iter().map(|c| apply(&base, c)).collect::<Result<_>>()?;
    let mut cache: HashMap<String, Prepared> = HashMap::new();
    let mut results = Vec::new();
    let mut summary = String::from("cell,track,acc_final,acc_avg\n");
    for (c, cfg) in cells.iter().zip(&configs) {
        let key = cfg.preparation_key();
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), prepare(cfg)?);
        }
        let output = run_prepared(cfg, &cache[&key])?;
        if let Some(dir) = out {
            write_outputs(&dir.join(cell_dir(&c.name)), cfg, &output, false)?;
        }
        for (track, t) in output.metrics.tracks() {
            summary.push_str(&format!("{},{track},{},{}\n", c.name, t.final_accuracy, t.average_accuracy));
        }
        results.push((c.name.clone(), output.metrics));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), summary)?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_grids_resolve_to_valid_configs() {
        let base = toml::Value::Table(toml::Table::new());
        for name in NAMED_GRIDS {
            for c in named_grid(name).unwrap() {
                apply(&base, &c).unwrap();
            }
        }
    }

    #[test]
    fn custom_spec_is_a_cartesian_product() {
        let cells = parse_grid("aggregation.gamma=0,1.5;pet.kind=ssf,vpt").unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].name, "aggregation.gamma=0_pet.kind=ssf");
        let base = toml::Value::Table(toml::Table::new());
        let cfg = apply(&base, &cells[3]).unwrap();
        assert_eq!(cfg.aggregation.gamma, 1.5);
        assert_eq!(cfg.pet.kind, crate::pet::PetKind::Vpt);
    }

    #[test]
    fn integer_values_for_float_fields_are_accepted() {
        let cells = parse_grid("aggregation.gamma=0").unwrap();
        let base = toml::Value::Table(toml::Table::new());
        assert_eq!(apply(&base, &cells[0]).unwrap().aggregation.gamma, 0.0);
    }

    #[test]
    fn bad_specs_are_config_errors() {
        for spec in ["", "nonsense", "a=", "=1"] {
            assert!(matches!(parse_grid(spec), Err(Error::Config(_))), "{spec}");
        }
        let base = toml::Value::Table(toml::Table::new());
        let cells = parse_grid("learner.bogus=1").unwrap();
        assert!(matches!(apply(&base, &cells[0]), Err(Error::Config(_))));
    }

    #[test]
    fn dir_names_are_sanitized() {
        assert_eq!(cell_dir("aggregation.gamma=0_pet.kind=ssf"), "aggregation.gamma_0_pet.kind_ssf");
    }
}

//! CSV reports and the small text formats used on the command line:
//! threshold vectors, policy maps and threshold-factor ranges.
//!
//! Frames are numbered from 1 in every report; frame 1 is the full update
//! that initialises the change-based state.

use std::path::Path;

use super::{content_lines, tokens};
use crate::analysis::{MemReport, OpReport};
use crate::calibration::{TraceRow, TradeoffCurve};
use crate::error::{Error, Result};
use crate::layers::DetectionPolicy;
use crate::network::RunStats;

pub const STATS_HEADER: [&str; 7] = [
    "frame",
    "layer",
    "changed_px",
    "change_frac",
    "eff_ops",
    "wall_ns",
    "loss",
];
pub const SWEEP_HEADER: [&str; 4] = ["factor", "loss", "total_eff_ops", "wall_ns"];
pub const TRACE_HEADER: [&str; 4] = ["layer", "tau", "loss", "increment"];
pub const MEM_HEADER: [&str; 3] = ["mode", "item", "values"];
pub const OP_HEADER: [&str; 5] = ["layer", "dense_ops", "cb_ops", "fg_sp_ops", "fg_fm_ops"];

fn to_csv<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing to memory cannot fail.
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of UTF-8 fields")
}

/// Per-frame, per-layer statistics.
pub fn stats_csv(stats: &RunStats) -> String {
    let rows = stats.frames.iter().enumerate().flat_map(|(f, frame)| {
        let loss = frame.loss.map(|l| l.to_string()).unwrap_or_default();
        frame.layers.iter().zip(&stats.layer_names).map(move |(l, name)| {
            [
                (f + 1).to_string(),
                name.clone(),
                l.changed_px.to_string(),
                l.change_fraction().to_string(),
                l.eff_ops.to_string(),
                l.wall_ns.to_string(),
                loss.clone(),
            ]
        })
    });
    to_csv(STATS_HEADER, rows)
}

pub fn sweep_csv(curve: &TradeoffCurve) -> String {
    to_csv(
        SWEEP_HEADER,
        curve.rows.iter().map(|r| {
            [
                r.factor.to_string(),
                r.loss.to_string(),
                r.total_eff_ops.to_string(),
                r.wall_ns.to_string(),
            ]
        }),
    )
}

/// Loss-versus-threshold trace; `names` maps convolution ordinals to layer
/// names.
pub fn trace_csv(trace: &[TraceRow], names: &[String]) -> String {
    to_csv(
        TRACE_HEADER,
        trace.iter().map(|r| {
            [
                names.get(r.layer).cloned().unwrap_or_else(|| r.layer.to_string()),
                r.tau.to_string(),
                r.loss.to_string(),
                r.increment.to_string(),
            ]
        }),
    )
}

pub fn mem_csv(report: &MemReport) -> String {
    let mode = report.mode.as_str();
    let items = [
        ("intermediates", report.intermediate_values),
        ("x_matrix", report.x_matrix_values),
        ("params", report.param_values),
        ("cb_state", report.cb_state_values),
        ("cb_scratch", report.cb_scratch_values),
        ("cb_extra", report.cb_extra_values()),
        ("total", report.total()),
    ];
    to_csv(
        MEM_HEADER,
        items
            .iter()
            .map(|(k, v)| [mode.to_string(), k.to_string(), v.to_string()]),
    )
}

pub fn op_csv(report: &OpReport) -> String {
    let total = report.total();
    to_csv(
        OP_HEADER,
        report.layers.iter().chain(std::iter::once(&total)).map(|r| {
            [
                r.name.clone(),
                r.dense_ops.to_string(),
                r.cb_ops.to_string(),
                r.fg_sp_ops.to_string(),
                r.fg_fm_ops.to_string(),
            ]
        }),
    )
}

/// One `name threshold` line per convolution layer.
pub fn render_thresholds(names: &[String], thresholds: &[f32]) -> String {
    let mut s = String::from("# layer threshold\n");
    for (n, t) in names.iter().zip(thresholds) {
        s.push_str(&format!("{n} {t}\n"));
    }
    s
}

fn parse_tau(file: &Path, off: usize, text: &str) -> Result<f32> {
    text.parse::<f32>()
        .ok()
        .filter(|t| t.is_finite() && *t >= 0.0)
        .ok_or_else(|| Error::parse(file, off, format!("expected a threshold >= 0, got '{text}'")))
}

/// Parses a threshold vector: either `name value` lines covering every
/// convolution layer once, or bare values in layer order. A single bare
/// value applies to every layer.
pub fn parse_thresholds(text: &str, file: &Path, conv_names: &[String]) -> Result<Vec<f32>> {
    let lines: Vec<Vec<(usize, &str)>> = content_lines(text).map(|(o, l)| tokens(o, l).collect()).collect();
    if let [line] = lines.as_slice() {
        if let [(vo, value)] = line.as_slice() {
            return Ok(vec![parse_tau(file, *vo, value)?; conv_names.len()]);
        }
    }
    let named = lines.first().is_some_and(|t| t.len() == 2);
    let mut out: Vec<Option<f32>> = vec![None; conv_names.len()];
    for (k, toks) in lines.iter().enumerate() {
        let (off, _) = toks[0];
        match (named, toks.as_slice()) {
            (true, [(no, name), (vo, value)]) => {
                let i = conv_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::parse(file, *no, format!("'{name}' is not a convolution layer")))?;
                if out[i].is_some() {
                    return Err(Error::parse(file, *no, format!("'{name}' given twice")));
                }
                out[i] = Some(parse_tau(file, *vo, value)?);
            }
            (false, [(vo, value)]) => {
                let slot = out
                    .get_mut(k)
                    .ok_or_else(|| Error::parse(file, off, format!("more than {} thresholds", conv_names.len())))?;
                *slot = Some(parse_tau(file, *vo, value)?);
            }
            _ => {
                return Err(Error::parse(
                    file,
                    off,
                    "expected 'name value' on every line or a bare value on every line",
                ))
            }
        }
    }
    out.iter()
        .zip(conv_names)
        .map(|(t, n)| t.ok_or_else(|| Error::parse(file, text.len(), format!("no threshold for '{n}'"))))
        .collect()
}

/// Parses `name=policy` entries separated by commas or whitespace; layers
/// not mentioned detect their own changes.
pub fn parse_policy_map(text: &str, file: &Path, conv_names: &[String]) -> Result<Vec<DetectionPolicy>> {
    let mut out = vec![DetectionPolicy::Detect; conv_names.len()];
    let mut seen = vec![false; conv_names.len()];
    for (lo, line) in content_lines(text) {
        for (to, tok) in tokens(lo, line) {
            let mut at = to;
            for entry in tok.split(',') {
                let here = at;
                at += entry.len() + 1;
                if entry.is_empty() {
                    continue;
                }
                let (name, policy) = entry
                    .split_once('=')
                    .ok_or_else(|| Error::parse(file, here, format!("expected name=policy, got '{entry}'")))?;
                let i = conv_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::parse(file, here, format!("'{name}' is not a convolution layer")))?;
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::parse(file, here, format!("'{name}' given twice")));
                }
                out[i] = policy
                    .parse()
                    .map_err(|_| Error::parse(file, here + name.len() + 1, format!("unknown policy '{policy}'")))?;
            }
        }
    }
    Ok(out)
}

/// Parses `start:end:step` (inclusive, `start + k·step`) or a comma list.
pub fn parse_factors(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::config(format!("'{s}' is not a number")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let values = match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step) = (num(start)?, num(end)?, num(step)?);
            if step <= 0.0 || end < start {
                return Err(Error::config(format!("bad factor range '{text}'")));
            }
            let n = ((end - start) / step + 1e-9).floor();
            if n > 10_000.0 {
                return Err(Error::config(format!("factor range '{text}' has too many steps")));
            }
            (0..=n as usize).map(|k| start + k as f64 * step).collect()
        }
        [_] => text.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::config(format!("bad factor range '{text}'"))),
    };
    if values.iter().any(|v| *v < 0.0) {
        return Err(Error::config("threshold factors must be >= 0"));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("threshold factors must be strictly increasing"));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::TradeoffRow;
    use crate::layers::LayerFrameStats;
    use crate::network::FrameRecord;

    fn names() -> Vec<String> {
        vec!["c1".into(), "c2".into()]
    }

    #[test]
    fn stats_header_and_rows() {
        let stats = RunStats {
            layer_names: vec!["c1".into()],
            frames: vec![FrameRecord {
                layers: vec![LayerFrameStats {
                    changed_px: 3,
                    output_px: 12,
                    eff_ops: 42,
                    ..Default::default()
                }],
                loss: Some(0.5),
                wall_ns: 0,
            }],
        };
        assert_eq!(
            stats_csv(&stats),
            "frame,layer,changed_px,change_frac,eff_ops,wall_ns,loss\n1,c1,3,0.25,42,0,0.5\n"
        );
    }

    #[test]
    fn sweep_header() {
        let curve = TradeoffCurve {
            rows: vec![TradeoffRow {
                factor: 0.25,
                loss: 0.0,
                total_eff_ops: 7,
                wall_ns: 0,
            }],
        };
        assert_eq!(sweep_csv(&curve), "factor,loss,total_eff_ops,wall_ns\n0.25,0,7,0\n");
    }

    #[test]
    fn thresholds_round_trip() {
        let t = vec![0.05, 1.25];
        let text = render_thresholds(&names(), &t);
        assert_eq!(parse_thresholds(&text, Path::new("t"), &names()).unwrap(), t);
        assert_eq!(
            parse_thresholds("0.1\n0.2\n", Path::new("t"), &names()).unwrap(),
            vec![0.1, 0.2]
        );
        assert_eq!(
            parse_thresholds("c2 1\nc1 2\n", Path::new("t"), &names()).unwrap(),
            vec![2.0, 1.0]
        );
        assert_eq!(
            parse_thresholds("0.3\n", Path::new("t"), &names()).unwrap(),
            vec![0.3, 0.3]
        );
        for bad in [
            "c1 0.1\n",
            "0.1\n0.2\n0.3\n",
            "c1 -1\nc2 0\n",
            "c3 1\nc2 1\n",
            "c1 1\n0.2\n",
        ] {
            assert!(
                matches!(
                    parse_thresholds(bad, Path::new("t"), &names()),
                    Err(Error::Parse { .. })
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn policy_maps() {
        let p = parse_policy_map("c2=reuse", Path::new("-"), &names()).unwrap();
        assert_eq!(p, vec![DetectionPolicy::Detect, DetectionPolicy::Reuse1x1]);
        let p = parse_policy_map("c1=propagate, c2=detect\n", Path::new("-"), &names()).unwrap();
        assert_eq!(p, vec![DetectionPolicy::Propagate, DetectionPolicy::Detect]);
        assert!(matches!(
            parse_policy_map("c1=detect,c3=reuse", Path::new("-"), &names()),
            Err(Error::Parse { offset: 10, .. })
        ));
        assert!(parse_policy_map("c1=fast", Path::new("-"), &names()).is_err());
        assert!(parse_policy_map("c1=detect c1=reuse", Path::new("-"), &names()).is_err());
    }

    #[test]
    fn factor_ranges() {
        let f = parse_factors("0:2:0.25").unwrap();
        assert_eq!(f.len(), 9);
        assert_eq!(f[4], 1.0);
        assert_eq!(f[8], 2.0);
        assert_eq!(parse_factors("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        for bad in ["0:2:0", "2:0:1", "1,0", "-1", "a", "0:1"] {
            assert!(parse_factors(bad).is_err(), "{bad}");
        }
    }
}

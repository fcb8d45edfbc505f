use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{caption_counts, mean_bleu, Decoded, GameRun, Method, Prepared};
use crate::agent::AgentId;
use crate::error::{Error, Result};
use crate::metrics::{category_metrics, per_category_f1, CategoryMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub agent: String,
    pub method: String,
    pub slice: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRow {
    pub method: String,
    pub agent: String,
    pub round: usize,
    pub joint_loglik: f64,
    /// Empty for the pre-game row.
    pub acceptance_rate: Option<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn write_likelihood<W: Write>(w: W, rows: &[LikelihoodRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(super) fn likelihood_rows(method: Method, run: &GameRun) -> Vec<LikelihoodRow> {
    let mut rows = Vec::with_capacity(2 * (run.reports.len() + 1));
    for id in [AgentId::A, AgentId::B] {
        let initial = match id {
            AgentId::A => run.initial.0,
            AgentId::B => run.initial.1,
        };
        rows.push(LikelihoodRow {
            method: method.name().into(),
            agent: id.to_string(),
            round: 0,
            joint_loglik: initial,
            acceptance_rate: None,
        });
        for r in &run.reports {
            rows.push(LikelihoodRow {
                method: method.name().into(),
                agent: id.to_string(),
                round: r.round,
                joint_loglik: r.joint_loglik(id),
                acceptance_rate: Some(r.acceptance_rate(id)),
            });
        }
    }
    rows
}

fn push_metrics(rows: &mut Vec<MetricRow>, d: &Decoded, slice: &str, m: &CategoryMetrics) {
    for (name, value) in CategoryMetrics::NAMES.iter().zip(m.values()) {
        rows.push(MetricRow {
            agent: d.agent.clone(),
            method: d.method.name().into(),
            slice: slice.into(),
            metric: (*name).into(),
            value,
        });
    }
}

/// Category metrics on the `overall`, `a-only` and `b-only` slices for every
/// decoded agent, `own` / `counterpart` for single agents, plus BLEU@4 and
/// the decode cost in logit evaluations per position.
pub(super) fn metric_rows(prepared: &Prepared, idx: &[usize], decoded: &[Decoded]) -> Result<Vec<MetricRow>> {
    let p = &prepared.subsets.split.partition;
    let mut rows = Vec::new();
    for d in decoded {
        let counts = caption_counts(prepared, idx, &d.captions);
        push_metrics(&mut rows, d, "overall", &category_metrics(&counts)?);
        push_metrics(&mut rows, d, "a-only", &category_metrics(&counts.restrict(&p.a_only))?);
        push_metrics(&mut rows, d, "b-only", &category_metrics(&counts.restrict(&p.b_only))?);
        let id = match d.agent.as_str() {
            "A" => Some(AgentId::A),
            "B" => Some(AgentId::B),
            _ => None,
        };
        if let Some(id) = id {
            let (own, other) = prepared.sides(id);
            push_metrics(&mut rows, d, "own", &category_metrics(&counts.restrict(&own))?);
            push_metrics(&mut rows, d, "counterpart", &category_metrics(&counts.restrict(&other))?);
        }
        for (metric, value) in [("BLEU4", mean_bleu(prepared, idx, &d.captions)?), ("decode_cost", d.cost.per_position())] {
            rows.push(MetricRow {
                agent: d.agent.clone(),
                method: d.method.name().into(),
                slice: "overall".into(),
                metric: metric.into(),
                value,
            });
        }
    }
    Ok(rows)
}

/// One row per decoded agent; columns are categories as `side:name`, the
/// common category first, then side a, then side b.
pub fn write_cf1_matrix<W: Write>(w: W, prepared: &Prepared, idx: &[usize], decoded: &[Decoded]) -> Result<()> {
    let p = &prepared.subsets.split.partition;
    let mut order = vec![(String::from("common"), p.common)];
    order.extend(p.a_only.iter().map(|&c| ("a".to_string(), c)));
    order.extend(p.b_only.iter().map(|&c| ("b".to_string(), c)));
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["method".to_string(), "agent".to_string()];
    header.extend(order.iter().map(|(side, c)| format!("{side}:{}", prepared.spec.categories[*c].name)));
    out.write_record(&header).map_err(csv_err)?;
    for d in decoded {
        let f1 = per_category_f1(&caption_counts(prepared, idx, &d.captions))?;
        let mut row = vec![d.method.name().to_string(), d.agent.clone()];
        row.extend(order.iter().map(|(_, c)| f1[*c].to_string()));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

use std::fmt::Write as _;

use super::{AdjacencyGraph, GeoError, MergeMap};

/// Symmetric edge list: one row per unordered pair, `id_a < id_b` by index.
pub fn write_edge_list_csv(graph: &AdjacencyGraph) -> String {
    let mut out = String::from("id_a,id_b,border_m\n");
    for (i, j, len) in graph.edges() {
        let _ = writeln!(out, "{},{},{:.3}", graph.ids()[i], graph.ids()[j], len);
    }
    out
}

/// GAL-style listing: a header line with the unit count, then for every unit
/// a line `id degree` followed by a line of neighbor ids.
pub fn write_gal(graph: &AdjacencyGraph) -> String {
    let mut out = format!("{}\n", graph.len());
    for i in 0..graph.len() {
        let _ = writeln!(out, "{} {}", graph.ids()[i], graph.degree(i));
        let nb: Vec<&str> = graph
            .neighbors(i)
            .iter()
            .map(|&j| graph.ids()[j].as_str())
            .collect();
        let _ = writeln!(out, "{}", nb.join(" "));
    }
    out
}

/// Parses the output of [`write_gal`]. Border lengths are not carried by GAL
/// and are set to zero.
pub fn read_gal(text: &str) -> Result<AdjacencyGraph, GeoError> {
    let bad = |msg: String| GeoError::Gal(msg);
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|l| l.split_whitespace().last())
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("missing unit count header".into()))?;
    let mut ids = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    for k in 0..n {
        let head = lines
            .next()
            .ok_or_else(|| bad(format!("unit {k}: missing header line")))?;
        let mut parts = head.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| bad(format!("unit {k}: empty header line")))?;
        let degree: usize = parts
            .next()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad(format!("unit {k}: bad degree")))?;
        let nbrs: Vec<String> = if degree == 0 {
            // the neighbor line is present but empty
            let _ = lines.next();
            Vec::new()
        } else {
            lines
                .next()
                .ok_or_else(|| bad(format!("unit {k}: missing neighbor line")))?
                .split_whitespace()
                .map(str::to_string)
                .collect()
        };
        if nbrs.len() != degree {
            return Err(bad(format!(
                "unit {id}: degree {degree} but {} neighbors",
                nbrs.len()
            )));
        }
        ids.push(id.to_string());
        raw.push(nbrs);
    }
    let index: std::collections::HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut edges = Vec::new();
    for (i, nbrs) in raw.iter().enumerate() {
        for nb in nbrs {
            let j = *index
                .get(nb.as_str())
                .ok_or_else(|| bad(format!("unknown neighbor id {nb}")))?;
            if i < j {
                edges.push((i, j, 0.0));
            } else if !raw[j].iter().any(|x| x == &ids[i]) {
                return Err(bad(format!("asymmetric edge {} -> {}", ids[i], nb)));
            }
        }
    }
    Ok(AdjacencyGraph::from_edges(ids, &edges))
}

pub fn write_merge_map_csv(map: &MergeMap) -> String {
    let mut out = String::from("original_id,surviving_id\n");
    for (from, to) in &map.assignments {
        let _ = writeln!(out, "{from},{to}");
    }
    out
}

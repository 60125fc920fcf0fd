use std::collections::BTreeMap;

use super::{geodesy, AdjacencyGraph, AreaUnit, GeoError};

/// Relative tolerance under which two border lengths count as tied.
const BORDER_TIE_RTOL: f64 = 1e-9;

/// Assignment of every original unit to the unit that absorbed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeMap {
    /// original id → surviving id, in original unit order
    pub assignments: Vec<(String, String)>,
    /// surviving ids, in original unit order
    pub survivors: Vec<String>,
}

impl MergeMap {
    pub fn identity<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
        Self {
            assignments: ids.iter().map(|i| (i.clone(), i.clone())).collect(),
            survivors: ids,
        }
    }

    pub fn surviving_count(&self) -> usize {
        self.survivors.len()
    }

    pub fn target(&self, id: &str) -> Option<&str> {
        self.assignments
            .iter()
            .find(|(from, _)| from == id)
            .map(|(_, to)| to.as_str())
    }

    pub fn as_lookup(&self) -> BTreeMap<&str, &str> {
        self.assignments
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect()
    }

    /// Members (original ids) of each survivor, in survivor order.
    pub fn members(&self) -> Vec<(String, Vec<String>)> {
        let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (from, to) in &self.assignments {
            groups.entry(to).or_default().push(from.clone());
        }
        self.survivors
            .iter()
            .map(|s| (s.clone(), groups.remove(s.as_str()).unwrap_or_default()))
            .collect()
    }
}

struct Group {
    alive: bool,
    count: u64,
    // neighbor group → accumulated shared border (m)
    adjacent: BTreeMap<usize, f64>,
}

/// Merges every unit with zero cases into the adjacent unit with which it
/// shares the longest border, repeating until no surviving unit has zero
/// cases.
///
/// Zero-case units are processed in original order. Among candidate
/// neighbors, positive-length borders are preferred over vertex-only contact;
/// ties go to the lexicographically smallest surviving id. A zero-case unit
/// without any neighbor is merged into the unit (outside its own group) with
/// the nearest centroid. Returns the merge map and the adjacency graph over
/// the survivors, whose border lengths are the sums over merged members.
pub fn merge_zero_case_units(
    units: &[AreaUnit],
    graph: &AdjacencyGraph,
    case_counts: &[u64],
) -> Result<(MergeMap, AdjacencyGraph), GeoError> {
    let n = units.len();
    if case_counts.len() != n || graph.len() != n {
        return Err(GeoError::Misaligned {
            counts: case_counts.len(),
            units: n,
        });
    }
    if n == 0 {
        return Err(GeoError::Empty);
    }
    if case_counts.iter().all(|&c| c == 0) {
        return Err(GeoError::AllZero);
    }

    let mut groups: Vec<Group> = (0..n)
        .map(|i| Group {
            alive: true,
            count: case_counts[i],
            adjacent: graph
                .neighbors(i)
                .iter()
                .map(|&j| (j, graph.border_length(i, j).unwrap_or(0.0)))
                .collect(),
        })
        .collect();
    let mut owner: Vec<usize> = (0..n).collect();
    let centroids: Vec<[f64; 2]> = units.iter().map(AreaUnit::centroid).collect();

    while let Some(zero) = (0..n).find(|&g| groups[g].alive && groups[g].count == 0) {
        let target = choose_target(zero, &groups, units, &owner, &centroids);
        absorb(&mut groups, &mut owner, zero, target);
    }

    let survivors: Vec<usize> = (0..n).filter(|&g| groups[g].alive).collect();
    let mut new_index = vec![usize::MAX; n];
    for (k, &g) in survivors.iter().enumerate() {
        new_index[g] = k;
    }
    let mut edges = Vec::new();
    for &g in &survivors {
        for (&h, &len) in &groups[g].adjacent {
            if g < h {
                edges.push((new_index[g], new_index[h], len));
            }
        }
    }
    let ids: Vec<String> = survivors.iter().map(|&g| units[g].id.clone()).collect();
    let merged_graph = AdjacencyGraph::from_edges(ids.clone(), &edges);
    let map = MergeMap {
        assignments: (0..n)
            .map(|i| (units[i].id.clone(), units[owner[i]].id.clone()))
            .collect(),
        survivors: ids,
    };
    Ok((map, merged_graph))
}

fn choose_target(
    zero: usize,
    groups: &[Group],
    units: &[AreaUnit],
    owner: &[usize],
    centroids: &[[f64; 2]],
) -> usize {
    let adjacent = &groups[zero].adjacent;
    if !adjacent.is_empty() {
        let max_len = adjacent.values().copied().fold(0.0, f64::max);
        let threshold = max_len * (1.0 - BORDER_TIE_RTOL);
        // with max_len == 0 every (vertex-only) neighbor ties
        return adjacent
            .iter()
            .filter(|(_, &len)| {
                if max_len > 0.0 {
                    len >= threshold
                } else {
                    true
                }
            })
            .map(|(&g, _)| g)
            .min_by(|&a, &b| units[a].id.cmp(&units[b].id))
            .expect("non-empty adjacency");
    }
    // isolated: nearest centroid among units owned by other groups
    let own: Vec<usize> = (0..units.len()).filter(|&i| owner[i] == zero).collect();
    let mut best: Option<(f64, &str, usize)> = None;
    for j in 0..units.len() {
        if owner[j] == zero {
            continue;
        }
        let d = own
            .iter()
            .map(|&i| geodesy::haversine_m(centroids[i], centroids[j]))
            .fold(f64::INFINITY, f64::min);
        let target_id = units[owner[j]].id.as_str();
        let better = match best {
            None => true,
            Some((bd, bid, _)) => d < bd || (d == bd && target_id < bid),
        };
        if better {
            best = Some((d, target_id, owner[j]));
        }
    }
    best.map(|(_, _, g)| g)
        .expect("at least one other group exists")
}

fn absorb(groups: &mut [Group], owner: &mut [usize], from: usize, into: usize) {
    let moved = std::mem::take(&mut groups[from].adjacent);
    groups[from].alive = false;
    groups[into].count += groups[from].count;
    groups[into].adjacent.remove(&from);
    for (nb, len) in moved {
        if nb == into {
            continue;
        }
        groups[nb].adjacent.remove(&from);
        *groups[nb].adjacent.entry(into).or_insert(0.0) += len;
        *groups[into].adjacent.entry(nb).or_insert(0.0) += len;
    }
    for o in owner.iter_mut() {
        if *o == from {
            *o = into;
        }
    }
}

/// Geometry of each survivor as the concatenation of its members' polygons.
pub fn merged_units(units: &[AreaUnit], map: &MergeMap) -> Vec<AreaUnit> {
    let by_id: BTreeMap<&str, &AreaUnit> = units.iter().map(|u| (u.id.as_str(), u)).collect();
    map.members()
        .into_iter()
        .map(|(survivor, members)| {
            let base = by_id[survivor.as_str()];
            AreaUnit {
                id: survivor.clone(),
                name: base.name.clone(),
                polygons: members
                    .iter()
                    .filter_map(|m| by_id.get(m.as_str()))
                    .flat_map(|u| u.polygons.iter().cloned())
                    .collect(),
            }
        })
        .collect()
}

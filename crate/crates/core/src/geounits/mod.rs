//! Areal units, queen contiguity and zero-case merging.

mod export;
pub mod geodesy;
mod merge;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::Value;
use thiserror::Error;

pub use export::{read_gal, write_edge_list_csv, write_gal, write_merge_map_csv};
pub use merge::{merge_zero_case_units, merged_units, MergeMap};

/// Default snapping grid for point identity, in degrees.
pub const DEFAULT_SNAP_DEG: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("malformed GeoJSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("document is not a GeoJSON FeatureCollection")]
    NotFeatureCollection,
    #[error("feature {index}: missing id property `{property}`")]
    MissingId { index: usize, property: String },
    #[error("feature {index}: duplicate id `{id}`")]
    DuplicateId { index: usize, id: String },
    #[error("feature {index}: unsupported geometry type `{kind}`")]
    UnsupportedGeometry { index: usize, kind: String },
    #[error("feature {index}: invalid geometry: {reason}")]
    InvalidGeometry { index: usize, reason: String },
    #[error("no units supplied")]
    Empty,
    #[error("every unit has zero cases; nothing to merge into")]
    AllZero,
    #[error("case counts ({counts}) not aligned with units ({units})")]
    Misaligned { counts: usize, units: usize },
    #[error("GAL input: {0}")]
    Gal(String),
}

/// Closed ring of (lon, lat) points.
pub type Ring = Vec<[f64; 2]>;
/// Exterior ring followed by holes.
pub type Polygon = Vec<Ring>;

/// One areal unit with (multi)polygon geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaUnit {
    pub id: String,
    pub name: Option<String>,
    pub polygons: Vec<Polygon>,
}

impl AreaUnit {
    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        self.polygons.iter().flatten()
    }

    /// Area-weighted centroid of the exterior rings (planar in degrees).
    pub fn centroid(&self) -> [f64; 2] {
        let mut total = 0.0;
        let mut acc = [0.0, 0.0];
        let mut fallback = None;
        for poly in &self.polygons {
            if let Some(outer) = poly.first() {
                let (a, c) = geodesy::ring_area_centroid(outer);
                let w = a.abs();
                fallback.get_or_insert(c);
                total += w;
                acc[0] += w * c[0];
                acc[1] += w * c[1];
            }
        }
        if total > 0.0 {
            [acc[0] / total, acc[1] / total]
        } else {
            fallback.unwrap_or([0.0, 0.0])
        }
    }

    fn validate(&self, index: usize) -> Result<(), GeoError> {
        if self.polygons.is_empty() {
            return Err(GeoError::InvalidGeometry {
                index,
                reason: "no rings".into(),
            });
        }
        for ring in self.rings() {
            if ring.len() < 4 {
                return Err(GeoError::InvalidGeometry {
                    index,
                    reason: format!("ring with {} points (need at least 4)", ring.len()),
                });
            }
            if ring.first() != ring.last() {
                return Err(GeoError::InvalidGeometry {
                    index,
                    reason: "ring is not closed".into(),
                });
            }
            if ring.iter().flatten().any(|c| !c.is_finite()) {
                return Err(GeoError::InvalidGeometry {
                    index,
                    reason: "non-finite coordinate".into(),
                });
            }
        }
        Ok(())
    }
}

/// Parses a GeoJSON FeatureCollection of Polygon / MultiPolygon features.
///
/// The unit id is read from `properties[id_property]` (string or number). When
/// the property is absent and `id_property` is `"id"`, the feature's top-level
/// `id` member is used instead.
pub fn load_units(document: &str, id_property: &str) -> Result<Vec<AreaUnit>, GeoError> {
    let root: Value = serde_json::from_str(document)?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(GeoError::NotFeatureCollection);
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or(GeoError::NotFeatureCollection)?;

    let mut seen = BTreeSet::new();
    let mut units = Vec::with_capacity(features.len());
    for (index, feature) in features.iter().enumerate() {
        let props = feature.get("properties");
        let id_value = props
            .and_then(|p| p.get(id_property))
            .filter(|v| !v.is_null())
            .or_else(|| (id_property == "id").then(|| feature.get("id")).flatten());
        let id = match id_value {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(GeoError::MissingId {
                    index,
                    property: id_property.to_string(),
                })
            }
        };
        if !seen.insert(id.clone()) {
            return Err(GeoError::DuplicateId { index, id });
        }
        let name = props
            .and_then(|p| p.get("name"))
            .and_then(Value::as_str)
            .map(str::to_string);

        let geometry = feature.get("geometry").ok_or(GeoError::InvalidGeometry {
            index,
            reason: "missing geometry".into(),
        })?;
        let kind = geometry
            .get("type")
            .and_then(Value::as_str)
            .unwrap_or("null");
        let coords = geometry.get("coordinates");
        let polygons = match (kind, coords) {
            ("Polygon", Some(c)) => vec![parse_polygon(c, index)?],
            ("MultiPolygon", Some(Value::Array(parts))) => parts
                .iter()
                .map(|p| parse_polygon(p, index))
                .collect::<Result<_, _>>()?,
            ("Polygon" | "MultiPolygon", _) => {
                return Err(GeoError::InvalidGeometry {
                    index,
                    reason: "missing coordinates".into(),
                })
            }
            (other, _) => {
                return Err(GeoError::UnsupportedGeometry {
                    index,
                    kind: other.to_string(),
                })
            }
        };
        let unit = AreaUnit { id, name, polygons };
        unit.validate(index)?;
        units.push(unit);
    }
    Ok(units)
}

fn parse_polygon(value: &Value, index: usize) -> Result<Polygon, GeoError> {
    let bad = |reason: &str| GeoError::InvalidGeometry {
        index,
        reason: reason.to_string(),
    };
    let rings = value
        .as_array()
        .ok_or_else(|| bad("polygon is not an array"))?;
    rings
        .iter()
        .map(|ring| {
            ring.as_array()
                .ok_or_else(|| bad("ring is not an array"))?
                .iter()
                .map(|pt| {
                    let pt = pt
                        .as_array()
                        .ok_or_else(|| bad("position is not an array"))?;
                    match (
                        pt.first().and_then(Value::as_f64),
                        pt.get(1).and_then(Value::as_f64),
                    ) {
                        (Some(x), Some(y)) => Ok([x, y]),
                        _ => Err(bad("position needs two numbers")),
                    }
                })
                .collect()
        })
        .collect()
}

type PointKey = (i64, i64);
type SegmentKey = (PointKey, PointKey);

#[inline]
fn snap(p: [f64; 2], grid: f64) -> PointKey {
    ((p[0] / grid).round() as i64, (p[1] / grid).round() as i64)
}

#[inline]
fn unsnap(k: PointKey, grid: f64) -> [f64; 2] {
    [k.0 as f64 * grid, k.1 as f64 * grid]
}

fn segment_keys(unit: &AreaUnit, grid: f64) -> BTreeSet<SegmentKey> {
    let mut out = BTreeSet::new();
    for ring in unit.rings() {
        for w in ring.windows(2) {
            let (a, b) = (snap(w[0], grid), snap(w[1], grid));
            if a != b {
                out.insert(if a < b { (a, b) } else { (b, a) });
            }
        }
    }
    out
}

fn segment_length(seg: &SegmentKey, grid: f64) -> f64 {
    geodesy::haversine_m(unsnap(seg.0, grid), unsnap(seg.1, grid))
}

/// Total geodesic length (meters) of the boundary segments shared by `a` and
/// `b` after snapping vertices to `grid` degrees. Zero for vertex-only
/// contact or disjoint units.
pub fn shared_border_length(a: &AreaUnit, b: &AreaUnit, grid: f64) -> f64 {
    let sa = segment_keys(a, grid);
    let sb = segment_keys(b, grid);
    sa.intersection(&sb).map(|s| segment_length(s, grid)).sum()
}

/// Symmetric neighbor structure over `n` units.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    borders: Vec<Vec<f64>>,
}

impl AdjacencyGraph {
    /// Builds a graph from explicit edges `(i, j, border_m)`; duplicate edges
    /// accumulate their border lengths, self-loops are ignored.
    pub fn from_edges(ids: Vec<String>, edges: &[(usize, usize, f64)]) -> Self {
        let n = ids.len();
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, len) in edges {
            if i == j {
                continue;
            }
            *maps[i].entry(j).or_insert(0.0) += len;
            *maps[j].entry(i).or_insert(0.0) += len;
        }
        let neighbors = maps.iter().map(|m| m.keys().copied().collect()).collect();
        let borders = maps.iter().map(|m| m.values().copied().collect()).collect();
        Self {
            ids,
            neighbors,
            borders,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn adjacency_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Shared border length of edge (i, j), `None` when not adjacent.
    pub fn border_length(&self, i: usize, j: usize) -> Option<f64> {
        self.neighbors[i]
            .binary_search(&j)
            .ok()
            .map(|k| self.borders[i][k])
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges `(i, j, border_m)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, nb) in self.neighbors.iter().enumerate() {
            for (k, &j) in nb.iter().enumerate() {
                if i < j {
                    out.push((i, j, self.borders[i][k]));
                }
            }
        }
        out
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Queen contiguity: units sharing at least one snapped boundary point are
/// neighbors. Border lengths are the shared snapped segment lengths.
pub fn build_queen_adjacency(units: &[AreaUnit], grid: f64) -> Result<AdjacencyGraph, GeoError> {
    if units.is_empty() {
        return Err(GeoError::Empty);
    }
    let mut by_point: HashMap<PointKey, Vec<usize>> = HashMap::new();
    let mut by_segment: HashMap<SegmentKey, Vec<usize>> = HashMap::new();
    for (idx, unit) in units.iter().enumerate() {
        for ring in unit.rings() {
            for p in ring {
                let list = by_point.entry(snap(*p, grid)).or_default();
                if list.last() != Some(&idx) {
                    list.push(idx);
                }
            }
        }
        for seg in segment_keys(unit, grid) {
            by_segment.entry(seg).or_default().push(idx);
        }
    }

    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for list in by_point.values_mut() {
        list.sort_unstable();
        list.dedup();
        for a in 0..list.len() {
            for b in a + 1..list.len() {
                pairs.insert((list[a], list[b]));
            }
        }
    }
    // segments are summed in key order so lengths are reproducible
    let mut shared: BTreeMap<(usize, usize), Vec<SegmentKey>> = BTreeMap::new();
    for (seg, list) in &by_segment {
        for a in 0..list.len() {
            for b in a + 1..list.len() {
                let key = (list[a].min(list[b]), list[a].max(list[b]));
                shared.entry(key).or_default().push(*seg);
            }
        }
    }
    let edges: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .map(|(i, j)| {
            let len = shared
                .get_mut(&(i, j))
                .map(|segs| {
                    segs.sort_unstable();
                    segs.iter().map(|s| segment_length(s, grid)).sum()
                })
                .unwrap_or(0.0);
            (i, j, len)
        })
        .collect();
    Ok(AdjacencyGraph::from_edges(
        units.iter().map(|u| u.id.clone()).collect(),
        &edges,
    ))
}

/// Connected components ordered by smallest member; members sorted.
pub fn connected_components(graph: &AdjacencyGraph) -> Vec<Vec<usize>> {
    components_of(graph.adjacency_lists())
}

pub(crate) fn components_of(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    for seed in 0..n {
        if label[seed] != usize::MAX {
            continue;
        }
        let c = out.len();
        let mut members = vec![seed];
        label[seed] = c;
        let mut stack = vec![seed];
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if label[j] == usize::MAX {
                    label[j] = c;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Unit square `[x0, x0+size] × [y0, y0+size]` as an [`AreaUnit`].
pub fn square_unit(id: &str, x0: f64, y0: f64, size: f64) -> AreaUnit {
    AreaUnit {
        id: id.to_string(),
        name: None,
        polygons: vec![vec![vec![
            [x0, y0],
            [x0 + size, y0],
            [x0 + size, y0 + size],
            [x0, y0 + size],
            [x0, y0],
        ]]],
    }
}

/// Regular lattice of `rows × cols` square cells, ids `r{row}c{col}` zero
/// padded so lexical and row-major order agree.
pub fn lattice_units(rows: usize, cols: usize, origin: [f64; 2], cell: f64) -> Vec<AreaUnit> {
    let width = (rows.max(cols).saturating_sub(1)).to_string().len();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = format!("r{r:0width$}c{c:0width$}");
            out.push(square_unit(
                &id,
                origin[0] + c as f64 * cell,
                origin[1] + r as f64 * cell,
                cell,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid3() -> Vec<AreaUnit> {
        lattice_units(3, 3, [0.0, 0.0], 1.0)
    }

    #[test]
    fn loads_feature_collection() {
        let doc = r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","properties":{"code":"A","name":"alpha"},
           "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}},
          {"type":"Feature","properties":{"code":7},
           "geometry":{"type":"MultiPolygon","coordinates":[[[[1,0],[2,0],[2,1],[1,1],[1,0]]]]}}
        ]}"#;
        let units = load_units(doc, "code").unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].id, "A");
        assert_eq!(units[0].name.as_deref(), Some("alpha"));
        assert_eq!(units[1].id, "7");
        assert_eq!(units[0].polygons[0][0][2], [1.0, 1.0]);
    }

    #[test]
    fn load_errors_name_feature_index() {
        let missing = r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","properties":{"code":"A"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}},
          {"type":"Feature","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}}
        ]}"#;
        let err = load_units(missing, "code").unwrap_err();
        assert!(matches!(err, GeoError::MissingId { index: 1, .. }));
        assert!(err.to_string().contains("feature 1"));

        let dup = missing.replace("{}", r#"{"code":"A"}"#);
        assert!(matches!(
            load_units(&dup, "code"),
            Err(GeoError::DuplicateId { index: 1, .. })
        ));

        let point = r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","properties":{"code":"A"},"geometry":{"type":"Point","coordinates":[0,0]}}]}"#;
        assert!(matches!(
            load_units(point, "code"),
            Err(GeoError::UnsupportedGeometry { index: 0, .. })
        ));
        assert!(matches!(
            load_units("{not json", "code"),
            Err(GeoError::Json(_))
        ));

        let open = r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","properties":{"code":"A"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1]]]}}]}"#;
        assert!(matches!(
            load_units(open, "code"),
            Err(GeoError::InvalidGeometry { index: 0, .. })
        ));
    }

    #[test]
    fn queen_degrees_on_three_by_three() {
        let g = build_queen_adjacency(&grid3(), DEFAULT_SNAP_DEG).unwrap();
        let degrees: Vec<usize> = (0..9).map(|i| g.degree(i)).collect();
        assert_eq!(degrees, vec![3, 5, 3, 5, 8, 5, 3, 5, 3]);
        assert_eq!(g.edge_count(), 20);
        // diagonal neighbors touch at a single vertex
        assert_eq!(g.border_length(0, 4), Some(0.0));
        assert!(g.border_length(0, 1).unwrap() > 0.0);
    }

    #[test]
    fn single_polygon_has_no_neighbors() {
        let g =
            build_queen_adjacency(&[square_unit("a", 0.0, 0.0, 1.0)], DEFAULT_SNAP_DEG).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.neighbors(0).is_empty());
    }

    #[test]
    fn corner_contact_is_queen_neighbor_with_zero_border() {
        let units = [
            square_unit("a", 0.0, 0.0, 1.0),
            square_unit("b", 1.0, 1.0, 1.0),
        ];
        let g = build_queen_adjacency(&units, DEFAULT_SNAP_DEG).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.border_length(0, 1), Some(0.0));
        assert_eq!(
            shared_border_length(&units[0], &units[1], DEFAULT_SNAP_DEG),
            0.0
        );
    }

    #[test]
    fn full_edge_at_equator() {
        let a = square_unit("a", 0.0, 0.0, 1.0);
        let b = square_unit("b", 1.0, 0.0, 1.0);
        let len = shared_border_length(&a, &b, DEFAULT_SNAP_DEG);
        let arc = geodesy::EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((len - arc).abs() < 1e-3, "{len}");
        assert_eq!(len, shared_border_length(&b, &a, DEFAULT_SNAP_DEG));
        let far = square_unit("c", 5.0, 5.0, 1.0);
        assert_eq!(shared_border_length(&a, &far, DEFAULT_SNAP_DEG), 0.0);
    }

    #[test]
    fn snapping_absorbs_jitter() {
        let a = square_unit("a", 0.0, 0.0, 1.0);
        let mut b = square_unit("b", 1.0, 0.0, 1.0);
        for p in b.polygons[0][0].iter_mut() {
            if p[0] == 1.0 {
                p[0] += 3e-11;
            }
        }
        assert!(shared_border_length(&a, &b, DEFAULT_SNAP_DEG) > 1e5);
    }

    #[test]
    fn components_examples() {
        let g = build_queen_adjacency(&grid3(), DEFAULT_SNAP_DEG).unwrap();
        assert_eq!(connected_components(&g), vec![(0..9).collect::<Vec<_>>()]);

        let two = [
            square_unit("a", 0.0, 0.0, 1.0),
            square_unit("b", 3.0, 0.0, 1.0),
        ];
        let g = build_queen_adjacency(&two, DEFAULT_SNAP_DEG).unwrap();
        assert_eq!(connected_components(&g), vec![vec![0], vec![1]]);

        let empty = AdjacencyGraph::from_edges((0..4).map(|i| i.to_string()).collect(), &[]);
        assert_eq!(connected_components(&empty).len(), 4);
    }

    fn random_units(cells: Vec<(i32, i32)>) -> Vec<AreaUnit> {
        let mut cells = cells;
        cells.sort_unstable();
        cells.dedup();
        cells
            .iter()
            .map(|&(x, y)| square_unit(&format!("u{x}_{y}"), x as f64 * 0.1, y as f64 * 0.1, 0.1))
            .collect()
    }

    proptest! {
        #[test]
        fn adjacency_is_symmetric_and_contains_rook(cells in proptest::collection::vec((0i32..8, 0i32..8), 1..30)) {
            let units = random_units(cells);
            let g = build_queen_adjacency(&units, DEFAULT_SNAP_DEG).unwrap();
            for i in 0..g.len() {
                prop_assert!(!g.neighbors(i).contains(&i));
                for &j in g.neighbors(i) {
                    prop_assert!(g.neighbors(j).contains(&i));
                    prop_assert_eq!(g.border_length(i, j), g.border_length(j, i));
                    prop_assert!(g.border_length(i, j).unwrap() >= 0.0);
                }
            }
            // rook pairs (shared segment) are always queen pairs
            for i in 0..units.len() {
                for j in i + 1..units.len() {
                    let len = shared_border_length(&units[i], &units[j], DEFAULT_SNAP_DEG);
                    prop_assert_eq!(len, shared_border_length(&units[j], &units[i], DEFAULT_SNAP_DEG));
                    if len > 0.0 {
                        prop_assert!(g.neighbors(i).contains(&j));
                        prop_assert!((g.border_length(i, j).unwrap() - len).abs() <= 1e-9 * len);
                    }
                }
            }
        }
    }
}

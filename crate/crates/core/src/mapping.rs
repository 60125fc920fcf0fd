//! Quantile choropleths (SVG) and GeoJSON output of per-area estimates.

use std::fmt::Write as _;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geounits::AreaUnit;
use crate::inference::AreaEstimates;
use crate::stats::quantile_sorted;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("no units to draw")]
    Empty,
    #[error("{values} values for {units} units")]
    Misaligned { values: usize, units: usize },
    #[error("value for unit `{0}` is not finite")]
    NonFinite(String),
    #[error("class count must be between 1 and 9, got {0}")]
    BadClasses(usize),
}

/// Class edges: `classes + 1` ascending values from the minimum to the
/// maximum, interior edges at the `k / classes` sample quantiles.
pub fn quantile_breaks(values: &[f64], classes: usize) -> Result<Vec<f64>, MapError> {
    if !(1..=9).contains(&classes) {
        return Err(MapError::BadClasses(classes));
    }
    if values.is_empty() {
        return Err(MapError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok((0..=classes)
        .map(|k| quantile_sorted(&sorted, k as f64 / classes as f64))
        .collect())
}

/// Class index of `value`: class `k` covers `[edges[k], edges[k+1])`, the last
/// class is closed on the right.
pub fn classify(value: f64, edges: &[f64]) -> usize {
    let classes = edges.len().saturating_sub(1).max(1);
    let k = edges[1..edges.len() - 1]
        .iter()
        .take_while(|&&e| value >= e)
        .count();
    k.min(classes - 1)
}

/// Sequential palette from pale yellow to dark red.
pub fn palette(classes: usize) -> Vec<String> {
    let lo = [255.0, 255.0, 204.0];
    let hi = [189.0, 0.0, 38.0];
    (0..classes)
        .map(|k| {
            let t = if classes == 1 {
                1.0
            } else {
                k as f64 / (classes - 1) as f64
            };
            let c: Vec<u8> = (0..3)
                .map(|i| (lo[i] + t * (hi[i] - lo[i])).round() as u8)
                .collect();
            format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MapOptions {
    pub classes: usize,
    pub title: String,
    pub legend_label: String,
    /// Width of the map panel in pixels; height follows the aspect ratio.
    pub width: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            classes: 5,
            title: "Posterior mean relative risk".into(),
            legend_label: "RR".into(),
            width: 800.0,
        }
    }
}

/// Equirectangular projection scaled by the cosine of the mid latitude.
struct Projection {
    min: [f64; 2],
    kx: f64,
    scale: f64,
    height: f64,
    pad: f64,
}

impl Projection {
    fn fit<'a>(rings: impl Iterator<Item = &'a [f64; 2]>, width: f64, pad: f64) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in rings {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let kx = (0.5 * (min[1] + max[1])).to_radians().cos().max(0.05);
        let w = ((max[0] - min[0]) * kx).max(1e-12);
        let h = (max[1] - min[1]).max(1e-12);
        let scale = (width - 2.0 * pad) / w;
        Self {
            min,
            kx,
            scale,
            height: h * scale + 2.0 * pad,
            pad,
        }
    }

    fn xy(&self, p: &[f64; 2]) -> (f64, f64) {
        let x = self.pad + (p[0] - self.min[0]) * self.kx * self.scale;
        let y = self.height - self.pad - (p[1] - self.min[1]) * self.scale;
        (x, y)
    }

    fn path(&self, unit: &AreaUnit) -> String {
        let mut d = String::new();
        for ring in unit.rings() {
            for (k, p) in ring.iter().enumerate() {
                let (x, y) = self.xy(p);
                let _ = write!(d, "{}{x:.2},{y:.2}", if k == 0 { "M" } else { "L" });
            }
            d.push('Z');
        }
        d
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Static SVG choropleth: one `<path>` per unit in input order, filled by
/// quantile class, with a legend and an optional boundary overlay drawn
/// without fill.
pub fn render_choropleth_svg(
    units: &[AreaUnit],
    values: &[f64],
    overlay: Option<&[AreaUnit]>,
    opts: &MapOptions,
) -> Result<String, MapError> {
    if units.is_empty() {
        return Err(MapError::Empty);
    }
    if units.len() != values.len() {
        return Err(MapError::Misaligned {
            values: values.len(),
            units: units.len(),
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(MapError::NonFinite(units[i].id.clone()));
    }
    let edges = quantile_breaks(values, opts.classes)?;
    let colors = palette(opts.classes);
    let proj = Projection::fit(
        units.iter().flat_map(|u| u.rings().flatten()),
        opts.width,
        10.0,
    );
    let legend_w = 190.0;
    let top = 30.0;
    let total_w = opts.width + legend_w;
    let total_h = (proj.height + top).max(top + 30.0 + 22.0 * opts.classes as f64);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="10" y="20" font-family="sans-serif" font-size="16">{}</text>"#,
        escape(&opts.title)
    );
    let _ = writeln!(
        s,
        r##"<g id="units" transform="translate(0,{top})" stroke="#666666" stroke-width="0.3">"##
    );
    for (u, &v) in units.iter().zip(values) {
        let k = classify(v, &edges);
        let _ = writeln!(
            s,
            r#"<path data-unit="{}" data-class="{k}" fill="{}" fill-rule="evenodd" d="{}"/>"#,
            escape(&u.id),
            colors[k],
            proj.path(u)
        );
    }
    let _ = writeln!(s, "</g>");
    if let Some(over) = overlay {
        let _ = writeln!(
            s,
            r#"<g id="overlay" transform="translate(0,{top})" fill="none" stroke="black" stroke-width="1.2">"#
        );
        for u in over {
            let _ = writeln!(
                s,
                r#"<path data-unit="{}" d="{}"/>"#,
                escape(&u.id),
                proj.path(u)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let lx = opts.width + 10.0;
    let _ = writeln!(
        s,
        r#"<g id="legend" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{lx:.0}" y="{:.0}">{}</text>"#,
        top + 12.0,
        escape(&opts.legend_label)
    );
    for k in 0..opts.classes {
        let y = top + 22.0 + 22.0 * k as f64;
        let _ = writeln!(
            s,
            r##"<rect x="{lx:.0}" y="{y:.0}" width="18" height="16" fill="{}" stroke="#666666" stroke-width="0.5"/>"##,
            colors[k]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.0}" y="{:.0}">{:.3} to {:.3}</text>"#,
            lx + 26.0,
            y + 12.0,
            edges[k],
            edges[k + 1]
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

fn geometry(unit: &AreaUnit) -> Value {
    let coords = |poly: &Vec<Vec<[f64; 2]>>| -> Value {
        Value::Array(
            poly.iter()
                .map(|ring| Value::Array(ring.iter().map(|p| json!([p[0], p[1]])).collect()))
                .collect(),
        )
    };
    if unit.polygons.len() == 1 {
        json!({"type": "Polygon", "coordinates": coords(&unit.polygons[0])})
    } else {
        json!({"type": "MultiPolygon", "coordinates": unit.polygons.iter().map(coords).collect::<Vec<_>>()})
    }
}

/// FeatureCollection of `units`; each feature's properties hold the unit id
/// under `id_property` followed by the given per-unit properties.
pub fn units_geojson(
    units: &[AreaUnit],
    id_property: &str,
    properties: &[Map<String, Value>],
) -> Result<String, MapError> {
    if units.len() != properties.len() {
        return Err(MapError::Misaligned {
            values: properties.len(),
            units: units.len(),
        });
    }
    let features: Vec<Value> = units
        .iter()
        .zip(properties)
        .map(|(u, extra)| {
            let mut props = Map::new();
            props.insert(id_property.into(), Value::String(u.id.clone()));
            if let Some(name) = &u.name {
                props.insert("name".into(), Value::String(name.clone()));
            }
            props.extend(extra.clone());
            json!({"type": "Feature", "properties": props, "geometry": geometry(u)})
        })
        .collect();
    let doc = json!({"type": "FeatureCollection", "features": features});
    Ok(serde_json::to_string(&doc).expect("serializable") + "\n")
}

/// GeoJSON of `units` carrying `RR`, `lo`, `hi`, `exceedance` and the map
/// class of each unit.
pub fn area_geojson(
    units: &[AreaUnit],
    area: &AreaEstimates,
    classes: usize,
) -> Result<String, MapError> {
    if units.len() != area.len() {
        return Err(MapError::Misaligned {
            values: area.len(),
            units: units.len(),
        });
    }
    let edges = quantile_breaks(&area.rr, classes)?;
    let props: Vec<Map<String, Value>> = (0..units.len())
        .map(|i| {
            let mut m = Map::new();
            m.insert("RR".into(), json!(area.rr[i]));
            m.insert("lo".into(), json!(area.lo[i]));
            m.insert("hi".into(), json!(area.hi[i]));
            m.insert("exceedance".into(), json!(area.exceedance[i]));
            m.insert("class".into(), json!(classify(area.rr[i], &edges)));
            m
        })
        .collect();
    units_geojson(units, "unit_id", &props)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geounits::{lattice_units, load_units};
    use proptest::prelude::*;

    #[test]
    fn five_quantile_classes_on_ranks() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let e = quantile_breaks(&v, 5).unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e[0], 1.0);
        assert_eq!(e[5], 10.0);
        let counts = v.iter().fold(vec![0; 5], |mut c, &x| {
            c[classify(x, &e)] += 1;
            c
        });
        assert_eq!(counts, vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            quantile_breaks(&[1.0], 0),
            Err(MapError::BadClasses(0))
        ));
        assert!(matches!(quantile_breaks(&[], 5), Err(MapError::Empty)));
        let units = lattice_units(1, 2, [0.0, 0.0], 1.0);
        assert!(render_choropleth_svg(&units, &[1.0], None, &MapOptions::default()).is_err());
        assert!(
            render_choropleth_svg(&units, &[1.0, f64::NAN], None, &MapOptions::default()).is_err()
        );
    }

    #[test]
    fn svg_has_one_shape_per_unit_and_matching_classes() {
        let units = lattice_units(4, 5, [-46.8, -23.7], 0.01);
        let values: Vec<f64> = (0..20)
            .map(|i| 0.5 + (i as f64 * 0.37).sin().abs())
            .collect();
        let over = lattice_units(1, 1, [-46.8, -23.7], 0.05);
        let svg =
            render_choropleth_svg(&units, &values, Some(&over), &MapOptions::default()).unwrap();
        let edges = quantile_breaks(&values, 5).unwrap();
        let unit_paths: Vec<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<path") && l.contains("data-class"))
            .collect();
        assert_eq!(unit_paths.len(), 20);
        for (line, (u, v)) in unit_paths.iter().zip(units.iter().zip(&values)) {
            assert!(line.contains(&format!("data-unit=\"{}\"", u.id)));
            assert!(line.contains(&format!("data-class=\"{}\"", classify(*v, &edges))));
        }
        assert_eq!(svg.matches("<rect x=").count(), 5);
        assert!(svg.contains("id=\"overlay\""));
    }

    #[test]
    fn geojson_round_trips_through_the_loader() {
        let units = lattice_units(2, 2, [0.0, 0.0], 1.0);
        let area = AreaEstimates {
            rr: vec![0.8, 1.0, 1.2, 1.5],
            lo: vec![0.6, 0.8, 1.0, 1.2],
            hi: vec![1.0, 1.2, 1.4, 1.8],
            exceedance: vec![0.1, 0.5, 0.9, 0.99],
        };
        let text = area_geojson(&units, &area, 5).unwrap();
        let back = load_units(&text, "unit_id").unwrap();
        assert_eq!(back, units);
        let doc: Value = serde_json::from_str(&text).unwrap();
        let p = &doc["features"][3]["properties"];
        assert_eq!(p["RR"], json!(1.5));
        assert_eq!(p["exceedance"], json!(0.99));
        assert_eq!(p["class"], json!(4));
    }

    #[test]
    fn palette_runs_light_to_dark() {
        let p = palette(5);
        assert_eq!(p[0], "#ffffcc");
        assert_eq!(p[4], "#bd0026");
    }

    proptest! {
        #[test]
        fn classes_are_monotone(mut v in proptest::collection::vec(-5.0f64..5.0, 1..60), k in 1usize..10) {
            let e = quantile_breaks(&v, k).unwrap();
            v.sort_by(|a, b| a.total_cmp(b));
            let c: Vec<usize> = v.iter().map(|&x| classify(x, &e)).collect();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.iter().all(|&x| x < k));
        }
    }
}

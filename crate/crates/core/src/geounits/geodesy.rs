//! Spherical-earth distances and planar centroids in lon/lat degrees.

/// Mean earth radius (IUGG), meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Great-circle distance between two (lon, lat) points in degrees, meters.
pub fn haversine_m(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Signed shoelace area and centroid of a closed ring (degree units).
pub(crate) fn ring_area_centroid(ring: &[[f64; 2]]) -> (f64, [f64; 2]) {
    let mut area2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for w in ring.windows(2) {
        let (p, q) = (w[0], w[1]);
        let cross = p[0] * q[1] - q[0] * p[1];
        area2 += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if area2.abs() < 1e-300 {
        let n = ring.len().saturating_sub(1).max(1) as f64;
        let sx: f64 = ring
            .iter()
            .take(ring.len().saturating_sub(1).max(1))
            .map(|p| p[0])
            .sum();
        let sy: f64 = ring
            .iter()
            .take(ring.len().saturating_sub(1).max(1))
            .map(|p| p[1])
            .sum();
        return (0.0, [sx / n, sy / n]);
    }
    (area2 / 2.0, [cx / (3.0 * area2), cy / (3.0 * area2)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meridian_degree_matches_arc_length() {
        // arc length of 1° along a meridian is R·π/180
        let d = haversine_m([0.0, 0.0], [0.0, 1.0]);
        let arc = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((d - arc).abs() < 1e-6);
    }

    #[test]
    fn haversine_matches_spherical_law_of_cosines() {
        let pairs: [([f64; 2], [f64; 2]); 3] = [
            ([-46.6, -23.5], [-46.5, -23.6]),
            ([10.0, 45.0], [11.0, 46.5]),
            ([-120.0, 30.0], [-100.0, 40.0]),
        ];
        for (a, b) in pairs {
            let (l1, p1, l2, p2) = (
                a[0].to_radians(),
                a[1].to_radians(),
                b[0].to_radians(),
                b[1].to_radians(),
            );
            let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * (l2 - l1).cos();
            let oracle = EARTH_RADIUS_M * c.clamp(-1.0, 1.0).acos();
            assert!((haversine_m(a, b) - oracle).abs() < 1e-3);
        }
    }

    #[test]
    fn square_centroid() {
        let ring = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [0.0, 0.0]];
        let (area, c) = ring_area_centroid(&ring);
        assert!((area - 4.0).abs() < 1e-12);
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12);
    }
}

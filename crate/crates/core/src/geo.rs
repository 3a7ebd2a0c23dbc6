//! Spherical sampling of patch locations and the tile2vec neighbour geometry.
//!
//! The earth is a sphere of radius [`EARTH_RADIUS_KM`]. Two locations are
//! neighbours when their central angle is strictly below one degree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spherical earth radius; half circumference is 20015.087 km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const NEIGHBOR_RADIUS_DEG: f64 = 1.0;

/// `(lon, lat)` in degrees.
pub type LonLat = (f64, f64);

/// Area-uniform locations: `lon ~ U[-180, 180)`, `lat = asin(U[-1, 1])`.
pub fn sample_sphere_uniform(seed: u64, n: usize) -> Vec<LonLat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let lon = rng.random_range(-180.0..180.0);
            let z: f64 = rng.random_range(-1.0..=1.0);
            (lon, z.asin().to_degrees())
        })
        .collect()
}

/// Area-uniform locations inside `clusters` spherical caps of angular radius
/// `radius_deg`, with cap centres themselves area-uniform. Point `i` belongs
/// to cluster `i % clusters`.
///
/// Desk-scale sample counts leave uniform sphere points without any
/// neighbour within one degree; caps narrower than half a degree make every
/// pair inside a cluster a neighbour pair.
pub fn sample_clustered(seed: u64, n: usize, clusters: usize, radius_deg: f64) -> Result<Vec<LonLat>> {
    if clusters == 0 || !(radius_deg > 0.0 && radius_deg < 90.0) {
        return Err(Error::InvalidConfig(format!(
            "clustered sampling needs clusters >= 1 and a cap radius in (0, 90) degrees, got {clusters} and {radius_deg}"
        )));
    }
    let centers = sample_sphere_uniform(seed, clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let cos_r = radius_deg.to_radians().cos();
    Ok((0..n)
        .map(|i| {
            let c = to_unit(centers[i % clusters]);
            // Any unit vector orthogonal to c, then the third axis.
            let helper = if c[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let u = normalize(cross(helper, c));
            let v = cross(c, u);
            let cos_t: f64 = rng.random_range(cos_r..=1.0);
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let p: [f64; 3] =
                std::array::from_fn(|k| cos_t * c[k] + sin_t * (phi.cos() * u[k] + phi.sin() * v[k]));
            from_unit(p)
        })
        .collect())
}

fn to_unit((lon, lat): LonLat) -> [f64; 3] {
    let (lo, la) = (lon.to_radians(), lat.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

fn from_unit(p: [f64; 3]) -> LonLat {
    let lat = p[2].clamp(-1.0, 1.0).asin().to_degrees();
    let mut lon = p[1].atan2(p[0]).to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    }
    (lon, lat)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Central angle in radians (haversine form).
pub fn central_angle(a: LonLat, b: LonLat) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: LonLat, b: LonLat) -> f64 {
    EARTH_RADIUS_KM * central_angle(a, b)
}

pub fn is_neighbor_pair(a: LonLat, b: LonLat) -> bool {
    central_angle(a, b) < NEIGHBOR_RADIUS_DEG.to_radians()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub km: f64,
}

/// Points with every pair closer than one degree linked, lists sorted by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub points: Vec<LonLat>,
    pub neighbors: Vec<Vec<Neighbor>>,
}

/// Brute force restricted to latitude bands: a pair more than one degree
/// apart in latitude cannot be within one degree of arc.
pub fn build_neighbor_graph(points: &[LonLat]) -> NeighborGraph {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1).then(a.cmp(&b)));
    let mut neighbors = vec![Vec::new(); n];
    // Slack covers rounding in the angle computation near the band edge.
    let band = NEIGHBOR_RADIUS_DEG + 1e-9;
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if points[j].1 - points[i].1 > band {
                break;
            }
            if is_neighbor_pair(points[i], points[j]) {
                let km = haversine_km(points[i], points[j]);
                neighbors[i].push(Neighbor { index: j, km });
                neighbors[j].push(Neighbor { index: i, km });
            }
        }
    }
    for list in &mut neighbors {
        list.sort_by_key(|nb| nb.index);
    }
    NeighborGraph {
        points: points.to_vec(),
        neighbors,
    }
}

/// Anchor, neighbour and distant sample indices for one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletDraw {
    pub anchor: usize,
    pub neighbor: usize,
    pub distant: usize,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_neighbor(&self, a: usize, b: usize) -> bool {
        self.neighbors[a]
            .binary_search_by_key(&b, |nb| nb.index)
            .is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Mean length over all edges; the default softmax temperature.
    pub fn mean_neighbor_km(&self) -> Option<f64> {
        let (sum, count) = self
            .neighbors
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), nb| (s + nb.km, c + 1));
        (count > 0).then(|| sum / count as f64)
    }

    /// Indices that have at least one neighbour.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.neighbors[i].is_empty())
            .collect()
    }

    /// `softmax(-d_k / temperature)` over the anchor's neighbour distances.
    ///
    /// Nearer neighbours are more likely.
    pub fn neighbor_probabilities(&self, anchor: usize, temperature_km: f64) -> Result<Vec<f64>> {
        let list = &self.neighbors[anchor];
        if list.is_empty() {
            return Err(Error::NoNeighbor(anchor));
        }
        let logits: Vec<f64> = list.iter().map(|nb| -nb.km / temperature_km).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / z).collect())
    }
}

/// Draws a neighbour by distance softmax and a distant point uniformly from
/// the anchor's non-neighbours.
pub fn draw_triplet(
    graph: &NeighborGraph,
    anchor: usize,
    seed: u64,
    temperature_km: f64,
) -> Result<TripletDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_triplet_with(graph, anchor, &mut rng, temperature_km)
}

pub fn draw_triplet_with<R: Rng + ?Sized>(
    graph: &NeighborGraph,
    anchor: usize,
    rng: &mut R,
    temperature_km: f64,
) -> Result<TripletDraw> {
    if !(temperature_km > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature_km must be positive, got {temperature_km}"
        )));
    }
    let probs = graph.neighbor_probabilities(anchor, temperature_km)?;
    let list = &graph.neighbors[anchor];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = list.len() - 1;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            pick = k;
            break;
        }
    }
    let neighbor = list[pick].index;

    let n = graph.len();
    let excluded = list.len() + 1;
    if n <= excluded {
        return Err(Error::InvalidConfig(format!(
            "anchor {anchor} has no non-neighbour to use as a distant sample"
        )));
    }
    // r-th index not in {anchor} U neighbours, walking the sorted exclusions.
    let r = rng.random_range(0..n - excluded);
    let mut skip: Vec<usize> = list.iter().map(|nb| nb.index).collect();
    skip.push(anchor);
    skip.sort_unstable();
    let mut distant = r;
    for &s in &skip {
        if s <= distant {
            distant += 1;
        } else {
            break;
        }
    }
    debug_assert!(distant < n && distant != anchor && !graph.is_neighbor(anchor, distant));
    Ok(TripletDraw {
        anchor,
        neighbor,
        distant,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestNeighborSummary {
    pub mean_km: f64,
    pub counted: usize,
    /// Points without any neighbour, excluded from the mean.
    pub isolated: usize,
}

/// Average over anchors of the distance to their closest neighbour.
pub fn mean_nearest_neighbor_km(graph: &NeighborGraph) -> NearestNeighborSummary {
    let mut sum = 0.0;
    let mut counted = 0;
    let mut isolated = 0;
    for list in &graph.neighbors {
        match list.iter().map(|nb| nb.km).min_by(f64::total_cmp) {
            Some(d) => {
                sum += d;
                counted += 1;
            }
            None => isolated += 1,
        }
    }
    NearestNeighborSummary {
        mean_km: if counted > 0 { sum / counted as f64 } else { f64::NAN },
        counted,
        isolated,
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_area_latitude_band() {
        let pts = sample_sphere_uniform(7, 10_000);
        let frac = pts.iter().filter(|p| p.1.abs() < 30.0).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
        let mean_sin = pts.iter().map(|p| p.1.to_radians().sin()).sum::<f64>() / 1e4;
        assert!(mean_sin.abs() <= 0.02);
        assert!(pts.iter().all(|p| (-180.0..180.0).contains(&p.0) && p.1.abs() <= 90.0));
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_sphere_uniform(3, 50), sample_sphere_uniform(3, 50));
        assert_ne!(sample_sphere_uniform(3, 50), sample_sphere_uniform(4, 50));
    }

    #[test]
    fn haversine_spot_values() {
        assert_eq!(haversine_km((12.0, 40.0), (12.0, 40.0)), 0.0);
        let one_deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert!((haversine_km((0.0, 0.0), (0.0, 1.0)) - one_deg).abs() < 1e-9);
        assert!((haversine_km((0.0, 0.0), (0.0, 1.0)) - 111.195).abs() < 0.001);
        assert!((haversine_km((0.0, 0.0), (180.0, 0.0)) - 20015.087).abs() < 0.01);
        assert!((haversine_km((30.0, 45.0), (-150.0, -45.0)) - 20015.087).abs() < 0.01);
    }

    #[test]
    fn equator_pairs() {
        let g = build_neighbor_graph(&[(0.0, 0.0), (0.5, 0.0)]);
        assert!(g.is_neighbor(0, 1) && g.is_neighbor(1, 0));
        let g = build_neighbor_graph(&[(0.0, 0.0), (2.0, 0.0)]);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn graph_handles_dateline() {
        let g = build_neighbor_graph(&[(179.8, 10.0), (-179.9, 10.2)]);
        assert!(g.is_neighbor(0, 1));
    }

    #[test]
    fn isolated_anchor_has_no_neighbor() {
        let g = build_neighbor_graph(&[(0.0, 0.0), (0.3, 0.0), (50.0, 10.0)]);
        assert!(matches!(draw_triplet(&g, 2, 0, 10.0), Err(Error::NoNeighbor(2))));
    }

    #[test]
    fn nearest_neighbor_two_points() {
        let b = (50.0 / EARTH_RADIUS_KM).to_degrees();
        let g = build_neighbor_graph(&[(0.0, 0.0), (0.0, b)]);
        let s = mean_nearest_neighbor_km(&g);
        assert!((s.mean_km - 50.0).abs() < 1e-9);
        assert_eq!((s.counted, s.isolated), (2, 0));
    }

    #[test]
    fn equatorial_ring_spacing() {
        // 0.999 degree spacing keeps consecutive points strictly inside the radius.
        let step = 0.999;
        let pts: Vec<LonLat> = (0..40).map(|i| (i as f64 * step, 0.0)).collect();
        let g = build_neighbor_graph(&pts);
        let s = mean_nearest_neighbor_km(&g);
        let expected = EARTH_RADIUS_KM * step.to_radians();
        assert!((s.mean_km - expected).abs() < 1e-6);
    }

    #[test]
    fn near_neighbor_dominates_softmax() {
        let d1 = (1.0 / EARTH_RADIUS_KM).to_degrees();
        let d100 = (100.0 / EARTH_RADIUS_KM).to_degrees();
        let g = build_neighbor_graph(&[(0.0, 0.0), (0.0, d1), (d100, 0.0), (90.0, 0.0)]);
        let p = g.neighbor_probabilities(0, 10.0).unwrap();
        let expected = (-0.1f64).exp() / ((-0.1f64).exp() + (-10.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-9);
        assert!(p[0] >= 0.99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn haversine_symmetry_and_triangle(
            a in (-180.0f64..180.0, -90.0f64..=90.0),
            b in (-180.0f64..180.0, -90.0f64..=90.0),
            c in (-180.0f64..180.0, -90.0f64..=90.0),
        ) {
            prop_assert_eq!(haversine_km(a, b), haversine_km(b, a));
            prop_assert!(haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9);
        }

        #[test]
        fn triplets_respect_invariants(seed in 0u64..1000, n in 5usize..40) {
            // Cluster points so that most have neighbours.
            let pts: Vec<LonLat> = sample_sphere_uniform(seed, n)
                .into_iter()
                .enumerate()
                .map(|(i, (lon, lat))| if i % 2 == 0 { (lon * 0.01, lat * 0.01) } else { (lon, lat) })
                .collect();
            let g = build_neighbor_graph(&pts);
            for anchor in g.anchors() {
                let probs = g.neighbor_probabilities(anchor, 20.0).unwrap();
                prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                match draw_triplet(&g, anchor, seed ^ anchor as u64, 20.0) {
                    Ok(t) => {
                        prop_assert!(t.anchor != t.neighbor && t.anchor != t.distant && t.neighbor != t.distant);
                        prop_assert!(g.is_neighbor(t.anchor, t.neighbor));
                        prop_assert!(!g.is_neighbor(t.anchor, t.distant));
                    }
                    Err(Error::InvalidConfig(_)) => prop_assert_eq!(g.neighbors[anchor].len() + 1, n),
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            }
        }

        #[test]
        fn graph_is_symmetric(seed in 0u64..1000) {
            let pts: Vec<LonLat> = sample_sphere_uniform(seed, 60)
                .into_iter()
                .map(|(lon, lat)| (lon * 0.02, lat * 0.02))
                .collect();
            let g = build_neighbor_graph(&pts);
            for (i, list) in g.neighbors.iter().enumerate() {
                for nb in list {
                    prop_assert!(nb.index != i);
                    prop_assert!(nb.km > 0.0);
                    prop_assert!(g.is_neighbor(nb.index, i));
                }
            }
        }
    }
}

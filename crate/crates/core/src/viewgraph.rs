//! Viewpoint geometry and the learned view-graph adjacency.
//!
//! Viewpoints are fixed 3d positions (cube vertices or a ring). Edge scores
//! come from a small MLP over the pairwise relation vector
//! [v_i, v_j, v_i - v_j, ||v_i - v_j||^2]; the graph is then sparsified to
//! each node's n nearest geometric neighbours plus a self-loop and
//! row-normalized with a masked softmax, which keeps the adjacency positive,
//! stochastic and differentiable w.r.t. the relation parameters.
//!
//! Geometry (distances, neighbour sets, tie-breaks) is always computed in
//! f64 so that f32 and f64 models agree on the graph structure exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Affine;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const RELATION_DIM: usize = 10;

/// One notional capture position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub coord: [f64; 3],
}

impl Viewpoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Viewpoint { coord: [x, y, z] }
    }

    pub fn distance(&self, other: &Viewpoint) -> f64 {
        let dx = self.coord[0] - other.coord[0];
        let dy = self.coord[1] - other.coord[1];
        let dz = self.coord[2] - other.coord[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// The 8 cube vertices (+/-1, +/-1, +/-1). Index packs the sign bits as
/// 4*b_x + 2*b_y + b_z with bit 0 meaning -1, so index 0 is (-1,-1,-1) and
/// index 7 is (+1,+1,+1).
pub fn cube_viewpoints() -> Vec<Viewpoint> {
    (0..8)
        .map(|i| {
            let sign = |bit: usize| if (i >> bit) & 1 == 1 { 1.0 } else { -1.0 };
            Viewpoint::new(sign(2), sign(1), sign(0))
        })
        .collect()
}

/// `count` points on a unit-radius ring at the given elevation: azimuth
/// k*360/count degrees, z = sin(elevation), xy-radius = cos(elevation).
pub fn circular_viewpoints(count: usize, elevation_deg: f64) -> Result<Vec<Viewpoint>> {
    if count < 3 {
        return Err(Error::config(
            "circular_viewpoints",
            format!("need at least 3 viewpoints, got {count}"),
        ));
    }
    let elev = elevation_deg.to_radians();
    let (z, r) = (elev.sin(), elev.cos());
    Ok((0..count)
        .map(|k| {
            let az = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            Viewpoint::new(r * az.cos(), r * az.sin(), z)
        })
        .collect())
}

/// Rescales every viewpoint onto the unit sphere.
pub fn normalize_viewpoints(points: &mut [Viewpoint]) {
    for p in points {
        let n = (p.coord[0].powi(2) + p.coord[1].powi(2) + p.coord[2].powi(2)).sqrt();
        if n > 0.0 {
            for c in p.coord.iter_mut() {
                *c /= n;
            }
        }
    }
}

/// [v_i, v_j, v_i - v_j, ||v_i - v_j||^2], length 10.
pub fn relation_vector(vi: &Viewpoint, vj: &Viewpoint) -> [f64; RELATION_DIM] {
    let d = [
        vi.coord[0] - vj.coord[0],
        vi.coord[1] - vj.coord[1],
        vi.coord[2] - vj.coord[2],
    ];
    [
        vi.coord[0],
        vi.coord[1],
        vi.coord[2],
        vj.coord[0],
        vj.coord[1],
        vj.coord[2],
        d[0],
        d[1],
        d[2],
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
    ]
}

/// Three affine layers (10 -> 10 -> 10 -> 1) with LeakyReLU between, shared
/// across all ordered viewpoint pairs.
#[derive(Debug, Clone)]
pub struct RelationMlp<T: Scalar> {
    pub l1: Affine<T>,
    pub l2: Affine<T>,
    pub l3: Affine<T>,
    pub slope: T,
}

impl<T: Scalar> RelationMlp<T> {
    pub fn new(slope: f64, rng: &mut Rng) -> Self {
        RelationMlp {
            l1: Affine::new(RELATION_DIM, RELATION_DIM, rng),
            l2: Affine::new(RELATION_DIM, RELATION_DIM, rng),
            l3: Affine::new(RELATION_DIM, 1, rng),
            slope: T::from_f64(slope),
        }
    }

    /// Scores every ordered pair, including i == j: an [N x N] matrix on the
    /// tape with gradients flowing back to the MLP parameters.
    pub fn scores(&self, tape: &mut Tape<T>, points: &[Viewpoint]) -> Result<Var> {
        let n = points.len();
        if n < 2 {
            return Err(Error::config(
                "learned_adjacency",
                format!("need at least 2 viewpoints, got {n}"),
            ));
        }
        let mut rel = Vec::with_capacity(n * n * RELATION_DIM);
        for vi in points {
            for vj in points {
                rel.extend(relation_vector(vi, vj).iter().map(|v| T::from_f64(*v)));
            }
        }
        let x = tape.constant(vec![n * n, RELATION_DIM], rel)?;
        let h = self.l1.forward(tape, x)?;
        let h = tape.leaky_relu(h, self.slope);
        let h = self.l2.forward(tape, h)?;
        let h = tape.leaky_relu(h, self.slope);
        let s = self.l3.forward(tape, h)?;
        tape.reshape(s, vec![n, n])
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p.extend(self.l3.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.l1.params_mut();
        p.extend(self.l2.params_mut());
        p.extend(self.l3.params_mut());
        p
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.l1.named(&format!("{prefix}.l1"));
        out.extend(self.l2.named(&format!("{prefix}.l2")));
        out.extend(self.l3.named(&format!("{prefix}.l3")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.l1.named_mut(&format!("{prefix}.l1"));
        out.extend(self.l2.named_mut(&format!("{prefix}.l2")));
        out.extend(self.l3.named_mut(&format!("{prefix}.l3")));
        out
    }
}

/// The `n` geometrically nearest neighbours of node `i` (excluding `i`),
/// ties broken toward the lower index; result sorted ascending by index.
pub fn knn_neighbors(points: &[Viewpoint], i: usize, n: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..points.len()).filter(|j| *j != i).collect();
    // Stable sort on distance keeps the lower index first among ties.
    others.sort_by(|a, b| {
        points[i]
            .distance(&points[*a])
            .partial_cmp(&points[i].distance(&points[*b]))
            .expect("finite distances")
    });
    let mut kept: Vec<usize> = others.into_iter().take(n).collect();
    kept.sort_unstable();
    kept
}

/// Retention mask for knn sparsification: per row, the n nearest neighbours
/// plus the diagonal self-loop.
pub fn knn_mask(points: &[Viewpoint], n_neighbors: usize) -> Result<Vec<bool>> {
    let n = points.len();
    if n_neighbors == 0 || n_neighbors > n.saturating_sub(1) {
        return Err(Error::config(
            "knn_sparsify",
            format!("n_neighbors must be in [1, {}], got {n_neighbors}", n - 1),
        ));
    }
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
        for j in knn_neighbors(points, i, n_neighbors) {
            mask[i * n + j] = true;
        }
    }
    Ok(mask)
}

/// Sparsifies a score matrix to the knn structure and row-normalizes the
/// retained entries with a softmax, so each row is a distribution over
/// min(n_neighbors + 1, N) nodes.
pub fn knn_sparsify<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    points: &[Viewpoint],
    n_neighbors: usize,
) -> Result<Var> {
    let mask = knn_mask(points, n_neighbors)?;
    tape.row_softmax_masked(scores, &mask)
}

/// Scores plus sparsified adjacency in one step.
pub fn build_adjacency<T: Scalar>(
    tape: &mut Tape<T>,
    mlp: &RelationMlp<T>,
    points: &[Viewpoint],
    n_neighbors: usize,
) -> Result<Var> {
    let scores = mlp.scores(tape, points)?;
    knn_sparsify(tape, scores, points, n_neighbors)
}

/// Materialized view graph: scores and row-stochastic adjacency for a fixed
/// layout and relation MLP. Used for inspection and tests; the training path
/// builds the same values directly on its tape.
#[derive(Debug, Clone)]
pub struct ViewGraph<T: Scalar> {
    pub viewpoints: Vec<Viewpoint>,
    pub scores: Tensor<T>,
    pub adjacency: Tensor<T>,
    pub n_neighbors: usize,
}

impl<T: Scalar> ViewGraph<T> {
    pub fn build(
        viewpoints: Vec<Viewpoint>,
        mlp: &RelationMlp<T>,
        n_neighbors: usize,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let s = mlp.scores(&mut tape, &viewpoints)?;
        let a = knn_sparsify(&mut tape, s, &viewpoints, n_neighbors)?;
        let n = viewpoints.len();
        Ok(ViewGraph {
            viewpoints,
            scores: Tensor::from_vec(vec![n, n], tape.value(s).to_vec())?,
            adjacency: Tensor::from_vec(vec![n, n], tape.value(a).to_vec())?,
            n_neighbors,
        })
    }
}

/// Writes a layout as `index,x,y,z` CSV.
pub fn viewpoints_to_csv(points: &[Viewpoint]) -> String {
    let mut out = String::from("index,x,y,z\n");
    for (i, p) in points.iter().enumerate() {
        writeln!(out, "{},{},{},{}", i, p.coord[0], p.coord[1], p.coord[2]).expect("string write");
    }
    out
}

pub fn viewpoints_from_csv(text: &str) -> Result<Vec<Viewpoint>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "index,x,y,z" {
                return Err(Error::config(
                    "viewpoints_csv",
                    format!("unexpected header {line:?}"),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::config(
                "viewpoints_csv",
                format!("line {lineno}: expected 4 fields, got {}", fields.len()),
            ));
        }
        let idx: usize = fields[0]
            .trim()
            .parse()
            .map_err(|e| Error::config("viewpoints_csv", format!("line {lineno}: {e}")))?;
        if idx != rows.len() {
            return Err(Error::config(
                "viewpoints_csv",
                format!("line {lineno}: index {idx} out of order"),
            ));
        }
        let mut coords = [0.0; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            coords[k] = f
                .trim()
                .parse()
                .map_err(|e| Error::config("viewpoints_csv", format!("line {lineno}: {e}")))?;
        }
        rows.push(Viewpoint {
            coord: coords,
        });
    }
    Ok(rows)
}

pub fn write_viewpoints_csv(path: &Path, points: &[Viewpoint]) -> Result<()> {
    std::fs::write(path, viewpoints_to_csv(points))?;
    Ok(())
}

pub fn read_viewpoints_csv(path: &Path) -> Result<Vec<Viewpoint>> {
    viewpoints_from_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_indexing_convention() {
        let c = cube_viewpoints();
        assert_eq!(c.len(), 8);
        assert_eq!(c[0].coord, [-1.0, -1.0, -1.0]);
        assert_eq!(c[7].coord, [1.0, 1.0, 1.0]);
        assert_eq!(c[4].coord, [1.0, -1.0, -1.0]); // b_x = 1
        assert_eq!(c[2].coord, [-1.0, 1.0, -1.0]); // b_y = 1
        assert_eq!(c[1].coord, [-1.0, -1.0, 1.0]); // b_z = 1
    }

    #[test]
    fn cube_pairwise_distances() {
        let c = cube_viewpoints();
        let allowed = [2.0, 2.0 * 2f64.sqrt(), 2.0 * 3f64.sqrt()];
        for i in 0..8 {
            let mut edge_neighbors = 0;
            for j in 0..8 {
                if i == j {
                    continue;
                }
                let d = c[i].distance(&c[j]);
                assert!(
                    allowed.iter().any(|a| (d - a).abs() < 1e-12),
                    "unexpected distance {d}"
                );
                if (d - 2.0).abs() < 1e-12 {
                    edge_neighbors += 1;
                }
            }
            assert_eq!(edge_neighbors, 3, "vertex {i}");
        }
    }

    #[test]
    fn circular_layout_geometry() {
        let ring = circular_viewpoints(12, 30.0).unwrap();
        assert_eq!(ring.len(), 12);
        let first = ring[0];
        assert!((first.coord[0] - 30f64.to_radians().cos()).abs() < 1e-12);
        assert!((first.coord[0] - 0.8660254037844387).abs() < 1e-12);
        assert!(first.coord[1].abs() < 1e-12);
        assert!((first.coord[2] - 0.5).abs() < 1e-12);
        for p in &ring {
            assert!((p.coord[2] - 0.5).abs() < 1e-12);
            let norm = (p.coord[0].powi(2) + p.coord[1].powi(2) + p.coord[2].powi(2)).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        // ring symmetry: identical nearest-neighbour distance everywhere
        let nn_dist = |i: usize| {
            (0..12)
                .filter(|j| *j != i)
                .map(|j| ring[i].distance(&ring[j]))
                .fold(f64::INFINITY, f64::min)
        };
        let d0 = nn_dist(0);
        for i in 1..12 {
            assert!((nn_dist(i) - d0).abs() < 1e-12);
        }
        assert!(circular_viewpoints(2, 30.0).is_err());
    }

    #[test]
    fn relation_vector_cases() {
        let v = Viewpoint::new(1.0, 1.0, 1.0);
        let g = relation_vector(&v, &v);
        assert_eq!(g, [1., 1., 1., 1., 1., 1., 0., 0., 0., 0.]);

        let a = Viewpoint::new(0.0, 0.0, 0.0);
        let b = Viewpoint::new(1.0, 0.0, 0.0);
        let g = relation_vector(&a, &b);
        assert_eq!(g, [0., 0., 0., 1., 0., 0., -1., 0., 0., 1.]);
    }

    #[test]
    fn relation_vector_last_component_is_squared_norm() {
        let mut rng = Rng::seed(11);
        for _ in 0..100 {
            let a = Viewpoint::new(rng.uniform(-2., 2.), rng.uniform(-2., 2.), rng.uniform(-2., 2.));
            let b = Viewpoint::new(rng.uniform(-2., 2.), rng.uniform(-2., 2.), rng.uniform(-2., 2.));
            let g = relation_vector(&a, &b);
            let sq = g[6] * g[6] + g[7] * g[7] + g[8] * g[8];
            assert!((g[9] - sq).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_mlp_gives_constant_scores() {
        let mut rng = Rng::seed(5);
        let mut mlp = RelationMlp::<f64>::new(0.01, &mut rng);
        let zero = vec![0.0; mlp.l3.weight.numel()];
        mlp.l3.weight.set_data(&zero).unwrap();
        mlp.l3.bias.set_data(&[0.75]).unwrap();
        let mut tape = Tape::new();
        let s = mlp.scores(&mut tape, &cube_viewpoints()).unwrap();
        assert!(tape.value(s).iter().all(|v| (*v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn scores_generally_asymmetric() {
        let mut rng = Rng::seed(17);
        let mlp = RelationMlp::<f64>::new(0.01, &mut rng);
        let mut tape = Tape::new();
        let s = mlp.scores(&mut tape, &cube_viewpoints()).unwrap();
        let v = tape.value(s);
        let mut asym = 0;
        for i in 0..8 {
            for j in 0..8 {
                if (v[i * 8 + j] - v[j * 8 + i]).abs() > 1e-9 {
                    asym += 1;
                }
            }
        }
        assert!(asym > 0, "scores were exactly symmetric");
    }

    #[test]
    fn permuting_viewpoints_permutes_scores() {
        let mut rng = Rng::seed(23);
        let mlp = RelationMlp::<f64>::new(0.01, &mut rng);
        let base = cube_viewpoints();
        let mut tape = Tape::new();
        let s = mlp.scores(&mut tape, &base).unwrap();
        let sv = tape.value(s).to_vec();

        let mut perm: Vec<usize> = (0..8).collect();
        let mut prng = Rng::seed(99);
        for _ in 0..10 {
            prng.shuffle(&mut perm);
            let permuted: Vec<Viewpoint> = perm.iter().map(|i| base[*i]).collect();
            let mut tape2 = Tape::new();
            let s2 = mlp.scores(&mut tape2, &permuted).unwrap();
            let sv2 = tape2.value(s2);
            for a in 0..8 {
                for b in 0..8 {
                    assert_eq!(
                        sv2[a * 8 + b], sv[perm[a] * 8 + perm[b]],
                        "rows/cols must permute together"
                    );
                }
            }
        }
    }

    #[test]
    fn cube_knn3_keeps_edge_adjacent_vertices() {
        let c = cube_viewpoints();
        // brute-force oracle: sort all others by distance, take 3
        for i in 0..8 {
            let mut pairs: Vec<(f64, usize)> = (0..8)
                .filter(|j| *j != i)
                .map(|j| (c[i].distance(&c[j]), j))
                .collect();
            pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut expected: Vec<usize> = pairs[..3].iter().map(|p| p.1).collect();
            expected.sort_unstable();
            assert_eq!(knn_neighbors(&c, i, 3), expected);
            // for the cube these are exactly the distance-2 vertices
            for &j in &expected {
                assert!((c[i].distance(&c[j]) - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparsified_rows_are_distributions() {
        let mut rng = Rng::seed(31);
        let mlp = RelationMlp::<f64>::new(0.01, &mut rng);
        let points = cube_viewpoints();
        let graph = ViewGraph::build(points, &mlp, 3).unwrap();
        let a = graph.adjacency.data();
        for i in 0..8 {
            let row = &a[i * 8..(i + 1) * 8];
            let nnz = row.iter().filter(|v| **v != 0.0).count();
            assert_eq!(nnz, 4, "3 neighbours + self");
            assert!(row[i] > 0.0, "self-loop retained");
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn full_graph_when_n_neighbors_is_max() {
        let mut rng = Rng::seed(37);
        let mlp = RelationMlp::<f64>::new(0.01, &mut rng);
        let graph = ViewGraph::build(cube_viewpoints(), &mlp, 7).unwrap();
        let a = graph.adjacency.data();
        assert!(a.iter().all(|v| *v > 0.0), "all entries retained");
        // rows are plain softmax of score rows
        let s = graph.scores.data();
        for i in 0..8 {
            let row = &s[i * 8..(i + 1) * 8];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..8 {
                let expect = ((row[j] - mx).exp()) / denom;
                assert!((a[i * 8 + j] - expect).abs() < 1e-12);
            }
        }
        assert!(ViewGraph::build(cube_viewpoints(), &mlp, 8).is_err());
        assert!(ViewGraph::build(cube_viewpoints(), &mlp, 0).is_err());
    }

    #[test]
    fn knn_tie_break_prefers_lower_index() {
        // four points on a line: 1 and 2 are equidistant from 0's right side
        let pts = vec![
            Viewpoint::new(0.0, 0.0, 0.0),
            Viewpoint::new(1.0, 0.0, 0.0),
            Viewpoint::new(-1.0, 0.0, 0.0),
            Viewpoint::new(3.0, 0.0, 0.0),
        ];
        // neighbours of 0 with n=1: points 1 and 2 tie at distance 1 -> pick 1
        assert_eq!(knn_neighbors(&pts, 0, 1), vec![1]);
    }

    #[test]
    fn csv_round_trip() {
        let pts = circular_viewpoints(5, 30.0).unwrap();
        let text = viewpoints_to_csv(&pts);
        let back = viewpoints_from_csv(&text).unwrap();
        assert_eq!(back.len(), pts.len());
        for (a, b) in back.iter().zip(&pts) {
            assert_eq!(a.coord, b.coord);
        }
        assert!(viewpoints_from_csv("x,y,z\n").is_err());
    }
}

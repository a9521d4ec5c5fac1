//! File schemas shared with the batch front end.
//!
//! Areal supports travel as CSV (`id,centroid_x,centroid_y,area` plus an
//! optional `id_a,id_b` adjacency list and an `id,x,y` sample cloud);
//! observations as `support_type,support_ref,z,var_z` rows where point
//! references index an `id,x,y` points file and areal references name fine
//! units (several joined by `|`). Posterior draws persist as a columnar CSV
//! bundle, one file per parameter block, with a JSON manifest recording the
//! chain settings. All floats round-trip bitwise.

use crate::error::{CageError, Result};
use crate::geometry::{Adjacency, ArealUnit, FineSupport, Partition, PointSite, Rect, SupportGeometry};
use crate::inference::{Observation, ObsSupport, PosteriorDraws};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

fn bad_row(path: &Path, line: usize, what: &str) -> CageError {
    CageError::InvalidInput(format!("{}:{line}: {what}", path.display()))
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CageError::InvalidInput(format!("{}: {e}", path.display())))
}

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------- supports

#[derive(Debug, Serialize, Deserialize)]
struct SupportRow {
    id: usize,
    centroid_x: f64,
    centroid_y: f64,
    area: f64,
}

pub fn write_support_csv(path: &Path, fine: &FineSupport) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for u in &fine.units {
            w.serialize(SupportRow {
                id: u.id,
                centroid_x: u.centroid[0],
                centroid_y: u.centroid[1],
                area: u.area,
            })
            .map_err(|e| CageError::InvalidInput(e.to_string()))?;
        }
        w.flush()?;
    }
    write_atomic(path, &out)
}

pub fn write_adjacency_csv(path: &Path, fine: &FineSupport) -> Result<()> {
    let mut out = Vec::from("id_a,id_b\n");
    for (a, b) in fine.adjacency.pairs() {
        out.extend_from_slice(format!("{a},{b}\n").as_bytes());
    }
    write_atomic(path, &out)
}

pub fn write_samples_csv(path: &Path, fine: &FineSupport) -> Result<()> {
    let mut out = Vec::from("id,x,y\n");
    for u in &fine.units {
        for s in &u.samples {
            out.extend_from_slice(format!("{},{},{}\n", u.id, s.coords[0], s.coords[1]).as_bytes());
        }
    }
    write_atomic(path, &out)
}

/// Reads a fine support from its CSV parts. The support is irregular (no
/// grid geometry), so point observations cannot be located on it.
pub fn read_support_csv(
    support_path: &Path,
    adjacency_path: Option<&Path>,
    samples_path: &Path,
) -> Result<FineSupport> {
    let mut rows: Vec<SupportRow> = Vec::new();
    let mut rdr = open_reader(support_path)?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: SupportRow = rec.map_err(|e| bad_row(support_path, i + 2, &e.to_string()))?;
        rows.push(row);
    }
    rows.sort_by_key(|r| r.id);
    let n = rows.len();
    for (idx, r) in rows.iter().enumerate() {
        if r.id != idx {
            return Err(CageError::InvalidInput(format!(
                "{}: unit ids must cover 0..{} exactly; missing or duplicate id near {}",
                support_path.display(),
                n - 1,
                r.id
            )));
        }
    }

    // sample clouds, grouped by unit id
    let mut clouds: Vec<Vec<PointSite>> = vec![Vec::new(); n];
    let mut rdr = open_reader(samples_path)?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (id, x, y): (usize, f64, f64) =
            rec.map_err(|e| bad_row(samples_path, i + 2, &e.to_string()))?;
        if id >= n {
            return Err(bad_row(samples_path, i + 2, &format!("unit id {id} out of range")));
        }
        clouds[id].push(PointSite { coords: vec![x, y] });
    }

    let adjacency = match adjacency_path {
        Some(p) => {
            let mut pairs = Vec::new();
            let mut rdr = open_reader(p)?;
            for (i, rec) in rdr.deserialize().enumerate() {
                let (a, b): (usize, usize) = rec.map_err(|e| bad_row(p, i + 2, &e.to_string()))?;
                pairs.push((a, b));
            }
            Adjacency::from_pairs(n, &pairs)?
        }
        None => Adjacency::empty(n),
    };

    let units: Vec<ArealUnit> = rows
        .into_iter()
        .zip(clouds)
        .map(|(r, samples)| ArealUnit {
            id: r.id,
            centroid: vec![r.centroid_x, r.centroid_y],
            area: r.area,
            samples,
        })
        .collect();

    // bounding box from the clouds
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for u in &units {
        for s in &u.samples {
            for d in 0..2 {
                min[d] = min[d].min(s.coords[d]);
                max[d] = max[d].max(s.coords[d]);
            }
        }
    }
    let bbox = Rect::new(min.to_vec(), max.to_vec())
        .unwrap_or_else(|_| Rect::unit_square());
    FineSupport::from_parts(units, adjacency, bbox, SupportGeometry::Irregular)
}

// ------------------------------------------------------------------ points

pub fn write_points_csv(path: &Path, points: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut out = Vec::from("id,x,y\n");
    for (id, p) in points {
        out.extend_from_slice(format!("{},{},{}\n", id, p[0], p[1]).as_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_points_csv(path: &Path) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut map = BTreeMap::new();
    let mut rdr = open_reader(path)?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (id, x, y): (usize, f64, f64) = rec.map_err(|e| bad_row(path, i + 2, &e.to_string()))?;
        map.insert(id, vec![x, y]);
    }
    Ok(map)
}

/// Knot CSV shares the points schema.
pub fn read_knots_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    Ok(read_points_csv(path)?.into_values().collect())
}

// ------------------------------------------------------------ observations

/// `support_type` is `point` or `areal`; `support_ref` indexes the points
/// file for points, or lists fine-unit ids joined by `|` for areal data.
pub fn write_obs_csv(path: &Path, obs: &[Observation], points_out: &Path) -> Result<()> {
    let mut rows = Vec::from("support_type,support_ref,z,var_z\n");
    let mut points = Vec::new();
    for o in obs {
        match &o.support {
            ObsSupport::Point(p) => {
                let id = points.len();
                points.push((id, p.clone()));
                rows.extend_from_slice(format!("point,{},{},{}\n", id, o.z, o.var_z).as_bytes());
            }
            ObsSupport::Units(ids) => {
                let joined =
                    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|");
                rows.extend_from_slice(format!("areal,{},{},{}\n", joined, o.z, o.var_z).as_bytes());
            }
        }
    }
    write_atomic(path, &rows)?;
    write_points_csv(points_out, &points)
}

/// Optional delta-method transform onto the log-odds scale for proportion
/// data: `z -> ln(z/(1-z))`, `var -> var / (z(1-z))²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestTransform {
    None,
    LogitDelta,
}

pub fn read_obs_csv(
    path: &Path,
    points: Option<&BTreeMap<usize, Vec<f64>>>,
    transform: IngestTransform,
) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    let mut rdr = open_reader(path)?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (kind, sref, mut z, mut var_z): (String, String, f64, f64) =
            rec.map_err(|e| bad_row(path, i + 2, &e.to_string()))?;
        if transform == IngestTransform::LogitDelta {
            if !(z > 0.0 && z < 1.0) {
                return Err(bad_row(path, i + 2, &format!("logit transform needs z in (0,1), got {z}")));
            }
            let dz = 1.0 / (z * (1.0 - z));
            var_z *= dz * dz;
            z = (z / (1.0 - z)).ln();
        }
        let support = match kind.as_str() {
            "point" => {
                let id: usize = sref
                    .parse()
                    .map_err(|_| bad_row(path, i + 2, &format!("bad point id {sref}")))?;
                let pts = points.ok_or_else(|| {
                    bad_row(path, i + 2, "point observations need a points file")
                })?;
                let coords = pts
                    .get(&id)
                    .ok_or_else(|| bad_row(path, i + 2, &format!("unknown point id {id}")))?;
                ObsSupport::Point(coords.clone())
            }
            "areal" => {
                let ids: Vec<usize> = sref
                    .split('|')
                    .map(|s| {
                        s.parse()
                            .map_err(|_| bad_row(path, i + 2, &format!("bad unit id {s}")))
                    })
                    .collect::<Result<_>>()?;
                ObsSupport::Units(ids)
            }
            other => return Err(bad_row(path, i + 2, &format!("unknown support type {other}"))),
        };
        out.push(Observation { support, z, var_z });
    }
    Ok(out)
}

// ------------------------------------------------------------- dense matrix

/// Headerless dense CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        out.extend_from_slice(row.join(",").as_bytes());
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| bad_row(path, i + 1, &format!("bad number {v}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CageError::InvalidInput(format!("{}: empty matrix", path.display())));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CageError::InvalidInput(format!("{}: ragged matrix", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

// ----------------------------------------------------------------- reports

pub fn write_cage_report_csv(path: &Path, report: &crate::cage::CageReport, with_sqrt: bool) -> Result<()> {
    let mut out = Vec::from(if with_sqrt {
        "region_id,value,sqrt_value\n"
    } else {
        "region_id,value\n"
    });
    for (id, v) in &report.per_region {
        if with_sqrt {
            out.extend_from_slice(format!("{},{},{}\n", id, v, v.max(0.0).sqrt()).as_bytes());
        } else {
            out.extend_from_slice(format!("{},{}\n", id, v).as_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn write_membership_csv(path: &Path, partition: &Partition) -> Result<()> {
    let mut out = Vec::from("unit_id,region_id\n");
    for (unit, label) in partition.assignment().iter().enumerate() {
        out.extend_from_slice(format!("{unit},{label}\n").as_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_membership_csv(path: &Path) -> Result<Partition> {
    let mut rdr = open_reader(path)?;
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: (usize, usize) = rec.map_err(|e| bad_row(path, i + 2, &e.to_string()))?;
        rows.push(row);
    }
    rows.sort_by_key(|r| r.0);
    for (idx, (unit, _)) in rows.iter().enumerate() {
        if *unit != idx {
            return Err(CageError::InvalidInput(format!(
                "{}: unit ids must cover 0..{} exactly",
                path.display(),
                rows.len() - 1
            )));
        }
    }
    let labels: Vec<usize> = rows.into_iter().map(|(_, l)| l).collect();
    Partition::new(labels)
}

// ------------------------------------------------------------- draw bundle

/// Chain settings recorded next to a draws bundle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DrawsManifest {
    pub rank: usize,
    pub n_units: usize,
    pub draws: usize,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub prior: String,
    /// Digest of the producing configuration; consumers refuse bundles whose
    /// digest does not match their own inputs.
    pub config_digest: String,
}

fn write_indexed_series(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut out = Vec::from(format!("draw,{header}\n"));
    for (i, v) in values.iter().enumerate() {
        out.extend_from_slice(format!("{i},{v}\n").as_bytes());
    }
    write_atomic(path, &out)
}

fn write_vector_block(path: &Path, vectors: &[DVector<f64>]) -> Result<()> {
    let mut out = Vec::from("draw,index,value\n");
    for (m, v) in vectors.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            out.extend_from_slice(format!("{m},{j},{x}\n").as_bytes());
        }
    }
    write_atomic(path, &out)
}

fn read_vector_block(path: &Path, m: usize, dim: usize) -> Result<Vec<DVector<f64>>> {
    let mut vecs = vec![DVector::zeros(dim); m];
    let mut rdr = open_reader(path)?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (draw, index, value): (usize, usize, f64) =
            rec.map_err(|e| bad_row(path, i + 2, &e.to_string()))?;
        if draw >= m || index >= dim {
            return Err(bad_row(path, i + 2, "index out of range"));
        }
        vecs[draw][index] = value;
    }
    Ok(vecs)
}

/// Persists a draws bundle into `dir`: manifest plus one CSV per block.
pub fn write_draws(dir: &Path, draws: &PosteriorDraws, manifest: &DrawsManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| CageError::InvalidInput(e.to_string()))?;
    write_atomic(&dir.join("manifest.json"), &manifest_json)?;
    write_indexed_series(&dir.join("mu.csv"), "mu", &draws.mu)?;
    write_indexed_series(&dir.join("sigma_xi_sq.csv"), "sigma_xi_sq", &draws.sigma_xi_sq)?;
    write_vector_block(&dir.join("eta.csv"), &draws.eta)?;
    write_vector_block(&dir.join("xi.csv"), &draws.xi)?;
    write_vector_block(&dir.join("y_b.csv"), &draws.y_b)?;
    let mut out = Vec::from("draw,row,col,value\n");
    for (m, q) in draws.q.iter().enumerate() {
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                out.extend_from_slice(format!("{m},{i},{j},{}\n", q[(i, j)]).as_bytes());
            }
        }
    }
    write_atomic(&dir.join("q.csv"), &out)?;
    Ok(())
}

pub fn read_draws_manifest(dir: &Path) -> Result<DrawsManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| CageError::InvalidInput(format!("manifest: {e}")))
}

pub fn read_draws(dir: &Path) -> Result<(PosteriorDraws, DrawsManifest)> {
    let manifest = read_draws_manifest(dir)?;
    let m = manifest.draws;
    let r = manifest.rank;
    let n_b = manifest.n_units;

    let read_series = |name: &str| -> Result<Vec<f64>> {
        let path = dir.join(name);
        let mut vals = vec![0.0; m];
        let mut rdr = open_reader(&path)?;
        for (i, rec) in rdr.deserialize().enumerate() {
            let (draw, value): (usize, f64) =
                rec.map_err(|e| bad_row(&path, i + 2, &e.to_string()))?;
            if draw >= m {
                return Err(bad_row(&path, i + 2, "draw index out of range"));
            }
            vals[draw] = value;
        }
        Ok(vals)
    };

    let mu = read_series("mu.csv")?;
    let sigma_xi_sq = read_series("sigma_xi_sq.csv")?;
    let eta = read_vector_block(&dir.join("eta.csv"), m, r)?;
    let xi = read_vector_block(&dir.join("xi.csv"), m, n_b)?;
    let y_b = read_vector_block(&dir.join("y_b.csv"), m, n_b)?;

    let mut q = vec![DMatrix::zeros(r, r); m];
    let path = dir.join("q.csv");
    let mut rdr = open_reader(&path)?;
    for (i, rec) in rdr.deserialize().enumerate() {
        let (draw, row, col, value): (usize, usize, usize, f64) =
            rec.map_err(|e| bad_row(&path, i + 2, &e.to_string()))?;
        if draw >= m || row >= r || col >= r {
            return Err(bad_row(&path, i + 2, "index out of range"));
        }
        q[draw][(row, col)] = value;
    }

    Ok((PosteriorDraws { m, mu, eta, xi, sigma_xi_sq, q, y_b }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cage-io-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn support_round_trip() {
        let dir = tmpdir("support");
        let fine = build_grid(3, 2, &Rect::unit_square(), 5, 7).unwrap();
        write_support_csv(&dir.join("support.csv"), &fine).unwrap();
        write_adjacency_csv(&dir.join("adjacency.csv"), &fine).unwrap();
        write_samples_csv(&dir.join("samples.csv"), &fine).unwrap();
        let back = read_support_csv(
            &dir.join("support.csv"),
            Some(&dir.join("adjacency.csv")),
            &dir.join("samples.csv"),
        )
        .unwrap();
        assert_eq!(back.n_units(), 6);
        for (a, b) in back.units.iter().zip(&fine.units) {
            assert_eq!(a.centroid, b.centroid);
            assert_eq!(a.area.to_bits(), b.area.to_bits());
            assert_eq!(a.samples.len(), b.samples.len());
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.coords, y.coords);
            }
        }
        assert_eq!(back.adjacency.pairs(), fine.adjacency.pairs());
    }

    #[test]
    fn obs_round_trip_and_logit_transform() {
        let dir = tmpdir("obs");
        let obs = vec![
            Observation { support: ObsSupport::Point(vec![0.25, 0.75]), z: 1.5, var_z: 0.5 },
            Observation { support: ObsSupport::Units(vec![2]), z: -0.25, var_z: 0.25 },
            Observation { support: ObsSupport::Units(vec![0, 3]), z: 0.5, var_z: 1.0 },
        ];
        write_obs_csv(&dir.join("obs.csv"), &obs, &dir.join("points.csv")).unwrap();
        let points = read_points_csv(&dir.join("points.csv")).unwrap();
        let back = read_obs_csv(&dir.join("obs.csv"), Some(&points), IngestTransform::None).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].z.to_bits(), obs[0].z.to_bits());
        match &back[2].support {
            ObsSupport::Units(ids) => assert_eq!(ids, &vec![0, 3]),
            _ => panic!("expected areal support"),
        }

        // logit delta method on a proportion-valued row
        std::fs::write(
            dir.join("prop.csv"),
            "support_type,support_ref,z,var_z\nareal,0,0.2,0.01\n",
        )
        .unwrap();
        let t = read_obs_csv(&dir.join("prop.csv"), None, IngestTransform::LogitDelta).unwrap();
        approx::assert_abs_diff_eq!(t[0].z, (0.2f64 / 0.8).ln(), epsilon = 1e-15);
        approx::assert_abs_diff_eq!(t[0].var_z, 0.01 / (0.2f64 * 0.8).powi(2), epsilon = 1e-12);
    }

    #[test]
    fn draws_bundle_round_trips_bitwise() {
        let dir = tmpdir("draws");
        let mut rng = crate::rng::stream(3, &[]);
        let r = 3;
        let n_b = 4;
        let m = 5;
        let draws = PosteriorDraws {
            m,
            mu: (0..m).map(|_| rand::Rng::random::<f64>(&mut rng)).collect(),
            eta: (0..m)
                .map(|_| DVector::from_fn(r, |_, _| rand::Rng::random::<f64>(&mut rng) * 3.0 - 1.5))
                .collect(),
            xi: (0..m)
                .map(|_| DVector::from_fn(n_b, |_, _| rand::Rng::random::<f64>(&mut rng)))
                .collect(),
            sigma_xi_sq: (0..m).map(|_| rand::Rng::random::<f64>(&mut rng) + 0.1).collect(),
            q: (0..m)
                .map(|_| {
                    let a = DMatrix::from_fn(r, r, |_, _| rand::Rng::random::<f64>(&mut rng));
                    &a * a.transpose()
                })
                .collect(),
            y_b: (0..m)
                .map(|_| DVector::from_fn(n_b, |_, _| rand::Rng::random::<f64>(&mut rng) * 7.0))
                .collect(),
        };
        let manifest = DrawsManifest {
            rank: r,
            n_units: n_b,
            draws: m,
            iters: 50,
            burn_in: 10,
            thin: 8,
            seed: 3,
            prior: "inverse_wishart".into(),
            config_digest: "test".into(),
        };
        write_draws(&dir, &draws, &manifest).unwrap();
        let (back, back_manifest) = read_draws(&dir).unwrap();
        assert_eq!(back_manifest, manifest);
        assert_eq!(back.m, m);
        for i in 0..m {
            assert_eq!(back.mu[i].to_bits(), draws.mu[i].to_bits());
            assert_eq!(back.sigma_xi_sq[i].to_bits(), draws.sigma_xi_sq[i].to_bits());
            assert_eq!(back.eta[i], draws.eta[i]);
            assert_eq!(back.xi[i], draws.xi[i]);
            assert_eq!(back.y_b[i], draws.y_b[i]);
            assert_eq!(back.q[i], draws.q[i]);
        }
    }

    #[test]
    fn matrix_and_membership_round_trip() {
        let dir = tmpdir("matrix");
        let m = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 / 7.0);
        write_matrix_csv(&dir.join("w.csv"), &m).unwrap();
        let back = read_matrix_csv(&dir.join("w.csv")).unwrap();
        assert_eq!(back, m);

        let p = Partition::from_labels(&[0, 1, 0, 2, 1]);
        write_membership_csv(&dir.join("regions.csv"), &p).unwrap();
        let back = read_membership_csv(&dir.join("regions.csv")).unwrap();
        assert_eq!(back.assignment(), p.assignment());
    }
}

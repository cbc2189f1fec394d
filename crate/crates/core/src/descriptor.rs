//! Covariance-descriptor streams, the PSD projection pipeline, and the
//! hybrid-frame parametrisation with its backward maps.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::{psd_project, spectral_floor, unvech, vech, FlooredPsd, SymMatrix};
use crate::path::{fmt_f64, CoarsePath};

/// Descriptor stream of one path; entry `k` belongs to coarse index
/// `first_index + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorPath {
    pub first_index: usize,
    pub times: Vec<f64>,
    pub descriptors: Vec<SymMatrix>,
    pub packed: Vec<Vec<f64>>,
}

impl DescriptorPath {
    pub fn new(first_index: usize, dt: f64, descriptors: Vec<SymMatrix>) -> Self {
        let times = (0..descriptors.len())
            .map(|k| (first_index + k) as f64 * dt)
            .collect();
        let packed = descriptors.iter().map(vech).collect();
        DescriptorPath {
            first_index,
            times,
            descriptors,
            packed,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn at(&self, index: usize) -> Option<&SymMatrix> {
        index
            .checked_sub(self.first_index)
            .and_then(|k| self.descriptors.get(k))
    }
}

/// `M_t = (1/(t·dt))·Σ_{i≤t} Δζ_i Δζ_iᵀ` for `t ≥ 1`, where `Δζ_i` is the
/// increment ending at index `i`.
pub fn cumulative_avg_cov(path: &CoarsePath, dt: f64) -> Result<DescriptorPath> {
    if path.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: path.len(),
        });
    }
    let d = path.dim();
    let mut acc = vec![0.0; d * d];
    let mut out = Vec::with_capacity(path.len() - 1);
    for (t, inc) in path.increments().iter().enumerate() {
        for a in 0..d {
            for b in 0..d {
                acc[a * d + b] += inc[a] * inc[b];
            }
        }
        let s = 1.0 / ((t + 1) as f64 * dt);
        out.push(SymMatrix::from_fn(d, |a, b| acc[a * d + b] * s));
    }
    Ok(DescriptorPath::new(1, dt, out))
}

/// PSD projection for storage and its spectral floor for the reference.
pub fn project_descriptor(raw: &SymMatrix, eps: f64) -> (SymMatrix, FlooredPsd) {
    let psd = psd_project(raw);
    let floored = spectral_floor(&psd, eps);
    (psd, floored)
}

/// Floored reference from a generated vech row.
pub fn unvech_floor(row: &[f64], eps: f64) -> Result<FlooredPsd> {
    Ok(project_descriptor(&unvech(row)?, eps).1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridFrame {
    pub direction: Vec<f64>,
    pub scale_primary: f64,
    pub scale_secondary: f64,
}

fn canonical_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

pub fn hybrid_frame_encode(cum: &SymMatrix, x_variance: f64) -> Result<HybridFrame> {
    if !(x_variance > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let n = cum.scale(1.0 / x_variance);
    let eig = n.eig();
    let d = n.dim();
    let mut direction: Vec<f64> = eig.vectors.column(d - 1).iter().copied().collect();
    canonical_sign(&mut direction);
    let secondary = if d >= 2 { eig.values[d - 2].max(0.0) } else { 0.0 };
    Ok(HybridFrame {
        direction,
        scale_primary: eig.values[d - 1].max(0.0),
        scale_secondary: secondary,
    })
}

pub fn hybrid_frame_decode(hf: &HybridFrame) -> Result<SymMatrix> {
    let u = &hf.direction;
    let mut m = SymMatrix::outer(u).scale(hf.scale_primary);
    if hf.scale_secondary != 0.0 {
        if u.len() != 2 {
            return Err(Error::Unsupported(
                "secondary hybrid-frame mass is defined for 2-d states only".into(),
            ));
        }
        m = m.add(&SymMatrix::outer(&[-u[1], u[0]]).scale(hf.scale_secondary));
    }
    Ok(m)
}

impl HybridFrame {
    /// `(direction…, scale_primary, scale_secondary)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.direction.clone();
        v.push(self.scale_primary);
        v.push(self.scale_secondary);
        v
    }

    /// Inverse of `to_vec` for generated rows: renormalises the direction,
    /// restores the sign convention and clamps the scales at zero.
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::BadLength(v.len()));
        }
        let d = v.len() - 2;
        let mut direction = v[..d].to_vec();
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegeneratePath("hybrid-frame direction vanished"));
        }
        for x in direction.iter_mut() {
            *x /= norm;
        }
        canonical_sign(&mut direction);
        Ok(HybridFrame {
            direction,
            scale_primary: v[d].max(0.0),
            scale_secondary: v[d + 1].max(0.0),
        })
    }
}

/// Rank-one reference on vech space picked out by a hybrid-frame row:
/// `c·g gᵀ` with `g` the unit vech of the decoded ribbon, then floored.
pub fn ribbon_reference(frame_row: &[f64], c: f64, eps: f64) -> Result<FlooredPsd> {
    let ribbon = hybrid_frame_decode(&HybridFrame::from_vec(frame_row)?)?;
    let mut g = vech(&ribbon);
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Ok(spectral_floor(&SymMatrix::zeros(g.len()), eps));
    }
    for x in g.iter_mut() {
        *x /= n;
    }
    Ok(spectral_floor(&SymMatrix::outer(&g).scale(c), eps))
}

/// One descriptor row per `(path_id, coarse index)`.
pub fn write_descriptor_csv<W: Write>(mut w: W, paths: &[DescriptorPath]) -> Result<()> {
    let width = paths.iter().find_map(|p| p.packed.first()).map_or(0, Vec::len);
    let mut header = String::from("path_id,t_index");
    for k in 0..width {
        header.push_str(&format!(",v{k}"));
    }
    writeln!(w, "{header}")?;
    for (pid, p) in paths.iter().enumerate() {
        for (k, row) in p.packed.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{pid},{},{}", p.first_index + k, cells.join(","))?;
        }
    }
    Ok(())
}

pub fn read_descriptor_csv<R: BufRead>(r: R, dt: f64) -> Result<Vec<DescriptorPath>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| Error::Parse("short descriptor row".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(e.to_string()))
        };
        let pid = num(0)? as usize;
        let t = num(1)? as usize;
        let vals = (2..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        rows.push((pid, t, vals));
    }
    let mut out: Vec<DescriptorPath> = Vec::new();
    let mut current: Option<(usize, usize, Vec<SymMatrix>)> = None;
    for (pid, t, vals) in rows {
        let m = unvech(&vals)?;
        match &mut current {
            Some((p, first, ms)) if *p == pid => {
                if t != *first + ms.len() {
                    return Err(Error::Parse(format!("path {pid}: index {t} out of sequence")));
                }
                ms.push(m);
            }
            _ => {
                if let Some((_, first, ms)) = current.take() {
                    out.push(DescriptorPath::new(first, dt, ms));
                }
                if pid != out.len() {
                    return Err(Error::Parse(format!("path ids must be 0, 1, …; got {pid}")));
                }
                current = Some((pid, t, vec![m]));
            }
        }
    }
    if let Some((_, first, ms)) = current {
        out.push(DescriptorPath::new(first, dt, ms));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path(states: Vec<Vec<f64>>) -> CoarsePath {
        CoarsePath::new(1.0, states).unwrap()
    }

    #[test]
    fn cumulative_examples() {
        let v = [0.5, -1.0];
        let states: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 * v[0], k as f64 * v[1]]).collect();
        let dp = cumulative_avg_cov(&path(states), 1.0).unwrap();
        assert_eq!(dp.first_index, 1);
        for m in &dp.descriptors {
            assert!(m.dist_fro(&SymMatrix::outer(&v)) < 1e-14);
        }
        let dp = cumulative_avg_cov(&path(vec![vec![0.0], vec![1.0], vec![0.0]]), 1.0).unwrap();
        assert_eq!(dp.descriptors[0].get(0, 0), 1.0);
        assert_eq!(dp.descriptors[1].get(0, 0), 1.0);
        assert!(matches!(
            cumulative_avg_cov(&path(vec![vec![0.0]]), 1.0),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn cumulative_matches_direct_sum_and_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dt = 0.01;
        let states: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let dp = cumulative_avg_cov(&CoarsePath::new(dt, states.clone()).unwrap(), dt).unwrap();
        for t in 1..30 {
            let want = SymMatrix::from_fn(3, |a, b| {
                (1..=t)
                    .map(|i| (states[i][a] - states[i - 1][a]) * (states[i][b] - states[i - 1][b]))
                    .sum::<f64>()
                    / (t as f64 * dt)
            });
            assert!(dp.at(t).unwrap().dist_fro(&want) < 1e-12 * (1.0 + want.norm_fro()));
            assert_eq!(dp.packed[t - 1], vech(&dp.descriptors[t - 1]));
        }
        let mut future = states.clone();
        for s in future.iter_mut().skip(20) {
            s[1] += 5.0;
        }
        let dq = cumulative_avg_cov(&CoarsePath::new(dt, future).unwrap(), dt).unwrap();
        for t in 1..20 {
            assert_eq!(dp.at(t), dq.at(t));
        }
    }

    #[test]
    fn projection_examples() {
        let (psd, fl) = project_descriptor(&SymMatrix::diag(&[1.0, -0.5]), 0.01);
        assert!(psd.dist_fro(&SymMatrix::diag(&[1.0, 0.0])) < 1e-15);
        assert_eq!(fl.floored_eigs(), &[0.01, 1.0]);
        let p = SymMatrix::diag(&[2.0, 3.0]);
        assert!(project_descriptor(&p, 0.1).0.dist_fro(&p) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let m = SymMatrix::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let (psd, fl) = project_descriptor(&m, 0.05);
            assert!(fl.floored_eigs()[0] >= 0.05);
            assert!(psd_project(&psd).dist_fro(&psd) < 1e-12);
            assert!(psd.min_eig() >= -1e-10);
        }
    }

    #[test]
    fn hybrid_frame_examples() {
        let hf = hybrid_frame_encode(&SymMatrix::diag(&[4.0, 0.0]), 1.0).unwrap();
        assert_eq!(hf.direction, vec![1.0, 0.0]);
        assert_eq!((hf.scale_primary, hf.scale_secondary), (4.0, 0.0));
        let m = hybrid_frame_decode(&HybridFrame {
            direction: vec![1.0, 0.0],
            scale_primary: 4.0,
            scale_secondary: 0.0,
        })
        .unwrap();
        assert_eq!(m, SymMatrix::diag(&[4.0, 0.0]));
        assert!(matches!(
            hybrid_frame_encode(&SymMatrix::identity(2), 0.0),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn hybrid_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let s = rng.random_range(0.1..5.0);
            let m = SymMatrix::outer(&v).scale(s);
            let back = hybrid_frame_decode(&hybrid_frame_encode(&m, 1.0).unwrap()).unwrap();
            assert!(back.dist_fro(&m) <= 1e-10);

            let full = SymMatrix::from_fn(2, |a, b| if a == b { 2.0 } else { 0.3 })
                .add(&SymMatrix::outer(&v));
            let xv = rng.random_range(0.5..2.0);
            let hf = hybrid_frame_encode(&full, xv).unwrap();
            assert!(hf.direction.iter().find(|x| **x != 0.0).unwrap() > &0.0);
            let back = hybrid_frame_decode(&hf).unwrap();
            // 2-d: the top-two truncation is the whole normalised matrix.
            assert!(back.dist_fro(&full.scale(1.0 / xv)) < 1e-10);
            let again = HybridFrame::from_vec(&hf.to_vec()).unwrap();
            let gap: f64 = again.to_vec().iter().zip(hf.to_vec()).map(|(a, b)| (a - b).abs()).sum();
            assert!(gap < 1e-15);
        }
    }

    #[test]
    fn ribbon_reference_is_rank_one_on_vech_space() {
        let row = [0.6, 0.8, 2.0, 0.5];
        let r = ribbon_reference(&row, 3.0, 1e-4).unwrap();
        let e = r.floored_eigs();
        assert!((e[2] - 3.0).abs() < 1e-12);
        assert!((e[0] - 1e-4).abs() < 1e-15 && (e[1] - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn descriptor_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let paths: Vec<DescriptorPath> = (0..3)
            .map(|_| {
                let ms = (0..5)
                    .map(|_| SymMatrix::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                DescriptorPath::new(1, 0.1, ms)
            })
            .collect();
        let mut buf = Vec::new();
        write_descriptor_csv(&mut buf, &paths).unwrap();
        let back = read_descriptor_csv(&buf[..], 0.1).unwrap();
        assert_eq!(back, paths);
    }
}

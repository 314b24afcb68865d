//! Trajectory metrics and the on-disk formats: CSV logs and trajectories,
//! and a plain-text control-point dump.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::attitude::{quat_log_error, rotation_from_yaw_tilt, Attitude, Pose};
use crate::error::{Error, Result};
use crate::filter::Estimate;
use crate::models::MeasurementSample;
use crate::spline::{GroundSpline, KnotGrid, SplineDegree, SplineShape};
use crate::synth::TruthSample;

/// Timestamp tolerance for associating two trajectories.
pub const ASSOC_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

impl StampedPose {
    pub fn from_pose(t: f64, pose: &Pose) -> Result<Self> {
        Ok(Self {
            t,
            p: pose.p,
            q: pose.attitude().quaternion()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_m: f64,
    pub are_deg: f64,
    pub pairs: usize,
}

/// Pairs each estimate with the truth sample nearest in time, keeping pairs
/// within [`ASSOC_TOL`]. Both inputs must be sorted by time.
pub fn associate(est: &[StampedPose], truth: &[StampedPose]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0;
    for (i, e) in est.iter().enumerate() {
        while j + 1 < truth.len() && (truth[j + 1].t - e.t).abs() <= (truth[j].t - e.t).abs() {
            j += 1;
        }
        if truth.get(j).is_some_and(|g| (g.t - e.t).abs() <= ASSOC_TOL) {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Rigid transform `(R, t)` minimizing `sum |R a + t - b|^2`.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(Error::EmptyAssociation);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<Vector3<f64>>() / n;
    let mb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        cov += (y - mb) * (x - ma).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Ok((r, mb - r * ma))
}

/// Position RMSE and rotation RMSE (degrees) over associated pairs. With
/// `align`, the estimate is first rigidly aligned to the truth.
pub fn evaluate(est: &[StampedPose], truth: &[StampedPose], align: bool) -> Result<Metrics> {
    let pairs = associate(est, truth);
    if pairs.is_empty() {
        return Err(Error::EmptyAssociation);
    }
    let (r, t) = if align {
        let a: Vec<_> = pairs.iter().map(|&(i, _)| est[i].p).collect();
        let b: Vec<_> = pairs.iter().map(|&(_, j)| truth[j].p).collect();
        align_rigid(&a, &b)?
    } else {
        (Matrix3::identity(), Vector3::zeros())
    };
    let rq = UnitQuaternion::from_matrix(&r);
    let mut se_p = 0.0;
    let mut se_q = 0.0;
    for &(i, j) in &pairs {
        se_p += (r * est[i].p + t - truth[j].p).norm_squared();
        se_q += quat_log_error(&(rq * est[i].q), &truth[j].q).norm_squared();
    }
    let n = pairs.len() as f64;
    Ok(Metrics {
        ate_m: (se_p / n).sqrt(),
        are_deg: (se_q / n).sqrt().to_degrees(),
        pairs: pairs.len(),
    })
}

pub fn estimates_to_poses(est: &[Estimate]) -> Result<Vec<StampedPose>> {
    est.iter().map(|e| StampedPose::from_pose(e.t, &e.state.pose())).collect()
}

pub fn truth_to_poses(truth: &[TruthSample]) -> Result<Vec<StampedPose>> {
    truth.iter().map(|g| StampedPose::from_pose(g.t, &g.pose)).collect()
}

pub const LOG_HEADER: &[&str] = &["t", "ax", "ay", "az", "gx", "gy", "gz", "wl", "wr"];
pub const TRUTH_HEADER: &[&str] = &[
    "t", "px", "py", "pz", "yaw", "s1", "s2", "vx", "vy", "vz", "bax", "bay", "baz", "bgx", "bgy",
    "bgz",
];
pub const TRAJECTORY_HEADER: &[&str] = &["t", "px", "py", "pz", "yaw", "s1", "s2"];
pub const QUAT_HEADER: &[&str] = &["t", "px", "py", "pz", "qx", "qy", "qz", "qw"];

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        column,
        message: message.into(),
    }
}

/// Reads a numeric CSV whose first line must equal `header`. Rows must have
/// strictly increasing first column.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    CsvRows::open(path, header)?.collect()
}

/// Streaming reader over the rows of a numeric CSV; see [`read_csv`].
pub struct CsvRows<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    header: Vec<String>,
    line_no: usize,
    last_t: f64,
    failed: bool,
}

impl CsvRows<BufReader<File>> {
    pub fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        CsvRows::new(BufReader::new(file), path, header)
    }
}

impl<R: BufRead> CsvRows<R> {
    /// Checks the header line; the rows are parsed lazily.
    pub fn new(reader: R, path: &Path, header: &[&str]) -> Result<Self> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(parse_err(path, 1, 1, "empty file")),
        };
        let got: Vec<&str> = first.trim_end().split(',').map(str::trim).collect();
        let mut column = 1;
        for (i, want) in header.iter().enumerate() {
            match got.get(i) {
                Some(g) if g == want => column += g.len() + 1,
                Some(g) => {
                    return Err(parse_err(path, 1, column, format!("expected column `{want}`, found `{g}`")));
                }
                None => return Err(parse_err(path, 1, column, format!("missing column `{want}`"))),
            }
        }
        if got.len() > header.len() {
            return Err(parse_err(path, 1, column, format!("unexpected column `{}`", got[header.len()])));
        }
        Ok(Self {
            lines,
            path: path.to_path_buf(),
            header: header.iter().map(|h| h.to_string()).collect(),
            line_no: 1,
            last_t: f64::NEG_INFINITY,
            failed: false,
        })
    }

    fn parse_line(&mut self, line: &str) -> Result<Vec<f64>> {
        let (path, line_no) = (self.path.as_path(), self.line_no);
        let width = self.header.len();
        let mut row = Vec::with_capacity(width);
        let mut column = 1;
        for field in line.split(',') {
            if row.len() == width {
                return Err(parse_err(path, line_no, column, format!("expected {width} fields")));
            }
            let name = &self.header[row.len()];
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, line_no, column, format!("`{}` in column `{name}` is not a number", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, column, format!("non-finite value in column `{name}`")));
            }
            row.push(v);
            column += field.len() + 1;
        }
        if row.len() != width {
            return Err(parse_err(
                path,
                line_no,
                column,
                format!("missing column `{}` (expected {width} fields, got {})", self.header[row.len()], row.len()),
            ));
        }
        if row[0] <= self.last_t {
            return Err(parse_err(path, line_no, 1, "timestamps must be strictly increasing"));
        }
        self.last_t = row[0];
        Ok(row)
    }
}

impl<R: BufRead> Iterator for CsvRows<R> {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            };
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let row = self.parse_line(line);
            self.failed = row.is_err();
            return Some(row);
        }
    }
}

fn write_csv<'a>(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>> + 'a,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b",").map_err(io)?;
            }
            first = false;
            write!(w, "{v:.16e}").map_err(io)?;
        }
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_log(path: &Path, log: &[MeasurementSample]) -> Result<()> {
    write_csv(
        path,
        LOG_HEADER,
        log.iter().map(|s| {
            vec![
                s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z, s.wheel_left,
                s.wheel_right,
            ]
        }),
    )
}

pub fn read_log(path: &Path) -> Result<Vec<MeasurementSample>> {
    stream_log(path)?.collect()
}

/// Log samples one at a time, for logs too large to hold in memory.
pub fn stream_log(path: &Path) -> Result<impl Iterator<Item = Result<MeasurementSample>>> {
    Ok(CsvRows::open(path, LOG_HEADER)?.map(|r| {
        r.map(|r| MeasurementSample {
            t: r[0],
            accel: Vector3::new(r[1], r[2], r[3]),
            gyro: Vector3::new(r[4], r[5], r[6]),
            wheel_left: r[7],
            wheel_right: r[8],
        })
    }))
}

pub fn write_truth(path: &Path, truth: &[TruthSample]) -> Result<()> {
    write_csv(
        path,
        TRUTH_HEADER,
        truth.iter().map(|g| {
            let p = &g.pose;
            vec![
                g.t, p.p.x, p.p.y, p.p.z, p.yaw, p.tilt.x, p.tilt.y, g.v.x, g.v.y, g.v.z,
                g.bias_accel.x, g.bias_accel.y, g.bias_accel.z, g.bias_gyro.x, g.bias_gyro.y,
                g.bias_gyro.z,
            ]
        }),
    )
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthSample>> {
    Ok(read_csv(path, TRUTH_HEADER)?
        .into_iter()
        .map(|r| TruthSample {
            t: r[0],
            pose: Pose::new(Vector3::new(r[1], r[2], r[3]), r[4], Vector2::new(r[5], r[6])),
            v: Vector3::new(r[7], r[8], r[9]),
            bias_accel: Vector3::new(r[10], r[11], r[12]),
            bias_gyro: Vector3::new(r[13], r[14], r[15]),
        })
        .collect())
}

pub fn write_trajectory(path: &Path, est: &[Estimate]) -> Result<()> {
    write_csv(
        path,
        TRAJECTORY_HEADER,
        est.iter().map(|e| {
            let s = &e.state;
            vec![e.t, s.p.x, s.p.y, s.p.z, s.yaw, s.tilt.x, s.tilt.y]
        }),
    )
}

/// Positions with unit quaternions `(x, y, z, w)`, IMU to gravity frame.
pub fn write_trajectory_quat(path: &Path, est: &[Estimate]) -> Result<()> {
    let rows: Vec<Vec<f64>> = est
        .iter()
        .map(|e| {
            let q = Attitude::new(e.state.yaw, e.state.tilt).quaternion()?;
            let p = e.state.p;
            Ok(vec![e.t, p.x, p.y, p.z, q.i, q.j, q.k, q.w])
        })
        .collect::<Result<_>>()?;
    write_csv(path, QUAT_HEADER, rows.into_iter())
}

/// Reads any of the trajectory, truth or quaternion CSVs as stamped poses,
/// picking the format from the header.
pub fn read_poses(path: &Path) -> Result<Vec<StampedPose>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let header: Vec<&str> = first.trim_end().split(',').map(str::trim).collect();
    let known = [TRUTH_HEADER, TRAJECTORY_HEADER, QUAT_HEADER];
    let Some(format) = known.into_iter().find(|h| *h == header.as_slice()) else {
        return Err(parse_err(path, 1, 1, "unrecognized trajectory header"));
    };
    let rest = std::io::Cursor::new(first.clone()).chain(reader);
    let rows = CsvRows::new(rest, path, format)?.collect::<Result<Vec<_>>>()?;
    rows.into_iter()
        .enumerate()
        .map(|(n, r)| {
            let p = Vector3::new(r[1], r[2], r[3]);
            let q = if format == QUAT_HEADER {
                let q = nalgebra::Quaternion::new(r[7], r[4], r[5], r[6]);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(parse_err(path, n + 2, 1, "quaternion is not unit length"));
                }
                UnitQuaternion::from_quaternion(q)
            } else {
                let rot = rotation_from_yaw_tilt(r[4], &Vector2::new(r[5], r[6]))
                    .map_err(|e| parse_err(path, n + 2, 1, e.to_string()))?;
                UnitQuaternion::from_matrix(&rot)
            };
            Ok(StampedPose { t: r[0], p, q })
        })
        .collect()
}

/// Writes `# d=.. x0=.. y0=.. degree=..` followed by `i<TAB>j<TAB>h` lines.
pub fn write_spline(path: &Path, spline: &GroundSpline) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let g = spline.grid();
    writeln!(
        w,
        "# d={:.16e} x0={:.16e} y0={:.16e} degree={}",
        g.d,
        g.x0,
        g.y0,
        spline.shape.degree.degree()
    )
    .map_err(io)?;
    for (&(i, j), h) in &spline.points {
        writeln!(w, "{i}\t{j}\t{h:.16e}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_spline(path: &Path) -> Result<GroundSpline> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(path, 1, 1, "empty file")),
    };
    let Some(body) = header.strip_prefix('#') else {
        return Err(parse_err(path, 1, 1, "expected `# d=.. x0=.. y0=..` header"));
    };
    let (mut d, mut x0, mut y0, mut degree) = (None, None, None, SplineDegree::Cubic);
    for token in body.split_whitespace() {
        let column = header.find(token).unwrap_or(0) + 1;
        let Some((key, value)) = token.split_once('=') else {
            return Err(parse_err(path, 1, column, format!("malformed `{token}`")));
        };
        let bad = || parse_err(path, 1, column, format!("bad value for `{key}`"));
        match key {
            "d" => d = Some(value.parse::<f64>().map_err(|_| bad())?),
            "x0" => x0 = Some(value.parse::<f64>().map_err(|_| bad())?),
            "y0" => y0 = Some(value.parse::<f64>().map_err(|_| bad())?),
            "degree" => {
                let n: u32 = value.parse().map_err(|_| bad())?;
                degree = SplineDegree::from_degree(n).map_err(|_| bad())?;
            }
            _ => return Err(parse_err(path, 1, column, format!("unknown key `{key}`"))),
        }
    }
    let (Some(d), Some(x0), Some(y0)) = (d, x0, y0) else {
        return Err(parse_err(path, 1, 1, "header needs d, x0 and y0"));
    };
    if !(d > 0.0) {
        return Err(parse_err(path, 1, 1, "d must be positive"));
    }
    let mut spline = GroundSpline::new(SplineShape::new(KnotGrid::new(d, x0, y0), degree));
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line_no, 1, "expected `i<TAB>j<TAB>h`"));
        }
        let col = |k: usize| fields[..k].iter().map(|f| f.len() + 1).sum::<usize>() + 1;
        let i: i64 = fields[0].trim().parse().map_err(|_| parse_err(path, line_no, col(0), "bad index"))?;
        let j: i64 = fields[1].trim().parse().map_err(|_| parse_err(path, line_no, col(1), "bad index"))?;
        let h: f64 = fields[2].trim().parse().map_err(|_| parse_err(path, line_no, col(2), "bad height"))?;
        if !h.is_finite() {
            return Err(parse_err(path, line_no, col(2), "non-finite height"));
        }
        spline.set(i, j, h);
    }
    Ok(spline)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::attitude::quat_exp;
    use crate::models::ImuState;

    fn line(n: usize, dt: f64) -> Vec<StampedPose> {
        (0..n)
            .map(|k| StampedPose {
                t: k as f64 * dt,
                p: Vector3::new(k as f64, (k as f64 * 0.3).sin(), 0.1 * k as f64),
                q: quat_exp(&Vector3::new(0.01 * k as f64, 0.0, 0.02 * k as f64)),
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let a = line(50, 0.01);
        let m = evaluate(&a, &a, false).unwrap();
        assert_eq!(m.pairs, 50);
        assert!(m.ate_m < 1e-12 && m.are_deg < 1e-6);
    }

    #[test]
    fn constant_offset_is_its_norm() {
        let a = line(50, 0.01);
        let b: Vec<_> = a.iter().map(|s| StampedPose { p: s.p + Vector3::new(0.3, 0.4, 0.0), ..*s }).collect();
        let m = evaluate(&a, &b, false).unwrap();
        assert!((m.ate_m - 0.5).abs() < 1e-12);
        let aligned = evaluate(&a, &b, true).unwrap();
        assert!(aligned.ate_m < 1e-9);
    }

    #[test]
    fn association_tolerance() {
        let a = line(10, 0.01);
        let shifted: Vec<_> = a.iter().map(|s| StampedPose { t: s.t + 0.005, ..*s }).collect();
        assert!(matches!(evaluate(&a, &shifted, false), Err(Error::EmptyAssociation)));
        let near: Vec<_> = a.iter().map(|s| StampedPose { t: s.t + 0.0005, ..*s }).collect();
        assert_eq!(evaluate(&a, &near, false).unwrap().pairs, 10);
    }

    #[test]
    fn rotation_error_in_degrees() {
        let a = line(20, 0.01);
        let b: Vec<_> = a.iter().map(|s| StampedPose { q: s.q * quat_exp(&Vector3::new(0.0, 0.0, 1f64.to_radians())), ..*s }).collect();
        let m = evaluate(&a, &b, false).unwrap();
        assert!((m.are_deg - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log: Vec<_> = (0..20)
            .map(|k| MeasurementSample {
                t: k as f64 * 0.01,
                accel: Vector3::new(0.1 / 3.0, -9.8, 1e-300),
                gyro: Vector3::new(std::f64::consts::PI, 0.0, -1.0 / 7.0),
                wheel_left: 16.666666666666668,
                wheel_right: k as f64,
            })
            .collect();
        write_log(&path, &log).unwrap();
        assert_eq!(read_log(&path).unwrap(), log);
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,ax,ay,az,gx,gy,gz,wl,wr\n0,1,2,3,4,5,6,7,8\n0.01,1,2,x,4,5,6,7,8\n").unwrap();
        match read_log(&path) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 10)),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "t,ax\n").unwrap();
        assert!(matches!(read_log(&path), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&path, "t,ax,ay,az,gx,gy,gz,wl,wr\n0,1,2,3,4,5,6,7,8\n0,1,2,3,4,5,6,7,8\n").unwrap();
        assert!(matches!(read_log(&path), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&path, "t,ax,ay,az,gx,gy,gz,wl,wr\n0,1,2,3\n").unwrap();
        assert!(matches!(read_log(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,ax,ay,az,gx,gy,gz,wl\n").unwrap();
        let e = read_log(&path).unwrap_err();
        assert!(e.to_string().contains("missing column `wr`"), "{e}");
        std::fs::write(&path, "t,ax,ay,az,gx,gy,gz,wl,wr\n0,1,2,3,4,5,6,7\n").unwrap();
        let e = read_log(&path).unwrap_err();
        assert!(e.to_string().contains("missing column `wr`"), "{e}");
        std::fs::write(&path, "t,ax,ay,az,gy,gx,gz,wl,wr\n").unwrap();
        match read_log(&path) {
            Err(Error::Parse { line: 1, column, message, .. }) => {
                assert_eq!(column, 12);
                assert!(message.contains("`gx`"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn million_row_log_streams() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.csv");
        {
            let mut w = BufWriter::new(File::create(&path).unwrap());
            writeln!(w, "{}", LOG_HEADER.join(",")).unwrap();
            for k in 0..1_000_000u32 {
                writeln!(w, "{},0,0,-9.8,0,0,0.1,1,1", k as f64 * 0.01).unwrap();
            }
        }
        // Only a running sum is held; rows are dropped as they are read.
        let (n, gz) = stream_log(&path)
            .unwrap()
            .try_fold((0usize, 0.0), |(n, gz), s| s.map(|s| (n + 1, gz + s.gyro.z)))
            .unwrap();
        assert_eq!(n, 1_000_000);
        assert!((gz - 1e5).abs() < 1e-3);
    }

    fn offset_pairs(n: usize, err: impl Fn(usize) -> (Vector3<f64>, f64)) -> (Vec<StampedPose>, Vec<StampedPose>) {
        let truth = line(n, 0.01);
        let est = truth
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (dp, dyaw) = err(k);
                StampedPose {
                    p: s.p + dp,
                    q: s.q * quat_exp(&Vector3::new(0.0, 0.0, dyaw)),
                    ..*s
                }
            })
            .collect();
        (est, truth)
    }

    #[test]
    fn half_offset_examples() {
        let (est, truth) = offset_pairs(40, |k| if k % 2 == 0 { (Vector3::x(), 0.0) } else { (Vector3::zeros(), 0.0) });
        assert!((evaluate(&est, &truth, false).unwrap().ate_m - 0.5f64.sqrt()).abs() < 1e-12);
        let ten = 10f64.to_radians();
        let (est, truth) = offset_pairs(40, |k| (Vector3::zeros(), if k < 20 { 0.0 } else { ten }));
        let m = evaluate(&est, &truth, false).unwrap();
        assert!((m.are_deg - 10.0 / 2f64.sqrt()).abs() < 1e-9, "{}", m.are_deg);
        let (est, truth) = offset_pairs(40, |_| (Vector3::zeros(), ten));
        assert!((evaluate(&est, &truth, false).unwrap().are_deg - 10.0).abs() < 1e-9);
    }

    #[test]
    fn spline_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spline.txt");
        let mut s = GroundSpline::new(SplineShape::new(KnotGrid::new(2.5, -1.0, 0.5), SplineDegree::Quadratic));
        s.set(-3, 4, 0.1 / 3.0);
        s.set(7, -2, -1e-12);
        write_spline(&path, &s).unwrap();
        let r = read_spline(&path).unwrap();
        assert_eq!(r.points, s.points);
        assert_eq!(r.shape, s.shape);
        std::fs::write(&path, "# d=5 x0=0 y0=0\n1\t2\tzz\n").unwrap();
        assert!(matches!(read_spline(&path), Err(Error::Parse { line: 2, column: 5, .. })));
    }

    #[test]
    fn read_poses_accepts_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let est: Vec<Estimate> = (0..5)
            .map(|k| Estimate {
                t: k as f64 * 0.1,
                state: ImuState {
                    p: Vector3::new(k as f64, 0.0, 1.0),
                    v: Vector3::zeros(),
                    yaw: 0.1 * k as f64,
                    tilt: Vector2::new(0.01, -0.02),
                },
            })
            .collect();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_trajectory(&a, &est).unwrap();
        write_trajectory_quat(&b, &est).unwrap();
        let pa = read_poses(&a).unwrap();
        let pb = read_poses(&b).unwrap();
        let m = evaluate(&pa, &pb, false).unwrap();
        assert!(m.ate_m < 1e-12 && m.are_deg < 1e-9);
    }

    proptest! {
        #[test]
        fn ate_is_the_rmse_loop(seed in 0u64..1000, shift in -100.0f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let truth = line(30, 0.01);
            let est: Vec<_> = truth
                .iter()
                .map(|s| StampedPose { p: s.p + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), ..*s })
                .collect();
            let m = evaluate(&est, &truth, false).unwrap();
            let mut sum = 0.0;
            for (a, b) in est.iter().zip(&truth) {
                let d = a.p - b.p;
                sum += d.x * d.x + d.y * d.y + d.z * d.z;
            }
            prop_assert!((m.ate_m - (sum / 30.0).sqrt()).abs() < 1e-12);

            let moved = |v: &[StampedPose]| v.iter().map(|s| StampedPose { t: s.t + shift, ..*s }).collect::<Vec<_>>();
            let m2 = evaluate(&moved(&est), &moved(&truth), false).unwrap();
            prop_assert_eq!(m2.pairs, m.pairs);
            prop_assert!((m2.ate_m - m.ate_m).abs() < 1e-12 && (m2.are_deg - m.are_deg).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn alignment_recovers_rigid_motion(yaw in -3.0..3.0f64, tx in -5.0..5.0f64, ty in -5.0..5.0f64) {
            let a: Vec<_> = line(30, 0.01).iter().map(|s| s.p).collect();
            let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, yaw).into_inner();
            let t = Vector3::new(tx, ty, 0.3);
            let b: Vec<_> = a.iter().map(|p| r * p + t).collect();
            let (rr, tt) = align_rigid(&a, &b).unwrap();
            prop_assert!((rr - r).amax() < 1e-9);
            prop_assert!((tt - t).amax() < 1e-8);
        }
    }
}

//! Supervision datasets: pooled node records from many open-loop solutions.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::direct::DirectSolver;
use super::indirect::IndirectSolver;
use super::{ExtremalTrajectory, Method, OcpSettings};
use crate::error::{Error, Result};
use crate::lqr::design_lqr;
use crate::models::{design_model, sample_initial_conditions, ControlSystem, SamplingDomain};
use crate::parallel::map_indexed;
use crate::policies::Scaling;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Node records kept per trajectory; longer trajectories are thinned uniformly in index.
pub const MAX_RECORDS_PER_TRAJECTORY: usize = 256;

/// Fraction of converged trajectories below which a dataset is flagged degraded.
pub const DEGRADED_BELOW: f64 = 0.9;

/// One supervision pair in design coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub traj_id: usize,
    pub t: f64,
    pub x: DVector<f64>,
    /// `V_x(x)`; present only for indirect solutions.
    pub lam: Option<DVector<f64>>,
    pub u: DVector<f64>,
}

/// Optimal cost from one sampled initial condition (full state).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryValue {
    pub traj_id: usize,
    pub x0: DVector<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discarded {
    pub traj_id: usize,
    pub x0: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub model_id: String,
    /// Dimension of the stored states (design coordinates).
    pub state_dim: usize,
    /// Dimension of the sampled initial conditions in `values.csv`.
    pub full_state_dim: usize,
    pub control_dim: usize,
    pub method: Method,
    pub seed: u64,
    pub domain: SamplingDomain,
    pub settings: OcpSettings,
    pub n_traj: usize,
    pub n_converged: usize,
    pub n_records: usize,
    pub degraded: bool,
    pub has_costates: bool,
    /// Longest accepted horizon.
    pub horizon: f64,
    /// Bounding box of the stored states (used as the default input scaling).
    pub scaling: Option<Scaling>,
    pub discarded: Vec<Discarded>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<DataRecord>,
    pub values: Vec<TrajectoryValue>,
}

impl Dataset {
    /// Wraps records that did not come from [`generate_dataset`] (one value
    /// per trajectory id is not required).
    pub fn from_records(model: &dyn ControlSystem, records: Vec<DataRecord>) -> Result<Self> {
        let (n, m) = (model.state_dim(), model.control_dim());
        for r in &records {
            if r.x.len() != n || r.u.len() != m || r.lam.as_ref().is_some_and(|l| l.len() != n) {
                return Err(Error::Dimension("record does not match the model".into()));
            }
        }
        let has_costates = !records.is_empty() && records.iter().all(|r| r.lam.is_some());
        let scaling = if records.is_empty() {
            None
        } else {
            Some(Scaling::fit(records.iter().map(|r| &r.x), n)?)
        };
        let mut ids: Vec<usize> = records.iter().map(|r| r.traj_id).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(Self {
            meta: DatasetMeta {
                schema_version: DATASET_SCHEMA_VERSION,
                model_id: model.id().to_string(),
                state_dim: n,
                full_state_dim: n,
                control_dim: m,
                method: if has_costates { Method::Indirect } else { Method::Direct },
                seed: 0,
                domain: SamplingDomain::Ball { radius: 1.0 },
                settings: OcpSettings::default(),
                n_traj: ids.len(),
                n_converged: ids.len(),
                n_records: records.len(),
                degraded: false,
                has_costates,
                horizon: 0.0,
                scaling,
                discarded: Vec::new(),
            },
            records,
            values: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// States as columns.
    pub fn states(&self) -> DMatrix<f64> {
        columns(self.meta.state_dim, self.records.iter().map(|r| &r.x))
    }

    pub fn controls(&self) -> DMatrix<f64> {
        columns(self.meta.control_dim, self.records.iter().map(|r| &r.u))
    }

    /// Costates as columns, if every record has one.
    pub fn costates(&self) -> Option<DMatrix<f64>> {
        if self.records.is_empty() || !self.meta.has_costates {
            return None;
        }
        let lams: Option<Vec<&DVector<f64>>> = self.records.iter().map(|r| r.lam.as_ref()).collect();
        lams.map(|l| columns(self.meta.state_dim, l.into_iter()))
    }

    /// Records of the given trajectories only.
    pub fn subset(&self, traj_ids: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.records.retain(|r| traj_ids.contains(&r.traj_id));
        out.values.retain(|v| traj_ids.contains(&v.traj_id));
        out.meta.n_records = out.records.len();
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        fs::write(dir.join("meta.json"), meta)?;

        let (n, m) = (self.meta.state_dim, self.meta.control_dim);
        let mut w = csv::Writer::from_path(dir.join("points.csv")).map_err(csv_err)?;
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..n).map(|i| format!("lam_{i}")));
        header.extend((0..m).map(|i| format!("u_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.traj_id.to_string(), fmt(r.t)];
            row.extend(r.x.iter().map(|v| fmt(*v)));
            match &r.lam {
                Some(l) => row.extend(l.iter().map(|v| fmt(*v))),
                None => row.extend((0..n).map(|_| String::new())),
            }
            row.extend(r.u.iter().map(|v| fmt(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;

        let nf = self.meta.full_state_dim;
        let mut w = csv::Writer::from_path(dir.join("values.csv")).map_err(csv_err)?;
        let mut header = vec!["traj_id".to_string()];
        header.extend((0..nf).map(|i| format!("x0_{i}")));
        header.push("V".into());
        w.write_record(&header).map_err(csv_err)?;
        for v in &self.values {
            let mut row = vec![v.traj_id.to_string()];
            row.extend(v.x0.iter().map(|a| fmt(*a)));
            row.push(fmt(v.value));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported dataset schema {}", meta.schema_version)));
        }
        let (n, m) = (meta.state_dim, meta.control_dim);
        let mut records = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("points.csv")).map_err(csv_err)?;
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            if row.len() != 2 + 2 * n + m {
                return Err(Error::Config(format!("points.csv row has {} fields", row.len())));
            }
            let lam = if row[2 + n].is_empty() {
                None
            } else {
                Some(DVector::from_vec(parse_all(&row, 2 + n, n)?))
            };
            records.push(DataRecord {
                traj_id: parse_id(&row[0])?,
                t: parse(&row[1])?,
                x: DVector::from_vec(parse_all(&row, 2, n)?),
                lam,
                u: DVector::from_vec(parse_all(&row, 2 + 2 * n, m)?),
            });
        }
        let nf = meta.full_state_dim;
        let mut values = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("values.csv")).map_err(csv_err)?;
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            if row.len() != nf + 2 {
                return Err(Error::Config(format!("values.csv row has {} fields", row.len())));
            }
            values.push(TrajectoryValue {
                traj_id: parse_id(&row[0])?,
                x0: DVector::from_vec(parse_all(&row, 1, nf)?),
                value: parse(&row[nf + 1])?,
            });
        }
        if records.len() != meta.n_records {
            return Err(Error::Config(format!(
                "points.csv holds {} records, meta.json says {}",
                records.len(),
                meta.n_records
            )));
        }
        Ok(Self { meta, records, values })
    }
}

fn columns<'a>(rows: usize, it: impl Iterator<Item = &'a DVector<f64>>) -> DMatrix<f64> {
    let cols: Vec<&DVector<f64>> = it.collect();
    DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn parse(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("dataset entry {s}")));
    }
    Ok(v)
}

fn parse_id(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad trajectory id {s:?}")))
}

fn parse_all(row: &csv::StringRecord, start: usize, len: usize) -> Result<Vec<f64>> {
    (start..start + len).map(|i| parse(&row[i])).collect()
}

/// Indices kept when thinning `len` nodes to at most `cap`, endpoints included.
pub(crate) fn thin(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..cap)
        .map(|i| ((i as f64) * (len - 1) as f64 / (cap - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

fn all_finite(traj: &ExtremalTrajectory) -> bool {
    let ok = |v: &[DVector<f64>]| v.iter().all(|x| x.iter().all(|a| a.is_finite()));
    traj.cost.is_finite() && ok(&traj.x) && ok(&traj.u) && traj.lam.as_deref().is_none_or(ok)
}

/// Samples `n_traj` initial conditions of `model`, solves each open-loop
/// problem in design coordinates and pools the node records. Results are
/// ordered by trajectory index whatever the worker count.
pub fn generate_dataset(
    model: &Arc<dyn ControlSystem>,
    domain: &SamplingDomain,
    n_traj: usize,
    method: Method,
    seed: u64,
    settings: &OcpSettings,
    workers: usize,
) -> Result<Dataset> {
    settings.validate()?;
    domain.validate()?;
    let design = design_model(model);
    let x0s = sample_initial_conditions(model.as_ref(), domain, n_traj, seed)?;
    let lqr = design_lqr(design.as_ref())?;
    let (n, m) = (design.state_dim(), design.control_dim());

    let results = map_indexed(n_traj, workers, |i| {
        let design = design.as_ref();
        let z0 = model.reduce(&x0s[i]);
        let r = match method {
            Method::Indirect => IndirectSolver::with_lqr(design, lqr.clone(), settings).and_then(|s| s.solve(&z0)),
            Method::Direct => DirectSolver::with_lqr(design, lqr.clone(), settings).and_then(|s| s.solve(&z0)),
        };
        if let Ok(t) = &r {
            log::debug!("trajectory {i}: cost {:.6e}, horizon {}", t.cost, t.diagnostics.horizon);
        }
        r
    });

    let mut records = Vec::new();
    let mut values = Vec::new();
    let mut discarded = Vec::new();
    let mut horizon: f64 = 0.0;
    for (i, res) in results.into_iter().enumerate() {
        let reason = match res {
            Ok(traj) if traj.converged && all_finite(&traj) => {
                horizon = horizon.max(traj.diagnostics.horizon);
                for k in thin(traj.t.len(), MAX_RECORDS_PER_TRAJECTORY) {
                    records.push(DataRecord {
                        traj_id: i,
                        t: traj.t[k],
                        x: traj.x[k].clone(),
                        lam: traj.lam.as_ref().map(|l| l[k].clone()),
                        u: traj.u[k].clone(),
                    });
                }
                values.push(TrajectoryValue {
                    traj_id: i,
                    x0: x0s[i].clone(),
                    value: traj.cost,
                });
                continue;
            }
            Ok(_) => "solution not converged or not finite".to_string(),
            Err(e) => e.to_string(),
        };
        log::warn!("discarding trajectory {i}: {reason}");
        discarded.push(Discarded {
            traj_id: i,
            x0: x0s[i].as_slice().to_vec(),
            reason,
        });
    }
    let n_converged = values.len();
    let scaling = if records.is_empty() {
        None
    } else {
        Some(Scaling::fit(records.iter().map(|r| &r.x), n)?)
    };
    let degraded = n_traj > 0 && (n_converged as f64) < DEGRADED_BELOW * n_traj as f64;
    if degraded {
        log::warn!("dataset degraded: {n_converged} of {n_traj} trajectories converged");
    }
    Ok(Dataset {
        meta: DatasetMeta {
            schema_version: DATASET_SCHEMA_VERSION,
            model_id: model.id().to_string(),
            state_dim: n,
            full_state_dim: model.state_dim(),
            control_dim: m,
            method,
            seed,
            domain: domain.clone(),
            settings: settings.clone(),
            n_traj,
            n_converged,
            n_records: records.len(),
            degraded,
            has_costates: method == Method::Indirect,
            horizon,
            scaling,
            discarded,
        },
        records,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearSystem;

    fn lq() -> Arc<dyn ControlSystem> {
        Arc::new(LinearSystem::double_integrator())
    }

    #[test]
    fn empty_dataset_keeps_metadata() {
        let d = generate_dataset(&lq(), &SamplingDomain::Ball { radius: 1.0 }, 0, Method::Indirect, 3, &OcpSettings::default(), 2)
            .unwrap();
        assert!(d.is_empty());
        assert_eq!(d.meta.n_traj, 0);
        assert!(!d.meta.degraded);
        assert_eq!(d.meta.model_id, lq().id());
    }

    #[test]
    fn thinning_keeps_endpoints_and_cap() {
        assert_eq!(thin(5, 256), vec![0, 1, 2, 3, 4]);
        let idx = thin(1000, 256);
        assert_eq!(idx.len(), 256);
        assert_eq!((idx[0], *idx.last().unwrap()), (0, 999));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn lq_records_follow_the_linear_feedback() {
        let model = lq();
        let lqr = design_lqr(model.as_ref()).unwrap();
        let d = generate_dataset(&model, &SamplingDomain::Ball { radius: 2.0 }, 4, Method::Indirect, 11, &OcpSettings::default(), 2)
            .unwrap();
        assert_eq!(d.meta.n_converged, 4);
        for r in &d.records {
            let u = -(&lqr.k * &r.x);
            assert!((&r.u - &u).amax() <= 1e-3, "{} vs {}", r.u, u);
            let lam = &lqr.p * &r.x * 2.0;
            assert!((r.lam.as_ref().unwrap() - &lam).amax() <= 1e-3 * (1.0 + lam.amax()));
        }
        for v in &d.values {
            let oracle = v.x0.dot(&(&lqr.p * &v.x0));
            assert!((v.value - oracle).abs() <= 1e-3 * oracle);
        }
    }

    #[test]
    fn files_round_trip_and_are_worker_independent() {
        let model = lq();
        let dom = SamplingDomain::Ball { radius: 1.5 };
        let s = OcpSettings::default();
        let a = generate_dataset(&model, &dom, 3, Method::Direct, 5, &s, 1).unwrap();
        let b = generate_dataset(&model, &dom, 3, Method::Direct, 5, &s, 3).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.save(da.path()).unwrap();
        b.save(db.path()).unwrap();
        for f in ["meta.json", "points.csv", "values.csv"] {
            assert_eq!(fs::read(da.path().join(f)).unwrap(), fs::read(db.path().join(f)).unwrap(), "{f}");
        }
        let back = Dataset::load(da.path()).unwrap();
        assert_eq!(back, a);
        assert!(back.costates().is_none());
        let header = fs::read_to_string(da.path().join("points.csv")).unwrap();
        assert!(header.starts_with("traj_id,t,x_0,x_1,lam_0,lam_1,u_0\n"));
    }
}

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::LgssError;
use crate::info::check_psd;
use crate::rng::{normal, normals, uniform, SimRng};

/// `x_{t+1} = A x_t + B u_t + w_t`, `y_t = C x_t + v_t`, `w ~ N(0, Q)`,
/// `v ~ N(0, R)`, `x_0 ~ N(mu0, P0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n: usize,
    m: usize,
    p: usize,
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
    mu0: Vec<f64>,
    P0: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, LgssError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(LgssError::Dimension(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl LgssModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mu0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self, LgssError> {
        let n = a.nrows();
        let m = c.nrows();
        let dims_ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && q.shape() == (n, n)
            && r.shape() == (m, m)
            && mu0.len() == n
            && p0.shape() == (n, n);
        if !dims_ok || n == 0 || m == 0 {
            return Err(LgssError::Dimension(format!(
                "A {:?}, B {:?}, C {:?}, Q {:?}, R {:?}, mu0 {}, P0 {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                q.shape(),
                r.shape(),
                mu0.len(),
                p0.shape()
            )));
        }
        let q = check_psd(&q, "Q")?;
        let r = check_psd(&r, "R")?;
        if r.clone().cholesky().is_none() {
            return Err(LgssError::NotPositiveDefinite("R".into()));
        }
        let p0 = check_psd(&p0, "P0")?;
        Ok(Self { a, b, c, q, r, mu0, p0 })
    }

    /// Scalar model without control input.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, mu0: f64, p0: f64) -> Result<Self, LgssError> {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(s(a), DMatrix::zeros(1, 0), s(c), s(q), s(r), DVector::from_element(1, mu0), s(p0))
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn zero_control(&self) -> DVector<f64> {
        DVector::zeros(self.control_dim())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            n: self.state_dim(),
            m: self.obs_dim(),
            p: self.control_dim(),
            A: to_rows(&self.a),
            B: to_rows(&self.b),
            C: to_rows(&self.c),
            Q: to_rows(&self.q),
            R: to_rows(&self.r),
            mu0: self.mu0.iter().copied().collect(),
            P0: to_rows(&self.p0),
        };
        serde_json::to_string_pretty(&file).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, LgssError> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| LgssError::Parse(e.to_string()))?;
        let (n, m, p) = (f.n, f.m, f.p);
        if f.mu0.len() != n {
            return Err(LgssError::Dimension(format!("mu0 must have {n} entries")));
        }
        Self::new(
            from_rows("A", &f.A, n, n)?,
            from_rows("B", &f.B, n, p)?,
            from_rows("C", &f.C, m, n)?,
            from_rows("Q", &f.Q, n, n)?,
            from_rows("R", &f.R, m, m)?,
            DVector::from_vec(f.mu0),
            from_rows("P0", &f.P0, n, n)?,
        )
    }

    /// Random model with `A` rescaled to spectral radius `<= radius`.
    pub fn random_stable(n: usize, m: usize, p: usize, radius: f64, rng: &mut SimRng) -> Result<Self, LgssError> {
        let mut a = DMatrix::from_fn(n, n, |_, _| normal(rng));
        let rho = spectral_radius(&a);
        if rho > radius {
            a *= radius / rho;
        }
        let b = DMatrix::from_fn(n, p, |_, _| normal(rng));
        let c = DMatrix::from_fn(m, n, |_, _| normal(rng));
        let pd = |k: usize, floor: f64, rng: &mut SimRng| {
            let l = DMatrix::from_fn(k, k, |_, _| 0.5 * normal(rng));
            &l * l.transpose() + DMatrix::identity(k, k) * floor
        };
        let q = pd(n, 0.05, rng);
        let r = pd(m, 0.1, rng);
        let p0 = pd(n, 0.2, rng);
        let mu0 = DVector::from_fn(n, |_, _| uniform(rng, -1.0, 1.0));
        Self::new(a, b, c, q, r, mu0, p0)
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Recorded run of the model. Index `t-1` of each vector holds time `t`;
/// `controls[t-1]` is the input `u_{t-1}` that drove `x_{t-1} -> x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub targets: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    /// Header `t,u1..,y1..,x1..,z1..` followed by one row per time step.
    pub fn to_csv(&self) -> String {
        let width = |v: &[DVector<f64>]| v.first().map(|x| x.len()).unwrap_or(0);
        let (pu, py, px) = (width(&self.controls), width(&self.observations), width(&self.states));
        let pz = self.targets.as_deref().map(width).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        for (prefix, k) in [("u", pu), ("y", py), ("x", px), ("z", pz)] {
            header.extend((1..=k).map(|i| format!("{prefix}{i}")));
        }
        let mut out = header.join(",");
        out.push('\n');
        for t in 0..self.horizon() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.controls[t].iter().map(f64::to_string));
            row.extend(self.observations[t].iter().map(f64::to_string));
            row.extend(self.states[t].iter().map(f64::to_string));
            if let Some(z) = &self.targets {
                row.extend(z[t].iter().map(f64::to_string));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Runs the model for `controls.len()` steps.
pub fn simulate(model: &LgssModel, controls: &[DVector<f64>], rng: &mut SimRng) -> Result<Trajectory, LgssError> {
    if let Some(u) = controls.iter().find(|u| u.len() != model.control_dim()) {
        return Err(LgssError::Dimension(format!("control of length {} for p = {}", u.len(), model.control_dim())));
    }
    let (n, m) = (model.state_dim(), model.obs_dim());
    let sq = psd_sqrt(&model.q);
    let sr = psd_sqrt(&model.r);
    let sp0 = psd_sqrt(&model.p0);
    let mut x = &model.mu0 + &sp0 * DVector::from_vec(normals(rng, n));
    let mut traj = Trajectory { controls: Vec::new(), states: Vec::new(), observations: Vec::new(), targets: None };
    for u in controls {
        x = &model.a * &x + &model.b * u + &sq * DVector::from_vec(normals(rng, n));
        let y = &model.c * &x + &sr * DVector::from_vec(normals(rng, m));
        traj.controls.push(u.clone());
        traj.states.push(x.clone());
        traj.observations.push(y);
    }
    Ok(traj)
}

/// Simulates `horizon + 1` steps and attaches `z_t = y_{t+1}`: the returned
/// trajectory has `horizon` observations and targets `y_2..y_{horizon+1}`.
pub fn simulate_one_step_task(model: &LgssModel, horizon: usize, rng: &mut SimRng) -> Result<Trajectory, LgssError> {
    let controls = vec![model.zero_control(); horizon + 1];
    let mut full = simulate(model, &controls, rng)?;
    let mut targets: Vec<DVector<f64>> = full.observations[1..].to_vec();
    full.controls.truncate(horizon);
    full.states.truncate(horizon);
    let last = full.observations.pop().expect("horizon + 1 observations");
    targets.truncate(horizon);
    debug_assert_eq!(targets.last(), Some(&last));
    full.targets = Some(targets);
    Ok(full)
}

#[cfg(test)]
pub(crate) fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    crate::info::min_eigenvalue(m) >= -tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn lag1(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        cov / var
    }

    #[test]
    fn noiseless_identity_dynamics_are_constant() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let mut model = LgssModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            c.clone(),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.5, -1.0]),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        // R must be PD for a valid model; zero it after validation to test the noiseless path.
        model.r = DMatrix::zeros(2, 2);
        let traj = simulate(&model, &vec![DVector::zeros(1); 10], &mut seeded(1)).unwrap();
        let expected = &c * &model.mu0;
        for y in &traj.observations {
            assert!((y - &expected).norm() < 1e-15);
        }
    }

    #[test]
    fn ar1_autocorrelation() {
        let model = LgssModel::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0 / 0.19).unwrap();
        let traj = simulate(&model, &vec![DVector::zeros(0); 100_000], &mut seeded(77)).unwrap();
        let xs: Vec<f64> = traj.states.iter().map(|x| x[0]).collect();
        assert!((lag1(&xs) - 0.9).abs() < 0.01);
    }

    #[test]
    fn simulation_is_deterministic() {
        let model = LgssModel::random_stable(3, 2, 1, 0.95, &mut seeded(3)).unwrap();
        let u = vec![DVector::from_element(1, 0.3); 20];
        assert_eq!(simulate(&model, &u, &mut seeded(9)).unwrap(), simulate(&model, &u, &mut seeded(9)).unwrap());
    }

    #[test]
    fn random_models_are_stable() {
        let mut rng = seeded(12);
        for _ in 0..10 {
            let m = LgssModel::random_stable(4, 3, 2, 0.95, &mut rng).unwrap();
            assert!(spectral_radius(&m.a) <= 0.95 + 1e-9);
        }
    }

    #[test]
    fn json_roundtrip_and_field_names() {
        let model = LgssModel::random_stable(2, 1, 0, 0.9, &mut seeded(4)).unwrap();
        let text = model.to_json();
        for key in ["\"n\"", "\"m\"", "\"p\"", "\"A\"", "\"B\"", "\"C\"", "\"Q\"", "\"R\"", "\"mu0\"", "\"P0\""] {
            assert!(text.contains(key), "missing {key}");
        }
        assert_eq!(LgssModel::from_json(&text).unwrap(), model);
        assert!(LgssModel::from_json(&text.replace("\"mu0\"", "\"mu_0\"")).is_err());
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad_r = LgssModel::scalar(0.9, 1.0, 0.1, 0.0, 0.0, 1.0);
        assert!(matches!(bad_r, Err(LgssError::NotPositiveDefinite(_))));
        assert!(LgssModel::scalar(0.9, 1.0, -0.1, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let model = LgssModel::scalar(0.5, 1.0, 0.1, 0.1, 0.0, 1.0).unwrap();
        let traj = simulate_one_step_task(&model, 3, &mut seeded(0)).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,y1,x1,z1");
        assert_eq!(lines.len(), 4);
        let targets = traj.targets.as_ref().unwrap();
        assert_eq!(targets[0], traj.observations[1]);
    }
}

//! Reference-solution generation (Van der Pol integrator, manufactured RANS
//! fields), observation synthesis, collocation sampling, and CSV exchange.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::physics::{RansFieldsAtPoint, VdpParams};
use crate::posterior::{ObservationSet, ObservedComponent};

/// Size of the uniform dense-output grid; stride 1,500 over a 1.5-long
/// horizon then yields 121 observations.
pub const VDP_DENSE_POINTS: usize = 180_001;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Dormand–Prince 5(4) step for a 2-D system. Returns `(y5, err_estimate)`.
fn dopri_step<F>(f: &F, t: f64, y: [f64; 2], h: f64) -> ([f64; 2], f64, [f64; 2])
where
    F: Fn(f64, [f64; 2]) -> [f64; 2],
{
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    // 5th-order weights equal the last A row; 4th-order weights below.
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut k = [[0.0f64; 2]; 7];
    k[0] = f(t, y);
    for s in 0..6 {
        let mut ys = y;
        for (j, kj) in k.iter().enumerate().take(s + 1) {
            ys[0] += h * A[s][j] * kj[0];
            ys[1] += h * A[s][j] * kj[1];
        }
        k[s + 1] = f(t + C[s] * h, ys);
    }
    let mut y5 = y;
    for (j, kj) in k.iter().enumerate().take(6) {
        y5[0] += h * A[5][j] * kj[0];
        y5[1] += h * A[5][j] * kj[1];
    }
    let mut y4 = y;
    for (j, kj) in k.iter().enumerate() {
        y4[0] += h * B4[j] * kj[0];
        y4[1] += h * B4[j] * kj[1];
    }
    let err = ((y5[0] - y4[0]).powi(2) + (y5[1] - y4[1]).powi(2)).sqrt();
    // k[6] = f(t + h, y5): first-same-as-last derivative for dense output.
    (y5, err, k[6])
}

/// Adaptive Dormand–Prince integration of the Van der Pol system
/// `(u, u_dot)` with cubic-Hermite dense output on a uniform grid of
/// [`VDP_DENSE_POINTS`] points over `[0, t_end]`.
pub fn integrate_vdp(
    p: &VdpParams,
    u0: f64,
    v0: f64,
    t_end: f64,
    tolerance: f64,
) -> Result<Trajectory> {
    if tolerance <= 0.0 || t_end <= 0.0 {
        return Err(CoreError::InvalidConfig(
            "tolerance and t_end must be positive".into(),
        ));
    }
    let (eps, om) = (p.epsilon, p.omega0);
    let f = move |_t: f64, y: [f64; 2]| -> [f64; 2] {
        [y[1], eps * om * (1.0 - y[0] * y[0]) * y[1] - om * om * y[0]]
    };
    // Accepted nodes: (t, u, u_dot, du/dt, dv/dt) for Hermite interpolation.
    let mut nodes: Vec<(f64, [f64; 2], [f64; 2])> = Vec::new();
    let mut t = 0.0;
    let mut y = [u0, v0];
    let mut dy = f(0.0, y);
    nodes.push((t, y, dy));
    let h_max = 1e-3 * t_end.max(1.0);
    let mut h: f64 = (tolerance.powf(0.2)).min(h_max).max(1e-8);
    while t < t_end {
        h = h.min(t_end - t).min(h_max);
        let (y_new, err, dy_new) = dopri_step(&f, t, y, h);
        let scale = tolerance * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max));
        if err <= scale {
            t += h;
            y = y_new;
            dy = dy_new;
            nodes.push((t, y, dy));
        }
        let factor = if err > 0.0 {
            0.9 * (scale / err).powf(0.2)
        } else {
            5.0
        };
        h *= factor.clamp(0.2, 5.0);
        if h < 1e-14 {
            return Err(CoreError::StepSizeUnderflow { t });
        }
    }
    let _ = dy;

    // Cubic Hermite dense output on the uniform grid.
    let n = VDP_DENSE_POINTS;
    let mut times = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut seg = 0usize;
    for i in 0..n {
        let ti = t_end * i as f64 / (n - 1) as f64;
        while seg + 1 < nodes.len() - 1 && nodes[seg + 1].0 < ti {
            seg += 1;
        }
        let (t0, y0, d0) = &nodes[seg];
        let (t1, y1, d1) = &nodes[seg + 1];
        let hseg = t1 - t0;
        let s = ((ti - t0) / hseg).clamp(0.0, 1.0);
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let u = h00 * y0[0] + h10 * hseg * d0[0] + h01 * y1[0] + h11 * hseg * d1[0];
        times.push(ti);
        values.push(u);
    }
    Ok(Trajectory { times, values })
}

/// Subsample the trajectory every `stride` points and perturb with Gaussian
/// noise of standard deviation `noise_sigma`.
pub fn make_vdp_observations(
    traj: &Trajectory,
    stride: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if stride == 0 || stride >= traj.times.len() {
        return Err(CoreError::StrideTooLarge {
            stride,
            len: traj.times.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|_| CoreError::InvalidConfig("sigma".into()))?;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for i in (0..traj.times.len()).step_by(stride) {
        points.push(vec![traj.times[i]]);
        let z: f64 = normal.sample(&mut rng);
        values.push(traj.values[i] + noise_sigma * z);
    }
    Ok(ObservationSet {
        points,
        components: vec![ObservedComponent {
            output_index: 0,
            values,
        }],
    })
}

/// Axis-aligned box domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

/// Circular exclusion region (the cylinder).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CircleMask {
    pub center: (f64, f64),
    pub radius: f64,
}

impl CircleMask {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        dx * dx + dy * dy < self.radius * self.radius
    }
}

/// Uniform i.i.d. points in the domain; the masked region is excluded by
/// rejection.
pub fn sample_collocation(
    domain: &Domain,
    n: usize,
    seed: u64,
    mask: Option<&CircleMask>,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 || domain.lo.len() != domain.hi.len() || domain.lo.is_empty() {
        return Err(CoreError::InvalidConfig(
            "need n >= 1 and congruent domain bounds".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0usize;
    let cap = 1_000 * n + 1_000;
    while out.len() < n {
        let p: Vec<f64> = domain
            .lo
            .iter()
            .zip(&domain.hi)
            .map(|(&a, &b)| rng.gen_range(a..b))
            .collect();
        let masked = match mask {
            Some(m) if p.len() >= 2 => m.contains(p[0], p[1]),
            _ => false,
        };
        if masked {
            rejected += 1;
            if rejected > cap {
                return Err(CoreError::MaskCoversDomain);
            }
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Regular grid over the domain (2-D), excluding masked points.
pub fn uniform_grid(
    domain: &Domain,
    nx: usize,
    ny: usize,
    mask: Option<&CircleMask>,
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..nx {
        let x = domain.lo[0] + (domain.hi[0] - domain.lo[0]) * i as f64 / (nx - 1).max(1) as f64;
        for j in 0..ny {
            let y =
                domain.lo[1] + (domain.hi[1] - domain.lo[1]) * j as f64 / (ny - 1).max(1) as f64;
            if let Some(m) = mask {
                if m.contains(x, y) {
                    continue;
                }
            }
            out.push(vec![x, y]);
        }
    }
    out
}

/// Scattered field data with optional columns.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridField {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
    pub p: Option<Vec<f64>>,
    pub fx: Option<Vec<f64>>,
    pub fy: Option<Vec<f64>>,
}

impl GridField {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Amplitudes and wavenumbers of the manufactured stream function and
/// pressure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManufacturedParams {
    pub amp_psi: f64,
    pub kx: f64,
    pub ky: f64,
    pub amp_p: f64,
    pub px: f64,
    pub py: f64,
}

impl Default for ManufacturedParams {
    fn default() -> Self {
        Self {
            amp_psi: 1.0,
            kx: 0.7,
            ky: 0.9,
            amp_p: 0.5,
            px: 0.5,
            py: 0.8,
        }
    }
}

/// Closed-form manufactured fields and derivatives at one point. The
/// velocities derive from a stream function (continuity exact) and the
/// Reynolds-force components are the exact negatives of the remaining
/// momentum residuals, so all three governing equations hold identically.
pub fn manufactured_fields_at(
    re: f64,
    mp: &ManufacturedParams,
    x: f64,
    y: f64,
) -> RansFieldsAtPoint {
    let nu = 1.0 / re;
    let (a, kx, ky) = (mp.amp_psi, mp.kx, mp.ky);
    // psi = A sin(kx x) sin(ky y)
    let (sx, cx) = ((kx * x).sin(), (kx * x).cos());
    let (sy, cy) = ((ky * y).sin(), (ky * y).cos());
    let u = a * ky * sx * cy; // psi_y
    let v = -a * kx * cx * sy; // -psi_x
    let u_x = a * ky * kx * cx * cy;
    let u_y = -a * ky * ky * sx * sy;
    let u_xx = -a * ky * kx * kx * sx * cy;
    let u_yy = -a * ky * ky * ky * sx * cy;
    let v_x = a * kx * kx * sx * sy;
    let v_y = -a * kx * ky * cx * cy;
    let v_xx = a * kx * kx * kx * cx * sy;
    let v_yy = a * kx * ky * ky * cx * sy;
    // P = B cos(px x) cos(py y)
    let (b, px, py) = (mp.amp_p, mp.px, mp.py);
    let p = b * (px * x).cos() * (py * y).cos();
    let p_x = -b * px * (px * x).sin() * (py * y).cos();
    let p_y = -b * py * (px * x).cos() * (py * y).sin();
    let fx = -(u * u_x + v * u_y + p_x - nu * (u_xx + u_yy));
    let fy = -(u * v_x + v * v_y + p_y - nu * (v_xx + v_yy));
    RansFieldsAtPoint {
        u,
        v,
        p,
        f_x: fx,
        f_y: fy,
        u_x,
        u_y,
        v_x,
        v_y,
        p_x,
        p_y,
        u_xx,
        u_yy,
        v_xx,
        v_yy,
        re,
    }
}

/// Evaluate the manufactured solution on a set of points.
pub fn manufactured_rans(re: f64, mp: &ManufacturedParams, points: &[Vec<f64>]) -> GridField {
    let mut g = GridField {
        x: Vec::with_capacity(points.len()),
        y: Vec::with_capacity(points.len()),
        u: Some(Vec::new()),
        v: Some(Vec::new()),
        p: Some(Vec::new()),
        fx: Some(Vec::new()),
        fy: Some(Vec::new()),
    };
    for pt in points {
        let f = manufactured_fields_at(re, mp, pt[0], pt[1]);
        g.x.push(pt[0]);
        g.y.push(pt[1]);
        g.u.as_mut().unwrap().push(f.u);
        g.v.as_mut().unwrap().push(f.v);
        g.p.as_mut().unwrap().push(f.p);
        g.fx.as_mut().unwrap().push(f.f_x);
        g.fy.as_mut().unwrap().push(f.f_y);
    }
    g
}

/// Save a grid with the canonical header `x,y,U,V,P,fx,fy`; missing columns
/// are written as empty cells.
pub fn save_grid_csv(path: &std::path::Path, grid: &GridField) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,U,V,P,fx,fy")?;
    let cell = |c: &Option<Vec<f64>>, i: usize| -> String {
        c.as_ref().map_or(String::new(), |v| format!("{}", v[i]))
    };
    for i in 0..grid.len() {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            grid.x[i],
            grid.y[i],
            cell(&grid.u, i),
            cell(&grid.v, i),
            cell(&grid.p, i),
            cell(&grid.fx, i),
            cell(&grid.fy, i)
        )?;
    }
    Ok(())
}

/// Load a grid CSV. Columns beyond x and y may be absent (or empty) and come
/// back as `None`.
pub fn load_grid_csv(path: &std::path::Path) -> Result<GridField> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CoreError::MalformedCsv {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| c.eq_ignore_ascii_case(name));
    let (ix, iy) = match (find("x"), find("y")) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(CoreError::MalformedCsv {
                line: 1,
                message: "header must contain x and y".into(),
            })
        }
    };
    let iu = find("U");
    let iv = find("V");
    let ip = find("P");
    let ifx = find("fx");
    let ify = find("fy");
    let mut grid = GridField {
        u: iu.map(|_| Vec::new()),
        v: iv.map(|_| Vec::new()),
        p: ip.map(|_| Vec::new()),
        fx: ifx.map(|_| Vec::new()),
        fy: ify.map(|_| Vec::new()),
        ..GridField::default()
    };
    let mut drop_col = [false; 5];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |idx: usize| -> Result<f64> {
            fields
                .get(idx)
                .ok_or(CoreError::MalformedCsv {
                    line: lineno + 1,
                    message: format!("missing column {idx}"),
                })?
                .parse::<f64>()
                .map_err(|e| CoreError::MalformedCsv {
                    line: lineno + 1,
                    message: e.to_string(),
                })
        };
        grid.x.push(parse(ix)?);
        grid.y.push(parse(iy)?);
        let opt_cols = [
            (0usize, iu),
            (1, iv),
            (2, ip),
            (3, ifx),
            (4, ify),
        ];
        for (slot, idx) in opt_cols {
            if drop_col[slot] {
                continue;
            }
            if let Some(i) = idx {
                let raw = fields.get(i).copied().unwrap_or("");
                if raw.is_empty() {
                    // Entirely empty column: mark unavailable.
                    drop_col[slot] = true;
                    continue;
                }
                let val = raw.parse::<f64>().map_err(|e| CoreError::MalformedCsv {
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
                match slot {
                    0 => grid.u.as_mut().unwrap().push(val),
                    1 => grid.v.as_mut().unwrap().push(val),
                    2 => grid.p.as_mut().unwrap().push(val),
                    3 => grid.fx.as_mut().unwrap().push(val),
                    _ => grid.fy.as_mut().unwrap().push(val),
                }
            }
        }
    }
    if drop_col[0] {
        grid.u = None;
    }
    if drop_col[1] {
        grid.v = None;
    }
    if drop_col[2] {
        grid.p = None;
    }
    if drop_col[3] {
        grid.fx = None;
    }
    if drop_col[4] {
        grid.fy = None;
    }
    Ok(grid)
}

/// Write a calibration report CSV (thin wrapper for the IO surface).
pub fn save_report(path: &std::path::Path, report: &crate::uq::CalibrationReport) -> Result<()> {
    report.write_csv(path)
}

/// Complete reproducible dataset for one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentDataset {
    pub observations: ObservationSet,
    pub collocation: Vec<Vec<f64>>,
    pub test_points: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seeds: Vec<u64>,
}

//! Linear mass-spring lattice with broken-bond cracks.
//!
//! Nodes sit on a regular `nx x ny` grid and carry a 2D displacement. Each node
//! is bonded to its four axial and four diagonal neighbours by Hookean springs
//! acting along the bond direction (small-displacement limit). A crack scales
//! the stiffness of every bond it crosses. Time integration is velocity-Verlet.
//!
//! Plate coordinates are normalized to `[0, 1]^2`; node `(ix, iy)` sits at
//! `(ix / (nx - 1), iy / (ny - 1))`. Sensors and the point source are placed at
//! arbitrary plate positions and couple to the lattice through bilinear weights.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::Mask;

/// Sensors per axis; the recorded field has `SENSOR_GRID^2` traces.
pub const SENSOR_GRID: usize = 9;
pub const N_SENSORS: usize = SENSOR_GRID * SENSOR_GRID;
/// Displacement components recorded per sensor.
pub const N_CHANNELS: usize = 2;
/// Any displacement beyond this aborts the run.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeConfig {
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub node_mass: f64,
    pub stiffness_axial: f64,
    pub stiffness_diag: f64,
    /// Multiplier applied to bonds crossed by a crack; 0 breaks them.
    pub crack_stiffness_factor: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub damping: f64,
    pub seed: u64,
    pub label_h: usize,
    pub label_w: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            grid_nx: 64,
            grid_ny: 64,
            node_mass: 1.0,
            stiffness_axial: 1.0,
            stiffness_diag: 0.5,
            crack_stiffness_factor: 0.0,
            dt: 0.05,
            n_steps: 2000,
            damping: 0.0,
            seed: 0,
            label_h: 16,
            label_w: 16,
        }
    }
}

impl LatticeConfig {
    /// Highest natural frequency bound `sqrt(k_node_total / m)` of the intact lattice.
    pub fn omega_max(&self) -> f64 {
        let k_total = 4.0 * self.stiffness_axial + 4.0 * self.stiffness_diag;
        (k_total / self.node_mass).sqrt()
    }

    pub fn stable_dt_limit(&self) -> f64 {
        2.0 / self.omega_max()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_nx < 16 || self.grid_ny < 16 {
            return Err(Error::Config(format!(
                "lattice must be at least 16x16, got {}x{}",
                self.grid_nx, self.grid_ny
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.node_mass > 0.0) || !(self.stiffness_axial > 0.0) || !(self.stiffness_diag >= 0.0)
        {
            return Err(Error::Config(
                "node mass and axial stiffness must be positive, diagonal stiffness non-negative"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.crack_stiffness_factor) {
            return Err(Error::Config(
                "crack_stiffness_factor must lie in [0, 1]".into(),
            ));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config("damping must be non-negative".into()));
        }
        if self.label_h == 0 || self.label_w == 0 {
            return Err(Error::Config("label grid must be non-empty".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let limit = self.stable_dt_limit();
        if self.dt >= limit {
            return Err(Error::UnstableTimeStep { dt: self.dt, limit });
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// Straight crack segment in normalized plate coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrackSpec {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub width: f64,
    pub present: bool,
}

impl CrackSpec {
    pub fn none() -> Self {
        Self {
            p0: [0.0; 2],
            p1: [0.0; 2],
            width: 0.0,
            present: false,
        }
    }

    pub fn segment(p0: [f64; 2], p1: [f64; 2], width: f64) -> Self {
        Self {
            p0,
            p1,
            width,
            present: true,
        }
    }

    /// Euclidean length in normalized units; 0 for an absent crack.
    pub fn size(&self) -> f64 {
        if !self.present {
            return 0.0;
        }
        ((self.p1[0] - self.p0[0]).powi(2) + (self.p1[1] - self.p0[1]).powi(2)).sqrt()
    }

    /// Reflection about the vertical center line `x = 0.5`.
    pub fn mirrored_x(&self) -> Self {
        Self {
            p0: [1.0 - self.p0[0], self.p0[1]],
            p1: [1.0 - self.p1[0], self.p1[1]],
            ..*self
        }
    }

    fn hits_segment(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        segment_distance(self.p0, self.p1, a, b) <= 0.5 * self.width
    }

    fn hits_rect(&self, lo: [f64; 2], hi: [f64; 2]) -> bool {
        segment_rect_distance(self.p0, self.p1, lo, hi) <= 0.5 * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wavelet {
    Ricker,
    /// Hann-windowed sine of the given number of cycles.
    SineBurst {
        cycles: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceAxis {
    X,
    Y,
}

impl ForceAxis {
    fn index(self) -> usize {
        match self {
            ForceAxis::X => 0,
            ForceAxis::Y => 1,
        }
    }
}

/// Point force excitation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSpec {
    pub position: [f64; 2],
    pub wavelet: Wavelet,
    pub center_frequency: f64,
    pub amplitude: f64,
    pub axis: ForceAxis,
}

impl Default for SourceSpec {
    /// Vertical Ricker force at the center of the bottom edge.
    fn default() -> Self {
        Self {
            position: [0.5, 0.0],
            wavelet: Wavelet::Ricker,
            center_frequency: 0.1,
            amplitude: 1.0,
            axis: ForceAxis::Y,
        }
    }
}

impl SourceSpec {
    /// Ricker peak delay, chosen so the onset at `t = 0` is ~1e-8 of peak.
    pub fn delay(&self) -> f64 {
        1.5 / self.center_frequency
    }

    /// Time after which the source envelope stays below 1e-6 of its peak.
    pub fn active_until(&self) -> f64 {
        match self.wavelet {
            // |1 - 2a^2| exp(-a^2) < 1e-6 for a = pi f |t - t0| >= 4.5.
            Wavelet::Ricker => self.delay() + 4.5 / (PI * self.center_frequency),
            Wavelet::SineBurst { cycles } => f64::from(cycles) / self.center_frequency,
        }
    }

    pub fn force(&self, t: f64) -> f64 {
        let f = self.center_frequency;
        match self.wavelet {
            Wavelet::Ricker => {
                let a = PI * f * (t - self.delay());
                let a2 = a * a;
                self.amplitude * (1.0 - 2.0 * a2) * (-a2).exp()
            }
            Wavelet::SineBurst { cycles } => {
                let len = f64::from(cycles) / f;
                if t < 0.0 || t > len {
                    return 0.0;
                }
                let window = 0.5 * (1.0 - (2.0 * PI * t / len).cos());
                self.amplitude * window * (2.0 * PI * f * t).sin()
            }
        }
    }

    pub fn mirrored_x(&self) -> Self {
        Self {
            position: [1.0 - self.position[0], self.position[1]],
            amplitude: match self.axis {
                ForceAxis::X => -self.amplitude,
                ForceAxis::Y => self.amplitude,
            },
            ..*self
        }
    }

    fn validate(&self, cfg: &LatticeConfig) -> Result<()> {
        if !(self.center_frequency > 0.0) {
            return Err(Error::Config(
                "source center_frequency must be positive".into(),
            ));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::Config("source amplitude must be finite".into()));
        }
        if !self.position.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "source position {:?} outside the plate",
                self.position
            )));
        }
        if let Wavelet::SineBurst { cycles } = self.wavelet {
            if cycles == 0 {
                return Err(Error::Config("sine burst needs at least one cycle".into()));
            }
        }
        if self.active_until() >= cfg.duration() {
            return Err(Error::Config(format!(
                "source stays active until t = {:.3}, beyond the simulated window {:.3}",
                self.active_until(),
                cfg.duration()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondKind {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub kind: BondKind,
    /// Unit vector from `a` to `b` in lattice units.
    pub dir: [f64; 2],
    pub stiffness: f64,
}

/// Assembled lattice: geometry plus per-bond stiffness.
#[derive(Debug, Clone)]
pub struct LatticeState {
    pub nx: usize,
    pub ny: usize,
    pub bonds: Vec<Bond>,
    /// Indices into `bonds` of every bond the crack modified.
    pub cracked_bonds: Vec<usize>,
    pub crack: CrackSpec,
    node_mass: f64,
    damping: f64,
}

impl LatticeState {
    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn node_position(&self, node: usize) -> [f64; 2] {
        let (ix, iy) = (node % self.nx, node / self.nx);
        [
            ix as f64 / (self.nx - 1) as f64,
            iy as f64 / (self.ny - 1) as f64,
        ]
    }

    /// Bilinear coupling of a plate position to its surrounding nodes.
    pub fn stencil(&self, pos: [f64; 2]) -> Vec<(usize, f64)> {
        let gx = pos[0].clamp(0.0, 1.0) * (self.nx - 1) as f64;
        let gy = pos[1].clamp(0.0, 1.0) * (self.ny - 1) as f64;
        let ix = (gx.floor() as usize).min(self.nx - 2);
        let iy = (gy.floor() as usize).min(self.ny - 2);
        let fx = gx - ix as f64;
        let fy = gy - iy as f64;
        let mut out = Vec::with_capacity(4);
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let w = wx * wy;
                if w != 0.0 {
                    out.push((self.node_index(ix + dx, iy + dy), w));
                }
            }
        }
        out
    }

    /// Plate positions of the 9x9 sensor grid, row-major in `y` then `x`.
    pub fn sensor_positions() -> Vec<[f64; 2]> {
        let step = 1.0 / (SENSOR_GRID - 1) as f64;
        (0..SENSOR_GRID)
            .flat_map(|j| (0..SENSOR_GRID).map(move |i| [i as f64 * step, j as f64 * step]))
            .collect()
    }

    /// Sensor permutation induced by mirroring about `x = 0.5`.
    pub fn mirrored_sensor(s: usize) -> usize {
        let (j, i) = (s / SENSOR_GRID, s % SENSOR_GRID);
        j * SENSOR_GRID + (SENSOR_GRID - 1 - i)
    }

    /// Smallest Chebyshev (one-bond-per-step) distance from the source to the
    /// nearest node touched by a cracked bond. A crack cannot influence any
    /// recorded step before this many steps have elapsed.
    pub fn crack_reach_steps(&self, src: &SourceSpec) -> Option<usize> {
        let sources: Vec<usize> = self
            .stencil(src.position)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let cheb = |p: usize, q: usize| {
            let (px, py) = ((p % self.nx) as isize, (p / self.nx) as isize);
            let (qx, qy) = ((q % self.nx) as isize, (q / self.nx) as isize);
            (px - qx).unsigned_abs().max((py - qy).unsigned_abs())
        };
        self.cracked_bonds
            .iter()
            .flat_map(|&bi| [self.bonds[bi].a, self.bonds[bi].b])
            .flat_map(|n| sources.iter().map(move |&s| cheb(s, n)))
            .min()
    }
}

/// Assembles the lattice and applies the crack.
pub fn build_lattice(cfg: &LatticeConfig, crack: &CrackSpec) -> Result<LatticeState> {
    cfg.validate()?;
    let (nx, ny) = (cfg.grid_nx, cfg.grid_ny);
    let idx = |ix: usize, iy: usize| iy * nx + ix;
    let pos = |ix: usize, iy: usize| [ix as f64 / (nx - 1) as f64, iy as f64 / (ny - 1) as f64];
    let s = std::f64::consts::FRAC_1_SQRT_2;

    let mut bonds = Vec::with_capacity(2 * nx * ny - nx - ny + 2 * (nx - 1) * (ny - 1));
    for iy in 0..ny {
        for ix in 0..nx {
            if ix + 1 < nx {
                bonds.push((
                    (ix, iy),
                    (ix + 1, iy),
                    BondKind::Horizontal,
                    [1.0, 0.0],
                    cfg.stiffness_axial,
                ));
            }
            if iy + 1 < ny {
                bonds.push((
                    (ix, iy),
                    (ix, iy + 1),
                    BondKind::Vertical,
                    [0.0, 1.0],
                    cfg.stiffness_axial,
                ));
            }
            if ix + 1 < nx && iy + 1 < ny {
                bonds.push((
                    (ix, iy),
                    (ix + 1, iy + 1),
                    BondKind::Diagonal,
                    [s, s],
                    cfg.stiffness_diag,
                ));
                bonds.push((
                    (ix + 1, iy),
                    (ix, iy + 1),
                    BondKind::AntiDiagonal,
                    [-s, s],
                    cfg.stiffness_diag,
                ));
            }
        }
    }

    let mut cracked_bonds = Vec::new();
    let bonds = bonds
        .into_iter()
        .enumerate()
        .map(|(i, ((ax, ay), (bx, by), kind, dir, k))| {
            let mut stiffness = k;
            if crack.present && crack.hits_segment(pos(ax, ay), pos(bx, by)) {
                stiffness *= cfg.crack_stiffness_factor;
                cracked_bonds.push(i);
            }
            Bond {
                a: idx(ax, ay),
                b: idx(bx, by),
                kind,
                dir,
                stiffness,
            }
        })
        .collect();

    if crack.present && cracked_bonds.is_empty() {
        return Err(Error::CrackOutsidePlate);
    }
    Ok(LatticeState {
        nx,
        ny,
        bonds,
        cracked_bonds,
        crack: *crack,
        node_mass: cfg.node_mass,
        damping: cfg.damping,
    })
}

/// One simulated specimen.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSample {
    pub n_steps: usize,
    /// `(n_steps, N_SENSORS, N_CHANNELS)` row-major displacement traces.
    pub field: Vec<f64>,
    pub mask: Mask,
    pub crack: CrackSpec,
}

impl WaveSample {
    pub fn at(&self, step: usize, sensor: usize, channel: usize) -> f64 {
        self.field[(step * N_SENSORS + sensor) * N_CHANNELS + channel]
    }

    pub fn max_abs(&self) -> f64 {
        self.field.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.field.iter().all(|v| v.is_finite())
    }
}

/// Marks every label cell the crack touches.
pub fn rasterize_crack(crack: &CrackSpec, h: usize, w: usize) -> Mask {
    let mut mask = Mask::zeros(h, w);
    if !crack.present {
        return mask;
    }
    for r in 0..h {
        for c in 0..w {
            let lo = [c as f64 / w as f64, r as f64 / h as f64];
            let hi = [(c + 1) as f64 / w as f64, (r + 1) as f64 / h as f64];
            if crack.hits_rect(lo, hi) {
                mask.set(r, c, 1);
            }
        }
    }
    mask
}

/// Explicit integrator state; exposed so callers can observe energies per step.
pub struct Simulator<'a> {
    lattice: &'a LatticeState,
    src: SourceSpec,
    dt: f64,
    step: usize,
    u: Vec<[f64; 2]>,
    v: Vec<[f64; 2]>,
    force: Vec<[f64; 2]>,
    src_stencil: Vec<(usize, f64)>,
}

impl<'a> Simulator<'a> {
    pub fn new(lattice: &'a LatticeState, src: &SourceSpec, dt: f64) -> Self {
        let n = lattice.node_count();
        let mut sim = Self {
            lattice,
            src: *src,
            dt,
            step: 0,
            u: vec![[0.0; 2]; n],
            v: vec![[0.0; 2]; n],
            force: vec![[0.0; 2]; n],
            src_stencil: lattice.stencil(src.position),
        };
        sim.compute_force();
        sim
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn displacement(&self, node: usize) -> [f64; 2] {
        self.u[node]
    }

    fn compute_force(&mut self) {
        for f in &mut self.force {
            *f = [0.0; 2];
        }
        for bond in &self.lattice.bonds {
            let (ua, ub) = (self.u[bond.a], self.u[bond.b]);
            let stretch = (ub[0] - ua[0]) * bond.dir[0] + (ub[1] - ua[1]) * bond.dir[1];
            let t = bond.stiffness * stretch;
            let f = [t * bond.dir[0], t * bond.dir[1]];
            self.force[bond.a][0] += f[0];
            self.force[bond.a][1] += f[1];
            self.force[bond.b][0] -= f[0];
            self.force[bond.b][1] -= f[1];
        }
        let amp = self.src.force(self.time());
        let axis = self.src.axis.index();
        for &(node, w) in &self.src_stencil {
            self.force[node][axis] += w * amp;
        }
    }

    /// Advances one velocity-Verlet step; damping enters as `-gamma v`.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.dt;
        let half = 0.5 * dt;
        let inv_m = 1.0 / self.lattice.node_mass;
        let gamma = self.lattice.damping;
        for i in 0..self.u.len() {
            for d in 0..2 {
                let a = self.force[i][d] * inv_m - gamma * self.v[i][d];
                self.v[i][d] += half * a;
                self.u[i][d] += dt * self.v[i][d];
            }
        }
        self.step += 1;
        self.compute_force();
        let denom = 1.0 + half * gamma;
        let mut peak = 0.0f64;
        for i in 0..self.u.len() {
            for d in 0..2 {
                self.v[i][d] = (self.v[i][d] + half * self.force[i][d] * inv_m) / denom;
                peak = peak.max(self.u[i][d].abs());
            }
        }
        if !(peak <= BLOWUP_LIMIT) {
            return Err(Error::Instability {
                step: self.step,
                magnitude: peak,
            });
        }
        Ok(())
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.lattice.node_mass
            * self
                .v
                .iter()
                .map(|v| v[0] * v[0] + v[1] * v[1])
                .sum::<f64>()
    }

    pub fn potential_energy(&self) -> f64 {
        0.5 * self
            .lattice
            .bonds
            .iter()
            .map(|b| {
                let (ua, ub) = (self.u[b.a], self.u[b.b]);
                let s = (ub[0] - ua[0]) * b.dir[0] + (ub[1] - ua[1]) * b.dir[1];
                b.stiffness * s * s
            })
            .sum::<f64>()
    }

    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy() + self.potential_energy()
    }

    fn sample_sensors(&self, stencils: &[Vec<(usize, f64)>], out: &mut Vec<f64>) {
        for st in stencils {
            let mut acc = [0.0; 2];
            for &(node, w) in st {
                acc[0] += w * self.u[node][0];
                acc[1] += w * self.u[node][1];
            }
            out.extend_from_slice(&acc);
        }
    }
}

/// Runs the full simulation, calling `observe` after every step.
pub fn simulate_observed<F>(
    state: &LatticeState,
    src: &SourceSpec,
    cfg: &LatticeConfig,
    mut observe: F,
) -> Result<WaveSample>
where
    F: FnMut(&Simulator<'_>),
{
    cfg.validate()?;
    src.validate(cfg)?;
    if state.nx != cfg.grid_nx || state.ny != cfg.grid_ny {
        return Err(Error::Config(
            "lattice state does not match the configuration grid".into(),
        ));
    }
    let stencils: Vec<_> = LatticeState::sensor_positions()
        .into_iter()
        .map(|p| state.stencil(p))
        .collect();
    let mut sim = Simulator::new(state, src, cfg.dt);
    let mut field = Vec::with_capacity(cfg.n_steps * N_SENSORS * N_CHANNELS);
    for _ in 0..cfg.n_steps {
        sim.step()?;
        observe(&sim);
        sim.sample_sensors(&stencils, &mut field);
    }
    Ok(WaveSample {
        n_steps: cfg.n_steps,
        field,
        mask: rasterize_crack(&state.crack, cfg.label_h, cfg.label_w),
        crack: state.crack,
    })
}

pub fn simulate(state: &LatticeState, src: &SourceSpec, cfg: &LatticeConfig) -> Result<WaveSample> {
    simulate_observed(state, src, cfg, |_| {})
}

/// Random crack generator for datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct CrackSampler {
    pub length_min: f64,
    pub length_max: f64,
    pub width_min: f64,
    pub width_max: f64,
    /// Endpoints are kept inside `[margin, 1 - margin]^2`.
    pub margin: f64,
    /// Probability that a sample carries a crack at all.
    pub present_probability: f64,
}

impl Default for CrackSampler {
    fn default() -> Self {
        Self {
            length_min: 0.15,
            length_max: 0.5,
            width_min: 0.0,
            width_max: 0.02,
            margin: 0.05,
            present_probability: 1.0,
        }
    }
}

impl CrackSampler {
    pub fn validate(&self) -> Result<()> {
        let span = 1.0 - 2.0 * self.margin;
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Config("crack margin must lie in [0, 0.5)".into()));
        }
        if !(self.length_min > 0.0 && self.length_min <= self.length_max) {
            return Err(Error::Config(format!(
                "crack length range [{}, {}] is invalid",
                self.length_min, self.length_max
            )));
        }
        if self.length_min > span {
            return Err(Error::Config(
                "minimum crack length does not fit inside the plate".into(),
            ));
        }
        if !(self.width_min >= 0.0 && self.width_min <= self.width_max) {
            return Err(Error::Config("crack width range is invalid".into()));
        }
        if !(0.0..=1.0).contains(&self.present_probability) {
            return Err(Error::Config(
                "present_probability must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> CrackSpec {
        if self.present_probability < 1.0 && rng.gen::<f64>() >= self.present_probability {
            return CrackSpec::none();
        }
        let (lo, hi) = (self.margin, 1.0 - self.margin);
        let width = if self.width_max > self.width_min {
            rng.gen_range(self.width_min..self.width_max)
        } else {
            self.width_min
        };
        loop {
            let len = if self.length_max > self.length_min {
                rng.gen_range(self.length_min..self.length_max)
            } else {
                self.length_min
            };
            let theta = rng.gen_range(0.0..PI);
            let (dx, dy) = (0.5 * len * theta.cos(), 0.5 * len * theta.sin());
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let p0 = [cx - dx, cy - dy];
            let p1 = [cx + dx, cy + dy];
            let inside = |p: [f64; 2]| p.iter().all(|v| (lo..=hi).contains(v));
            if inside(p0) && inside(p1) {
                return CrackSpec::segment(p0, p1, width);
            }
        }
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p: [f64; 2], q: [f64; 2], r: [f64; 2], s: [f64; 2]) -> bool {
    let d1 = cross(sub(s, r), sub(p, r));
    let d2 = cross(sub(s, r), sub(q, r));
    let d3 = cross(sub(q, p), sub(r, p));
    let d4 = cross(sub(q, p), sub(s, p));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(p, r, s))
        || (d2 == 0.0 && on_segment(q, r, s))
        || (d3 == 0.0 && on_segment(r, p, q))
        || (d4 == 0.0 && on_segment(s, p, q))
}

/// Minimum distance between segments `pq` and `rs`; exactly 0 when they touch.
fn segment_distance(p: [f64; 2], q: [f64; 2], r: [f64; 2], s: [f64; 2]) -> f64 {
    if segments_intersect(p, q, r, s) {
        return 0.0;
    }
    point_segment_distance(p, r, s)
        .min(point_segment_distance(q, r, s))
        .min(point_segment_distance(r, p, q))
        .min(point_segment_distance(s, p, q))
}

fn segment_rect_distance(p: [f64; 2], q: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let inside = |v: [f64; 2]| v[0] >= lo[0] && v[0] <= hi[0] && v[1] >= lo[1] && v[1] <= hi[1];
    if inside(p) || inside(q) {
        return 0.0;
    }
    let corners = [lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]];
    (0..4)
        .map(|i| segment_distance(p, q, corners[i], corners[(i + 1) % 4]))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> LatticeConfig {
        LatticeConfig {
            grid_nx: 24,
            grid_ny: 24,
            n_steps: 600,
            ..LatticeConfig::default()
        }
    }

    #[test]
    fn intact_bond_count() {
        for (nx, ny) in [(16, 16), (64, 64), (20, 17)] {
            let cfg = LatticeConfig {
                grid_nx: nx,
                grid_ny: ny,
                ..LatticeConfig::default()
            };
            let state = build_lattice(&cfg, &CrackSpec::none()).unwrap();
            assert_eq!(
                state.bonds.len(),
                2 * nx * ny - nx - ny + 2 * (nx - 1) * (ny - 1)
            );
            assert!(state.cracked_bonds.is_empty());
            assert!(state.bonds.iter().all(|b| b.stiffness
                == match b.kind {
                    BondKind::Horizontal | BondKind::Vertical => cfg.stiffness_axial,
                    _ => cfg.stiffness_diag,
                }));
        }
    }

    #[test]
    fn horizontal_crack_breaks_crossing_bonds_only() {
        let cfg = LatticeConfig::default();
        let crack = CrackSpec::segment([0.25, 0.5], [0.75, 0.5], 0.0);
        let state = build_lattice(&cfg, &crack).unwrap();
        let n = (cfg.grid_nx - 1) as f64;
        // Independent scan: a bond is cut iff it crosses y = 0.5 at some x in [0.25, 0.75].
        let mut expected = Vec::new();
        for (i, b) in state.bonds.iter().enumerate() {
            let pa = state.node_position(b.a);
            let pb = state.node_position(b.b);
            if (pa[1] - 0.5) * (pb[1] - 0.5) > 0.0 || pa[1] == pb[1] {
                continue;
            }
            let t = (0.5 - pa[1]) / (pb[1] - pa[1]);
            let x = pa[0] + t * (pb[0] - pa[0]);
            if (0.25..=0.75).contains(&x) {
                expected.push(i);
            }
        }
        assert_eq!(state.cracked_bonds, expected);
        assert!(!expected.is_empty());
        for &i in &state.cracked_bonds {
            assert_ne!(state.bonds[i].kind, BondKind::Horizontal);
            assert_eq!(state.bonds[i].stiffness, 0.0);
        }
        // vertical bonds between rows 31 and 32 at columns with ix/63 in [0.25, 0.75]
        let vertical = state
            .cracked_bonds
            .iter()
            .filter(|&&i| state.bonds[i].kind == BondKind::Vertical)
            .count();
        let cols = (0..cfg.grid_nx)
            .filter(|&ix| (0.25..=0.75).contains(&(ix as f64 / n)))
            .count();
        assert_eq!(vertical, cols);
    }

    #[test]
    fn crack_outside_plate_is_an_error() {
        let crack = CrackSpec::segment([1.2, 1.3], [1.5, 1.9], 0.0);
        assert!(matches!(
            build_lattice(&LatticeConfig::default(), &crack),
            Err(Error::CrackOutsidePlate)
        ));
    }

    #[test]
    fn unstable_dt_is_rejected() {
        let cfg = LatticeConfig {
            dt: 0.9,
            ..LatticeConfig::default()
        };
        assert!(matches!(
            build_lattice(&cfg, &CrackSpec::none()),
            Err(Error::UnstableTimeStep { .. })
        ));
        let small = LatticeConfig {
            grid_nx: 8,
            ..LatticeConfig::default()
        };
        assert!(small.validate().is_err());
    }

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let cfg = small_cfg();
        let state = build_lattice(&cfg, &CrackSpec::segment([0.3, 0.5], [0.7, 0.6], 0.0)).unwrap();
        let src = SourceSpec {
            amplitude: 0.0,
            ..SourceSpec::default()
        };
        let sample = simulate(&state, &src, &cfg).unwrap();
        assert!(sample.field.iter().all(|&v| v == 0.0));
        assert_eq!(sample.field.len(), cfg.n_steps * N_SENSORS * N_CHANNELS);
    }

    #[test]
    fn ricker_is_negligible_at_the_window_ends() {
        let src = SourceSpec::default();
        assert!(src.force(0.0).abs() < 1e-6 * src.amplitude);
        let t = src.active_until();
        for k in 0..200 {
            assert!(src.force(t + k as f64 * 0.5).abs() < 1e-6 * src.amplitude);
        }
        assert!((src.force(src.delay()) - src.amplitude).abs() < 1e-12);
    }

    #[test]
    fn source_outlasting_window_is_rejected() {
        let cfg = LatticeConfig {
            n_steps: 10,
            ..small_cfg()
        };
        let state = build_lattice(&cfg, &CrackSpec::none()).unwrap();
        assert!(simulate(&state, &SourceSpec::default(), &cfg).is_err());
    }

    #[test]
    fn mask_matches_crack_presence() {
        let m = rasterize_crack(&CrackSpec::none(), 16, 16);
        assert!(m.is_empty());
        let crack = CrackSpec::segment([0.1, 0.1], [0.1 + 1e-3, 0.1], 0.0);
        assert_eq!(rasterize_crack(&crack, 16, 16).count_ones(), 1);
        let diag = CrackSpec::segment([0.03, 0.03], [0.97, 0.97], 0.0);
        let m = rasterize_crack(&diag, 16, 16);
        for i in 0..16 {
            assert_eq!(m.get(i, i), 1);
        }
    }

    #[test]
    fn sampler_keeps_cracks_inside() {
        let sampler = CrackSampler::default();
        sampler.validate().unwrap();
        let mut rng = crate::rng::stream_rng(3, "crack", 0);
        for _ in 0..500 {
            let c = sampler.sample(&mut rng);
            assert!(c.present);
            assert!(
                c.size() >= sampler.length_min - 1e-12 && c.size() <= sampler.length_max + 1e-12
            );
            for p in [c.p0, c.p1] {
                assert!(p
                    .iter()
                    .all(|v| (sampler.margin..=1.0 - sampler.margin).contains(v)));
            }
        }
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        let state = build_lattice(&LatticeConfig::default(), &CrackSpec::none()).unwrap();
        for p in LatticeState::sensor_positions() {
            let w: f64 = state.stencil(p).iter().map(|(_, w)| w).sum();
            assert!((w - 1.0).abs() < 1e-12);
        }
        assert_eq!(state.stencil([0.0, 0.0]), vec![(0, 1.0)]);
        assert_eq!(LatticeState::mirrored_sensor(0), 8);
        assert_eq!(LatticeState::mirrored_sensor(40), 40);
    }

    #[test]
    fn segment_distance_cases() {
        assert_eq!(
            segment_distance([0.0, 0.0], [1.0, 0.0], [0.5, -1.0], [0.5, 1.0]),
            0.0
        );
        assert_eq!(
            segment_distance([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [2.0, 1.0]),
            0.0
        );
        assert_eq!(
            segment_distance([0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [2.0, 0.0]),
            0.0
        );
        assert!(
            (segment_distance([0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [0.5, 2.0]) - 0.5).abs() < 1e-15
        );
        assert_eq!(
            segment_rect_distance([0.2, 0.2], [0.3, 0.3], [0.0, 0.0], [1.0, 1.0]),
            0.0
        );
        assert!(
            (segment_rect_distance([2.0, 0.0], [2.0, 1.0], [0.0, 0.0], [1.0, 1.0]) - 1.0).abs()
                < 1e-15
        );
    }
}

//! Known recurrent state transition (GRU form), differentiable rollouts and
//! the ground-truth plant with bounded measurement noise.
//!
//! The state update is
//!
//! ```text
//! z  = sigmoid(Wz u + Uz x + bz)
//! f  = sigmoid(Wf u + Uf x + bf)
//! x' = z ∘ x + (1 - z) ∘ tanh(Wr u + Ur (f ∘ x) + br)
//! ```
//!
//! and outputs are linear in the augmented state `[x 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, mat_t_vec_add, mat_vec};

pub const MODEL_SCHEMA: &str = "salt-mpc/model/v1";

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Hidden-layer weights of a single-layer GRU. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruModel {
    pub n_x: usize,
    pub n_u: usize,
    pub w_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_z: Vec<f64>,
    pub u_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub w_f: Vec<f64>,
    pub u_f: Vec<f64>,
    pub b_f: Vec<f64>,
}

/// Gate activations of one step, kept for the reverse pass.
#[derive(Debug, Clone, Default)]
struct StepCache {
    z: Vec<f64>,
    f: Vec<f64>,
    c: Vec<f64>,
    /// Scratch for the input terms and `f ∘ x`.
    work: Vec<f64>,
}

/// Reusable buffers for [`GruModel::step_into`].
#[derive(Debug, Clone, Default)]
pub struct StepScratch(StepCache);

impl GruModel {
    /// All-zero weights: every gate sits at 0.5 and `x' = x / 2`.
    pub fn zeros(n_x: usize, n_u: usize) -> Self {
        let (m, v, w) = (vec![0.0; n_x * n_x], vec![0.0; n_x], vec![0.0; n_x * n_u]);
        Self {
            n_x,
            n_u,
            w_r: w.clone(),
            u_r: m.clone(),
            b_r: v.clone(),
            w_z: w.clone(),
            u_z: m.clone(),
            b_z: v.clone(),
            w_f: w,
            u_f: m,
            b_f: v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.n_x, self.n_u);
        if nx == 0 || nu == 0 {
            return Err(Error::Config("GRU dimensions must be positive".into()));
        }
        for (what, v, len) in [
            ("w_r", &self.w_r, nx * nu),
            ("u_r", &self.u_r, nx * nx),
            ("b_r", &self.b_r, nx),
            ("w_z", &self.w_z, nx * nu),
            ("u_z", &self.u_z, nx * nx),
            ("b_z", &self.b_z, nx),
            ("w_f", &self.w_f, nx * nu),
            ("u_f", &self.u_f, nx * nx),
            ("b_f", &self.b_f, nx),
        ] {
            check_len(what, len, v.len())?;
            if v.iter().any(|w| !w.is_finite()) {
                return Err(Error::Config(format!("non-finite entry in {what}")));
            }
        }
        Ok(())
    }

    fn step_cached(&self, x: &[f64], u: &[f64], out: &mut [f64], cache: &mut StepCache) {
        let n = self.n_x;
        cache.z.resize(n, 0.0);
        cache.f.resize(n, 0.0);
        cache.c.resize(n, 0.0);
        cache.work.resize(4 * n, 0.0);
        let (az, rest) = cache.work.split_at_mut(n);
        let (af, rest) = rest.split_at_mut(n);
        let (ar, fx) = rest.split_at_mut(n);
        mat_vec(&self.w_z, self.n_u, u, az);
        mat_vec(&self.w_f, self.n_u, u, af);
        mat_vec(&self.w_r, self.n_u, u, ar);
        for i in 0..n {
            let row = &self.u_z[i * n..(i + 1) * n];
            cache.z[i] = sigmoid(az[i] + dot(row, x) + self.b_z[i]);
            let row = &self.u_f[i * n..(i + 1) * n];
            cache.f[i] = sigmoid(af[i] + dot(row, x) + self.b_f[i]);
        }
        for i in 0..n {
            fx[i] = cache.f[i] * x[i];
        }
        for i in 0..n {
            let row = &self.u_r[i * n..(i + 1) * n];
            cache.c[i] = (ar[i] + dot(row, fx) + self.b_r[i]).tanh();
            let z = cache.z[i];
            out[i] = z * x[i] + (1.0 - z) * cache.c[i];
        }
    }

    /// One state transition `x' = φ(x, u)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x];
        self.step_cached(x, u, &mut out, &mut StepCache::default());
        out
    }

    /// [`GruModel::step`] writing into `out` with caller-held scratch.
    pub fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64], scratch: &mut StepScratch) {
        self.step_cached(x, u, out, &mut scratch.0);
    }

    /// Vector-Jacobian product of one step: given `g = ∂s/∂x'`, accumulate
    /// `∂s/∂x` into `dx` and `∂s/∂u` into `du`.
    fn step_vjp(&self, x: &[f64], cache: &StepCache, g: &[f64], dx: &mut [f64], du: &mut [f64], work: &mut [f64]) {
        let n = self.n_x;
        work.iter_mut().for_each(|v| *v = 0.0);
        let (da_z, rest) = work.split_at_mut(n);
        let (da_r, rest) = rest.split_at_mut(n);
        let (da_f, dfx) = rest.split_at_mut(n);
        for i in 0..n {
            let (z, c) = (cache.z[i], cache.c[i]);
            da_z[i] = g[i] * (x[i] - c) * z * (1.0 - z);
            da_r[i] = g[i] * (1.0 - z) * (1.0 - c * c);
            dx[i] += g[i] * z;
        }
        // d(f ∘ x) = Urᵀ da_r
        mat_t_vec_add(&self.u_r, n, da_r, dfx);
        for i in 0..n {
            let f = cache.f[i];
            dx[i] += dfx[i] * f;
            da_f[i] = dfx[i] * x[i] * f * (1.0 - f);
        }
        mat_t_vec_add(&self.u_z, n, da_z, dx);
        mat_t_vec_add(&self.u_f, n, da_f, dx);
        mat_t_vec_add(&self.w_z, self.n_u, da_z, du);
        mat_t_vec_add(&self.w_r, self.n_u, da_r, du);
        mat_t_vec_add(&self.w_f, self.n_u, da_f, du);
    }
}

/// Free-function form of [`GruModel::step`].
pub fn gru_step(m: &GruModel, x: &[f64], u: &[f64]) -> Vec<f64> {
    m.step(x, u)
}

/// Predicted trajectory `x_0..x_H` under inputs `u_0..u_{H-1}`.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub n_x: usize,
    pub n_u: usize,
    /// `(H + 1) * n_x`, row per time step.
    pub states: Vec<f64>,
    /// `H * n_u`.
    pub inputs: Vec<f64>,
    caches: Vec<StepCache>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.inputs.len() / self.n_u.max(1)
    }

    pub fn state(&self, h: usize) -> &[f64] {
        &self.states[h * self.n_x..(h + 1) * self.n_x]
    }

    /// Augmented feature `[x_h 1]`.
    pub fn feature(&self, h: usize) -> Vec<f64> {
        let mut f = self.state(h).to_vec();
        f.push(1.0);
        f
    }

    /// Recompute in place, reusing buffers.
    pub fn recompute(&mut self, m: &GruModel, x0: &[f64], u_seq: &[f64]) {
        let horizon = u_seq.len() / m.n_u;
        self.n_x = m.n_x;
        self.n_u = m.n_u;
        self.inputs.clear();
        self.inputs.extend_from_slice(u_seq);
        self.states.resize((horizon + 1) * m.n_x, 0.0);
        self.states[..m.n_x].copy_from_slice(x0);
        self.caches.resize(horizon, StepCache::default());
        for h in 0..horizon {
            let (head, tail) = self.states.split_at_mut((h + 1) * m.n_x);
            let x = &head[h * m.n_x..];
            let u = &u_seq[h * m.n_u..(h + 1) * m.n_u];
            m.step_cached(x, u, &mut tail[..m.n_x], &mut self.caches[h]);
        }
    }

    /// Reverse pass: `adjoints` holds `∂s/∂x_h` for `h = 0..=H` (row-major,
    /// the `h = 0` row is ignored since `x_0` is fixed). Returns `∂s/∂u`.
    pub fn gradient(&self, m: &GruModel, adjoints: &[f64]) -> Vec<f64> {
        let horizon = self.horizon();
        let n = m.n_x;
        let mut du = vec![0.0; horizon * m.n_u];
        let mut lam = adjoints[horizon * n..(horizon + 1) * n].to_vec();
        let mut dx = vec![0.0; n];
        let mut work = vec![0.0; 4 * n];
        for h in (0..horizon).rev() {
            dx.iter_mut().for_each(|v| *v = 0.0);
            m.step_vjp(
                self.state(h),
                &self.caches[h],
                &lam,
                &mut dx,
                &mut du[h * m.n_u..(h + 1) * m.n_u],
                &mut work,
            );
            for i in 0..n {
                lam[i] = dx[i] + adjoints[h * n + i];
            }
        }
        du
    }
}

/// Roll the model forward from `x0` under `u_seq` (length `H * n_u`).
pub fn rollout(m: &GruModel, x0: &[f64], u_seq: &[f64]) -> Rollout {
    let mut r = Rollout::default();
    r.recompute(m, x0, u_seq);
    r
}

/// Gradient of a scalar function of the states with respect to the inputs,
/// given the partials `∂s/∂x_h` for `h = 0..=H`.
pub fn rollout_grad(m: &GruModel, x0: &[f64], u_seq: &[f64], adjoints: &[f64]) -> Vec<f64> {
    rollout(m, x0, u_seq).gradient(m, adjoints)
}

/// Append the constant bias feature.
pub fn augment(x: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() + 1);
    f.extend_from_slice(x);
    f.push(1.0);
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Uniform,
    TruncatedNormal,
}

/// Zero-mean measurement noise supported on `[-sigma, sigma]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sigma <= 0.0 {
            return 0.0;
        }
        match self.kind {
            NoiseKind::Uniform => rng.random_range(-self.sigma..=self.sigma),
            NoiseKind::TruncatedNormal => {
                let normal = Normal::new(0.0, self.sigma).expect("positive sigma");
                loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= self.sigma {
                        return v;
                    }
                }
            }
        }
    }
}

/// One plant transition.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantStep {
    pub x_next: Vec<f64>,
    pub y_star: Vec<f64>,
    pub y_meas: Vec<f64>,
}

/// Ground truth: known GRU dynamics with the true output layer and noise.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: GruModel,
    /// One parameter vector of length `n_x + 1` per output channel.
    pub theta_star: Vec<Vec<f64>>,
    pub noise: NoiseModel,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(model: GruModel, theta_star: Vec<Vec<f64>>, noise: NoiseModel, seed: u64) -> Result<Self> {
        model.validate()?;
        for th in &theta_star {
            check_len("theta_star channel", model.n_x + 1, th.len())?;
        }
        Ok(Self {
            model,
            theta_star,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        let f = augment(x);
        self.theta_star.iter().map(|th| dot(th, &f)).collect()
    }

    /// Noise-free and measured outputs at `x`.
    pub fn measure(&mut self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let y_star = self.output(x);
        let y_meas = y_star
            .iter()
            .map(|y| y + self.noise.sample(&mut self.rng))
            .collect();
        (y_star, y_meas)
    }

    pub fn step(&mut self, x: &[f64], u: &[f64]) -> PlantStep {
        let x_next = self.model.step(x, u);
        let (y_star, y_meas) = self.measure(x);
        PlantStep {
            x_next,
            y_star,
            y_meas,
        }
    }
}

/// Free-function form of [`Plant::step`].
pub fn plant_step(p: &mut Plant, x: &[f64], u: &[f64]) -> PlantStep {
    p.step(x, u)
}

/// Affine map between physical units and the model's scaled units:
/// `physical = offset + gain * scaled`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub offset: Vec<f64>,
    pub gain: Vec<f64>,
}

impl Scaling {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            gain: vec![1.0; n],
        }
    }

    pub fn to_physical(&self, i: usize, v: f64) -> f64 {
        self.offset[i] + self.gain[i] * v
    }

    pub fn to_scaled(&self, i: usize, v: f64) -> f64 {
        (v - self.offset[i]) / self.gain[i]
    }
}

/// On-disk model description: dimensions, GRU weights as row lists, true
/// output parameters, noise and unit scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    #[serde(default)]
    pub input_names: Vec<String>,
    #[serde(default)]
    pub output_names: Vec<String>,
    pub gru: GruRows,
    /// Rows are output channels; each row has `n_x + 1` entries, bias last.
    pub theta_star: Vec<Vec<f64>>,
    pub noise: NoiseModel,
    pub input_scaling: Scaling,
    pub output_scaling: Scaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruRows {
    pub w_r: Vec<Vec<f64>>,
    pub u_r: Vec<Vec<f64>>,
    pub b_r: Vec<f64>,
    pub w_z: Vec<Vec<f64>>,
    pub u_z: Vec<Vec<f64>>,
    pub b_z: Vec<f64>,
    pub w_f: Vec<Vec<f64>>,
    pub u_f: Vec<Vec<f64>>,
    pub b_f: Vec<f64>,
}

fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn flatten(rows: &[Vec<f64>], cols: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        check_len(what, cols, r.len())?;
        out.extend_from_slice(r);
    }
    Ok(out)
}

impl ModelFile {
    pub fn from_parts(
        model: &GruModel,
        theta_star: &[Vec<f64>],
        noise: NoiseModel,
        input_scaling: Scaling,
        output_scaling: Scaling,
    ) -> Self {
        let (nx, nu) = (model.n_x, model.n_u);
        Self {
            schema: MODEL_SCHEMA.to_string(),
            n_x: nx,
            n_u: nu,
            n_y: theta_star.len(),
            input_names: Vec::new(),
            output_names: Vec::new(),
            gru: GruRows {
                w_r: rows(&model.w_r, nu),
                u_r: rows(&model.u_r, nx),
                b_r: model.b_r.clone(),
                w_z: rows(&model.w_z, nu),
                u_z: rows(&model.u_z, nx),
                b_z: model.b_z.clone(),
                w_f: rows(&model.w_f, nu),
                u_f: rows(&model.u_f, nx),
                b_f: model.b_f.clone(),
            },
            theta_star: theta_star.to_vec(),
            noise,
            input_scaling,
            output_scaling,
        }
    }

    pub fn gru_model(&self) -> Result<GruModel> {
        let (nx, nu) = (self.n_x, self.n_u);
        let g = &self.gru;
        let m = GruModel {
            n_x: nx,
            n_u: nu,
            w_r: flatten(&g.w_r, nu, "w_r row")?,
            u_r: flatten(&g.u_r, nx, "u_r row")?,
            b_r: g.b_r.clone(),
            w_z: flatten(&g.w_z, nu, "w_z row")?,
            u_z: flatten(&g.u_z, nx, "u_z row")?,
            b_z: g.b_z.clone(),
            w_f: flatten(&g.w_f, nu, "w_f row")?,
            u_f: flatten(&g.u_f, nx, "u_f row")?,
            b_f: g.b_f.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ModelFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("model file: {e}")))?;
        if file.schema != MODEL_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported model schema `{}` (expected `{MODEL_SCHEMA}`)",
                file.schema
            )));
        }
        check_len("theta_star rows", file.n_y, file.theta_star.len())?;
        for th in &file.theta_star {
            check_len("theta_star row", file.n_x + 1, th.len())?;
        }
        check_len("input scaling", file.n_u, file.input_scaling.gain.len())?;
        check_len("output scaling", file.n_y, file.output_scaling.gain.len())?;
        file.gru_model()?;
        Ok(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model file serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_model(seed: u64, nx: usize, nu: usize, scale: f64) -> GruModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-scale..scale)).collect()
        };
        GruModel {
            n_x: nx,
            n_u: nu,
            w_r: draw(nx * nu),
            u_r: draw(nx * nx),
            b_r: draw(nx),
            w_z: draw(nx * nu),
            u_z: draw(nx * nx),
            b_z: draw(nx),
            w_f: draw(nx * nu),
            u_f: draw(nx * nx),
            b_f: draw(nx),
        }
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let m = GruModel::zeros(3, 1);
        assert_eq!(m.step(&[1.0, -2.0, 0.5], &[7.0]), vec![0.5, -1.0, 0.25]);
        let r = rollout(&m, &[1.0, -2.0, 0.5], &[0.3; 4]);
        for h in 0..=4 {
            let s = 0.5f64.powi(h as i32);
            assert_eq!(r.state(h), &[s, -2.0 * s, 0.5 * s][..]);
        }
    }

    #[test]
    fn hand_computed_two_state_step() {
        // Weights chosen so every pre-activation is a simple number.
        let m = GruModel {
            n_x: 2,
            n_u: 1,
            w_r: vec![1.0, -1.0],
            u_r: vec![0.5, 0.0, 0.0, 0.5],
            b_r: vec![0.0, 0.1],
            w_z: vec![0.0, 0.0],
            u_z: vec![0.0, 0.0, 0.0, 0.0],
            b_z: vec![0.0, 1.0],
            w_f: vec![0.0, 0.0],
            u_f: vec![0.0, 0.0, 0.0, 0.0],
            b_f: vec![0.0, 0.0],
        };
        let x = [0.2, -0.4];
        let u = [0.5];
        let next = m.step(&x, &u);
        // Channel 0: z = 0.5, f = 0.5, a = 0.5 + 0.5 * 0.1 = 0.55
        // x0' = 0.1 + 0.5 * tanh(0.55)
        // Channel 1: z = sigmoid(1) = 0.7310585786300049, a = -0.5 - 0.1 + 0.1 = -0.5
        // x1' = 0.73105857863 * -0.4 + 0.26894142137 * tanh(-0.5)
        assert_relative_eq!(next[0], 0.350_260_105_595_117_67, epsilon = 1e-14);
        assert_relative_eq!(next[1], -0.416_705_876_564_970_5, epsilon = 1e-14);
    }

    #[test]
    fn state_stays_in_unit_envelope() {
        let m = random_model(3, 4, 2, 2.0);
        let mut x = vec![1.7, -0.3, 0.0, -3.0];
        let bound: Vec<f64> = x.iter().map(|v: &f64| v.abs().max(1.0)).collect();
        for k in 0..200 {
            let u = [(k as f64 * 0.37).sin() * 5.0, (k as f64).cos()];
            x = m.step(&x, &u);
            for (v, b) in x.iter().zip(&bound) {
                assert!(v.abs() <= *b + 1e-15);
            }
        }
    }

    #[test]
    fn gradient_of_terminal_norm_on_zero_model_vanishes() {
        let m = GruModel::zeros(2, 1);
        let r = rollout(&m, &[0.4, -0.2], &[1.0, -2.0, 0.5]);
        let mut adj = vec![0.0; 4 * 2];
        let xh = r.state(3).to_vec();
        adj[6] = 2.0 * xh[0];
        adj[7] = 2.0 * xh[1];
        assert!(r.gradient(&m, &adj).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_linearization_for_tiny_weights() {
        // With weights of order 1e-4 the map is x' ≈ 0.5 x + 0.5 (Wr u + br),
        // so ∂(sum of x_H)/∂u_h ≈ 0.5^(H-h) * sum(Wr).
        let mut m = GruModel::zeros(2, 1);
        m.w_r = vec![1e-4, -2e-4];
        let horizon = 4;
        let r = rollout(&m, &[0.0, 0.0], &vec![0.1; horizon]);
        let mut adj = vec![0.0; (horizon + 1) * 2];
        adj[horizon * 2] = 1.0;
        adj[horizon * 2 + 1] = 1.0;
        let g = r.gradient(&m, &adj);
        for (h, gh) in g.iter().enumerate() {
            let expected = 0.5f64.powi((horizon - h) as i32) * -1e-4;
            assert_relative_eq!(*gh, expected, max_relative = 1e-6);
        }
    }

    #[test]
    fn uniform_noise_is_bounded_and_zero_sigma_is_exact() {
        let model = GruModel::zeros(1, 1);
        let mut p = Plant::new(
            model.clone(),
            vec![vec![2.0, 1.0]],
            NoiseModel { kind: NoiseKind::Uniform, sigma: 0.0 },
            1,
        )
        .unwrap();
        let s = p.step(&[0.5], &[0.0]);
        assert_eq!(s.y_meas, s.y_star);
        assert_eq!(s.y_star, vec![2.0]);

        let noise = NoiseModel { kind: NoiseKind::Uniform, sigma: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            assert!(noise.sample(&mut rng).abs() <= 0.1);
        }
        let tn = NoiseModel { kind: NoiseKind::TruncatedNormal, sigma: 0.1 };
        for _ in 0..10_000 {
            assert!(tn.sample(&mut rng).abs() <= 0.1);
        }
    }

    #[test]
    fn noise_mean_is_zero_within_sampling_error() {
        let sigma = 0.2;
        let n = 100_000;
        for kind in [NoiseKind::Uniform, NoiseKind::TruncatedNormal] {
            let noise = NoiseModel { kind, sigma };
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mean: f64 = (0..n).map(|_| noise.sample(&mut rng)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt(), "{kind:?}: {mean}");
        }
    }

    #[test]
    fn plant_is_deterministic_per_seed() {
        let model = random_model(5, 3, 1, 1.0);
        let theta = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let noise = NoiseModel { kind: NoiseKind::Uniform, sigma: 0.05 };
        let run = |seed| {
            let mut p = Plant::new(model.clone(), theta.clone(), noise, seed).unwrap();
            let mut x = vec![0.0; 3];
            let mut ys = Vec::new();
            for k in 0..50 {
                let s = p.step(&x, &[(k as f64).sin()]);
                ys.push(s.y_meas[0]);
                x = s.x_next;
            }
            ys
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn model_file_roundtrip_and_schema_check() {
        let m = random_model(1, 3, 1, 0.5);
        let file = ModelFile::from_parts(
            &m,
            &[vec![1.0, 2.0, 3.0, 4.0]],
            NoiseModel { kind: NoiseKind::Uniform, sigma: 0.01 },
            Scaling::identity(1),
            Scaling::identity(1),
        );
        let text = file.to_toml();
        let parsed = ModelFile::parse(&text).unwrap();
        assert_eq!(parsed.gru_model().unwrap(), m);
        let bad = text.replace(MODEL_SCHEMA, "salt-mpc/model/v0");
        assert!(matches!(ModelFile::parse(&bad), Err(Error::Config(_))));
    }
}

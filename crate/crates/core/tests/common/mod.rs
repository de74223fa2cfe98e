#![allow(dead_code)]

use ltosr_core::linalg::Matrix;
use ltosr_core::rng::{rng_for, Rng};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A random probability simplex point of length `k`.
pub fn simplex(k: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Interleaved binary pairs `(o, 1 - o)` for `k` classes.
pub fn pairs(k: usize, rng: &mut Rng) -> Vec<f64> {
    (0..k)
        .flat_map(|_| {
            let o: f64 = rng.random_range(0.01..0.99);
            [o, 1.0 - o]
        })
        .collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    central(x, FD_STEP, f)
}

fn central(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Outcome of a gradient check on a piecewise-smooth function.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// coordinates whose difference quotient changes between `h` and `h/10`
    /// (a ReLU or argmin kink lies within the step); excluded from the error
    pub kinks: usize,
    pub total: usize,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < FD_TOL && self.kinks * 10 <= self.total
    }
}

pub fn check_gradient(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    let coarse = central(x, FD_STEP, &mut f);
    let fine = central(x, FD_STEP / 10.0, &mut f);
    let mut out = GradCheck { max_rel_error: 0.0, kinks: 0, total: x.len() };
    for ((a, c), f) in analytic.iter().zip(&coarse).zip(&fine) {
        if rel(*c, *f) > FD_TOL {
            out.kinks += 1;
        } else {
            out.max_rel_error = out.max_rel_error.max(rel(*a, *c));
        }
    }
    out
}

/// Largest elementwise relative error, with magnitudes below `1e-3` treated
/// as absolute.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel(*a, *n))
        .fold(0.0, f64::max)
}

pub fn rng(parts: &[u64]) -> Rng {
    rng_for(parts)
}

use ltosr_core::losses::{
    filtered_inlier_loss, fuse_batch, multi_binary_loss_from_logits, open_set_loss, reg_loss, sup_ce, total_loss,
    LossTerms, LossWeights,
};
use ltosr_core::model::{ModelHeads, ModelSpec};
use ltosr_core::nn::{BackboneSpec, Parameters};
use ltosr_core::training::{joint_loss_and_grad, UnlabelledTargets};

fn matrix_check(m: &Matrix<f64>, analytic: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> GradCheck {
    let (r, c) = m.shape();
    check_gradient(m.as_slice(), analytic.as_slice(), |x| f(&Matrix::from_vec(r, c, x.to_vec()).unwrap()))
}

/// Gradient check of each loss w.r.t. its logits on a random instance
/// derived from `seed`.
pub fn loss_gradient_checks(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(&[900, seed]);
    let (m, k) = (6, 4);
    let labels: Vec<usize> = (0..m).map(|i| (i + seed as usize) % k).collect();
    let mut out = Vec::new();

    let logits = gaussian(m, k, 1.5, &mut r);
    let g = sup_ce(&logits, &labels).unwrap().grad;
    out.push(("sup_ce", matrix_check(&logits, &g, |x| sup_ce(x, &labels).unwrap().value)));

    let present: Vec<usize> = (0..k).collect();
    let etf_logits = gaussian(k, k, 1.5, &mut r);
    let g = reg_loss(&etf_logits, &present).unwrap().grad;
    out.push(("reg_loss", matrix_check(&etf_logits, &g, |x| reg_loss(x, &present).unwrap().value)));

    let binary = gaussian(m, 2 * k, 1.5, &mut r);
    let g = multi_binary_loss_from_logits(&binary, &labels).unwrap().grad;
    out.push((
        "multi_binary_loss",
        matrix_check(&binary, &g, |x| multi_binary_loss_from_logits(x, &labels).unwrap().value),
    ));

    let tau_r = 0.3;
    let closed: Vec<f64> = (0..m).flat_map(|_| simplex(k, &mut r)).collect();
    let closed = Matrix::from_vec(m, k, closed).unwrap();
    let prs: Vec<f64> = (0..m).flat_map(|_| pairs(k, &mut r)).collect();
    let prs = Matrix::from_vec(m, 2 * k, prs).unwrap();
    let fused = fuse_batch(&closed, &prs, tau_r).unwrap();
    let open_logits = gaussian(m, k + 1, 1.5, &mut r);
    let g = open_set_loss(&fused, &open_logits, tau_r).unwrap().grad;
    out.push((
        "open_set_loss",
        matrix_check(&open_logits, &g, |x| open_set_loss(&fused, x, tau_r).unwrap().value),
    ));

    let tau_p = 0.2;
    let strong = gaussian(m, k, 1.5, &mut r);
    let g = filtered_inlier_loss(&closed, &prs, &strong, tau_p).unwrap().grad;
    out.push((
        "filtered_inlier_loss",
        matrix_check(&strong, &g, |x| filtered_inlier_loss(&closed, &prs, x, tau_p).unwrap().value),
    ));
    out
}

pub fn small_mlp_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec::Mlp { input_dim: 5, hidden: vec![7], feature_dim: 4 },
        num_classes: 3,
        embedding_dim: 5,
        proj_hidden_dim: 6,
        seed,
    }
}

pub fn small_conv_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec::Conv { height: 6, width: 6, channels: 1, stage_channels: vec![2, 3], residual: true },
        num_classes: 3,
        embedding_dim: 4,
        proj_hidden_dim: 5,
        seed,
    }
}

fn flat(model: &ModelHeads<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    model.visit("", &mut |_, p| v.extend_from_slice(p));
    v
}

fn load_flat(model: &mut ModelHeads<f64>, values: &[f64]) {
    let mut at = 0;
    model.visit_mut("", &mut |_, p| {
        p.copy_from_slice(&values[at..at + p.len()]);
        at += p.len();
    });
}

/// Gradient check of the full joint objective w.r.t. every model parameter,
/// with weak-view targets held fixed.
pub fn model_gradient_check(spec: ModelSpec, seed: u64) -> GradCheck {
    let mut r = rng(&[901, seed]);
    let model = ModelHeads::<f64>::new(spec).unwrap();
    let k = model.num_classes();
    let input = match &model.spec.backbone {
        BackboneSpec::Mlp { input_dim, .. } => *input_dim,
        BackboneSpec::Conv { height, width, channels, .. } => height * width * channels,
    };
    let (m, n) = (6, 5);
    let x = gaussian(m, input, 1.0, &mut r);
    // two classes present twice, one absent, to exercise the center path
    let labels: Vec<usize> = (0..m).map(|i| i % (k - 1)).collect();
    let strong = gaussian(n, input, 1.0, &mut r);
    let closed: Vec<f64> = (0..n).flat_map(|_| simplex(k, &mut r)).collect();
    let prs: Vec<f64> = (0..n).flat_map(|_| pairs(k, &mut r)).collect();
    let targets = UnlabelledTargets {
        closed_probs: Matrix::from_vec(n, k, closed).unwrap(),
        pairs: Matrix::from_vec(n, 2 * k, prs).unwrap(),
    };
    let weights = LossWeights {
        lambda_sup: 1.0,
        lambda_reg: 0.7,
        lambda_mb: 0.5,
        lambda_o: 0.8,
        lambda_ui: 0.6,
        tau_r: 0.2,
        tau_p: 0.2,
        mu: 1,
    };
    let mut grad = model.zeros_like();
    joint_loss_and_grad(&model, &x, &labels, Some((&targets, &strong)), &weights, &mut grad).unwrap();
    let analytic = flat(&grad);
    let base = flat(&model);
    let mut probe = model.clone();
    check_gradient(&base, &analytic, |p| {
        load_flat(&mut probe, p);
        let mut scratch = probe.zeros_like();
        let rec = joint_loss_and_grad(&probe, &x, &labels, Some((&targets, &strong)), &weights, &mut scratch).unwrap();
        let t = rec.terms;
        total_loss(&LossTerms { sup: t.sup, reg: t.reg, mb: t.mb, open: t.open, inlier: t.inlier }, &weights).unwrap()
    })
}

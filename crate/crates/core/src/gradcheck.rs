//! Finite-difference checks of every analytic gradient, grouped by family.
//!
//! The analytic side is passed in through [`Analytics`] so tests can swap in
//! a broken implementation and confirm the harness notices.

use std::fmt;

use rand::RngCore;

use crate::contrast::{
    adversary_grad, alt_loss_grad, alt_loss_j_unchecked, info_nce, info_nce_unchecked, query_grad, symmetric_loss,
    AltLoss, ContrastResult,
};
use crate::encoder::MlpEncoder;
use crate::error::Result;
use crate::numerics::{finite_diff_grad, random_unit_rows, Matrix, SeededRng};

pub type AdversaryGradFn = fn(&ContrastResult, &Matrix) -> Result<Matrix>;
pub type QueryGradFn = fn(&ContrastResult, &Matrix, &Matrix, &Matrix) -> Result<(Matrix, Matrix)>;
pub type AltGradFn = fn(&Matrix, &Matrix) -> Result<Matrix>;

/// The analytic gradients under test.
#[derive(Clone, Copy)]
pub struct Analytics {
    pub adversary: AdversaryGradFn,
    pub query: QueryGradFn,
    pub alt: AltGradFn,
}

impl Default for Analytics {
    fn default() -> Self {
        Self {
            adversary: adversary_grad,
            query: query_grad,
            alt: alt_loss_grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Instances for the adversary, alt-loss and symmetric families.
    pub instances: usize,
    /// Instances for the query, key and encoder families.
    pub encoder_instances: usize,
    pub h: f64,
    /// An entry passes outright when analytic and numeric agree within this;
    /// the relative error is taken over the remaining entries. Central
    /// differences at `h = 1e-5` carry roughly `1e-10` of absolute roundoff,
    /// so small entries cannot be held to a relative bound.
    pub abs_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            encoder_instances: 20,
            h: 1e-5,
            abs_tolerance: 1e-8,
        }
    }
}

pub const TEMPERATURES: [f64; 3] = [0.02, 0.12, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyReport {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    /// Largest relative error among entries outside the absolute tolerance.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub threshold: f64,
}

impl FamilyReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub families: Vec<FamilyReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(FamilyReport::passed)
    }

    pub fn family(&self, name: &str) -> Option<&FamilyReport> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,instances,entries,max_rel_error,max_abs_error,threshold,passed\n");
        for f in &self.families {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{}\n",
                f.name,
                f.instances,
                f.entries,
                f.max_rel_error,
                f.max_abs_error,
                f.threshold,
                f.passed()
            ));
        }
        out
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for fam in &self.families {
            writeln!(
                f,
                "{:<10} {:>4} instances  max rel {:.3e}  max abs {:.3e}  threshold {:.0e}  {}",
                fam.name,
                fam.instances,
                fam.max_rel_error,
                fam.max_abs_error,
                fam.threshold,
                if fam.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Accumulates analytic vs numeric discrepancies for one family.
struct Tally {
    report: FamilyReport,
    abs_tolerance: f64,
}

impl Tally {
    fn new(name: &'static str, threshold: f64, abs_tolerance: f64) -> Self {
        Self {
            report: FamilyReport {
                name,
                instances: 0,
                entries: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                threshold,
            },
            abs_tolerance,
        }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        let r = &mut self.report;
        r.instances += 1;
        if analytic.len() != numeric.len() {
            r.max_rel_error = f64::INFINITY;
            return;
        }
        for (&a, &n) in analytic.iter().zip(numeric) {
            r.entries += 1;
            let abs = (a - n).abs();
            if !abs.is_finite() {
                r.max_rel_error = f64::INFINITY;
                r.max_abs_error = f64::INFINITY;
                continue;
            }
            r.max_abs_error = r.max_abs_error.max(abs);
            if abs > self.abs_tolerance {
                r.max_rel_error = r.max_rel_error.max(abs / a.abs().max(n.abs()));
            }
        }
    }

    fn fail(&mut self) {
        self.report.instances += 1;
        self.report.max_rel_error = f64::INFINITY;
    }
}

/// Numeric gradient of `loss` with respect to the entries of `m`.
fn fd_matrix<F: FnMut(&Matrix) -> f64>(m: &Matrix, h: f64, mut loss: F) -> Result<Vec<f64>> {
    let (rows, cols) = m.shape();
    finite_diff_grad(
        |x| loss(&Matrix::from_vec(rows, cols, x.to_vec()).expect("same shape")),
        m.data(),
        h,
    )
}

fn check_adversary(cfg: &GradcheckConfig, an: &Analytics) -> FamilyReport {
    let mut t = Tally::new("adversary", 1e-5, cfg.abs_tolerance);
    let root = SeededRng::new(cfg.seed).fork(1);
    for i in 0..cfg.instances {
        let mut rng = root.fork(i as u64);
        let tau = TEMPERATURES[i % TEMPERATURES.len()];
        let (q, k, n) = (
            random_unit_rows(&mut rng, 8, 8),
            random_unit_rows(&mut rng, 8, 8),
            random_unit_rows(&mut rng, 16, 8),
        );
        let run = || -> Result<(Vec<f64>, Vec<f64>)> {
            let analytic = (an.adversary)(&info_nce(&q, &k, &n, tau)?, &q)?;
            let numeric = fd_matrix(&n, cfg.h, |nn| info_nce_unchecked(&q, &k, nn, tau).map_or(f64::NAN, |r| r.loss))?;
            Ok((analytic.into_vec(), numeric))
        };
        match run() {
            Ok((a, n)) => t.compare(&a, &n),
            Err(_) => t.fail(),
        }
    }
    t.report
}

fn check_query_key(cfg: &GradcheckConfig, an: &Analytics) -> (FamilyReport, FamilyReport) {
    let mut tq = Tally::new("query", 1e-5, cfg.abs_tolerance);
    let mut tk = Tally::new("key", 1e-5, cfg.abs_tolerance);
    let root = SeededRng::new(cfg.seed).fork(2);
    for i in 0..cfg.encoder_instances {
        let mut rng = root.fork(i as u64);
        let tau = TEMPERATURES[i % TEMPERATURES.len()];
        let (q, k, n) = (
            random_unit_rows(&mut rng, 8, 8),
            random_unit_rows(&mut rng, 8, 8),
            random_unit_rows(&mut rng, 16, 8),
        );
        let run = || -> Result<(Matrix, Matrix, Vec<f64>, Vec<f64>)> {
            let (gq, gk) = (an.query)(&info_nce(&q, &k, &n, tau)?, &q, &k, &n)?;
            let nq = fd_matrix(&q, cfg.h, |qq| info_nce_unchecked(qq, &k, &n, tau).map_or(f64::NAN, |r| r.loss))?;
            let nk = fd_matrix(&k, cfg.h, |kk| info_nce_unchecked(&q, kk, &n, tau).map_or(f64::NAN, |r| r.loss))?;
            Ok((gq, gk, nq, nk))
        };
        match run() {
            Ok((gq, gk, nq, nk)) => {
                tq.compare(gq.data(), &nq);
                tk.compare(gk.data(), &nk);
            }
            Err(_) => {
                tq.fail();
                tk.fail();
            }
        }
    }
    (tq.report, tk.report)
}

fn with_params(template: &MlpEncoder, flat: &[f64]) -> MlpEncoder {
    let mut e = template.clone();
    let mut offset = 0;
    for p in e.params_mut() {
        p.copy_from_slice(&flat[offset..offset + p.len()]);
        offset += p.len();
    }
    e
}

/// Full pipeline: two input views through the encoder, InfoNCE against a
/// fixed bank, gradient with respect to every encoder parameter.
fn check_encoder(cfg: &GradcheckConfig, an: &Analytics) -> FamilyReport {
    let mut t = Tally::new("encoder", 1e-4, cfg.abs_tolerance);
    let root = SeededRng::new(cfg.seed).fork(3);
    let tau = 0.12;
    for i in 0..cfg.encoder_instances {
        let mut rng = root.fork(i as u64);
        let run = |rng: &mut SeededRng| -> Result<(Vec<f64>, Vec<f64>)> {
            let enc = MlpEncoder::init(&[8, 16, 4], rng.next_u64())?;
            let xa = Matrix::from_vec(8, 8, (0..64).map(|_| rng.normal()).collect())?;
            let xb = Matrix::from_vec(8, 8, (0..64).map(|_| rng.normal()).collect())?;
            let bank = random_unit_rows(rng, 16, 4);
            let (qa, tape_a) = enc.forward(&xa)?;
            let (kb, tape_b) = enc.forward(&xb)?;
            let (ga, gb) = (an.query)(&info_nce(&qa, &kb, &bank, tau)?, &qa, &kb, &bank)?;
            let mut grads = enc.backward(&tape_a, &ga)?;
            grads.add_assign(&enc.backward(&tape_b, &gb)?)?;
            let analytic: Vec<f64> = grads.slices().concat();
            let flat: Vec<f64> = enc.params().concat();
            let numeric = finite_diff_grad(
                |x| {
                    let e = with_params(&enc, x);
                    match (e.embed(&xa), e.embed(&xb)) {
                        (Ok(q), Ok(k)) => info_nce_unchecked(&q, &k, &bank, tau).map_or(f64::NAN, |r| r.loss),
                        _ => f64::NAN,
                    }
                },
                &flat,
                cfg.h,
            )?;
            Ok((analytic, numeric))
        };
        match run(&mut rng) {
            Ok((a, n)) => t.compare(&a, &n),
            Err(_) => t.fail(),
        }
    }
    t.report
}

fn check_alt(cfg: &GradcheckConfig, an: &Analytics) -> FamilyReport {
    let mut t = Tally::new("alt-loss", 1e-5, cfg.abs_tolerance);
    let root = SeededRng::new(cfg.seed).fork(4);
    for i in 0..cfg.instances {
        let mut rng = root.fork(i as u64);
        let tau = TEMPERATURES[i % TEMPERATURES.len()];
        let (q, n) = (random_unit_rows(&mut rng, 8, 8), random_unit_rows(&mut rng, 16, 8));
        let run = || -> Result<(Vec<f64>, Vec<f64>)> {
            let AltLoss { probs, .. } = alt_loss_j_unchecked(&q, &n, tau)?;
            let analytic = (an.alt)(&probs, &q)?;
            let numeric = fd_matrix(&n, cfg.h, |nn| alt_loss_j_unchecked(&q, nn, tau).map_or(f64::NAN, |r| r.value))?;
            Ok((analytic.into_vec(), numeric))
        };
        match run() {
            Ok((a, n)) => t.compare(&a, &n),
            Err(_) => t.fail(),
        }
    }
    t.report
}

fn check_symmetric(cfg: &GradcheckConfig) -> FamilyReport {
    let mut t = Tally::new("symmetric", 1e-5, cfg.abs_tolerance);
    let root = SeededRng::new(cfg.seed).fork(5);
    let sym = |a: &Matrix, b: &Matrix, n: &Matrix, tau: f64| -> f64 {
        match (info_nce_unchecked(a, b, n, tau), info_nce_unchecked(b, a, n, tau)) {
            (Ok(f), Ok(g)) => 0.5 * (f.loss + g.loss),
            _ => f64::NAN,
        }
    };
    for i in 0..cfg.encoder_instances {
        let mut rng = root.fork(i as u64);
        let tau = TEMPERATURES[i % TEMPERATURES.len()];
        let (a, b, n) = (
            random_unit_rows(&mut rng, 8, 8),
            random_unit_rows(&mut rng, 8, 8),
            random_unit_rows(&mut rng, 16, 8),
        );
        let run = || -> Result<(Vec<f64>, Vec<f64>)> {
            let s = symmetric_loss(&a, &b, &n, tau)?;
            let mut analytic = s.grad_a.into_vec();
            analytic.extend(s.grad_b.into_vec());
            analytic.extend(s.grad_negatives.into_vec());
            let mut numeric = fd_matrix(&a, cfg.h, |x| sym(x, &b, &n, tau))?;
            numeric.extend(fd_matrix(&b, cfg.h, |x| sym(&a, x, &n, tau))?);
            numeric.extend(fd_matrix(&n, cfg.h, |x| sym(&a, &b, x, tau))?);
            Ok((analytic, numeric))
        };
        match run() {
            Ok((a, n)) => t.compare(&a, &n),
            Err(_) => t.fail(),
        }
    }
    t.report
}

pub fn gradcheck_suite(config: &GradcheckConfig) -> GradcheckReport {
    gradcheck_suite_with(config, &Analytics::default())
}

pub fn gradcheck_suite_with(config: &GradcheckConfig, analytics: &Analytics) -> GradcheckReport {
    let (query, key) = check_query_key(config, analytics);
    GradcheckReport {
        families: vec![
            check_adversary(config, analytics),
            query,
            key,
            check_encoder(config, analytics),
            check_alt(config, analytics),
            check_symmetric(config),
        ],
    }
}

//! Independent brute-force verifiers backing the analytic code paths:
//! joint-enumeration marginals, mixture-equivalence validation, alpha-grid
//! feasibility scans, and random simplex generation.
//!
//! The arithmetic here is deliberately written from the definitions (triple
//! summation over latent assignments, literal condition checks) and shares no
//! helpers with the criteria or sampler modules — agreement between the two
//! routes is the point.

use crate::criteria::{implicit_reward_mixture, CriterionError};
use crate::dist::{DistError, TokenDistribution};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// Tolerance for analytic identities checked by the oracle.
pub const ANALYTIC_TOLERANCE: f64 = 1e-12;

/// A (p, q, q*) triple with a human-readable label.
#[derive(Debug, Clone)]
pub struct TripleFixture {
    pub p: TokenDistribution,
    pub q: TokenDistribution,
    pub q_star: TokenDistribution,
    pub label: String,
}

/// Marginal of the generative story by literal summation over every
/// (draft, rejection, final) assignment.
pub fn enumerate_marginal(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    mu: &[f64],
) -> Result<TokenDistribution, DistError> {
    if p.vocab_size() != q_star.vocab_size() || p.vocab_size() != mu.len() {
        return Err(DistError::SizeMismatch {
            left: p.vocab_size(),
            right: q_star.vocab_size().min(mu.len()),
        });
    }
    let vocab = p.vocab_size();
    let mut out = vec![0.0; vocab];
    for draft in 0..vocab {
        for rejected in [false, true] {
            let decision_prob = if rejected {
                mu[draft]
            } else {
                1.0 - mu[draft]
            };
            for token in 0..vocab {
                let emission = if rejected {
                    q_star.prob(token)
                } else if token == draft {
                    1.0
                } else {
                    0.0
                };
                out[token] += p.prob(draft) * decision_prob * emission;
            }
        }
    }
    TokenDistribution::new(out)
}

/// Entrywise check of the enclosing condition
/// `q*_v alpha <= s_v <= p_v + q*_v alpha` at a given `alpha`.
pub fn condition_holds(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    s: &TokenDistribution,
    alpha: f64,
) -> bool {
    (0..p.vocab_size()).all(|v| {
        let lhs = q_star.prob(v) * alpha;
        let rhs = p.prob(v) + q_star.prob(v) * alpha;
        lhs <= s.prob(v) + ANALYTIC_TOLERANCE && s.prob(v) <= rhs + ANALYTIC_TOLERANCE
    })
}

/// True iff some grid point `alpha` in `{0, step, 2 step, ..., 1}` satisfies
/// the enclosing condition entrywise.
pub fn feasibility_scan(
    p: &TokenDistribution,
    q_star: &TokenDistribution,
    s: &TokenDistribution,
    step: f64,
) -> bool {
    assert!(step > 0.0 && step <= 0.1, "step must lie in (0, 0.1]");
    let mut alpha = 0.0;
    let mut index = 0u64;
    loop {
        if condition_holds(p, q_star, s, alpha) {
            return true;
        }
        if alpha >= 1.0 {
            return false;
        }
        index += 1;
        alpha = (index as f64 * step).min(1.0);
    }
}

/// Outcome of checking the mixture-equivalence claim for one triple at one
/// `alpha`: the condition must hold, the implied rejection probabilities must
/// be a valid Bernoulli family, and the enumerated marginal must reproduce
/// the mixture.
#[derive(Debug, Clone)]
pub struct MixtureCheckReport {
    pub alpha: f64,
    pub condition_ok: bool,
    pub mu_in_unit_interval: bool,
    pub mu_max_excursion: f64,
    pub marginal_ok: bool,
    pub marginal_max_residual: f64,
}

impl MixtureCheckReport {
    pub fn passed(&self) -> bool {
        self.condition_ok && self.mu_in_unit_interval && self.marginal_ok
    }
}

/// Verifies the full mixture-equivalence argument on one triple: builds the
/// mixture `s`, checks the condition at `alpha`, rebuilds the rejection
/// probabilities from the closed form, and compares the enumerated marginal
/// to `s` within [`ANALYTIC_TOLERANCE`].
pub fn verify_mixture_equivalence(
    p: &TokenDistribution,
    q: &TokenDistribution,
    q_star: &TokenDistribution,
    alpha: f64,
) -> Result<MixtureCheckReport, CriterionError> {
    let s = implicit_reward_mixture(p, q, q_star)?;
    let condition_ok = condition_holds(p, q_star, &s, alpha);

    // The closed form, written out from scratch: tokens with no draft mass
    // carry mu = 1 by convention.
    let mut mu = Vec::with_capacity(p.vocab_size());
    let mut mu_max_excursion = 0.0f64;
    for v in 0..p.vocab_size() {
        let raw = if p.prob(v) > 0.0 {
            (p.prob(v) + q_star.prob(v) * alpha - s.prob(v)) / p.prob(v)
        } else {
            1.0
        };
        let excursion = (raw - raw.clamp(0.0, 1.0)).abs();
        mu_max_excursion = mu_max_excursion.max(excursion);
        mu.push(raw.clamp(0.0, 1.0));
    }
    let mu_in_unit_interval = mu_max_excursion <= ANALYTIC_TOLERANCE;

    let marginal = enumerate_marginal(p, q_star, &mu).map_err(CriterionError::Dist)?;
    let marginal_max_residual = (0..p.vocab_size())
        .map(|v| (marginal.prob(v) - s.prob(v)).abs())
        .fold(0.0, f64::max);
    Ok(MixtureCheckReport {
        alpha,
        condition_ok,
        mu_in_unit_interval,
        mu_max_excursion,
        marginal_ok: marginal_max_residual <= ANALYTIC_TOLERANCE,
        marginal_max_residual,
    })
}

/// Symmetric-Dirichlet draw via normalized Gamma variates. Entries are
/// strictly positive (zero draws are resampled).
pub fn random_simplex<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    concentration: f64,
) -> TokenDistribution {
    assert!(n >= 1, "n must be >= 1");
    assert!(concentration > 0.0, "concentration must be positive");
    if n == 1 {
        return TokenDistribution::new(vec![1.0]).expect("singleton simplex");
    }
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma shape");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && draws.iter().all(|&g| g > 0.0 && (g / sum) > 0.0) {
            let probs = draws.into_iter().map(|g| g / sum).collect();
            return TokenDistribution::new(probs).expect("normalized gamma draws");
        }
    }
}

/// Outcome of one named verification check.
#[derive(Debug, Clone)]
pub struct VerificationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Report of the full verification suite; rendering is deterministic given
/// the seed.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub checks: Vec<VerificationCheck>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&format!(
                "{} {} {}\n",
                check.name,
                check.detail,
                if check.passed { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "verification: {} ({}/{} checks passed)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        ));
        out
    }
}

/// Runs the oracle suite: mixture equivalence at interval midpoints,
/// closed-form vs. enumerated marginals, interval vs. grid-scan feasibility,
/// and the two hand-built fixtures.
pub fn verification_report(sizes: &[usize], trials: usize, seed: u64) -> VerificationReport {
    use crate::criteria::{alpha_interval, mu_implicit_reward};
    use crate::pgm::exact_marginal;
    use rand::SeedableRng;

    let mut checks = Vec::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    for &size in sizes {
        // Proposition check: feasible triples realize the mixture exactly.
        let mut feasible = 0usize;
        let mut failures = 0usize;
        let mut max_residual = 0.0f64;
        for _ in 0..trials {
            let p = random_simplex(&mut rng, size, 1.0);
            let q = random_simplex(&mut rng, size, 1.0);
            let q_star = random_simplex(&mut rng, size, 1.0);
            let s = match implicit_reward_mixture(&p, &q, &q_star) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let interval = alpha_interval(&p, &q_star, &s).expect("sizes match");
            if !interval.feasible {
                continue;
            }
            feasible += 1;
            let report = verify_mixture_equivalence(&p, &q, &q_star, interval.midpoint())
                .expect("full support");
            max_residual = max_residual.max(report.marginal_max_residual);
            if !report.passed() {
                failures += 1;
            }
        }
        checks.push(VerificationCheck {
            name: format!("mixture-equivalence size={size}"),
            passed: failures == 0 && feasible > 0,
            detail: format!(
                "trials={trials} feasible={feasible} failures={failures} max_residual={max_residual:.3e}"
            ),
        });

        // Oracle agreement: closed form vs. literal enumeration.
        let mut max_err = 0.0f64;
        for _ in 0..trials {
            let p = random_simplex(&mut rng, size, 1.0);
            let q_star = random_simplex(&mut rng, size, 1.0);
            let mu_values: Vec<f64> = (0..size).map(|_| rng.random::<f64>()).collect();
            let mu = crate::criteria::MuVector::new(mu_values.clone()).expect("in range");
            let closed = exact_marginal(&p, &q_star, &mu).expect("sizes match");
            let enumerated = enumerate_marginal(&p, &q_star, &mu_values).expect("sizes match");
            for v in 0..size {
                max_err = max_err.max((closed.prob(v) - enumerated.prob(v)).abs());
            }
        }
        checks.push(VerificationCheck {
            name: format!("oracle-agreement size={size}"),
            passed: max_err <= ANALYTIC_TOLERANCE,
            detail: format!("trials={trials} max_abs_err={max_err:.3e}"),
        });

        // Interval feasibility vs. the alpha-grid scan at step 1e-4. An
        // interval narrower than the grid step can be missed by the scan;
        // those cases are settled by checking the condition at the midpoint.
        let mut disagreements = 0usize;
        let mut narrow_rechecks = 0usize;
        for _ in 0..trials {
            let p = random_simplex(&mut rng, size, 1.0);
            let q = random_simplex(&mut rng, size, 1.0);
            let q_star = random_simplex(&mut rng, size, 1.0);
            let s = match implicit_reward_mixture(&p, &q, &q_star) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let interval = alpha_interval(&p, &q_star, &s).expect("sizes match");
            let scanned = feasibility_scan(&p, &q_star, &s, 1e-4);
            match (interval.feasible, scanned) {
                (true, true) | (false, false) => {}
                (true, false) => {
                    narrow_rechecks += 1;
                    if !condition_holds(&p, &q_star, &s, interval.midpoint()) {
                        disagreements += 1;
                    }
                }
                (false, true) => disagreements += 1,
            }
        }
        checks.push(VerificationCheck {
            name: format!("interval-scan size={size}"),
            passed: disagreements == 0,
            detail: format!(
                "trials={trials} disagreements={disagreements} narrow_rechecks={narrow_rechecks}"
            ),
        });
    }

    // Hand-built fixtures.
    let f = fixtures::feasible_triple();
    let s = implicit_reward_mixture(&f.p, &f.q, &f.q_star).expect("full support");
    let interval = crate::criteria::alpha_interval(&f.p, &f.q_star, &s).expect("sizes match");
    let lower_ok = (interval.lower - 1.0 / 3.0).abs() <= ANALYTIC_TOLERANCE;
    let upper_ok = (interval.upper - 5.0 / 6.0).abs() <= ANALYTIC_TOLERANCE;
    checks.push(VerificationCheck {
        name: format!("fixture {}", f.label),
        passed: interval.feasible && lower_ok && upper_ok,
        detail: format!("interval=[{:.17}, {:.17}]", interval.lower, interval.upper),
    });

    let f = fixtures::infeasible_triple();
    let s = implicit_reward_mixture(&f.p, &f.q, &f.q_star).expect("full support");
    let interval = crate::criteria::alpha_interval(&f.p, &f.q_star, &s).expect("sizes match");
    let scanned = feasibility_scan(&f.p, &f.q_star, &s, 1e-4);
    checks.push(VerificationCheck {
        name: format!("fixture {}", f.label),
        passed: !interval.feasible && !scanned,
        detail: format!("feasible={} grid_scan={}", interval.feasible, scanned),
    });

    VerificationReport { checks }
}

/// Hand-built fixtures shared by tests, the verification command and the
/// benchmarks.
pub mod fixtures {
    use super::TripleFixture;
    use crate::backends::TableLm;
    use crate::dist::TokenDistribution;

    fn dist(values: &[f64]) -> TokenDistribution {
        TokenDistribution::new(values.to_vec()).unwrap()
    }

    /// Mixture s = (5/18, 1/2, 2/9); the admissible alpha range is exactly
    /// [1/3, 5/6].
    pub fn feasible_triple() -> TripleFixture {
        TripleFixture {
            p: dist(&[0.5, 0.3, 0.2]),
            q: dist(&[0.4, 0.4, 0.2]),
            q_star: dist(&[0.2, 0.6, 0.2]),
            label: "feasible-worked".into(),
        }
    }

    /// The mixture shifts more mass onto token 0 than `p_0 + q*_0` can
    /// absorb, so no alpha in [0, 1] works. The base argmax disagrees with
    /// the proxy argmax, the shape of the unrepresentable case.
    pub fn infeasible_triple() -> TripleFixture {
        TripleFixture {
            p: dist(&[0.05, 0.95]),
            q: dist(&[0.02, 0.98]),
            q_star: dist(&[0.9, 0.1]),
            label: "infeasible-unaligned".into(),
        }
    }

    /// Small arithmetic-flavored table pair over the alphabet "12+=? ".
    /// Base knows the sum, proxy prefers punctuation; used for per-step
    /// marginal replay tests. Returns (base, proxy).
    pub fn arith_toy_tables() -> (TableLm, TableLm) {
        let alphabet = "12+=? ";
        let base = TableLm::new(
            6,
            Some(alphabet),
            // default: mildly prefers digits
            dist(&[0.3, 0.3, 0.1, 0.1, 0.1, 0.1]),
            vec![
                // after "1+1=": confident in '2'
                (vec![0, 2, 0, 3], dist(&[0.05, 0.7, 0.05, 0.05, 0.1, 0.05])),
                // after "=": digits
                (vec![3], dist(&[0.45, 0.45, 0.02, 0.02, 0.04, 0.02])),
            ],
        )
        .unwrap();
        let proxy = TableLm::new(
            6,
            Some(alphabet),
            dist(&[0.1, 0.1, 0.1, 0.1, 0.3, 0.3]),
            vec![
                (vec![0, 2, 0, 3], dist(&[0.05, 0.85, 0.02, 0.02, 0.04, 0.02])),
                (vec![1], dist(&[0.05, 0.05, 0.05, 0.05, 0.4, 0.4])),
            ],
        )
        .unwrap();
        (base, proxy)
    }

    /// Alphabet of the answer-format toy task.
    pub const FORMAT_TASK_ALPHABET: &str = "ABCDnswer: \nq0123.xyzuot";

    /// Answer-format toy task: the base model knows which option is correct
    /// but rambles lowercase filler on its own; the proxy always produces the
    /// "Answer: X" scaffold but guesses X uniformly. Prompts look like
    /// "q2." and the gold answer is the matching capital letter (q0 -> A,
    /// ..., q3 -> D). Returns (base, proxy).
    pub fn format_task_tables() -> (TableLm, TableLm) {
        let alphabet = FORMAT_TASK_ALPHABET;
        let n = alphabet.chars().count();
        let id = |c: char| alphabet.chars().position(|a| a == c).unwrap();
        let ids = |s: &str| s.chars().map(id).collect::<Vec<_>>();
        let point = |c: char| {
            let mut probs = vec![0.0; n];
            probs[id(c)] = 1.0;
            TokenDistribution::new(probs).unwrap()
        };
        let fillers = "xyzuot";
        let filler_uniform = {
            let mut probs = vec![0.0; n];
            for c in fillers.chars() {
                probs[id(c)] = 1.0 / 6.0;
            }
            TokenDistribution::new(probs).unwrap()
        };
        // Base: fillers by default; given the full prompt + scaffold it puts
        // 0.99 on the correct option.
        let mut base_transitions = Vec::new();
        for (digit, letter) in ['0', '1', '2', '3'].into_iter().zip(['A', 'B', 'C', 'D']) {
            let mut probs = vec![0.0; n];
            probs[id(letter)] = 0.99;
            for c in fillers.chars() {
                probs[id(c)] += 0.01 / 6.0;
            }
            base_transitions.push((
                ids(&format!("q{digit}.Answer: ")),
                TokenDistribution::new(probs).unwrap(),
            ));
        }
        let base = TableLm::new(n, Some(alphabet), filler_uniform, base_transitions).unwrap();

        // Proxy: spells "Answer: ", guesses the option uniformly, then stops.
        let slot_uniform = {
            let mut probs = vec![0.0; n];
            for c in ['A', 'B', 'C', 'D'] {
                probs[id(c)] = 0.25;
            }
            TokenDistribution::new(probs).unwrap()
        };
        let mut proxy_transitions = vec![
            (ids("A"), point('n')),
            (ids("An"), point('s')),
            (ids("Ans"), point('w')),
            (ids("Answ"), point('e')),
            (ids("Answe"), point('r')),
            (ids("Answer"), point(':')),
            (ids("Answer:"), point(' ')),
            (ids("Answer: "), slot_uniform),
        ];
        for letter in ['A', 'B', 'C', 'D'] {
            proxy_transitions.push((ids(&format!("Answer: {letter}")), point('\n')));
        }
        let proxy = TableLm::new(n, Some(alphabet), point('A'), proxy_transitions).unwrap();
        (base, proxy)
    }
}

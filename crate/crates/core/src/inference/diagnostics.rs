//! Convergence diagnostics: rank-normalized split-R̂ and multi-chain ESS.

use statrs::distribution::{ContinuousCDF, Normal};

use super::mcmc::McmcChain;

pub const RHAT_WARN: f64 = 1.05;
pub const ESS_WARN: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub acceptance_rate: f64,
    pub split_rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    pub fn max_rhat(&self) -> f64 {
        self.split_rhat.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Any parameter with R̂ above the threshold (or undefined).
    pub fn rhat_flag(&self) -> bool {
        self.split_rhat.iter().any(|r| !(*r <= RHAT_WARN))
    }

    pub fn ess_flag(&self) -> bool {
        self.ess.iter().any(|e| !(*e >= ESS_WARN))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Classic potential scale reduction over equal-length chains.
fn rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = n * sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    chains
        .iter()
        .flat_map(|c| {
            let tail = c.len() - half;
            [c[..half].to_vec(), c[tail..].to_vec()]
        })
        .collect()
}

/// Replace draws by normal scores of their pooled ranks (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut idx: Vec<(f64, usize, usize)> =
        chains.iter().enumerate().flat_map(|(c, v)| v.iter().enumerate().map(move |(i, x)| (*x, c, i))).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && idx[end].0 == idx[start].0 {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        let z = std_normal.inverse_cdf((rank - 0.375) / (total as f64 + 0.25));
        for &(_, c, i) in &idx[start..end] {
            out[c][i] = z;
        }
        start = end;
    }
    out
}

/// Rank-normalized split-R̂ of one parameter. Needs at least 4 draws per chain.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains[0].len() < 4 {
        return f64::NAN;
    }
    rhat(&rank_normalize(&split(chains)))
}

fn autocov(v: &[f64], m: f64, lag: usize) -> f64 {
    let n = v.len();
    (0..n - lag).map(|t| (v[t] - m) * (v[t + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size: combined autocorrelations, summed in
/// consecutive pairs until the first negative pair sum.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    if m == 0 || chains[0].len() < 4 {
        return f64::NAN;
    }
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_var(c)).collect();
    let w = mean(&vars);
    let b_over_n = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |lag: usize| -> f64 {
        let ac = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m as f64;
        1.0 - (w - ac) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        sum_pairs += pair;
        lag += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

pub fn diagnostics(chain: &McmcChain) -> DiagnosticsReport {
    let k = chain.n_params();
    let mut split_rhat_v = Vec::with_capacity(k);
    let mut ess_v = Vec::with_capacity(k);
    for p in 0..k {
        let chains = chain.per_chain(p);
        split_rhat_v.push(split_rhat(&chains));
        ess_v.push(effective_sample_size(&chains));
    }
    let mut report = DiagnosticsReport {
        acceptance_rate: chain.acceptance_rate,
        split_rhat: split_rhat_v,
        ess: ess_v,
        warnings: Vec::new(),
    };
    if chain.n_chains < 2 {
        report.warnings.push("fewer than 2 chains: R̂ is not meaningful".into());
    }
    if report.rhat_flag() {
        report.warnings.push(format!("split-R̂ max {:.4} exceeds {RHAT_WARN}", report.max_rhat()));
    }
    if report.ess_flag() {
        report.warnings.push(format!("ESS min {:.1} below {ESS_WARN}", report.min_ess()));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn iid(seed: u64, chains: usize, n: usize) -> Vec<Vec<f64>> {
        let mut st = Stream::new(seed);
        (0..chains).map(|_| st.normals(n)).collect()
    }

    #[test]
    fn iid_chains_have_unit_rhat_and_full_ess() {
        let c = iid(1, 4, 1000);
        let r = split_rhat(&c);
        assert!((0.99..=1.01).contains(&r), "rhat {r}");
        let e = effective_sample_size(&c);
        assert!(e > 3000.0, "ess {e}");
    }

    #[test]
    fn shifted_chain_raises_rhat() {
        let mut c = iid(2, 4, 500);
        c[0].iter_mut().for_each(|v| *v += 3.0);
        assert!(split_rhat(&c) > 1.1);
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // AR(1) with φ: integrated autocorrelation time (1 + φ) / (1 - φ).
        let phi: f64 = 0.8;
        let mut st = Stream::new(3);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = st.normal() / (1.0 - phi * phi).sqrt();
                (0..20_000)
                    .map(|_| {
                        x = phi * x + st.normal();
                        x
                    })
                    .collect()
            })
            .collect();
        let want = 80_000.0 * (1.0 - phi) / (1.0 + phi);
        let got = effective_sample_size(&chains);
        assert!((got - want).abs() / want < 0.15, "{got} vs {want}");
    }

    #[test]
    fn duplicated_random_walk_flags_ess() {
        let mut st = Stream::new(4);
        let mut x = 0.0;
        let walk: Vec<f64> = (0..2000)
            .map(|_| {
                x += st.normal();
                x
            })
            .collect();
        let chain = McmcChain::from_draws(vec![walk.iter().map(|v| vec![*v]).collect(); 4], 10, 20, 0);
        let report = diagnostics(&chain);
        assert!(report.ess_flag());
        assert!(report.warnings.iter().any(|w| w.contains("ESS")));
        assert_eq!(report.acceptance_rate, 0.5);
    }
}

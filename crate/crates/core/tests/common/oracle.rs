//! Arbitrary-precision evaluation of the subsampled Gaussian RDP bound, term
//! by term in linear space. Independent of the log-space implementation.

use astro_float::{BigFloat, Consts, Radix, RoundingMode};

const PREC: usize = 512;
const RM: RoundingMode = RoundingMode::ToEven;

pub struct Oracle {
    cc: Consts,
}

impl Oracle {
    pub fn new() -> Self {
        Self { cc: Consts::new().expect("constants cache") }
    }

    fn f(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, PREC)
    }

    fn int(&self, x: u64) -> BigFloat {
        BigFloat::from_u64(x, PREC)
    }

    pub fn to_f64(&mut self, x: &BigFloat) -> f64 {
        let s = x.format(Radix::Dec, RM, &mut self.cc).expect("format");
        s.parse::<f64>().unwrap_or_else(|_| panic!("unparseable oracle output {s}"))
    }

    /// (1/(α−1))·log(1 + γ²C(α,2)·min{4(e^{ε(2)}−1), 2e^{ε(2)}} + Σ_{j≥3} 2γ^jC(α,j)e^{(j−1)ε(j)})
    pub fn subsampled_rdp(&mut self, alpha: u32, gamma: f64, u: f64, sigma: f64) -> f64 {
        let g = self.f(gamma);
        let u = self.f(u);
        let s = self.f(sigma);
        let two = self.int(2);
        let one = self.int(1);
        // c = u² / (2σ²)
        let c = u.mul(&u, PREC, RM).div(&two.mul(&s, PREC, RM).mul(&s, PREC, RM), PREC, RM);
        let eps = |j: u64| c.mul(&BigFloat::from_u64(j, PREC), PREC, RM);

        let e2 = eps(2).exp(PREC, RM, &mut self.cc);
        let four_em1 = self.int(4).mul(&e2.sub(&one, PREC, RM), PREC, RM);
        let two_e = two.mul(&e2, PREC, RM);
        let m = four_em1.min(&two_e);

        let mut binom = self.int(1);
        let mut total = self.int(1);
        for j in 1..=alpha as u64 {
            binom = binom
                .mul(&BigFloat::from_u64(alpha as u64 - j + 1, PREC), PREC, RM)
                .div(&BigFloat::from_u64(j, PREC), PREC, RM);
            if j < 2 {
                continue;
            }
            let gj = g.powi(j as usize, PREC, RM);
            let term = if j == 2 {
                gj.mul(&binom, PREC, RM).mul(&m, PREC, RM)
            } else {
                let expo = eps(j).mul(&BigFloat::from_u64(j - 1, PREC), PREC, RM).exp(PREC, RM, &mut self.cc);
                gj.mul(&binom, PREC, RM).mul(&expo, PREC, RM).mul(&two, PREC, RM)
            };
            total = total.add(&term, PREC, RM);
        }
        let ln = total.ln(PREC, RM, &mut self.cc);
        let out = ln.div(&BigFloat::from_u64(alpha as u64 - 1, PREC), PREC, RM);
        self.to_f64(&out)
    }

    /// min over orders of Σ T_i ε'_i(α) + log(1/δ)/(α−1), each component given
    /// as (T, γ, u, noise std).
    pub fn total_epsilon(&mut self, comps: &[(u64, f64, f64, f64)], delta: f64, orders: &[u32]) -> (f64, u32) {
        let mut best = (f64::INFINITY, 0);
        for &alpha in orders {
            let mut sum = 0.0;
            for &(t, g, u, s) in comps {
                if t > 0 {
                    sum += t as f64 * self.subsampled_rdp(alpha, g, u, s);
                }
            }
            let v = sum + (1.0 / delta).ln() / (alpha as f64 - 1.0);
            if v < best.0 {
                best = (v, alpha);
            }
        }
        best
    }
}

/// Parameter tuples spanning small/large orders, rates and noise levels.
pub fn oracle_grid() -> Vec<(u32, f64, f64, f64)> {
    let mut out = Vec::new();
    for &alpha in &[2u32, 3, 5, 8, 16, 32, 64] {
        for &gamma in &[1e-3, 0.01, 0.1, 0.5, 1.0] {
            for &(u, sigma) in &[(1.0, 0.8), (1.0, 2.0), (4.0, 10.0), (16.0, 160.0)] {
                out.push((alpha, gamma, u, sigma));
            }
        }
    }
    out
}

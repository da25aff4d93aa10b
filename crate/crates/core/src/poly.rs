//! Sparse multivariate polynomials and the operators Φᵢⱼ, Kᵢⱼ, B_λ acting on them.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("Φ_ij requires i ≠ j (got i = j = {0})")]
    DiagonalPhi(usize),
    #[error("indices ({i}, {j}) out of range for {n} variables")]
    Index { i: usize, j: usize, n: usize },
}

/// Exponent vector, one entry per variable.
pub type Mono = Vec<u32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    n: usize,
    terms: BTreeMap<Mono, f64>,
}

impl Poly {
    pub fn zero(n: usize) -> Self {
        assert!(n >= 1, "polynomials need at least one variable");
        Poly { n, terms: BTreeMap::new() }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Self::zero(n);
        p.add_term(vec![0; n], c);
        p
    }

    /// c·x^mono
    pub fn monomial(mono: Mono, c: f64) -> Self {
        let mut p = Self::zero(mono.len());
        p.add_term(mono, c);
        p
    }

    /// Coordinate x_i (0-based).
    pub fn var(n: usize, i: usize) -> Self {
        let mut m = vec![0; n];
        m[i] = 1;
        Self::monomial(m, 1.0)
    }

    pub fn from_terms(n: usize, terms: impl IntoIterator<Item = (Mono, f64)>) -> Self {
        let mut p = Self::zero(n);
        for (m, c) in terms {
            assert_eq!(m.len(), n, "monomial length must equal the variable count");
            p.add_term(m, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Mono, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, mono: &[u32]) -> f64 {
        self.terms.get(mono).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.iter().sum()).max().unwrap_or(0)
    }

    /// Add c·x^mono, dropping the entry if it cancels to zero.
    pub fn add_term(&mut self, mono: Mono, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(mono) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        assert_eq!(self.n, other.n);
        let mut p = self.clone();
        for (m, c) in other.terms() {
            p.add_term(m.clone(), c);
        }
        p
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut p = Poly::zero(self.n);
        for (m, c) in self.terms() {
            p.add_term(m.clone(), c * s);
        }
        p
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        assert_eq!(self.n, other.n);
        let mut p = Poly::zero(self.n);
        for (ma, ca) in self.terms() {
            for (mb, cb) in other.terms() {
                let m: Mono = ma.iter().zip(mb).map(|(a, b)| a + b).collect();
                p.add_term(m, ca * cb);
            }
        }
        p
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut r = Poly::constant(self.n, 1.0);
        for _ in 0..k {
            r = r.mul(self);
        }
        r
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        self.terms()
            .map(|(m, c)| c * m.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product::<f64>())
            .sum()
    }

    /// ∂/∂x_i (0-based).
    pub fn deriv(&self, i: usize) -> Poly {
        let mut p = Poly::zero(self.n);
        for (m, c) in self.terms() {
            if m[i] > 0 {
                let mut d = m.clone();
                d[i] -= 1;
                p.add_term(d, c * m[i] as f64);
            }
        }
        p
    }

    /// Same polynomial viewed in `n` ≥ current variables.
    pub fn extend(&self, n: usize) -> Poly {
        assert!(n >= self.n);
        let mut p = Poly::zero(n);
        for (m, c) in self.terms() {
            let mut e = m.clone();
            e.resize(n, 0);
            p.add_term(e, c);
        }
        p
    }

    /// Drop coefficients with |c| ≤ tol.
    pub fn prune(&self, tol: f64) -> Poly {
        let mut p = Poly::zero(self.n);
        for (m, c) in self.terms() {
            if c.abs() > tol {
                p.add_term(m.clone(), c);
            }
        }
        p
    }

    /// Largest coefficient gap between two polynomials in the same variables.
    pub fn max_abs_diff(&self, other: &Poly) -> f64 {
        let mut d: f64 = 0.0;
        for (m, c) in self.terms() {
            d = d.max((c - other.coeff(m)).abs());
        }
        for (m, c) in other.terms() {
            d = d.max((c - self.coeff(m)).abs());
        }
        d
    }

    /// ⟨f, μⁿ⟩ given raw moments `raw(r) = ⟨x^r, μ⟩`.
    pub fn integrate(&self, raw: impl Fn(u32) -> f64) -> f64 {
        self.terms().map(|(m, c)| c * m.iter().map(|&e| raw(e)).product::<f64>()).sum()
    }

    /// ⟨f, μⁿ⟩ for an empirical measure with the given atoms.
    pub fn integrate_atoms(&self, atoms: &[f64]) -> f64 {
        let deg = self.terms.keys().flat_map(|m| m.iter().copied()).max().unwrap_or(0);
        let raw = raw_moments(atoms, deg);
        self.integrate(|r| raw[r as usize])
    }
}

/// mean of u^r for r = 0..=max_order
pub fn raw_moments(atoms: &[f64], max_order: u32) -> Vec<f64> {
    let mut raw = vec![0.0; max_order as usize + 1];
    for &u in atoms {
        let mut p = 1.0;
        for slot in raw.iter_mut() {
            *slot += p;
            p *= u;
        }
    }
    let n = atoms.len() as f64;
    raw.iter_mut().for_each(|v| *v /= n);
    raw
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (k, (m, c)) in self.terms().enumerate() {
            if k > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{c}")?;
            for (i, &e) in m.iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{e}", i + 1)?,
                }
            }
        }
        Ok(())
    }
}

/// Φᵢⱼ with 1-based `i ≠ j`: identify variable j with variable i and relabel
/// to n-1 variables. Argument k of f receives y_k (k < j), y_{i'} (k = j) or
/// y_{k-1} (k > j), where i' = i if i < j and i - 1 otherwise.
pub fn apply_phi(i: usize, j: usize, p: &Poly) -> Result<Poly, PolyError> {
    let n = p.nvars();
    if i == j {
        return Err(PolyError::DiagonalPhi(i));
    }
    if !(1..=n).contains(&i) || !(1..=n).contains(&j) {
        return Err(PolyError::Index { i, j, n });
    }
    let ip = if i < j { i } else { i - 1 };
    let mut out = Poly::zero(n - 1);
    for (m, c) in p.terms() {
        let mut e = vec![0u32; n - 1];
        for (k0, &a) in m.iter().enumerate() {
            let k = k0 + 1;
            let target = if k < j {
                k
            } else if k == j {
                ip
            } else {
                k - 1
            };
            e[target - 1] += a;
        }
        out.add_term(e, c);
    }
    Ok(out)
}

/// Kᵢⱼ with 1-based indices: ∂²ᵢⱼf(x₁..xₙ)·x²ₙ₊₁.
pub fn apply_k(i: usize, j: usize, p: &Poly) -> Poly {
    let n = p.nvars();
    assert!((1..=n).contains(&i) && (1..=n).contains(&j), "indices out of range");
    let d = p.deriv(i - 1).deriv(j - 1);
    let mut out = Poly::zero(n + 1);
    for (m, c) in d.terms() {
        let mut e = m.clone();
        e.push(2);
        out.add_term(e, c);
    }
    out
}

/// B_λ f = ½Δf - 2λ(∇f·1)(x·1).
pub fn b_operator(p: &Poly, lambda: f64) -> Poly {
    let n = p.nvars();
    let mut out = Poly::zero(n);
    let mut grad_sum = Poly::zero(n);
    for i in 0..n {
        let di = p.deriv(i);
        out = out.add(&di.deriv(i).scale(0.5));
        grad_sum = grad_sum.add(&di);
    }
    let mut ones = Poly::zero(n);
    for i in 0..n {
        ones = ones.add(&Poly::var(n, i));
    }
    out.add(&grad_sum.mul(&ones).scale(-2.0 * lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, terms: &[(&[u32], f64)]) -> Poly {
        Poly::from_terms(n, terms.iter().map(|(m, c)| (m.to_vec(), *c)))
    }

    #[test]
    fn phi_examples() {
        assert_eq!(apply_phi(1, 2, &p(2, &[(&[1, 1], 1.0)])).unwrap(), p(1, &[(&[2], 1.0)]));
        assert_eq!(apply_phi(1, 2, &p(2, &[(&[1, 0], 1.0), (&[0, 1], 1.0)])).unwrap(), p(1, &[(&[1], 2.0)]));
        assert_eq!(apply_phi(2, 3, &p(3, &[(&[1, 1, 2], 1.0)])).unwrap(), p(2, &[(&[1, 3], 1.0)]));
    }

    #[test]
    fn phi_matches_substitution_on_points() {
        let f = p(3, &[(&[1, 2, 0], 1.5), (&[0, 1, 3], -2.0), (&[2, 0, 1], 0.5)]);
        let y = [0.3, -1.2];
        for i in 1..=3 {
            for j in 1..=3 {
                if i == j {
                    continue;
                }
                let ip = if i < j { i } else { i - 1 };
                let mut x = Vec::new();
                for k in 1..=3 {
                    x.push(if k < j {
                        y[k - 1]
                    } else if k == j {
                        y[ip - 1]
                    } else {
                        y[k - 2]
                    });
                }
                assert!((apply_phi(i, j, &f).unwrap().eval(&y) - f.eval(&x)).abs() < 1e-12, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn phi_rejects_diagonal() {
        assert_eq!(apply_phi(2, 2, &Poly::var(3, 0)), Err(PolyError::DiagonalPhi(2)));
        assert!(apply_phi(1, 4, &Poly::var(3, 0)).is_err());
    }

    #[test]
    fn k_examples() {
        assert_eq!(apply_k(1, 1, &p(1, &[(&[2], 1.0)])), p(2, &[(&[0, 2], 2.0)]));
        assert!(apply_k(1, 1, &p(1, &[(&[1], 3.0), (&[0], 1.0)])).is_zero());
        assert_eq!(apply_k(1, 2, &p(2, &[(&[2, 2], 1.0)])), p(3, &[(&[1, 1, 2], 4.0)]));
    }

    #[test]
    fn b_examples() {
        let lam = 1.7;
        assert_eq!(b_operator(&p(1, &[(&[1], 1.0)]), lam), p(1, &[(&[1], -2.0 * lam)]));
        assert_eq!(b_operator(&p(1, &[(&[2], 1.0)]), lam), p(1, &[(&[0], 1.0), (&[2], -4.0 * lam)]));
    }

    #[test]
    fn cancellation_removes_terms() {
        let a = p(2, &[(&[1, 0], 1.0), (&[0, 1], 2.0)]);
        let s = a.add(&a.scale(-1.0));
        assert!(s.is_zero());
    }

    #[test]
    fn integrate_against_atoms() {
        let atoms = [-1.0, 0.5, 2.0];
        let f = p(2, &[(&[1, 1], 1.0), (&[2, 0], 3.0)]);
        let mut brute = 0.0;
        for a in atoms {
            for b in atoms {
                brute += f.eval(&[a, b]);
            }
        }
        brute /= 9.0;
        assert!((f.integrate_atoms(&atoms) - brute).abs() < 1e-12);
    }
}

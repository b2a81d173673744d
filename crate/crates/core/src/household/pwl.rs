//! Exact dynamic programming over convex piecewise-linear value functions.
//!
//! The per-step bill `buy * [n + a]^+ - sell * [n + a]^-` is convex and
//! piecewise linear in the battery action `a` as long as `buy >= sell`. The
//! cost-to-go as a function of state of charge then stays convex and
//! piecewise linear, and one backward step is an infimal convolution
//! (merge of slope-sorted segments) followed by a restriction to
//! `[0, capacity]`. Slopes of the cost-to-go are negated prices, so the
//! number of segments is bounded by the number of distinct prices and the
//! whole solve is linear in the horizon.

use crate::billing::step_cost;

const SLOPE_EPS: f64 = 1e-12;
const LEN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    len: f64,
    slope: f64,
}

/// Convex piecewise-linear function on `[x0, x0 + sum(len)]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvexPwl {
    x0: f64,
    v0: f64,
    segs: Vec<Segment>,
}

impl ConvexPwl {
    fn constant(lo: f64, hi: f64, value: f64) -> Self {
        let mut f = Self {
            x0: lo,
            v0: value,
            segs: Vec::new(),
        };
        f.push(hi - lo, 0.0);
        f
    }

    fn push(&mut self, len: f64, slope: f64) {
        if len <= LEN_EPS {
            return;
        }
        match self.segs.last_mut() {
            Some(last) if (last.slope - slope).abs() <= SLOPE_EPS => last.len += len,
            _ => self.segs.push(Segment { len, slope }),
        }
    }

    pub(crate) fn eval(&self, x: f64) -> f64 {
        let mut pos = self.x0;
        let mut v = self.v0;
        for s in &self.segs {
            if x <= pos + s.len {
                return v + s.slope * (x - pos).max(0.0);
            }
            pos += s.len;
            v += s.slope * s.len;
        }
        // Beyond the domain only by rounding; extend the last piece.
        v + self.segs.last().map_or(0.0, |s| s.slope) * (x - pos)
    }

    fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.segs.iter().scan(self.x0, |pos, s| {
            *pos += s.len;
            Some(*pos)
        })
    }

    /// `(self □ other)(x) = min_u self(u) + other(x - u)`.
    fn inf_convolve(&self, other: &ConvexPwl) -> ConvexPwl {
        let mut out = ConvexPwl {
            x0: self.x0 + other.x0,
            v0: self.v0 + other.v0,
            segs: Vec::with_capacity(self.segs.len() + other.segs.len()),
        };
        let (mut i, mut j) = (0, 0);
        while i < self.segs.len() || j < other.segs.len() {
            let take_self = match (self.segs.get(i), other.segs.get(j)) {
                (Some(a), Some(b)) => a.slope <= b.slope,
                (Some(_), None) => true,
                _ => false,
            };
            let s = if take_self {
                i += 1;
                self.segs[i - 1]
            } else {
                j += 1;
                other.segs[j - 1]
            };
            out.push(s.len, s.slope);
        }
        out
    }

    /// Restrict the domain to `[lo, hi]`, which must lie inside it.
    fn restrict(&self, lo: f64, hi: f64) -> ConvexPwl {
        let mut out = ConvexPwl {
            x0: lo,
            v0: self.eval(lo),
            segs: Vec::with_capacity(self.segs.len()),
        };
        let mut pos = self.x0;
        for s in &self.segs {
            let a = pos.max(lo);
            let b = (pos + s.len).min(hi);
            if b > a {
                out.push(b - a, s.slope);
            }
            pos += s.len;
            if pos >= hi {
                break;
            }
        }
        // Close any rounding gap at the right end.
        let covered: f64 = out.segs.iter().map(|s| s.len).sum();
        if let Some(last) = out.segs.last_mut() {
            last.len += (hi - lo) - covered;
        }
        out
    }
}

/// Stage cost `phi(y) = f(-y)` for `y` in `[-rate, rate]` where `f(a)` is the
/// bill of action `a` at net load `net`.
fn stage_phi(net: f64, buy: f64, sell: f64, rate: f64) -> ConvexPwl {
    let kink = net.clamp(-rate, rate);
    let mut f = ConvexPwl {
        x0: -rate,
        v0: step_cost(net + rate, buy, sell),
        segs: Vec::with_capacity(2),
    };
    f.push(kink + rate, -buy);
    f.push(rate - kink, -sell);
    f
}

/// Minimum-bill schedule for one household and one battery size.
///
/// Returns the actions (kW, + charge) and the optimal bill. The battery
/// starts empty and the terminal state is free.
pub(crate) fn solve(net: &[f64], buy: &[f64], sell: &[f64], capacity: f64, rate: f64) -> (Vec<f64>, f64) {
    let horizon = net.len();
    let mut to_go = Vec::with_capacity(horizon + 1);
    to_go.push(ConvexPwl::constant(0.0, capacity, 0.0));
    for t in (0..horizon).rev() {
        let next = to_go.last().unwrap();
        let phi = stage_phi(net[t], buy[t], sell[t], rate);
        to_go.push(next.inf_convolve(&phi).restrict(0.0, capacity));
    }
    to_go.reverse();
    let optimum = to_go[0].eval(0.0);

    let mut actions = Vec::with_capacity(horizon);
    let mut soc: f64 = 0.0;
    let mut candidates = Vec::new();
    for t in 0..horizon {
        let next = &to_go[t + 1];
        let lo = (-rate).max(-soc);
        let hi = rate.min(capacity - soc).max(lo);
        candidates.clear();
        candidates.extend([0.0_f64.clamp(lo, hi), lo, hi, (-net[t]).clamp(lo, hi)]);
        candidates.extend(next.breakpoints().map(|b| (b - soc).clamp(lo, hi)));
        let objective = |a: f64| step_cost(net[t] + a, buy[t], sell[t]) + next.eval(soc + a);
        let mut best_a = candidates[0];
        let mut best_v = objective(best_a);
        for &a in &candidates[1..] {
            let v = objective(a);
            let tol = 1e-12 * (1.0 + best_v.abs());
            if v < best_v - tol || (v <= best_v + tol && a.abs() < best_a.abs()) {
                best_a = a;
                best_v = v;
            }
        }
        actions.push(best_a);
        soc = (soc + best_a).clamp(0.0, capacity);
    }
    (actions, optimum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inf_convolution_of_two_vees() {
        // |x| on [-1, 1] convolved with 2|x| on [-1, 1] is |x| on [-2, 2].
        let a = ConvexPwl {
            x0: -1.0,
            v0: 1.0,
            segs: vec![Segment { len: 1.0, slope: -1.0 }, Segment { len: 1.0, slope: 1.0 }],
        };
        let b = ConvexPwl {
            x0: -1.0,
            v0: 2.0,
            segs: vec![Segment { len: 1.0, slope: -2.0 }, Segment { len: 1.0, slope: 2.0 }],
        };
        let c = a.inf_convolve(&b);
        for x in [-2.0, -1.5, -1.0, 0.0, 0.5, 1.0, 2.0] {
            let brute = (0..=2000)
                .map(|k| -1.0 + k as f64 * 0.001)
                .filter(|u| (x - u).abs() <= 1.0 + 1e-12)
                .map(|u| a.eval(u) + b.eval(x - u))
                .fold(f64::INFINITY, f64::min);
            assert!((c.eval(x) - brute).abs() < 1e-9, "x={x}: {} vs {brute}", c.eval(x));
        }
    }

    #[test]
    fn restrict_keeps_values() {
        let f = ConvexPwl {
            x0: -2.0,
            v0: 5.0,
            segs: vec![Segment { len: 3.0, slope: -1.0 }, Segment { len: 2.0, slope: 0.5 }],
        };
        let g = f.restrict(0.0, 2.0);
        for x in [0.0, 0.5, 1.0, 1.5, 2.0] {
            assert!((f.eval(x) - g.eval(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_capacity_does_nothing() {
        let net = [1.0, -2.0, 3.0];
        let (a, v) = solve(&net, &[0.3; 3], &[0.0; 3], 0.0, 0.0);
        assert_eq!(a, vec![0.0; 3]);
        assert!((v - 1.2).abs() < 1e-12);
    }

    #[test]
    fn stores_surplus_for_later() {
        // 3 kWh surplus then 2 kWh demand: store 2 kWh, pay nothing.
        let net = [-3.0, 2.0];
        let (a, v) = solve(&net, &[0.3; 2], &[0.0; 2], 5.0, 5.0);
        assert!(v.abs() < 1e-12, "{v}");
        assert!((a[1] + 2.0).abs() < 1e-12);
    }
}

//! Piecewise-constant coefficients on the inaccessible arc, parametrized
//! by interior breakpoints and per-piece values, with projections onto the
//! admissible boxes used by the optimizers.
//!
//! Arclength coordinate s runs over [0, L] where L is the arc length and
//! s = 0 is the arc start. Pieces are half-open: piece j covers
//! [s_{j-1}, s_j), so a breakpoint evaluates to the piece that begins
//! there; the final piece is closed at L.

use crate::{Error, Result};

/// Minimum gap enforced between consecutive breakpoints (and the arc
/// endpoints) on top of the requested minimum piece measure, so projected
/// iterates never collapse a piece to zero width exactly.
pub const PIECE_GAP_EPS: f64 = 1e-9;

/// Box bounds for coefficient values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueBounds {
    pub lower: f64,
    pub upper: f64,
}

impl ValueBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && upper > lower) {
            return Err(Error::validation(
                "value bounds must satisfy 0 < lower < upper",
            ));
        }
        Ok(ValueBounds { lower, upper })
    }
    /// Default admissible box.
    pub fn standard() -> Self {
        ValueBounds { lower: 0.1, upper: 10.0 }
    }
}

/// Piecewise-constant function on an arc of length `length`, with
/// `values.len()` pieces separated by `values.len() - 1` sorted interior
/// breakpoints. Carries the admissible box it is meant to live in;
/// intermediate optimizer trial points may leave the box, `project_box`
/// restores it.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstantBoundaryCoefficient {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub length: f64,
    pub bounds: ValueBounds,
}

impl PiecewiseConstantBoundaryCoefficient {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>, length: f64) -> Result<Self> {
        let q = PiecewiseConstantBoundaryCoefficient {
            breakpoints,
            values,
            length,
            bounds: ValueBounds::standard(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_bounds(mut self, bounds: ValueBounds) -> Self {
        self.bounds = bounds;
        self
    }

    /// Constant coefficient over the arc.
    pub fn constant(value: f64, length: f64) -> Self {
        PiecewiseConstantBoundaryCoefficient {
            breakpoints: Vec::new(),
            values: vec![value],
            length,
            bounds: ValueBounds::standard(),
        }
    }

    pub fn piece_count(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) {
            return Err(Error::validation("arc length must be positive"));
        }
        if self.values.is_empty() {
            return Err(Error::validation("coefficient needs at least one piece"));
        }
        if self.breakpoints.len() + 1 != self.values.len() {
            return Err(Error::validation(format!(
                "{} breakpoints do not delimit {} pieces",
                self.breakpoints.len(),
                self.values.len()
            )));
        }
        let mut prev = 0.0;
        for &s in &self.breakpoints {
            if !(s > prev && s < self.length) {
                return Err(Error::validation(
                    "breakpoints must be strictly increasing inside (0, length)",
                ));
            }
            prev = s;
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("coefficient values must be finite"));
        }
        Ok(())
    }

    /// Value at arclength `s`. A breakpoint returns the value of the piece
    /// that begins there; points outside [0, L] clamp to the end pieces.
    pub fn evaluate(&self, s: f64) -> f64 {
        self.values[self.piece_index(s)]
    }

    /// Index of the piece containing arclength `s` (same convention as
    /// `evaluate`).
    pub fn piece_index(&self, s: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= s)
    }

    /// Piece boundaries including the arc endpoints: [0, s_1, .., L].
    pub fn knots(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.values.len() + 1);
        k.push(0.0);
        k.extend_from_slice(&self.breakpoints);
        k.push(self.length);
        k
    }

    /// Clamp every piece value into the box.
    pub fn project_box(&mut self, bounds: ValueBounds) {
        for v in &mut self.values {
            *v = v.clamp(bounds.lower, bounds.upper);
        }
    }

    /// Restore strict ordering of breakpoints with at least
    /// `min_measure + PIECE_GAP_EPS` between consecutive piece boundaries
    /// (arc endpoints included). Runs a forward pass pushing breakpoints
    /// right, then a backward pass pushing left; when total slack exists
    /// the result satisfies every gap constraint and moves no breakpoint
    /// further than necessary.
    pub fn project_partition_constraints(&mut self, min_measure: f64) -> Result<()> {
        if min_measure < 0.0 {
            return Err(Error::validation("minimum piece measure must be >= 0"));
        }
        let gap = min_measure + PIECE_GAP_EPS;
        let n = self.breakpoints.len();
        if (n + 1) as f64 * gap >= self.length {
            return Err(Error::validation(format!(
                "{} pieces of measure >= {min_measure} do not fit in an arc of length {}",
                n + 1,
                self.length
            )));
        }
        let mut prev = 0.0;
        for b in self.breakpoints.iter_mut() {
            *b = b.max(prev + gap);
            prev = *b;
        }
        let mut next = self.length;
        for b in self.breakpoints.iter_mut().rev() {
            *b = b.min(next - gap);
            next = *b;
        }
        debug_assert!(self.validate().is_ok());
        Ok(())
    }

    /// L2 norm of the coefficient over the arc, integrated exactly.
    pub fn l2_norm(&self) -> f64 {
        let knots = self.knots();
        let mut acc = 0.0;
        for (j, v) in self.values.iter().enumerate() {
            acc += v * v * (knots[j + 1] - knots[j]);
        }
        acc.sqrt()
    }
}

/// Relative L2 distance between two piecewise-constant coefficients on the
/// same arc: ||a - b|| / ||b||, integrated exactly on the merged partition.
pub fn relative_error_eq(
    a: &PiecewiseConstantBoundaryCoefficient,
    b: &PiecewiseConstantBoundaryCoefficient,
) -> Result<f64> {
    if (a.length - b.length).abs() > 1e-12 * a.length.max(b.length) {
        return Err(Error::validation(
            "coefficients live on arcs of different length",
        ));
    }
    let mut cuts: Vec<f64> = a
        .knots()
        .into_iter()
        .chain(b.breakpoints.iter().copied())
        .collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * a.length);
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let len = w[1] - w[0];
        let va = a.evaluate(mid);
        let vb = b.evaluate(mid);
        diff2 += (va - vb) * (va - vb) * len;
        ref2 += vb * vb * len;
    }
    if ref2 <= 0.0 {
        return Err(Error::validation("reference coefficient has zero norm"));
    }
    Ok((diff2 / ref2).sqrt())
}

/// Search space with the partition fixed: only values move.
#[derive(Clone, Debug)]
pub struct AdmissibleSetA {
    pub breakpoints: Vec<f64>,
    pub bounds: ValueBounds,
}

/// Search space with unknown partition: values and breakpoints both move,
/// under the box and a minimum piece measure.
#[derive(Clone, Debug)]
pub struct AdmissibleSetB {
    pub max_pieces: usize,
    pub min_measure: f64,
    pub bounds: ValueBounds,
}

/// Plain-text serialization: header, "length lower upper", breakpoint
/// list, value list (each list prefixed by its count).
pub fn write_text(q: &PiecewiseConstantBoundaryCoefficient) -> String {
    let mut out = String::from("robin v1\n");
    out.push_str(&format!(
        "{:.16e} {:.16e} {:.16e}\n",
        q.length, q.bounds.lower, q.bounds.upper
    ));
    out.push_str(&format!("{}", q.breakpoints.len()));
    for b in &q.breakpoints {
        out.push_str(&format!(" {b:.16e}"));
    }
    out.push('\n');
    out.push_str(&format!("{}", q.values.len()));
    for v in &q.values {
        out.push_str(&format!(" {v:.16e}"));
    }
    out.push('\n');
    out
}

pub fn read_text(text: &str) -> Result<PiecewiseConstantBoundaryCoefficient> {
    let mut lines = text.lines();
    let mut next = || {
        lines
            .next()
            .ok_or_else(|| Error::validation("truncated coefficient file"))
    };
    if next()?.trim() != "robin v1" {
        return Err(Error::validation("expected header `robin v1`"));
    }
    let head = next()?;
    let nums: Vec<f64> = head
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::validation(format!("bad bounds line {head:?}")))?;
    let [length, lower, upper] = nums[..] else {
        return Err(Error::validation(format!("bad bounds line {head:?}")));
    };
    let mut counted_list = |what: &str| -> Result<Vec<f64>> {
        let line = next()?;
        let mut it = line.split_whitespace();
        let n: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::validation(format!("bad {what} line {line:?}")))?;
        let xs: Vec<f64> = it
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::validation(format!("bad {what} line {line:?}")))?;
        if xs.len() != n {
            return Err(Error::validation(format!(
                "{what} count {n} does not match {} entries",
                xs.len()
            )));
        }
        Ok(xs)
    };
    let breakpoints = counted_list("breakpoint")?;
    let values = counted_list("value")?;
    Ok(PiecewiseConstantBoundaryCoefficient::new(breakpoints, values, length)?
        .with_bounds(ValueBounds::new(lower, upper)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_piece() -> PiecewiseConstantBoundaryCoefficient {
        PiecewiseConstantBoundaryCoefficient::new(vec![0.5], vec![1.0, 3.0], 2.0).unwrap()
    }

    #[test]
    fn evaluate_uses_half_open_pieces() {
        let q = two_piece();
        assert_eq!(q.evaluate(0.0), 1.0);
        assert_eq!(q.evaluate(0.49), 1.0);
        // The breakpoint belongs to the piece that begins there.
        assert_eq!(q.evaluate(0.5), 3.0);
        assert_eq!(q.evaluate(2.0), 3.0);
    }

    #[test]
    fn relative_error_matches_closed_form() {
        // Reference 1 on [0, 1.2), 2 on [1.2, 2]; candidate constant 1:
        // ||a - b||^2 = 0.8, ||b||^2 = 1.2 + 4 * 0.8 = 4.4.
        let b = PiecewiseConstantBoundaryCoefficient::new(vec![1.2], vec![1.0, 2.0], 2.0).unwrap();
        let a = PiecewiseConstantBoundaryCoefficient::constant(1.0, 2.0);
        let e = relative_error_eq(&a, &b).unwrap();
        let expected = (0.8f64 / 4.4).sqrt();
        assert!((e - expected).abs() < 1e-15, "{e} vs {expected}");
        assert!((e - 0.426_401_432_711_220_83).abs() < 1e-15);
        // Constant-vs-constant sanity: 2 against 1 gives exactly 1.
        let c2 = PiecewiseConstantBoundaryCoefficient::constant(2.0, 2.0);
        assert_eq!(relative_error_eq(&c2, &a).unwrap(), 1.0);
    }

    #[test]
    fn relative_error_merges_mismatched_partitions() {
        let a = PiecewiseConstantBoundaryCoefficient::new(
            vec![0.7, 1.3],
            vec![1.0, 2.0, 1.0],
            2.0,
        )
        .unwrap();
        let b = two_piece();
        // Piecewise closed form on the merged cuts {0, 0.5, 0.7, 1.3, 2}.
        let diff2: f64 = 0.5 * 0.0 + 0.2 * 4.0 + 0.6 * 1.0 + 0.7 * 4.0;
        let ref2: f64 = 0.5 * 1.0 + 1.5 * 9.0;
        let e = relative_error_eq(&a, &b).unwrap();
        assert!((e - (diff2 / ref2).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn projection_restores_order_and_margins() {
        let mut q = PiecewiseConstantBoundaryCoefficient {
            breakpoints: vec![1.9, 0.3, 0.31],
            values: vec![1.0, 2.0, 3.0, 4.0],
            length: 2.0,
            bounds: ValueBounds::standard(),
        };
        q.project_partition_constraints(0.05).unwrap();
        let gap = 0.05 + PIECE_GAP_EPS;
        let knots = q.knots();
        for w in knots.windows(2) {
            assert!(w[1] - w[0] >= gap - 1e-15, "{:?}", knots);
        }
    }

    #[test]
    fn projection_rejects_infeasible_partitions() {
        let mut q = PiecewiseConstantBoundaryCoefficient {
            breakpoints: vec![0.5, 1.0, 1.5],
            values: vec![1.0; 4],
            length: 2.0,
            bounds: ValueBounds::standard(),
        };
        assert!(q.project_partition_constraints(0.6).is_err());
    }

    #[test]
    fn box_projection_clamps() {
        let mut q = PiecewiseConstantBoundaryCoefficient::new(
            vec![0.5],
            vec![0.01, 99.0],
            2.0,
        )
        .unwrap();
        q.project_box(ValueBounds::standard());
        assert_eq!(q.values, vec![0.1, 10.0]);
    }

    #[test]
    fn text_roundtrip() {
        let q = PiecewiseConstantBoundaryCoefficient::new(
            vec![0.4, 1.2],
            vec![1.0, 2.5, 1.0],
            2.0,
        )
        .unwrap();
        let back = read_text(&write_text(&q)).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(PiecewiseConstantBoundaryCoefficient::new(vec![], vec![], 2.0).is_err());
        assert!(
            PiecewiseConstantBoundaryCoefficient::new(vec![0.5, 0.4], vec![1.0; 3], 2.0).is_err()
        );
        assert!(
            PiecewiseConstantBoundaryCoefficient::new(vec![2.5], vec![1.0; 2], 2.0).is_err()
        );
    }

    proptest! {
        /// Projection is idempotent and feasible for arbitrary inputs.
        #[test]
        fn projection_is_idempotent(
            raw in proptest::collection::vec(0.0f64..2.0, 0..6),
            min_measure in 0.0f64..0.2,
        ) {
            let n = raw.len() + 1;
            prop_assume!((n as f64) * (min_measure + PIECE_GAP_EPS) < 2.0);
            let mut q = PiecewiseConstantBoundaryCoefficient {
                breakpoints: raw,
                values: vec![1.0; n],
                length: 2.0,
                bounds: ValueBounds::standard(),
            };
            q.project_partition_constraints(min_measure).unwrap();
            let once = q.clone();
            q.project_partition_constraints(min_measure).unwrap();
            prop_assert_eq!(once, q);
        }

        /// evaluate() is constant within each piece.
        #[test]
        fn evaluate_is_piecewise_constant(s in 0.0f64..2.0) {
            let q = PiecewiseConstantBoundaryCoefficient::new(
                vec![0.6, 1.4], vec![2.0, 5.0, 3.0], 2.0).unwrap();
            let knots = q.knots();
            let j = knots.windows(2).position(|w| s >= w[0] && s < w[1]).unwrap_or(2);
            prop_assert_eq!(q.evaluate(s), q.values[j]);
        }

        /// relative_error_eq(a, a) = 0 and is symmetric in scale.
        #[test]
        fn self_distance_is_zero(vals in proptest::collection::vec(0.1f64..10.0, 1..4)) {
            let n = vals.len();
            let bps: Vec<f64> = (1..n).map(|k| 2.0 * (k as f64) / (n as f64)).collect();
            let q = PiecewiseConstantBoundaryCoefficient::new(bps, vals, 2.0).unwrap();
            prop_assert!(relative_error_eq(&q, &q).unwrap() == 0.0);
        }
    }
}

/// Shape-preserving piecewise cubic Hermite interpolant (Fritsch–Carlson)
/// on the uniform knots `0, 1, …, n-1`.
///
/// Each segment stays within the range of its two end values, so bounds on
/// the knot values carry over to the whole curve.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// Panics if fewer than two values are supplied.
    pub fn new(values: &[f64]) -> Self {
        assert!(values.len() >= 2, "need at least two knots");
        let n = values.len();
        let secants: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = secants[0];
            slopes[1] = secants[0];
        } else {
            for k in 1..n - 1 {
                let (a, b) = (secants[k - 1], secants[k]);
                slopes[k] = if a * b <= 0.0 {
                    0.0
                } else {
                    2.0 / (1.0 / a + 1.0 / b)
                };
            }
            slopes[0] = end_slope(secants[0], secants[1]);
            slopes[n - 1] = end_slope(secants[n - 2], secants[n - 3]);
        }
        MonotoneCubic {
            values: values.to_vec(),
            slopes,
        }
    }

    pub fn knots(&self) -> usize {
        self.values.len()
    }

    /// Evaluates at parameter `u ∈ [0, n-1]` (clamped).
    pub fn eval(&self, u: f64) -> f64 {
        let last = (self.values.len() - 1) as f64;
        let u = u.clamp(0.0, last);
        let k = (u.floor() as usize).min(self.values.len() - 2);
        let s = u - k as f64;
        if s == 0.0 {
            return self.values[k];
        }
        if s == 1.0 {
            return self.values[k + 1];
        }
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        let (m0, m1) = (self.slopes[k], self.slopes[k + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let y = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1;
        // Guard against rounding pushing the value past the segment range.
        y.clamp(y0.min(y1), y0.max(y1))
    }
}

fn end_slope(near: f64, far: f64) -> f64 {
    let m = (3.0 * near - far) / 2.0;
    if m.signum() != near.signum() || near == 0.0 {
        0.0
    } else if near.signum() != far.signum() && m.abs() > (3.0 * near).abs() {
        3.0 * near
    } else {
        m
    }
}

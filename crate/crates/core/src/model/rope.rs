//! Rotary position encodings.
//!
//! Each head vector is viewed as consecutive pairs `(x[2j], x[2j+1])`; pair
//! `j` of row `r` is rotated by `angle[r][j]`. The two flavours differ only in
//! how angles are derived from positions:
//!
//! - grid (vision encoder): the first half of the pairs rotate with the patch
//!   row, the second half with the patch column, both halves sharing the
//!   frequencies `base^(-i / (head_dim/4))`;
//! - multimodal (decoder): pairs are split into temporal, height and width
//!   sections, pair `j` uses frequency `base^(-2j / head_dim)` and the
//!   coordinate of its section. Text rows carry `(t, t, t)`, which reduces to
//!   ordinary 1D rotary.

use super::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct Rotary<T> {
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rotary<T> {
    fn from_angles(pairs: usize, angles: &[f64]) -> Self {
        Rotary {
            pairs,
            cos: angles.iter().map(|a| T::of(a.cos())).collect(),
            sin: angles.iter().map(|a| T::of(a.sin())).collect(),
        }
    }

    /// 2D rotary for grid coordinates `(row, col)`.
    pub fn grid(coords: &[(usize, usize)], head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 4 == 0, "grid rotary needs head_dim divisible by 4");
        let pairs = head_dim / 2;
        let quarter = head_dim / 4;
        let freqs: Vec<f64> = (0..quarter).map(|i| base.powf(-(i as f64) / quarter as f64)).collect();
        let mut angles = Vec::with_capacity(coords.len() * pairs);
        for &(r, c) in coords {
            angles.extend(freqs.iter().map(|f| r as f64 * f));
            angles.extend(freqs.iter().map(|f| c as f64 * f));
        }
        Rotary::from_angles(pairs, &angles)
    }

    /// Multimodal rotary for `(temporal, height, width)` positions.
    pub fn multimodal(positions: &[[usize; 3]], head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary needs an even head_dim");
        let pairs = head_dim / 2;
        let sections = mrope_sections(pairs);
        let mut angles = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            for j in 0..pairs {
                let axis = if j < sections[0] {
                    0
                } else if j < sections[0] + sections[1] {
                    1
                } else {
                    2
                };
                let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
                angles.push(pos[axis] as f64 * freq);
            }
        }
        Rotary::from_angles(pairs, &angles)
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / self.pairs.max(1)
    }

    /// Rotates `x` (`rows × head_dim`) in place; `inverse` rotates by the
    /// negated angles, which is also the transpose used in backprop.
    pub fn rotate(&self, x: &mut [T], rows: usize, head_dim: usize, inverse: bool) {
        debug_assert_eq!(head_dim, 2 * self.pairs);
        for r in 0..rows {
            let row = &mut x[r * head_dim..(r + 1) * head_dim];
            let cs = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sn = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            for j in 0..self.pairs {
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                let s = if inverse { -sn[j] } else { sn[j] };
                row[2 * j] = a * cs[j] - b * s;
                row[2 * j + 1] = a * s + b * cs[j];
            }
        }
    }
}

/// Pair counts for the temporal, height and width sections.
pub fn mrope_sections(pairs: usize) -> [usize; 3] {
    let spatial = pairs / 3;
    [pairs - 2 * spatial, spatial, spatial]
}

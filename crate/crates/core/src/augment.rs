//! Dihedral augmentations of the pixel grid (quarter-turn rotations and a
//! horizontal mirror), realized as exact pixel permutations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};

/// `R^q ∘ S^m`: mirror first (if set), then rotate `q` quarter turns
/// counter-clockwise. Odd `q` requires a square grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationOp {
    rotation_quarters: u8,
    mirrored: bool,
    height: usize,
    width: usize,
    perm: Vec<usize>,
}

/// How the two members of a pair are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Two independent uniform draws from the group.
    #[default]
    Independent,
    /// A uniform draw of an ordered pair of distinct group elements.
    Distinct,
}

/// Serialized form of an op: the grid is implied by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCode {
    pub rotation_quarters: u8,
    pub mirrored: bool,
}

impl AugmentationOp {
    pub fn new(rotation_quarters: u8, mirrored: bool, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("augmentation grid must be non-empty");
        }
        let q = rotation_quarters % 4;
        if q % 2 == 1 && height != width {
            return invalid(format!(
                "quarter-turn rotation needs a square grid, got {height}x{width}"
            ));
        }
        let perm = build_perm(q, mirrored, height, width);
        Ok(Self {
            rotation_quarters: q,
            mirrored,
            height,
            width,
            perm,
        })
    }

    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Self::new(0, false, height, width)
    }

    pub fn from_code(code: OpCode, height: usize, width: usize) -> Result<Self> {
        Self::new(code.rotation_quarters, code.mirrored, height, width)
    }

    pub fn code(&self) -> OpCode {
        OpCode {
            rotation_quarters: self.rotation_quarters,
            mirrored: self.mirrored,
        }
    }

    pub fn rotation_quarters(&self) -> u8 {
        self.rotation_quarters
    }

    pub fn mirrored(&self) -> bool {
        self.mirrored
    }

    /// `output[p] = x[perm[p]]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn num_pixels(&self) -> usize {
        self.perm.len()
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_quarters == 0 && !self.mirrored
    }

    pub fn apply<T: Copy>(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("augmentation input", self.perm.len(), x.len())?;
        Ok(self.perm.iter().map(|&src| x[src]).collect())
    }

    /// The element `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &AugmentationOp) -> Result<AugmentationOp> {
        if self.height != other.height || self.width != other.width {
            return invalid("composing augmentations on different grids");
        }
        let qb = other.rotation_quarters as i32;
        let twisted = if self.mirrored { -qb } else { qb };
        let q = (self.rotation_quarters as i32 + twisted).rem_euclid(4) as u8;
        Self::new(q, self.mirrored ^ other.mirrored, self.height, self.width)
    }

    /// All group elements available on this grid: 8 on square grids, 4 otherwise.
    pub fn group(height: usize, width: usize) -> Result<Vec<AugmentationOp>> {
        group_codes(height, width)
            .into_iter()
            .map(|c| Self::from_code(c, height, width))
            .collect()
    }
}

fn group_codes(height: usize, width: usize) -> Vec<OpCode> {
    let rotations: &[u8] = if height == width { &[0, 1, 2, 3] } else { &[0, 2] };
    let mut out = Vec::with_capacity(rotations.len() * 2);
    for mirrored in [false, true] {
        for &q in rotations {
            out.push(OpCode {
                rotation_quarters: q,
                mirrored,
            });
        }
    }
    out
}

fn build_perm(q: u8, mirrored: bool, height: usize, width: usize) -> Vec<usize> {
    // Source pixel of each output pixel: undo the rotation, then the mirror.
    let n = height;
    let mut perm = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (sr, sc) = match q {
                0 => (r, c),
                1 => (c, n - 1 - r),
                2 => (height - 1 - r, width - 1 - c),
                _ => (n - 1 - c, r),
            };
            let sc = if mirrored { width - 1 - sc } else { sc };
            perm.push(sr * width + sc);
        }
    }
    perm
}

/// Draw one augmentation pair for a `height × width` grid.
pub fn sample_pair<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    mode: PairSampling,
) -> Result<(AugmentationOp, AugmentationOp)> {
    let codes = group_codes(height, width);
    let g = codes.len();
    let (i, j) = match mode {
        PairSampling::Independent => (rng.random_range(0..g), rng.random_range(0..g)),
        PairSampling::Distinct => {
            let i = rng.random_range(0..g);
            let j = (i + 1 + rng.random_range(0..g - 1)) % g;
            (i, j)
        }
    };
    Ok((
        AugmentationOp::from_code(codes[i], height, width)?,
        AugmentationOp::from_code(codes[j], height, width)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|v| v as f64 * 1.5 - 3.0).collect()
    }

    #[test]
    fn identity_mirror_and_full_turn() {
        let x = grid(4, 4);
        let id = AugmentationOp::identity(4, 4).unwrap();
        assert_eq!(id.apply(&x).unwrap(), x);
        let m = AugmentationOp::new(0, true, 4, 4).unwrap();
        assert_eq!(m.apply(&m.apply(&x).unwrap()).unwrap(), x);
        let r = AugmentationOp::new(1, false, 4, 4).unwrap();
        let mut y = x.clone();
        for _ in 0..4 {
            y = r.apply(&y).unwrap();
        }
        assert_eq!(y, x);
        assert_ne!(r.apply(&x).unwrap(), x);
    }

    #[test]
    fn quarter_turn_moves_corner() {
        // 2x2: [a b; c d] rotated counter-clockwise is [b d; a c].
        let r = AugmentationOp::new(1, false, 2, 2).unwrap();
        assert_eq!(r.apply(&[1, 2, 3, 4]).unwrap(), vec![2, 4, 1, 3]);
    }

    #[test]
    fn non_square_rejects_quarter_turns() {
        assert!(AugmentationOp::new(1, false, 3, 4).is_err());
        assert!(AugmentationOp::new(2, true, 3, 4).is_ok());
        assert_eq!(AugmentationOp::group(3, 4).unwrap().len(), 4);
        assert_eq!(AugmentationOp::group(5, 5).unwrap().len(), 8);
    }

    #[test]
    fn group_is_closed_and_permutations_are_bijections() {
        for (h, w) in [(3, 3), (4, 4), (2, 5)] {
            let g = AugmentationOp::group(h, w).unwrap();
            for a in &g {
                let mut seen = vec![false; h * w];
                for &p in a.permutation() {
                    assert!(!seen[p]);
                    seen[p] = true;
                }
                for b in &g {
                    let ab = a.compose(b).unwrap();
                    assert!(g.contains(&ab));
                }
            }
        }
    }

    #[test]
    fn pair_sampling_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = sample_pair(&mut r1, 4, 4, PairSampling::Independent).unwrap();
            let b = sample_pair(&mut r2, 4, 4, PairSampling::Independent).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pair_sampling_frequencies() {
        // Each of the 8 elements should appear with frequency 1/8 ± 0.01 over 1e5 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let g = AugmentationOp::group(4, 4).unwrap();
        let mut counts = [0usize; 8];
        let draws = 100_000;
        for _ in 0..draws / 2 {
            let (a, b) = sample_pair(&mut rng, 4, 4, PairSampling::Independent).unwrap();
            counts[g.iter().position(|e| *e == a).unwrap()] += 1;
            counts[g.iter().position(|e| *e == b).unwrap()] += 1;
        }
        let expected = draws as f64 / 8.0;
        let mut chi2 = 0.0;
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.125).abs() < 0.01, "{counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 7 degrees of freedom, 0.999 quantile ≈ 24.3
        assert!(chi2 < 24.3, "chi2 = {chi2}");
    }

    #[test]
    fn non_square_sampling_never_uses_quarter_turns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let (a, b) = sample_pair(&mut rng, 3, 5, PairSampling::Independent).unwrap();
            assert_eq!(a.rotation_quarters() % 2, 0);
            assert_eq!(b.rotation_quarters() % 2, 0);
        }
    }

    #[test]
    fn distinct_pairs_differ_and_stay_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = AugmentationOp::group(4, 4).unwrap();
        let mut counts = [0usize; 8];
        for _ in 0..40_000 {
            let (a, b) = sample_pair(&mut rng, 4, 4, PairSampling::Distinct).unwrap();
            assert_ne!(a, b);
            counts[g.iter().position(|e| *e == a).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.125).abs() < 0.01);
        }
    }

    fn element() -> impl Strategy<Value = (u8, bool)> {
        (0u8..4, any::<bool>())
    }

    proptest! {
        #[test]
        fn permutation_preserves_values((q, m) in element(), x in prop::collection::vec(-100.0f64..100.0, 25)) {
            let a = AugmentationOp::new(q, m, 5, 5).unwrap();
            let y = a.apply(&x).unwrap();
            let mut xs = x.clone();
            let mut ys = y.clone();
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            prop_assert_eq!(&xs, &ys);
            // Summed in a fixed (sorted) order the norms agree bit for bit.
            let nx: f64 = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert_eq!(nx, ny);
        }

        #[test]
        fn group_law_matches_sequential_application((qa, ma) in element(), (qb, mb) in element(),
                                                     x in prop::collection::vec(-10.0f64..10.0, 16)) {
            let a = AugmentationOp::new(qa, ma, 4, 4).unwrap();
            let b = AugmentationOp::new(qb, mb, 4, 4).unwrap();
            let seq = a.apply(&b.apply(&x).unwrap()).unwrap();
            let composed = a.compose(&b).unwrap().apply(&x).unwrap();
            prop_assert_eq!(seq, composed);
        }
    }
}

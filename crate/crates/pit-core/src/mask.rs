//! Dilation-mask mathematics.
//!
//! A temporal filter of `rf_max` taps is pruned to a regular power-of-two
//! dilation pattern by a small vector of binary selectors `gamma`. The first
//! selector is pinned to 1; each further selector, while set, halves the
//! dilation. Cumulative products of `gamma` (`Gamma[i] = gamma[0] * ... *
//! gamma[L-1-i]`) gate dilation levels, and a length-`rf_max` mask assigns
//! level `min(v2(p), L-1)` to tap position `p`, where `v2` is the 2-adic
//! valuation (`v2(0)` capped to `L-1`). Two independent routes produce the
//! mask:
//!
//! * [`build_mask_graph`]: the differentiable tensor transform
//!   `M = prod_columns([(gamma . 1_{1xL}) ⊙ T + (1_{LxL} - T)] . K)`
//!   over constant 0/1 matrices `T` and `K`;
//! * [`mask_oracle`]: direct integer evaluation of the level products.
//!
//! Tests gate the graph route on exact agreement with the oracle.

use crate::error::{PitError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of selector levels for a maximum receptive field:
/// `floor(log2(rf_max - 1)) + 1`.
pub fn compute_levels(rf_max: usize) -> Result<usize> {
    if rf_max < 2 {
        return Err(PitError::invalid(format!(
            "rf_max must be >= 2 for any mask degrees of freedom, got {rf_max}"
        )));
    }
    Ok(((rf_max - 1) as u64).ilog2() as usize + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    rf_max: usize,
    levels: usize,
}

impl MaskSpec {
    pub fn new(rf_max: usize) -> Result<Self> {
        Ok(MaskSpec { rf_max, levels: compute_levels(rf_max)? })
    }

    pub fn rf_max(&self) -> usize {
        self.rf_max
    }

    /// `L`: length of the selector vector.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Largest reachable dilation, `2^(L-1)`.
    pub fn max_dilation(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Capped 2-adic valuation assigning a dilation level to tap position `p`.
fn level_of_position(p: usize, levels: usize) -> usize {
    if p == 0 {
        levels - 1
    } else {
        (p.trailing_zeros() as usize).min(levels - 1)
    }
}

/// Per-layer dilation selectors: trainable floats, a binarization threshold
/// and an optional frozen 0/1 snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSet {
    spec: MaskSpec,
    g_hat: Vec<f64>,
    delta: f64,
    frozen: bool,
    frozen_bits: Vec<bool>,
}

impl GammaSet {
    /// All selectors at 1.0 (dilation 1, nothing pruned).
    pub fn all_ones(spec: MaskSpec, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PitError::invalid(format!("delta must be in (0,1), got {delta}")));
        }
        let levels = spec.levels();
        Ok(GammaSet {
            spec,
            g_hat: vec![1.0; levels],
            delta,
            frozen: false,
            frozen_bits: Vec::new(),
        })
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn g_hat(&self) -> &[f64] {
        &self.g_hat
    }

    /// Raw write of the float selectors; length-checked only. Callers that
    /// train must keep index 0 at 1.0 and values in [0,1].
    pub fn set_g_hat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.g_hat.len() {
            return Err(PitError::ShapeMismatch {
                context: "set_g_hat",
                left: vec![values.len()],
                right: vec![self.g_hat.len()],
            });
        }
        self.g_hat.copy_from_slice(values);
        Ok(())
    }

    /// Mutable access for optimizer updates.
    pub fn g_hat_mut(&mut self) -> &mut [f64] {
        &mut self.g_hat
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PitError::invalid(format!("delta must be in (0,1), got {delta}")));
        }
        self.delta = delta;
        Ok(())
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Current 0/1 view: the frozen snapshot if frozen, else the thresholded
    /// floats.
    pub fn binarized(&self) -> Vec<bool> {
        if self.frozen {
            self.frozen_bits.clone()
        } else {
            self.g_hat.iter().map(|&v| v >= self.delta).collect()
        }
    }

    /// Snapshot the current binarized view and stop treating the selectors
    /// as trainable.
    pub fn freeze(&mut self) {
        if !self.frozen {
            self.frozen_bits = self.binarized();
            self.frozen = true;
        }
    }

    /// Restore a frozen snapshot read back from a checkpoint.
    pub fn restore_frozen(&mut self, bits: Vec<bool>) -> Result<()> {
        if bits.len() != self.spec.levels() {
            return Err(PitError::invalid("frozen selector snapshot has wrong length"));
        }
        self.frozen_bits = bits;
        self.frozen = true;
        Ok(())
    }

    /// Force a 0/1 selector pattern (used to build reference networks with a
    /// known dilation).
    pub fn set_pattern(&mut self, bits: &[bool]) -> Result<()> {
        if bits.len() != self.spec.levels() {
            return Err(PitError::invalid("selector pattern has wrong length"));
        }
        if !bits[0] {
            return Err(PitError::invalid("selector 0 is pinned to 1"));
        }
        for (g, &b) in self.g_hat.iter_mut().zip(bits.iter()) {
            *g = if b { 1.0 } else { 0.0 };
        }
        Ok(())
    }

    pub fn dilation(&self) -> usize {
        extract_dilation(&self.binarized())
    }
}

/// The constant 0/1 matrices of the differentiable mask transform.
///
/// `T[j][c] = 1` iff `j + c <= L-1` (upper triangular with reversed
/// columns); column `p` of `K` is one-hot at row `min(v2(p), L-1)`.
#[derive(Debug, Clone)]
pub struct ConstantMatrices {
    levels: usize,
    rf_max: usize,
    pub t: Tensor,
    pub one_minus_t: Tensor,
    pub k: Tensor,
}

pub fn build_constant_matrices(spec: &MaskSpec) -> ConstantMatrices {
    let (l, rf) = (spec.levels(), spec.rf_max());
    let mut t = vec![0.0; l * l];
    let mut omt = vec![0.0; l * l];
    for j in 0..l {
        for c in 0..l {
            if j + c <= l - 1 {
                t[j * l + c] = 1.0;
            } else {
                omt[j * l + c] = 1.0;
            }
        }
    }
    let mut k = vec![0.0; l * rf];
    for p in 0..rf {
        k[level_of_position(p, l) * rf + p] = 1.0;
    }
    ConstantMatrices {
        levels: l,
        rf_max: rf,
        t: Tensor::new(vec![l, l], t).expect("square"),
        one_minus_t: Tensor::new(vec![l, l], omt).expect("square"),
        k: Tensor::new(vec![l, rf], k).expect("rectangular"),
    }
}

/// Cumulative selector products: `Gamma[i] = prod_{k=0}^{L-1-i} gamma[k]`.
pub fn gamma_products(gamma_bin: &[bool]) -> Vec<bool> {
    debug_assert!(gamma_bin.first().copied().unwrap_or(false), "selector 0 must be 1");
    let l = gamma_bin.len();
    (0..l)
        .map(|i| gamma_bin[..l - i].iter().all(|&b| b))
        .collect()
}

/// Non-differentiable reference mask: `M[p] = Gamma[min(v2(p), L-1)]`.
pub fn mask_oracle(gamma_bin: &[bool], rf_max: usize) -> Vec<bool> {
    let products = gamma_products(gamma_bin);
    let l = gamma_bin.len();
    (0..rf_max).map(|p| products[level_of_position(p, l)]).collect()
}

/// Differentiable mask transform on the tape. `gamma_bin` is the binarized
/// selector vector (length `L`); the result is a length-`rf_max` 0/1 vector
/// through which gradients reach the selectors.
pub fn build_mask_graph(tape: &mut Tape, gamma_bin: Var, mats: &ConstantMatrices) -> Result<Var> {
    let glen = tape.value(gamma_bin).len();
    if glen != mats.levels {
        return Err(PitError::ShapeMismatch {
            context: "build_mask_graph",
            left: vec![glen],
            right: vec![mats.levels],
        });
    }
    let tiled = tape.broadcast_cols(gamma_bin, mats.levels)?;
    let t_const = tape.constant(mats.t.clone());
    let gated = tape.mul(tiled, t_const)?;
    let omt_const = tape.constant(mats.one_minus_t.clone());
    let affine = tape.add(gated, omt_const)?;
    let k_const = tape.constant(mats.k.clone());
    let spread = tape.matmul(affine, k_const)?;
    tape.column_product(spread)
}

/// Evaluate the tensor-transform mask for a 0/1 selector pattern, off-graph.
pub fn mask_tensor_for(gamma_bin: &[bool], rf_max: usize) -> Result<Tensor> {
    let spec = MaskSpec::new(rf_max)?;
    if gamma_bin.len() != spec.levels() {
        return Err(PitError::invalid(format!(
            "selector length {} does not match {} levels for rf_max {}",
            gamma_bin.len(),
            spec.levels(),
            rf_max
        )));
    }
    let mats = build_constant_matrices(&spec);
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::vector(
        gamma_bin.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let m = build_mask_graph(&mut tape, g, &mats)?;
    Ok(tape.value(m).clone())
}

/// Dilation encoded by a 0/1 selector pattern: with `m` the length of the
/// maximal all-ones prefix of `gamma[1..]`, the dilation is `2^(L-1-m)`.
/// Selectors after the first zero are dead and ignored.
pub fn extract_dilation(gamma_bin: &[bool]) -> usize {
    debug_assert!(gamma_bin.first().copied().unwrap_or(false), "selector 0 must be 1");
    let l = gamma_bin.len();
    let m = gamma_bin[1..].iter().take_while(|&&b| b).count();
    1 << (l - 1 - m)
}

/// Taps that survive at dilation `d`: `floor((rf_max-1)/d) + 1`.
pub fn active_tap_count(rf_max: usize, d: usize) -> usize {
    (rf_max - 1) / d + 1
}

/// Cost weight of selector `i` (1-based, `i <= L-1`): the number of filter
/// time-slices kept alive by that selector,
/// `round((rf_max - 1) / 2^(L-i))` with halves rounded away from zero.
/// For these power-of-two denominators this equals the exact position count
/// `floor((rf_max-1)/2^(L-1-i)) - floor((rf_max-1)/2^(L-i))`.
pub fn slice_weight(spec: &MaskSpec, i: usize) -> Result<u64> {
    let l = spec.levels();
    if i < 1 || i > l - 1 {
        return Err(PitError::invalid(format!(
            "slice_weight index {i} out of range 1..={}",
            l.saturating_sub(1)
        )));
    }
    let n = (spec.rf_max() - 1) as u64;
    let den = 1u64 << (l - i);
    Ok((n + den / 2) / den)
}

/// All selector cost weights as a tensor, with entry 0 set to zero so the
/// pinned selector never contributes.
pub fn slice_weight_vector(spec: &MaskSpec) -> Tensor {
    let l = spec.levels();
    let mut w = vec![0.0; l];
    for (i, slot) in w.iter_mut().enumerate().skip(1) {
        *slot = slice_weight(spec, i).expect("index in range") as f64;
    }
    Tensor::vector(w)
}

/// Enumerate every 0/1 selector pattern with the pinned first entry.
pub fn all_gamma_patterns(levels: usize) -> Vec<Vec<bool>> {
    let free = levels - 1;
    (0..(1usize << free))
        .map(|bits| {
            let mut v = vec![true];
            for i in 0..free {
                v.push(bits >> i & 1 == 1);
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn levels_formula() {
        assert_eq!(compute_levels(9).unwrap(), 4);
        assert_eq!(compute_levels(2).unwrap(), 1);
        assert_eq!(compute_levels(64).unwrap(), 6);
        assert!(compute_levels(1).is_err());
        assert!(compute_levels(0).is_err());
    }

    #[test]
    fn levels_bracketing_invariant() {
        for rf in 3..=65 {
            let l = compute_levels(rf).unwrap() as u32;
            assert!(1usize << (l - 1) <= rf - 1, "rf={rf} l={l}");
            assert!(rf - 1 < 1usize << l, "rf={rf} l={l}");
        }
        assert_eq!(compute_levels(2).unwrap(), 1);
    }

    fn bits(pattern: &[u8]) -> Vec<bool> {
        pattern.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn gamma_products_cases() {
        assert_eq!(gamma_products(&bits(&[1, 1, 1, 1])), bits(&[1, 1, 1, 1]));
        assert_eq!(gamma_products(&bits(&[1, 1, 1, 0])), bits(&[0, 1, 1, 1]));
        assert_eq!(gamma_products(&bits(&[1, 0, 1, 1])), bits(&[0, 0, 0, 1]));
    }

    #[test]
    fn constant_matrices_rf9() {
        let spec = MaskSpec::new(9).unwrap();
        let m = build_constant_matrices(&spec);
        // T row 0 all ones, row 3 = (1,0,0,0).
        assert_eq!(&m.t.data()[0..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&m.t.data()[12..16], &[1.0, 0.0, 0.0, 0.0]);
        // One-hot rows of K for sample positions.
        let k = m.k.data();
        let onehot_row = |p: usize| (0..4).find(|r| k[r * 9 + p] == 1.0).unwrap();
        assert_eq!(onehot_row(0), 3);
        assert_eq!(onehot_row(1), 0);
        assert_eq!(onehot_row(2), 1);
        assert_eq!(onehot_row(4), 2);
        assert_eq!(onehot_row(8), 3);
        for p in 0..9 {
            let col_sum: f64 = (0..4).map(|r| k[r * 9 + p]).sum();
            assert_eq!(col_sum, 1.0, "column {p} must be one-hot");
        }
    }

    #[test]
    fn constant_matrices_rf2() {
        let spec = MaskSpec::new(2).unwrap();
        let m = build_constant_matrices(&spec);
        assert_eq!(m.t.data(), &[1.0]);
        assert_eq!(m.k.shape(), &[1, 2]);
        assert_eq!(m.k.data(), &[1.0, 1.0]);
    }

    #[test]
    fn mask_graph_rf9_patterns() {
        let cases: [(&[u8], [f64; 9]); 3] = [
            (&[1, 1, 1, 1], [1.0; 9]),
            (&[1, 1, 1, 0], [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]),
            (&[1, 0, 0, 0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        ];
        for (pattern, expected) in cases {
            let m = mask_tensor_for(&bits(pattern), 9).unwrap();
            assert_eq!(m.data(), &expected, "pattern {pattern:?}");
        }
    }

    #[test]
    fn oracle_rf7_patterns() {
        assert_eq!(mask_oracle(&bits(&[1, 1, 0]), 7), bits(&[1, 0, 1, 0, 1, 0, 1]));
        assert_eq!(mask_oracle(&bits(&[1, 0, 0]), 7), bits(&[1, 0, 0, 0, 1, 0, 0]));
    }

    #[test]
    fn extraction_cases() {
        assert_eq!(extract_dilation(&bits(&[1, 1, 1, 1])), 1);
        assert_eq!(active_tap_count(9, 1), 9);
        // Trailing selector after the first zero is dead.
        assert_eq!(extract_dilation(&bits(&[1, 1, 0, 1])), 4);
        assert_eq!(active_tap_count(9, 4), 3);
        assert_eq!(extract_dilation(&bits(&[1])), 1);
        assert_eq!(active_tap_count(2, 1), 2);
    }

    #[test]
    fn slice_weight_cases() {
        let rf9 = MaskSpec::new(9).unwrap();
        assert_eq!(slice_weight(&rf9, 1).unwrap(), 1);
        assert_eq!(slice_weight(&rf9, 2).unwrap(), 2);
        assert_eq!(slice_weight(&rf9, 3).unwrap(), 4);
        let rf7 = MaskSpec::new(7).unwrap();
        assert_eq!(slice_weight(&rf7, 1).unwrap(), 2);
        assert_eq!(slice_weight(&rf7, 2).unwrap(), 3);
        // Ties round away from zero.
        let rf6 = MaskSpec::new(6).unwrap();
        assert_eq!(slice_weight(&rf6, 2).unwrap(), 3);
        let rf2 = MaskSpec::new(2).unwrap();
        assert!(slice_weight(&rf2, 1).is_err());
    }

    /// Exact alive-position count per selector, the independent route for
    /// the rounding formula.
    fn position_count(rf_max: usize, levels: usize, i: usize) -> u64 {
        let n = (rf_max - 1) as u64;
        n / (1u64 << (levels - 1 - i)) - n / (1u64 << (levels - i))
    }

    #[test]
    fn slice_weight_equals_position_count_and_sums() {
        for rf in 2..=65 {
            let spec = MaskSpec::new(rf).unwrap();
            let l = spec.levels();
            let mut total = 0;
            for i in 1..l {
                let w = slice_weight(&spec, i).unwrap();
                assert_eq!(w, position_count(rf, l, i), "rf={rf} i={i}");
                total += w;
            }
            let n = (rf - 1) as u64;
            assert_eq!(total, n - n / (1u64 << (l - 1)), "rf={rf}");
        }
    }

    #[test]
    fn graph_matches_oracle_small_sweep() {
        for rf in 2..=33 {
            let spec = MaskSpec::new(rf).unwrap();
            for pattern in all_gamma_patterns(spec.levels()) {
                let graph = mask_tensor_for(&pattern, rf).unwrap();
                let oracle = mask_oracle(&pattern, rf);
                for (p, (&g, &o)) in graph.data().iter().zip(oracle.iter()).enumerate() {
                    assert_eq!(g, if o { 1.0 } else { 0.0 }, "rf={rf} pattern={pattern:?} p={p}");
                }
            }
        }
    }

    #[test]
    fn mask_is_regular_dilation_pattern() {
        for rf in 2..=33 {
            let spec = MaskSpec::new(rf).unwrap();
            for pattern in all_gamma_patterns(spec.levels()) {
                let d = extract_dilation(&pattern);
                let oracle = mask_oracle(&pattern, rf);
                for (p, &alive) in oracle.iter().enumerate() {
                    assert_eq!(alive, p % d == 0, "rf={rf} pattern={pattern:?} p={p} d={d}");
                }
            }
        }
    }

    #[test]
    fn endpoints_always_on() {
        for rf in 2..=33 {
            let spec = MaskSpec::new(rf).unwrap();
            let top = 1usize << (spec.levels() - 1);
            for pattern in all_gamma_patterns(spec.levels()) {
                let m = mask_oracle(&pattern, rf);
                assert!(m[0], "first tap always alive");
                if (rf - 1) % top == 0 {
                    assert!(m[rf - 1], "rf={rf} last tap alive when divisible");
                }
            }
        }
    }

    #[test]
    fn gamma_set_freeze_snapshot() {
        let spec = MaskSpec::new(9).unwrap();
        let mut g = GammaSet::all_ones(spec, 0.5).unwrap();
        g.set_g_hat(&[1.0, 0.7, 0.4, 0.2]).unwrap();
        assert_eq!(g.binarized(), bits(&[1, 1, 0, 0]));
        g.freeze();
        assert!(g.frozen());
        assert_eq!(g.dilation(), 4);
        // Further float edits no longer change the view.
        g.set_g_hat(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.binarized(), bits(&[1, 1, 0, 0]));
    }

    #[test]
    fn gradient_flow_through_mask_is_product_of_other_factors() {
        // d M[p] / d gamma[k] (surrogate) = product of the other selectors of
        // level min(v2(p), L-1) when k participates, else 0.
        let spec = MaskSpec::new(9).unwrap();
        let mats = build_constant_matrices(&spec);
        let gvals = [1.0, 1.0, 0.0, 1.0];
        let l = spec.levels();
        for p in 0..9 {
            let mut tape = Tape::new();
            let g = tape.leaf(Tensor::vector(gvals.to_vec()), true);
            let m = build_mask_graph(&mut tape, g, &mats).unwrap();
            let pick = {
                let mut v = vec![0.0; 9];
                v[p] = 1.0;
                let c = tape.constant(Tensor::vector(v));
                let prod = tape.mul(m, c).unwrap();
                tape.sum(prod).unwrap()
            };
            tape.backward(pick).unwrap();
            let grad = tape.grad(g).unwrap();
            let level = level_of_position(p, l);
            for k in 0..l {
                let expected = if k <= l - 1 - level {
                    (0..=l - 1 - level).filter(|&j| j != k).map(|j| gvals[j]).product::<f64>()
                } else {
                    0.0
                };
                assert_eq!(grad.data()[k], expected, "p={p} k={k}");
            }
        }
    }

    proptest! {
        #[test]
        fn flipping_selector_on_never_kills_mask_entries(
            rf in 2usize..40,
            seed in 0u64..1000,
        ) {
            let spec = MaskSpec::new(rf).unwrap();
            let l = spec.levels();
            let mut pattern = vec![true];
            let mut s = seed;
            for _ in 1..l {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                pattern.push(s >> 62 & 1 == 1);
            }
            let base = mask_oracle(&pattern, rf);
            for i in 1..l {
                if pattern[i] { continue; }
                let mut flipped = pattern.clone();
                flipped[i] = true;
                let upgraded = mask_oracle(&flipped, rf);
                for p in 0..rf {
                    prop_assert!(!(base[p] && !upgraded[p]),
                        "flip of {i} turned tap {p} off: {pattern:?}");
                }
            }
        }
    }
}

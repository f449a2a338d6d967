//! The four parametric region edits and their ordered composition.
//!
//! Every operator evaluates a per-pixel edit, clamps it into `[0, 1]` and
//! blends it with the input through the mask: `out = v + m * (clamp(e) - v)`.
//! Where `m = 0` the output is bit-identical to the input, and an identity
//! parameter leaves every pixel bit-identical as well.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::image::{ImageGrid, RegionMask, LUMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Exposure,
    Saturation,
    ColorCurve,
    WhiteBalance,
}

impl EditOp {
    /// Canonical operator order; also the index used by encodings.
    pub const ALL: [EditOp; 4] = [
        EditOp::Exposure,
        EditOp::Saturation,
        EditOp::ColorCurve,
        EditOp::WhiteBalance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EditOp::Exposure => "exposure",
            EditOp::Saturation => "saturation",
            EditOp::ColorCurve => "color_curve",
            EditOp::WhiteBalance => "white_balance",
        }
    }

    pub fn identity_value(self) -> f64 {
        1.0
    }

    pub fn validate(self, value: f64) -> Result<()> {
        let ok = value.is_finite()
            && match self {
                EditOp::Exposure | EditOp::ColorCurve => value > 0.0,
                EditOp::Saturation => value >= 0.0,
                EditOp::WhiteBalance => value > 0.0 && value < 2.0,
            };
        if ok {
            Ok(())
        } else {
            Err(ForgeError::InvalidParameter(format!(
                "{} value {value} is outside its valid domain",
                self.name()
            )))
        }
    }
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditOp {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        EditOp::ALL
            .into_iter()
            .find(|op| op.name() == s.trim())
            .ok_or_else(|| ForgeError::InvalidParameter(format!("unknown edit operator `{s}`")))
    }
}

/// Scalar edit parameters; `None` means the operator is not part of the edit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_curve: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub white_balance: Option<f64>,
}

impl EditParams {
    pub fn identity() -> Self {
        Self::from_array([1.0; 4])
    }

    pub fn from_array(values: [f64; 4]) -> Self {
        let mut p = Self::default();
        for op in EditOp::ALL {
            p.set(op, Some(values[op.index()]));
        }
        p
    }

    pub fn get(&self, op: EditOp) -> Option<f64> {
        match op {
            EditOp::Exposure => self.exposure,
            EditOp::Saturation => self.saturation,
            EditOp::ColorCurve => self.color_curve,
            EditOp::WhiteBalance => self.white_balance,
        }
    }

    pub fn set(&mut self, op: EditOp, value: Option<f64>) {
        let slot = match op {
            EditOp::Exposure => &mut self.exposure,
            EditOp::Saturation => &mut self.saturation,
            EditOp::ColorCurve => &mut self.color_curve,
            EditOp::WhiteBalance => &mut self.white_balance,
        };
        *slot = value;
    }

    pub fn present(&self) -> impl Iterator<Item = (EditOp, f64)> + '_ {
        EditOp::ALL
            .into_iter()
            .filter_map(|op| self.get(op).map(|v| (op, v)))
    }

    pub fn count(&self) -> usize {
        self.present().count()
    }

    pub fn validate(&self) -> Result<()> {
        self.present().try_for_each(|(op, v)| op.validate(v))
    }
}

/// Order in which operators are composed.
///
/// Operators listed in `skipped` may appear in `order` without a parameter;
/// they are passed over during composition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditPermutation {
    order: Vec<EditOp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    skipped: Vec<EditOp>,
}

impl EditPermutation {
    pub fn new(order: Vec<EditOp>) -> Result<Self> {
        if order.len() > EditOp::ALL.len() {
            return Err(ForgeError::InvalidParameter(format!(
                "permutation has {} entries, at most 4 allowed",
                order.len()
            )));
        }
        for (i, op) in order.iter().enumerate() {
            if order[..i].contains(op) {
                return Err(ForgeError::InvalidParameter(format!(
                    "operator {op} appears twice in permutation"
                )));
            }
        }
        Ok(Self { order, skipped: Vec::new() })
    }

    pub fn canonical() -> Self {
        Self::new(EditOp::ALL.to_vec()).expect("canonical order is valid")
    }

    /// Marks an operator as intentionally skipped.
    pub fn with_skipped(mut self, op: EditOp) -> Self {
        if !self.skipped.contains(&op) {
            self.skipped.push(op);
        }
        self
    }

    pub fn order(&self) -> &[EditOp] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_skipped(&self, op: EditOp) -> bool {
        self.skipped.contains(&op)
    }

    /// All 24 full-length permutations in lexicographic order over the
    /// canonical operator indices; the first entry is the canonical order.
    pub fn all_full() -> Vec<EditPermutation> {
        let mut out = Vec::with_capacity(24);
        let mut current = Vec::with_capacity(4);
        fn rec(current: &mut Vec<EditOp>, out: &mut Vec<EditPermutation>) {
            if current.len() == 4 {
                out.push(EditPermutation::new(current.clone()).expect("distinct ops"));
                return;
            }
            for op in EditOp::ALL {
                if !current.contains(&op) {
                    current.push(op);
                    rec(current, out);
                    current.pop();
                }
            }
        }
        rec(&mut current, &mut out);
        out
    }

    /// Index of this permutation within [`EditPermutation::all_full`], if full-length.
    pub fn full_index(&self) -> Option<usize> {
        Self::all_full().iter().position(|p| p.order == self.order)
    }

    /// Resolves the operator sequence to execute, checking that each listed
    /// operator has a parameter or a skip marker.
    fn resolve(&self, params: &EditParams) -> Result<Vec<(EditOp, f64)>> {
        let mut steps = Vec::with_capacity(self.order.len());
        for &op in &self.order {
            match params.get(op) {
                Some(v) => {
                    op.validate(v)?;
                    steps.push((op, v));
                }
                None if self.is_skipped(op) => {}
                None => {
                    return Err(ForgeError::InvalidPlan(format!(
                        "permutation lists {op} but no parameter was supplied"
                    )))
                }
            }
        }
        Ok(steps)
    }
}

impl fmt::Display for EditPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.order.iter().map(|op| op.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for EditPermutation {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        let order = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(EditOp::from_str)
            .collect::<Result<Vec<_>>>()?;
        EditPermutation::new(order)
    }
}

/// Permutation and parameters together, in the on-disk JSON form
/// `{"order": [...], "exposure": 1.2, ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecipe {
    #[serde(flatten)]
    pub perm: EditPermutation,
    #[serde(flatten)]
    pub params: EditParams,
}

/// Per-parameter derivative of a scalar contracted from the composed output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamGradient {
    values: [Option<f64>; 4],
}

impl ParamGradient {
    pub fn get(&self, op: EditOp) -> Option<f64> {
        self.values[op.index()]
    }

    pub fn with(mut self, op: EditOp, value: f64) -> Self {
        self.values[op.index()] = Some(value);
        self
    }

    /// Gradient as a dense array; absent parameters read as zero.
    pub fn to_array(&self) -> [f64; 4] {
        self.values.map(|v| v.unwrap_or(0.0))
    }
}

/// Unclamped edit of a single pixel.
fn edit_rgb(op: EditOp, p: f64, v: [f64; 3]) -> [f64; 3] {
    match op {
        EditOp::Exposure => [v[0] * p, v[1] * p, v[2] * p],
        EditOp::Saturation => {
            let gray = LUMA[0] * v[0] + LUMA[1] * v[1] + LUMA[2] * v[2];
            let k = p - 1.0;
            [
                v[0] + k * (v[0] - gray),
                v[1] + k * (v[1] - gray),
                v[2] + k * (v[2] - gray),
            ]
        }
        EditOp::ColorCurve => [v[0].powf(p), v[1].powf(p), v[2].powf(p)],
        EditOp::WhiteBalance => [v[0] * p, v[1], v[2] * (2.0 - p)],
    }
}

/// Derivative of the unclamped edit w.r.t. its parameter.
fn edit_dparam(op: EditOp, p: f64, v: [f64; 3]) -> [f64; 3] {
    match op {
        EditOp::Exposure => v,
        EditOp::Saturation => {
            let gray = LUMA[0] * v[0] + LUMA[1] * v[1] + LUMA[2] * v[2];
            [v[0] - gray, v[1] - gray, v[2] - gray]
        }
        EditOp::ColorCurve => v.map(|x| if x > 0.0 { x.powf(p) * x.ln() } else { 0.0 }),
        EditOp::WhiteBalance => [v[0], 0.0, -v[2]],
    }
}

/// Vector-Jacobian product of the unclamped edit w.r.t. the input pixel.
fn edit_vjp_input(op: EditOp, p: f64, v: [f64; 3], u: [f64; 3]) -> [f64; 3] {
    match op {
        EditOp::Exposure => u.map(|x| x * p),
        EditOp::Saturation => {
            let su = u[0] + u[1] + u[2];
            let k = p - 1.0;
            [
                u[0] * p - k * LUMA[0] * su,
                u[1] * p - k * LUMA[1] * su,
                u[2] * p - k * LUMA[2] * su,
            ]
        }
        EditOp::ColorCurve => {
            let d = |x: f64| if x > 0.0 { p * x.powf(p - 1.0) } else { 0.0 };
            [u[0] * d(v[0]), u[1] * d(v[1]), u[2] * d(v[2])]
        }
        EditOp::WhiteBalance => [u[0] * p, u[1], u[2] * (2.0 - p)],
    }
}

fn apply_op_raw(op: EditOp, p: f64, pixels: &[f64], mask: &[f64]) -> Vec<f64> {
    let mut out = pixels.to_vec();
    for (i, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let v = [pixels[3 * i], pixels[3 * i + 1], pixels[3 * i + 2]];
        let e = edit_rgb(op, p, v);
        for c in 0..3 {
            out[3 * i + c] = v[c] + m * (e[c].clamp(0.0, 1.0) - v[c]);
        }
    }
    out
}

/// Backward pass of one blended operator. Returns `(d/dparam, cotangent on input)`.
fn op_backward(op: EditOp, p: f64, input: &[f64], mask: &[f64], cot: &[f64]) -> (f64, Vec<f64>) {
    let mut dparam = 0.0;
    let mut cot_in = cot.to_vec();
    for (i, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let v = [input[3 * i], input[3 * i + 1], input[3 * i + 2]];
        let u = [cot[3 * i], cot[3 * i + 1], cot[3 * i + 2]];
        let e = edit_rgb(op, p, v);
        let live = e.map(|x| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 });
        let de = edit_dparam(op, p, v);
        let gated = [u[0] * live[0], u[1] * live[1], u[2] * live[2]];
        dparam += m * (gated[0] * de[0] + gated[1] * de[1] + gated[2] * de[2]);
        let back = edit_vjp_input(op, p, v, gated);
        for c in 0..3 {
            cot_in[3 * i + c] = (1.0 - m) * u[c] + m * back[c];
        }
    }
    (dparam, cot_in)
}

fn apply_single(img: &ImageGrid, op: EditOp, value: f64, mask: &RegionMask) -> Result<ImageGrid> {
    op.validate(value)?;
    mask.ensure_matches(img)?;
    let out = apply_op_raw(op, value, img.pixels(), mask.weights());
    Ok(ImageGrid::from_raw(img.height(), img.width(), out))
}

/// Multiplies every channel by `gain` inside the mask.
pub fn apply_exposure(img: &ImageGrid, gain: f64, mask: &RegionMask) -> Result<ImageGrid> {
    apply_single(img, EditOp::Exposure, gain, mask)
}

/// Moves each channel away from (or toward) the Rec.601 luma by factor `sat`.
pub fn apply_saturation(img: &ImageGrid, sat: f64, mask: &RegionMask) -> Result<ImageGrid> {
    apply_single(img, EditOp::Saturation, sat, mask)
}

/// Per-channel power curve `v^curve`.
pub fn apply_color_curve(img: &ImageGrid, curve: f64, mask: &RegionMask) -> Result<ImageGrid> {
    apply_single(img, EditOp::ColorCurve, curve, mask)
}

/// Scales red by `temp` and blue by `2 - temp`; `temp` must lie in `(0, 2)`.
pub fn apply_white_balance(img: &ImageGrid, temp: f64, mask: &RegionMask) -> Result<ImageGrid> {
    apply_single(img, EditOp::WhiteBalance, temp, mask)
}

pub fn apply_op(img: &ImageGrid, op: EditOp, value: f64, mask: &RegionMask) -> Result<ImageGrid> {
    apply_single(img, op, value, mask)
}

/// Applies the operators of `perm` in order, clamping after each one.
pub fn compose_edits(
    img: &ImageGrid,
    params: &EditParams,
    perm: &EditPermutation,
    mask: &RegionMask,
) -> Result<ImageGrid> {
    mask.ensure_matches(img)?;
    let steps = perm.resolve(params)?;
    let mut cur = img.pixels().to_vec();
    for (op, p) in steps {
        cur = apply_op_raw(op, p, &cur, mask.weights());
    }
    Ok(ImageGrid::from_raw(img.height(), img.width(), cur))
}

/// Reverse-mode derivative of `<cotangent, compose_edits(...)>` w.r.t. every
/// parameter used by the composition. Returns the composed image as well.
pub fn gradient_of_composition(
    img: &ImageGrid,
    params: &EditParams,
    perm: &EditPermutation,
    mask: &RegionMask,
    cotangent: &[f64],
) -> Result<(ImageGrid, ParamGradient)> {
    mask.ensure_matches(img)?;
    if cotangent.len() != img.pixels().len() {
        return Err(ForgeError::Shape(format!(
            "cotangent has {} values, image has {}",
            cotangent.len(),
            img.pixels().len()
        )));
    }
    let steps = perm.resolve(params)?;
    let mut stages = Vec::with_capacity(steps.len() + 1);
    stages.push(img.pixels().to_vec());
    for &(op, p) in &steps {
        let next = apply_op_raw(op, p, stages.last().expect("non-empty"), mask.weights());
        stages.push(next);
    }
    let mut grad = ParamGradient::default();
    let mut cot = cotangent.to_vec();
    for (k, &(op, p)) in steps.iter().enumerate().rev() {
        let (dp, cot_in) = op_backward(op, p, &stages[k], mask.weights(), &cot);
        grad.values[op.index()] = Some(dp);
        cot = cot_in;
    }
    let out = ImageGrid::from_raw(img.height(), img.width(), stages.pop().expect("non-empty"));
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: [f64; 3]) -> ImageGrid {
        ImageGrid::filled(8, 8, v).unwrap()
    }

    fn full() -> RegionMask {
        RegionMask::full(8, 8).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn exposure_golden_values() {
        let img = solid([0.4, 0.4, 0.4]);
        let out = apply_exposure(&img, 1.5, &full()).unwrap();
        assert!(close(out.pixel(3, 3)[0], 0.6));
        assert_eq!(apply_exposure(&img, 1.0, &full()).unwrap(), img);
    }

    #[test]
    fn exposure_respects_zero_weight() {
        let img = solid([0.3, 0.5, 0.7]);
        let mask = RegionMask::from_fn(8, 8, false, |y, _| if y < 4 { 1.0 } else { 0.0 }).unwrap();
        let out = apply_exposure(&img, 2.0, &mask).unwrap();
        assert_eq!(out.pixel(6, 2), img.pixel(6, 2));
        assert!(close(out.pixel(1, 1)[0], 0.6));
    }

    #[test]
    fn saturation_golden_values() {
        let out = apply_saturation(&solid([1.0, 0.0, 0.0]), 0.0, &full()).unwrap();
        for c in out.pixel(0, 0) {
            assert!(close(c, 0.299));
        }
        let gray = solid([0.5, 0.5, 0.5]);
        let out = apply_saturation(&gray, 2.0, &full()).unwrap();
        assert!(out.max_abs_diff(&gray) < 1e-12);
        let img = solid([0.2, 0.6, 0.9]);
        assert_eq!(apply_saturation(&img, 1.0, &full()).unwrap(), img);
    }

    #[test]
    fn color_curve_golden_values() {
        let out = apply_color_curve(&solid([0.25, 1.0, 0.0]), 2.0, &full()).unwrap();
        let p = out.pixel(0, 0);
        assert!(close(p[0], 0.0625));
        assert_eq!(p[1], 1.0);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn white_balance_golden_values() {
        let out = apply_white_balance(&solid([0.5, 0.5, 0.5]), 0.9, &full()).unwrap();
        let p = out.pixel(0, 0);
        assert!(close(p[0], 0.45) && close(p[1], 0.5) && close(p[2], 0.55));
    }

    #[test]
    fn invalid_parameters_rejected() {
        let img = solid([0.5; 3]);
        let m = full();
        assert!(matches!(apply_exposure(&img, 0.0, &m), Err(ForgeError::InvalidParameter(_))));
        assert!(apply_saturation(&img, -0.1, &m).is_err());
        assert!(apply_color_curve(&img, -1.0, &m).is_err());
        assert!(apply_white_balance(&img, 2.0, &m).is_err());
        assert!(apply_white_balance(&img, 0.0, &m).is_err());
        let other = RegionMask::full(9, 8).unwrap();
        assert!(matches!(apply_exposure(&img, 1.2, &other), Err(ForgeError::Shape(_))));
    }

    #[test]
    fn composition_is_order_dependent() {
        let img = solid([0.3; 3]);
        let params = EditParams {
            exposure: Some(2.0),
            color_curve: Some(2.0),
            ..Default::default()
        };
        let a = EditPermutation::new(vec![EditOp::Exposure, EditOp::ColorCurve]).unwrap();
        let b = EditPermutation::new(vec![EditOp::ColorCurve, EditOp::Exposure]).unwrap();
        let out_a = compose_edits(&img, &params, &a, &full()).unwrap();
        let out_b = compose_edits(&img, &params, &b, &full()).unwrap();
        assert!(close(out_a.pixel(0, 0)[0], 0.36));
        assert!(close(out_b.pixel(0, 0)[0], 0.18));
    }

    #[test]
    fn missing_parameter_is_a_plan_error_unless_skipped() {
        let img = solid([0.3; 3]);
        let params = EditParams {
            exposure: Some(1.1),
            ..Default::default()
        };
        let perm = EditPermutation::new(vec![EditOp::Exposure, EditOp::Saturation]).unwrap();
        let err = compose_edits(&img, &params, &perm, &full()).unwrap_err();
        assert!(matches!(err, ForgeError::InvalidPlan(_)));
        let perm = perm.with_skipped(EditOp::Saturation);
        assert!(compose_edits(&img, &params, &perm, &full()).is_ok());
    }

    #[test]
    fn empty_permutation_is_identity() {
        let img = solid([0.1, 0.2, 0.3]);
        let perm = EditPermutation::new(vec![]).unwrap();
        assert_eq!(compose_edits(&img, &EditParams::identity(), &perm, &full()).unwrap(), img);
    }

    #[test]
    fn duplicate_operator_rejected() {
        assert!(EditPermutation::new(vec![EditOp::Exposure, EditOp::Exposure]).is_err());
        assert!("exposure,saturation,exposure".parse::<EditPermutation>().is_err());
    }

    #[test]
    fn all_full_enumerates_24_distinct() {
        let all = EditPermutation::all_full();
        assert_eq!(all.len(), 24);
        assert_eq!(all[0], EditPermutation::canonical());
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.full_index(), Some(i));
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn recipe_json_shape() {
        let recipe = EditRecipe {
            perm: EditPermutation::canonical(),
            params: EditParams {
                exposure: Some(1.2),
                saturation: Some(0.8),
                color_curve: Some(1.0),
                white_balance: Some(0.95),
            },
        };
        let v = serde_json::to_value(&recipe).unwrap();
        assert_eq!(v["order"][0], "exposure");
        assert_eq!(v["order"][3], "white_balance");
        assert_eq!(v["exposure"], 1.2);
        let back: EditRecipe = serde_json::from_value(v).unwrap();
        assert_eq!(back, recipe);
    }

    #[test]
    fn exposure_gradient_equals_masked_mean_at_identity() {
        let img = ImageGrid::from_fn(8, 8, |y, x| {
            let v = 0.1 + 0.01 * (y * 8 + x) as f64;
            [v, v * 0.5, 0.2]
        })
        .unwrap();
        let mask = RegionMask::from_fn(8, 8, false, |y, x| if y < 4 && x < 6 { 1.0 } else { 0.0 })
            .unwrap();
        let n = mask.weight_sum() * 3.0;
        let cot: Vec<f64> = mask
            .weights()
            .iter()
            .flat_map(|m| [m / n; 3])
            .collect();
        let params = EditParams {
            exposure: Some(1.0),
            ..Default::default()
        };
        let perm = EditPermutation::new(vec![EditOp::Exposure]).unwrap();
        let (_, g) = gradient_of_composition(&img, &params, &perm, &mask, &cot).unwrap();
        let expected: f64 = img
            .pixels()
            .chunks(3)
            .zip(mask.weights())
            .map(|(p, m)| m * (p[0] + p[1] + p[2]))
            .sum::<f64>()
            / n;
        assert!((g.get(EditOp::Exposure).unwrap() - expected).abs() < 1e-12);
        assert_eq!(g.get(EditOp::Saturation), None);
    }
}

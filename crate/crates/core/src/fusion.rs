//! Adaptive multi-bias fusion: per-user sigmoid scores over the three view
//! encodings and the score-weighted prediction vector.

use std::io::Write;

use rand::Rng;

use crate::encoder::xavier_init;
use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamSet, Tape, Tensor, Var};

/// Number of feature blocks fed to the scoring network.
pub const FEATURE_BLOCKS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionIds {
    /// `6d×d`
    pub w_1: ParamId,
    pub b_1: ParamId,
    /// `d×3`
    pub w_2: ParamId,
    pub b_2: ParamId,
}

impl FusionIds {
    pub fn init(params: &mut ParamSet, d: usize, rng: &mut impl Rng) -> Self {
        let w_1 = params.add("fusion.w_1", xavier_init(rng, FEATURE_BLOCKS * d, d));
        let b_1 = params.add("fusion.b_1", Tensor::zeros(&[1, d]));
        let w_2 = params.add("fusion.w_2", xavier_init(rng, d, 3));
        let b_2 = params.add("fusion.b_2", Tensor::zeros(&[1, 3]));
        Self { w_1, b_1, w_2, b_2 }
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> FusionVars {
        FusionVars {
            w_1: tape.param(params, self.w_1),
            b_1: tape.param(params, self.b_1),
            w_2: tape.param(params, self.w_2),
            b_2: tape.param(params, self.b_2),
        }
    }
}

pub fn fusion_param_count(d: usize) -> usize {
    FEATURE_BLOCKS * d * d + d + 3 * d + 3
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

/// `[x_P, x_A, x_D, x_P+x_A, x_P+x_D, x_A+x_D]` row-wise; with `triple_sum`
/// the last block is `x_P+x_A+x_D`.
pub fn fuse_features(tape: &mut Tape, xp: Var, xa: Var, xd: Var, triple_sum: bool) -> Result<Var> {
    let pa = tape.add(xp, xa)?;
    let pd = tape.add(xp, xd)?;
    let last = if triple_sum {
        tape.add(pa, xd)?
    } else {
        tape.add(xa, xd)?
    };
    tape.concat_cols(&[xp, xa, xd, pa, pd, last])
}

/// `σ(ReLU(o W_1 + b_1) W_2 + b_2)`, one row of three scores per user.
pub fn bias_scores(tape: &mut Tape, o: Var, f: &FusionVars) -> Result<Var> {
    let h = tape.matmul(o, f.w_1)?;
    let h = tape.add_bias(h, f.b_1)?;
    let h = tape.relu(h);
    let s = tape.matmul(h, f.w_2)?;
    let s = tape.add_bias(s, f.b_2)?;
    Ok(tape.sigmoid(s))
}

/// `s_P·x_P + s_A·x_A + s_D·x_D` row-wise.
pub fn predict_vector(tape: &mut Tape, scores: Var, xp: Var, xa: Var, xd: Var) -> Result<Var> {
    if tape.value(scores).cols() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 scores, got {}",
            tape.value(scores).cols()
        )));
    }
    let mut acc = None;
    for (k, x) in [xp, xa, xd].into_iter().enumerate() {
        let s = tape.slice_cols(scores, k, 1)?;
        let term = tape.row_scale(x, s)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("three terms"))
}

/// Plain single-user versions, for analysis and tests.
pub fn fuse_features_vec(xp: &[f64], xa: &[f64], xd: &[f64], triple_sum: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let [p, a, d] = row_vars(&mut tape, [xp, xa, xd])?;
    let o = fuse_features(&mut tape, p, a, d, triple_sum)?;
    Ok(tape.value(o).data().to_vec())
}

pub fn predict_vector_vec(scores: [f64; 3], xp: &[f64], xa: &[f64], xd: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let [p, a, d] = row_vars(&mut tape, [xp, xa, xd])?;
    let s = tape.constant(Tensor::matrix(1, 3, scores.to_vec())?);
    let e = predict_vector(&mut tape, s, p, a, d)?;
    Ok(tape.value(e).data().to_vec())
}

fn row_vars(tape: &mut Tape, xs: [&[f64]; 3]) -> Result<[Var; 3]> {
    if xs.iter().any(|x| x.len() != xs[0].len()) {
        return Err(Error::Shape("view encodings differ in width".into()));
    }
    let mut out = Vec::with_capacity(3);
    for x in xs {
        out.push(tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?));
    }
    Ok([out[0], out[1], out[2]])
}

/// `user_id,s_P,s_A,s_D` rows.
pub fn write_scores_csv<'a>(
    out: &mut impl Write,
    rows: impl IntoIterator<Item = (&'a str, [f64; 3])>,
) -> std::io::Result<()> {
    writeln!(out, "user_id,s_P,s_A,s_D")?;
    for (user, [p, a, d]) in rows {
        writeln!(out, "{user},{p},{a},{d}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn scores_with(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, o: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let f = FusionVars {
            w_1: tape.constant(w1),
            b_1: tape.constant(b1),
            w_2: tape.constant(w2),
            b_2: tape.constant(b2),
        };
        let ov = tape.constant(Tensor::matrix(1, o.len(), o.to_vec()).unwrap());
        let s = bias_scores(&mut tape, ov, &f).unwrap();
        tape.value(s).data().to_vec()
    }

    #[test]
    fn feature_layout() {
        assert_eq!(
            fuse_features_vec(&[0.0; 3], &[0.0; 3], &[0.0; 3], false).unwrap(),
            vec![0.0; 18]
        );
        let o = fuse_features_vec(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], false).unwrap();
        assert_eq!(o, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let t = fuse_features_vec(&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0], true).unwrap();
        assert_eq!(&t[10..], &[3.0, 3.0]);
        assert!(fuse_features_vec(&[1.0], &[0.0, 1.0], &[0.0, 0.0], false).is_err());
    }

    #[test]
    fn swapping_views_swaps_blocks() {
        let (p, a, d) = ([1.0, 2.0], [3.0, 5.0], [7.0, 11.0]);
        let o = fuse_features_vec(&p, &a, &d, false).unwrap();
        let s = fuse_features_vec(&a, &p, &d, false).unwrap();
        assert_eq!(&o[0..2], &s[2..4]);
        assert_eq!(&o[2..4], &s[0..2]);
        assert_eq!(&o[4..6], &s[4..6]);
        assert_eq!(&o[6..8], &s[6..8]);
        assert_eq!(&o[8..10], &s[10..12]);
        assert_eq!(&o[10..12], &s[8..10]);
    }

    #[test]
    fn zero_parameters_give_half() {
        let d = 2;
        let s = scores_with(
            Tensor::zeros(&[6 * d, d]),
            Tensor::zeros(&[1, d]),
            Tensor::zeros(&[d, 3]),
            Tensor::zeros(&[1, 3]),
            &[1.0; 12],
        );
        assert_eq!(s, vec![0.5; 3]);
    }

    #[test]
    fn saturated_bias_scores() {
        let d = 2;
        let s = scores_with(
            Tensor::zeros(&[6 * d, d]),
            Tensor::zeros(&[1, d]),
            Tensor::zeros(&[d, 3]),
            Tensor::matrix(1, 3, vec![10.0, -10.0, 0.0]).unwrap(),
            &[0.3; 12],
        );
        assert!((s[0] - 1.0).abs() < 1e-4);
        assert!(s[1].abs() < 1e-4);
        assert_eq!(s[2], 0.5);
        assert!((s.iter().sum::<f64>() - 1.0).abs() > 0.4, "scores need not sum to one");
    }

    #[test]
    fn scores_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 3;
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (w1, b1, w2, b2, o) = (r(6 * d * d), r(d), r(d * 3), r(3), r(6 * d));
        let got = scores_with(
            Tensor::matrix(6 * d, d, w1.clone()).unwrap(),
            Tensor::matrix(1, d, b1.clone()).unwrap(),
            Tensor::matrix(d, 3, w2.clone()).unwrap(),
            Tensor::matrix(1, 3, b2.clone()).unwrap(),
            &o,
        );
        let hidden: Vec<f64> = (0..d)
            .map(|j| ((0..6 * d).map(|i| o[i] * w1[i * d + j]).sum::<f64>() + b1[j]).max(0.0))
            .collect();
        for k in 0..3 {
            let z = (0..d).map(|j| hidden[j] * w2[j * 3 + k]).sum::<f64>() + b2[k];
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((got[k] - expect).abs() < 1e-10);
            assert!(got[k] > 0.0 && got[k] < 1.0);
        }
    }

    #[test]
    fn prediction_vector_cases() {
        let (p, a, d) = ([1.0, -2.0], [0.5, 4.0], [3.0, 3.0]);
        assert_eq!(predict_vector_vec([1.0, 0.0, 0.0], &p, &a, &d).unwrap(), p.to_vec());
        let v = [0.2, -0.8];
        let e = predict_vector_vec([0.5; 3], &v, &v, &v).unwrap();
        assert_eq!(e, vec![0.30000000000000004, -1.2000000000000002]);
        for (x, y) in e.iter().zip(v) {
            assert!((x - 1.5 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_matches_loop_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (p, a, d, s) = (r(5), r(5), r(5), r(3));
        let s = [s[0], s[1], s[2]];
        let e = predict_vector_vec(s, &p, &a, &d).unwrap();
        for i in 0..5 {
            assert!((e[i] - (s[0] * p[i] + s[1] * a[i] + s[2] * d[i])).abs() < 1e-12);
        }
        let alpha = 1.7;
        let scaled: Vec<f64> = p.iter().map(|x| alpha * x).collect();
        let with = predict_vector_vec(s, &scaled, &a, &d).unwrap();
        let without = predict_vector_vec(s, &[0.0; 5], &a, &d).unwrap();
        for i in 0..5 {
            assert!((with[i] - without[i] - alpha * s[0] * p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count() {
        let mut params = ParamSet::new();
        FusionIds::init(&mut params, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(params.num_scalars(), fusion_param_count(8));
    }

    #[test]
    fn scores_csv() {
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, [("u1", [0.5, 0.25, 1.0])]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "user_id,s_P,s_A,s_D\nu1,0.5,0.25,1\n");
    }
}

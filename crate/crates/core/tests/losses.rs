use candle_core::{DType, Device, Tensor, Var};
use diffseg_core::data::{LabelMap, IGNORE_INDEX};
use diffseg_core::seg::{combine, conditional_loss, consistency_loss, total_loss, ConsistencyKind};
use proptest::prelude::*;

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn logits(v: &[f64], b: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (b, c, h, w), &Device::Cpu).unwrap()
}

fn at(v: &[f64], c: usize, h: usize, w: usize, (b, k, y, x): (usize, usize, usize, usize)) -> f64 {
    v[((b * c + k) * h + y) * w + x]
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn pixel(v: &[f64], c: usize, h: usize, w: usize, b: usize, y: usize, x: usize) -> Vec<f64> {
    (0..c).map(|k| at(v, c, h, w, (b, k, y, x))).collect()
}

const B: usize = 2;
const C: usize = 3;
const HH: usize = 2;
const WW: usize = 3;

fn arb_logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, B * C * HH * WW)
}

fn arb_labels() -> impl Strategy<Value = Vec<LabelMap>> {
    prop::collection::vec(
        prop::collection::vec(
            prop_oneof![4 => 0u8..C as u8, 1 => Just(IGNORE_INDEX)],
            HH * WW,
        )
        .prop_map(|d| LabelMap::new(HH, WW, d).unwrap()),
        B,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cross_entropy_matches_scalar_oracle(v in arb_logits(), labels in arb_labels()) {
        let got = conditional_loss(&logits(&v, B, C, HH, WW), &labels).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for (b, l) in labels.iter().enumerate() {
            for y in 0..HH {
                for x in 0..WW {
                    let g = l.get(y, x);
                    if g == IGNORE_INDEX {
                        continue;
                    }
                    sum -= log_softmax(&pixel(&v, C, HH, WW, b, y, x))[g as usize];
                    n += 1;
                }
            }
        }
        prop_assert_eq!(got.labelled_pixels, n);
        let want = if n == 0 { 0.0 } else { sum / n as f64 };
        prop_assert!((scalar(&got.value) - want).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_scalar_oracle_and_is_shift_invariant(t in arb_logits(), s in arb_logits(), shift in -20.0f64..20.0, shift2 in -20.0f64..20.0) {
        let teacher = logits(&t, B, C, HH, WW);
        let student = logits(&s, B, C, HH, WW);
        let got = scalar(&consistency_loss(&teacher, &student, ConsistencyKind::Kl).unwrap());
        let mut sum = 0.0;
        for b in 0..B {
            for y in 0..HH {
                for x in 0..WW {
                    let lt = log_softmax(&pixel(&t, C, HH, WW, b, y, x));
                    let ls = log_softmax(&pixel(&s, C, HH, WW, b, y, x));
                    sum += lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
                }
            }
        }
        let want = sum / (B * HH * WW) as f64;
        prop_assert!((got - want).abs() < 1e-9);
        prop_assert!(got >= -1e-12);
        let shifted = scalar(&consistency_loss(&(teacher + shift).unwrap(), &(student + shift2).unwrap(), ConsistencyKind::Kl).unwrap());
        prop_assert!((shifted - got).abs() < 1e-6);
    }

    #[test]
    fn l2_matches_scalar_oracle(t in arb_logits(), s in arb_logits()) {
        let got = scalar(&consistency_loss(&logits(&t, B, C, HH, WW), &logits(&s, B, C, HH, WW), ConsistencyKind::L2).unwrap());
        let want = t.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
        prop_assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn identical_logits_have_zero_consistency(v in arb_logits()) {
        let x = logits(&v, B, C, HH, WW);
        for kind in [ConsistencyKind::L2, ConsistencyKind::Kl] {
            prop_assert!(scalar(&consistency_loss(&x, &x, kind).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_cls(c in 2usize..20, value in -50.0f64..50.0) {
        let x = Tensor::full(value, (1, c, 2, 2), &Device::Cpu).unwrap();
        let labels = vec![LabelMap::new(2, 2, vec![0, (c - 1) as u8, 1, 0]).unwrap()];
        let got = scalar(&conditional_loss(&x, &labels).unwrap().value);
        prop_assert!((got - (c as f64).ln()).abs() < 1e-6);
        let x32 = x.to_dtype(DType::F32).unwrap();
        let got32 = scalar(&conditional_loss(&x32, &labels).unwrap().value);
        prop_assert!((got32 - (c as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn final_loss_is_linear(a in 0.0f64..10.0, b in 0.0f64..10.0, l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
        let rec = total_loss(a, b, l1, l2).unwrap();
        prop_assert!(rec.linearity_error() < 1e-6);
        let t = combine(&Tensor::new(a, &Device::Cpu).unwrap(), &Tensor::new(b, &Device::Cpu).unwrap(), l1, l2).unwrap();
        prop_assert!((scalar(&t) - (l1 * a + l2 * b)).abs() < 1e-9);
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let t =
        Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap()).unwrap();
    let s =
        Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &Device::Cpu).unwrap()).unwrap();
    for kind in [ConsistencyKind::L2, ConsistencyKind::Kl] {
        let grads = consistency_loss(t.as_tensor(), s.as_tensor(), kind)
            .unwrap()
            .backward()
            .unwrap();
        assert!(grads.get(t.as_tensor()).is_none());
        assert!(grads.get(s.as_tensor()).is_some());
    }
}

#[test]
fn non_finite_components_are_rejected() {
    assert!(total_loss(f64::NAN, 0.0, 1.0, 1.0).is_err());
    assert!(total_loss(0.0, f64::INFINITY, 1.0, 1.0).is_err());
}

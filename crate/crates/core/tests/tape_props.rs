use emapg::{PolicyPair, Tape, TapeSlot};
use proptest::prelude::*;

fn expr(x: &[f64]) -> f64 {
    let t = Tape::new();
    let v = t.params(x);
    build(&t, &v).value()
}

fn build<'t>(t: &'t Tape, v: &[emapg::Var<'t>]) -> emapg::Var<'t> {
    let lse = t.log_sum_exp(v);
    (v[0] * v[1]).exp() / (v[2].square() + 1.0) + (lse + 3.0).sqrt() - (v[1] - v[2]).abs().powf(1.5)
}

proptest! {
    #[test]
    fn gradient_matches_central_differences(x in prop::collection::vec(-1.5f64..1.5, 3)) {
        prop_assume!((x[1] - x[2]).abs() > 1e-2);
        let t = Tape::new();
        let v = t.params(&x);
        let g = t.grad(build(&t, &v), &v).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (expr(&up) - expr(&dn)) / (2.0 * h);
            prop_assert!((g.as_slice()[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {} vs {fd}", g.as_slice()[i]);
        }
    }

    #[test]
    fn sg_keeps_value_and_drops_gradient(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let t = Tape::new();
        let x = t.param(a);
        let y = t.param(b);
        let f = x * y.sg() + (x - x.sg()).exp();
        prop_assert_eq!(f.value(), a * b + 1.0);
        let g = t.grad(f, &[x, y]).unwrap();
        prop_assert!((g.as_slice()[0] - (b + 1.0)).abs() < 1e-12);
        prop_assert_eq!(g.as_slice()[1], 0.0);
    }

    #[test]
    fn gradient_is_linear(x in prop::collection::vec(-1.0f64..1.0, 3), c in -2.0f64..2.0) {
        let t = Tape::new();
        let v = t.params(&x);
        let f = build(&t, &v);
        let g = v[0].square() * v[2];
        let gf = t.grad(f, &v).unwrap();
        let gg = t.grad(g, &v).unwrap();
        let gc = t.grad(f * c + g, &v).unwrap();
        for i in 0..3 {
            let want = c * gf.as_slice()[i] + gg.as_slice()[i];
            prop_assert!((gc.as_slice()[i] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn log_prob_gradient_is_indicator_minus_probs(z in prop::collection::vec(-4.0f64..4.0, 2..9), pick in 0usize..8) {
        let j = pick % z.len();
        let pair = PolicyPair::from_logits(&z, &vec![0.0; z.len()]).unwrap();
        let t = Tape::new();
        let slot = TapeSlot::new(&t, &pair);
        let g = slot.grad(slot.log_prob(j)).unwrap();
        for (i, p) in pair.theta().probs().iter().enumerate() {
            let want = f64::from(u8::from(i == j)) - p;
            prop_assert!((g.as_slice()[i] - want).abs() < 1e-12);
        }
    }
}

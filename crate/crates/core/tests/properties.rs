mod common;

use mcf_core::homalg::{homology, relative_chain_complex, smith_normal_form, CubicalSet, ElementaryCube};
use mcf_core::{parse, IntMatrix, ScalarFunction};
use num_bigint::BigInt;
use num_traits::Zero;
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = IntMatrix> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(-9i64..=9, c), r).prop_map(|rows| IntMatrix::from_rows(&rows))
    })
}

/// Rank over ℚ by fraction-free elimination.
fn bareiss_rank(a: &IntMatrix) -> usize {
    let mut m: Vec<Vec<i128>> = (0..a.rows()).map(|r| a.row(r).iter().map(|&v| v as i128).collect()).collect();
    let (rows, cols) = (a.rows(), a.cols());
    let mut rank = 0;
    let mut prev = 1i128;
    for c in 0..cols {
        let Some(p) = (rank..rows).find(|&r| m[r][c] != 0) else { continue };
        m.swap(rank, p);
        for i in rank + 1..rows {
            for j in c + 1..cols {
                m[i][j] = (m[i][j] * m[rank][c] - m[i][c] * m[rank][j]) / prev;
            }
            m[i][c] = 0;
        }
        prev = m[rank][c];
        rank += 1;
    }
    rank
}

proptest! {
    #[test]
    fn smith_form_reconstructs_and_divides(a in matrix()) {
        let s = smith_normal_form(&a);
        let d = s.u.mul(&a.to_big()).mul(&s.v);
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                let expect = if r == c && r < s.diagonal.len() { s.diagonal[r].clone() } else { BigInt::zero() };
                prop_assert_eq!(&d[(r, c)], &expect);
            }
        }
        let nz: Vec<&BigInt> = s.diagonal.iter().filter(|v| !v.is_zero()).collect();
        prop_assert!(nz.windows(2).all(|w| (w[1] % w[0]).is_zero()));
        prop_assert_eq!(nz.len(), bareiss_rank(&a));
    }

    #[test]
    fn cubical_homology_stays_in_range(bits in prop::collection::vec(any::<bool>(), 27)) {
        let cubes: Vec<ElementaryCube> = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(n, _)| ElementaryCube::full(&[n as i64 % 3, (n as i64 / 3) % 3, n as i64 / 9]))
            .collect();
        let x = CubicalSet::closure_of(3, &cubes);
        let c = relative_chain_complex(&x, &CubicalSet::empty(3)).unwrap();
        let h = homology(&c).unwrap();
        prop_assert!((4..h.betti.len()).all(|k| h.betti(k) == 0));
        prop_assert_eq!(h.euler_characteristic(), c.euler_characteristic());
        // mod-2 Betti numbers dominate the integral ones
        let h2 = homology(&c.to_mod2()).unwrap();
        prop_assert!((0..=3).all(|k| h2.betti(k) >= h.betti(k)));
    }

    #[test]
    fn gradients_match_central_differences(x1 in -2.0f64..2.0, x2 in -1.0f64..2.0) {
        let f = parse(common::THREE_MINIMA, 2).unwrap();
        let sf = ScalarFunction::new(f, 2);
        let g = sf.gradient(&[x1, x2]).unwrap();
        let h = 1e-5;
        let fd1 = (sf.value(&[x1 + h, x2]).unwrap() - sf.value(&[x1 - h, x2]).unwrap()) / (2.0 * h);
        let fd2 = (sf.value(&[x1, x2 + h]).unwrap() - sf.value(&[x1, x2 - h]).unwrap()) / (2.0 * h);
        prop_assert!((fd1 - g[0]).abs() <= 1e-6 * g[0].abs().max(1.0));
        prop_assert!((fd2 - g[1]).abs() <= 1e-6 * g[1].abs().max(1.0));
    }
}

//! Independent reference implementations used by the verification suites.
//!
//! Everything here favors obviousness over speed and deliberately shares no
//! code with the implementations it checks: direct-loop convolution against
//! the im2col path, recursive edit distance against the DP, and path
//! enumeration oracles live next to the tests that use them.

use crate::layers::Conv2dGeom;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Direct six-nested-loop 2D convolution with zero padding.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, geom: &Conv2dGeom) -> Tensor {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = geom.out_hw(h, wd).expect("oracle geometry");
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    for ni in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * geom.stride.0 + ky * geom.dilation.0) as isize
                                    - geom.padding.0 as isize;
                                let ix = (ox * geom.stride.1 + kx * geom.dilation.1) as isize
                                    - geom.padding.1 as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w.at(&[co, ci, ky, kx])
                                        * x.at(&[ni, ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    let off = out.offset(&[ni, co, oy, ox]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

/// Recursive edit distance straight off the three-way definition
/// (memoized on (i, j) so exhaustive small-alphabet sweeps stay fast).
pub fn levenshtein_recursive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(
        a: &[T],
        b: &[T],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let cost = usize::from(a[i - 1] != b[j - 1]);
        let d = (go(a, b, i - 1, j - 1, memo) + cost)
            .min(go(a, b, i - 1, j, memo) + 1)
            .min(go(a, b, i, j - 1, memo) + 1);
        memo.insert((i, j), d);
        d
    }
    go(a, b, a.len(), b.len(), &mut HashMap::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursive_distance_spot_checks() {
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein_recursive(&k, &s), 3);
        assert_eq!(levenshtein_recursive::<u8>(&[], &[1, 2, 3]), 3);
        assert_eq!(levenshtein_recursive(&[1, 2], &[1, 2]), 0);
    }
}

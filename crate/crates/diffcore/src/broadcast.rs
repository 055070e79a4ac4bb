//! Numpy-style broadcasting between two operand shapes.

use crate::error::{Error, Result};
use crate::tensor::numel;

/// Maps a flat output index to the flat index of one broadcast operand.
#[derive(Debug, Clone)]
pub(crate) enum Mapping {
    Same,
    Scalar,
    /// Operand shape is a suffix of the output shape.
    Cycle(usize),
    /// Operand shape is a prefix of the output shape followed by ones.
    Repeat(usize),
    Strided {
        out_shape: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl Mapping {
    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Mapping::Same => i,
            Mapping::Scalar => 0,
            Mapping::Cycle(n) => i % n,
            Mapping::Repeat(k) => i / k,
            Mapping::Strided { out_shape, strides } => {
                let mut rem = i;
                let mut idx = 0;
                for (d, s) in out_shape.iter().zip(strides).rev() {
                    idx += (rem % d) * s;
                    rem /= d;
                }
                idx
            }
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

pub(crate) fn mapping(input: &[usize], out: &[usize]) -> Mapping {
    if input == out {
        return Mapping::Same;
    }
    let n = numel(input);
    if n == 1 {
        return Mapping::Scalar;
    }
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, rank - input.len())
        .chain(input.iter().copied())
        .collect();

    // Suffix: leading dims all 1, the rest equal to the output.
    let first_real = padded.iter().position(|&d| d != 1).unwrap_or(rank);
    if padded[first_real..] == out[first_real..] {
        return Mapping::Cycle(n);
    }
    // Prefix: trailing dims all 1, the rest equal to the output.
    let last_real = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if padded[..last_real] == out[..last_real] {
        return Mapping::Repeat(numel(&out[last_real..]));
    }

    let mut strides = vec![0; rank];
    let mut s = 1;
    for k in (0..rank).rev() {
        if padded[k] != 1 {
            strides[k] = s;
            s *= padded[k];
        }
    }
    Mapping::Strided {
        out_shape: out.to_vec(),
        strides,
    }
}

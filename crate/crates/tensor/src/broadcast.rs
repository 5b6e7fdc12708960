// Numpy-style broadcasting for binary element-wise ops.
//
// Shapes are right-aligned. Each operand gets an index pattern mapping an
// output flat index onto its own flat index; the common patterns (same
// shape, scalar, trailing tile, leading repeat) avoid materializing a map.

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    // k-th extent counting from the last axis; missing leading axes are 1
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Pattern {
    Identity,
    Scalar,
    /// operand repeats with period `n` along the flat output index
    Tile(usize),
    /// each operand element covers `n` consecutive output elements
    Repeat(usize),
    General(Vec<usize>),
}

impl Pattern {
    pub(crate) fn new(operand: &[usize], out: &[usize]) -> Pattern {
        let numel: usize = operand.iter().product();
        let out_numel: usize = out.iter().product();
        if numel == out_numel {
            return Pattern::Identity;
        }
        if numel == 1 {
            return Pattern::Scalar;
        }
        let rank = out.len();
        let padded: Vec<usize> = (0..rank).map(|i| dim_from_right(operand, rank - 1 - i)).collect();
        // leading ones then a suffix equal to the output suffix
        let first_non_one = padded.iter().position(|&d| d != 1).unwrap_or(rank);
        if padded[first_non_one..] == out[first_non_one..] {
            return Pattern::Tile(numel);
        }
        // a prefix equal to the output prefix then trailing ones
        let last_non_one = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if padded[..last_non_one] == out[..last_non_one] {
            return Pattern::Repeat(out[last_non_one..].iter().product());
        }
        let mut strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { acc };
            acc *= padded[i];
        }
        let mut map = Vec::with_capacity(out_numel);
        let mut counter = vec![0usize; rank];
        for _ in 0..out_numel {
            map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                if counter[ax] < out[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        Pattern::General(map)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Pattern::Identity => i,
            Pattern::Scalar => 0,
            Pattern::Tile(n) => i % n,
            Pattern::Repeat(n) => i / n,
            Pattern::General(map) => map[i],
        }
    }
}

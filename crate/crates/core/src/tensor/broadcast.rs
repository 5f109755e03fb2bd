use crate::error::{Error, Result};

/// Index mapping for a binary element-wise op under numpy broadcasting.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    kind: Kind,
}

#[derive(Clone, Debug)]
enum Kind {
    Same,
    /// `b` is a trailing block of `out` repeated cyclically.
    CycleB(usize),
    /// `a` is a trailing block of `out` repeated cyclically.
    CycleA(usize),
    General { sa: Vec<usize>, sb: Vec<usize> },
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
    &s[first..]
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            out[i] = if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {:?} with {:?}", a, b),
                ));
            };
        }
        let kind = if a == b {
            Kind::Same
        } else if a == out.as_slice() && out.ends_with(strip_leading_ones(b)) {
            Kind::CycleB(b.iter().product())
        } else if b == out.as_slice() && out.ends_with(strip_leading_ones(a)) {
            Kind::CycleA(a.iter().product())
        } else {
            Kind::General {
                sa: aligned_strides(a, &out),
                sb: aligned_strides(b, &out),
            }
        };
        Ok(Broadcast { out, kind })
    }

    pub fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        match &self.kind {
            Kind::Same => (0..n).for_each(|i| f(i, i, i)),
            Kind::CycleB(nb) => {
                let nb = *nb;
                for base in (0..n).step_by(nb.max(1)) {
                    for j in 0..nb {
                        f(base + j, base + j, j);
                    }
                }
            }
            Kind::CycleA(na) => {
                let na = *na;
                for base in (0..n).step_by(na.max(1)) {
                    for j in 0..na {
                        f(base + j, j, base + j);
                    }
                }
            }
            Kind::General { sa, sb } => {
                let rank = self.out.len();
                let inner = self.out[rank - 1];
                let (la, lb) = (sa[rank - 1], sb[rank - 1]);
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                let mut i = 0;
                while i < n {
                    for j in 0..inner {
                        f(i + j, ia + j * la, ib + j * lb);
                    }
                    i += inner;
                    for d in (0..rank - 1).rev() {
                        idx[d] += 1;
                        ia += sa[d];
                        ib += sb[d];
                        if idx[d] < self.out[d] {
                            break;
                        }
                        ia -= sa[d] * self.out[d];
                        ib -= sb[d] * self.out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

/// Row-major strides of `s` aligned to `out`, zero along broadcast axes.
fn aligned_strides(s: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..s.len()).rev() {
        let o = i + rank - s.len();
        strides[o] = if s[i] == 1 { 0 } else { acc };
        acc *= s[i];
    }
    strides
}

//! Weight-matrix parameterizations: dense, low-rank `BA`, LoRA `W₀ + BA`
//! with a frozen `W₀`, and sparse-plus-low-rank `BA + S` with a fixed support.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{kaiming_bound, kaiming_uniform_init, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Full,
    LowRank,
    Lora,
    SlTrain,
}

impl ParamKind {
    fn tag(self) -> u8 {
        match self {
            ParamKind::Full => 0,
            ParamKind::LowRank => 1,
            ParamKind::Lora => 2,
            ParamKind::SlTrain => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ParamKind::Full,
            1 => ParamKind::LowRank,
            2 => ParamKind::Lora,
            3 => ParamKind::SlTrain,
            other => return Err(Error::Checkpoint(format!("unknown variant tag {other}"))),
        })
    }
}

/// Sparse `rows × cols` matrix with a sorted, duplicate-free support.
/// Values are kept as a `1 × nnz` matrix so optimizers treat them like any
/// other trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indices: Vec<(u32, u32)>,
    values: Matrix,
}

impl SparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        indices: Vec<(u32, u32)>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(invalid("sparse indices and values differ in length"));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(invalid(
                    "sparse indices must be strictly increasing in row-major order",
                ));
            }
        }
        if let Some(&(i, j)) = indices
            .iter()
            .find(|&&(i, j)| i as usize >= rows || j as usize >= cols)
        {
            return Err(invalid(format!(
                "sparse index ({i},{j}) outside {rows}x{cols}"
            )));
        }
        let nnz = values.len();
        Ok(Self {
            rows,
            cols,
            indices,
            values: Matrix::from_vec(1, nnz, values)?,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[(u32, u32)] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn values_matrix_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn to_dense(&self) -> Matrix {
        let mut d = Matrix::zeros(self.rows, self.cols);
        self.add_to(&mut d);
        d
    }

    pub fn add_to(&self, dense: &mut Matrix) {
        for (&(i, j), &v) in self.indices.iter().zip(self.values.as_slice()) {
            dense[(i as usize, j as usize)] += v;
        }
    }

    /// Entries of `dense` at the support, in support order.
    pub fn gather(&self, dense: &Matrix) -> Vec<f64> {
        self.indices
            .iter()
            .map(|&(i, j)| dense[(i as usize, j as usize)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parameterization {
    Full {
        w: Matrix,
    },
    LowRank {
        b: Matrix,
        a: Matrix,
    },
    Lora {
        w0: Matrix,
        b: Matrix,
        a: Matrix,
    },
    SlTrain {
        b: Matrix,
        a: Matrix,
        s: SparseMatrix,
    },
}

/// Gradients of the loss with respect to each trainable tensor of a
/// [`Parameterization`], in the order of [`Parameterization::trainable_mut`].
#[derive(Debug, Clone, PartialEq)]
pub enum FactorGradients {
    Full { w: Matrix },
    LowRank { b: Matrix, a: Matrix },
    Lora { b: Matrix, a: Matrix },
    SlTrain { b: Matrix, a: Matrix, s: Matrix },
}

impl FactorGradients {
    pub fn tensors(&self) -> Vec<&Matrix> {
        match self {
            FactorGradients::Full { w } => vec![w],
            FactorGradients::LowRank { b, a } | FactorGradients::Lora { b, a } => vec![b, a],
            FactorGradients::SlTrain { b, a, s } => vec![b, a, s],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            FactorGradients::Full { w } => vec![w],
            FactorGradients::LowRank { b, a } | FactorGradients::Lora { b, a } => vec![b, a],
            FactorGradients::SlTrain { b, a, s } => vec![b, a, s],
        }
    }

    pub fn into_tensors(self) -> Vec<Matrix> {
        match self {
            FactorGradients::Full { w } => vec![w],
            FactorGradients::LowRank { b, a } | FactorGradients::Lora { b, a } => vec![b, a],
            FactorGradients::SlTrain { b, a, s } => vec![b, a, s],
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// Number of sparse entries stored for ratio `delta` on an `m × n` matrix.
pub fn sparse_count(m: usize, n: usize, delta: f64) -> usize {
    (delta * (m * n) as f64).round() as usize
}

pub fn init_parameterization(
    kind: ParamKind,
    m: usize,
    n: usize,
    r: usize,
    delta: f64,
    rng: &mut SeededRng,
) -> Result<Parameterization> {
    if m == 0 || n == 0 {
        return Err(invalid(format!(
            "weight dimensions must be positive, got {m}x{n}"
        )));
    }
    if kind != ParamKind::Full && (r == 0 || r > m.min(n)) {
        return Err(Error::Rank {
            rank: r,
            rows: m,
            cols: n,
        });
    }
    if !(0.0..=1.0).contains(&delta) || delta.is_nan() {
        return Err(invalid(format!("sparsity ratio {delta} outside [0, 1]")));
    }
    Ok(match kind {
        ParamKind::Full => Parameterization::Full {
            w: kaiming_uniform_init(m, n, rng)?,
        },
        ParamKind::LowRank => {
            let b = kaiming_uniform_init(m, r, rng)?;
            let a = kaiming_uniform_init(r, n, rng)?;
            Parameterization::LowRank { b, a }
        }
        ParamKind::Lora => {
            let b = kaiming_uniform_init(m, r, rng)?;
            let a = kaiming_uniform_init(r, n, rng)?;
            let w0 = kaiming_uniform_init(m, n, rng)?;
            Parameterization::Lora { w0, b, a }
        }
        ParamKind::SlTrain => {
            let b = kaiming_uniform_init(m, r, rng)?;
            let a = kaiming_uniform_init(r, n, rng)?;
            let nnz = sparse_count(m, n, delta);
            let mut flat = rand::seq::index::sample(rng, m * n, nnz).into_vec();
            flat.sort_unstable();
            let indices = flat
                .into_iter()
                .map(|p| ((p / n) as u32, (p % n) as u32))
                .collect();
            let bound = kaiming_bound(n);
            let values = (0..nnz).map(|_| rng.uniform(-bound, bound)).collect();
            Parameterization::SlTrain {
                b,
                a,
                s: SparseMatrix::new(m, n, indices, values)?,
            }
        }
    })
}

impl Parameterization {
    pub fn kind(&self) -> ParamKind {
        match self {
            Parameterization::Full { .. } => ParamKind::Full,
            Parameterization::LowRank { .. } => ParamKind::LowRank,
            Parameterization::Lora { .. } => ParamKind::Lora,
            Parameterization::SlTrain { .. } => ParamKind::SlTrain,
        }
    }

    /// Shape `(m, n)` of the effective dense weight.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Parameterization::Full { w } => w.shape(),
            Parameterization::LowRank { b, a }
            | Parameterization::Lora { b, a, .. }
            | Parameterization::SlTrain { b, a, .. } => (b.rows(), a.cols()),
        }
    }

    /// Inner rank; for a dense weight this is `min(m, n)`.
    pub fn rank(&self) -> usize {
        match self {
            Parameterization::Full { w } => w.rows().min(w.cols()),
            Parameterization::LowRank { b, .. }
            | Parameterization::Lora { b, .. }
            | Parameterization::SlTrain { b, .. } => b.cols(),
        }
    }

    /// Realized sparse ratio `nnz(S) / (mn)`; zero for the other variants.
    pub fn delta(&self) -> f64 {
        match self {
            Parameterization::SlTrain { s, .. } => {
                let (m, n) = s.shape();
                s.nnz() as f64 / (m * n) as f64
            }
            _ => 0.0,
        }
    }

    pub fn materialize(&self) -> Matrix {
        match self {
            Parameterization::Full { w } => w.clone(),
            Parameterization::LowRank { b, a } => b.matmul(a).expect("factor shapes"),
            Parameterization::Lora { w0, b, a } => {
                let mut w = b.matmul(a).expect("factor shapes");
                w.add_assign(w0).expect("factor shapes");
                w
            }
            Parameterization::SlTrain { b, a, s } => {
                let mut w = b.matmul(a).expect("factor shapes");
                s.add_to(&mut w);
                w
            }
        }
    }

    /// Chain rule from `∂L/∂W` to the trainable tensors.
    pub fn factor_gradients(&self, g_w: &Matrix) -> Result<FactorGradients> {
        g_w.ensure_shape("factor_gradients", self.shape())?;
        Ok(match self {
            Parameterization::Full { .. } => FactorGradients::Full { w: g_w.clone() },
            Parameterization::LowRank { b, a } => FactorGradients::LowRank {
                b: g_w.matmul_t(a)?,
                a: b.t_matmul(g_w)?,
            },
            Parameterization::Lora { b, a, .. } => FactorGradients::Lora {
                b: g_w.matmul_t(a)?,
                a: b.t_matmul(g_w)?,
            },
            Parameterization::SlTrain { b, a, s } => {
                let sg = s.gather(g_w);
                let nnz = sg.len();
                FactorGradients::SlTrain {
                    b: g_w.matmul_t(a)?,
                    a: b.t_matmul(g_w)?,
                    s: Matrix::from_vec(1, nnz, sg)?,
                }
            }
        })
    }

    /// Trainable tensors in a fixed order: `[W]`, `[B, A]`, or `[B, A, S]`.
    /// LoRA's `W₀` is not included.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Parameterization::Full { w } => vec![w],
            Parameterization::LowRank { b, a } | Parameterization::Lora { b, a, .. } => vec![b, a],
            Parameterization::SlTrain { b, a, s } => vec![b, a, s.values_matrix_mut()],
        }
    }

    pub fn trainable(&self) -> Vec<&Matrix> {
        match self {
            Parameterization::Full { w } => vec![w],
            Parameterization::LowRank { b, a } | Parameterization::Lora { b, a, .. } => vec![b, a],
            Parameterization::SlTrain { b, a, s } => vec![b, a, &s.values],
        }
    }

    /// The `(B, A)` factor pair, when the variant has one.
    pub fn factors(&self) -> Option<(&Matrix, &Matrix)> {
        match self {
            Parameterization::Full { .. } => None,
            Parameterization::LowRank { b, a }
            | Parameterization::Lora { b, a, .. }
            | Parameterization::SlTrain { b, a, .. } => Some((b, a)),
        }
    }

    pub fn factors_mut(&mut self) -> Option<(&mut Matrix, &mut Matrix)> {
        match self {
            Parameterization::Full { .. } => None,
            Parameterization::LowRank { b, a }
            | Parameterization::Lora { b, a, .. }
            | Parameterization::SlTrain { b, a, .. } => Some((b, a)),
        }
    }

    /// Values held in memory, frozen ones included.
    pub fn stored_count(&self) -> usize {
        match self {
            Parameterization::Full { w } => w.len(),
            Parameterization::LowRank { b, a } => b.len() + a.len(),
            Parameterization::Lora { w0, b, a } => w0.len() + b.len() + a.len(),
            Parameterization::SlTrain { b, a, s } => b.len() + a.len() + s.nnz(),
        }
    }

    /// Values updated by the optimizer.
    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        let frozen_ok = match self {
            Parameterization::Lora { w0, .. } => w0.is_finite(),
            _ => true,
        };
        frozen_ok && self.trainable().iter().all(|t| t.is_finite())
    }

    const MAGIC: &'static [u8; 4] = b"PPRM";
    const VERSION: u8 = 1;

    /// Flat little-endian checkpoint: header (magic, version, variant tag,
    /// `m`, `n`, `r` as u32, `delta` as f64, index count as u32), then the
    /// dense tensors, then SLTrain's index pairs (u32, u32) and values.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let (m, n) = self.shape();
        let nnz = match self {
            Parameterization::SlTrain { s, .. } => s.nnz(),
            _ => 0,
        };
        out.write_all(Self::MAGIC)?;
        out.write_all(&[Self::VERSION, self.kind().tag()])?;
        for dim in [m, n, self.rank()] {
            out.write_all(&to_u32(dim)?.to_le_bytes())?;
        }
        out.write_all(&self.delta().to_le_bytes())?;
        out.write_all(&to_u32(nnz)?.to_le_bytes())?;
        let dense: Vec<&Matrix> = match self {
            Parameterization::Full { w } => vec![w],
            Parameterization::LowRank { b, a } => vec![b, a],
            Parameterization::Lora { w0, b, a } => vec![w0, b, a],
            Parameterization::SlTrain { b, a, .. } => vec![b, a],
        };
        for t in dense {
            write_f64s(&mut out, t.as_slice())?;
        }
        if let Parameterization::SlTrain { s, .. } = self {
            for &(i, j) in s.indices() {
                out.write_all(&i.to_le_bytes())?;
                out.write_all(&j.to_le_bytes())?;
            }
            write_f64s(&mut out, s.values())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut vt = [0u8; 2];
        input.read_exact(&mut vt)?;
        if vt[0] != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", vt[0])));
        }
        let kind = ParamKind::from_tag(vt[1])?;
        let m = read_u32(&mut input)? as usize;
        let n = read_u32(&mut input)? as usize;
        let r = read_u32(&mut input)? as usize;
        let _delta = read_f64(&mut input)?;
        let nnz = read_u32(&mut input)? as usize;
        let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(rows, cols, read_f64s(&mut input, rows * cols)?)
        };
        let p = match kind {
            ParamKind::Full => Parameterization::Full { w: take(m, n)? },
            ParamKind::LowRank => Parameterization::LowRank {
                b: take(m, r)?,
                a: take(r, n)?,
            },
            ParamKind::Lora => Parameterization::Lora {
                w0: take(m, n)?,
                b: take(m, r)?,
                a: take(r, n)?,
            },
            ParamKind::SlTrain => {
                let b = take(m, r)?;
                let a = take(r, n)?;
                let mut indices = Vec::with_capacity(nnz);
                for _ in 0..nnz {
                    let i = read_u32(&mut input)?;
                    let j = read_u32(&mut input)?;
                    indices.push((i, j));
                }
                let values = read_f64s(&mut input, nnz)?;
                Parameterization::SlTrain {
                    b,
                    a,
                    s: SparseMatrix::new(m, n, indices, values)
                        .map_err(|e| Error::Checkpoint(e.to_string()))?,
                }
            }
        };
        Ok(p)
    }
}

pub(crate) fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Overflow("checkpoint dimension"))
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(input)?))
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(input)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::new(seed)
    }

    #[test]
    fn full_has_single_matrix() {
        let p = init_parameterization(ParamKind::Full, 4, 4, 0, 0.0, &mut rng(0)).unwrap();
        assert!(matches!(&p, Parameterization::Full { w } if w.shape() == (4, 4)));
        assert!(p.factors().is_none());
        assert_eq!(p.stored_count(), 16);
    }

    #[test]
    fn sltrain_sparse_count() {
        let p = init_parameterization(ParamKind::SlTrain, 10, 10, 2, 0.1, &mut rng(1)).unwrap();
        match &p {
            Parameterization::SlTrain { s, .. } => {
                assert_eq!(s.nnz(), 10);
                assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
            }
            _ => unreachable!(),
        }
        assert_eq!(p.stored_count(), (10 + 10) * 2 + 10);
    }

    #[test]
    fn lowrank_deterministic() {
        let a = init_parameterization(ParamKind::LowRank, 6, 4, 2, 0.0, &mut rng(5)).unwrap();
        let b = init_parameterization(ParamKind::LowRank, 6, 4, 2, 0.0, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stored_count(), (6 + 4) * 2);
    }

    #[test]
    fn lora_counts() {
        let p = init_parameterization(ParamKind::Lora, 6, 4, 2, 0.0, &mut rng(5)).unwrap();
        assert_eq!(p.stored_count(), 24 + (6 + 4) * 2);
        assert_eq!(p.trainable_count(), (6 + 4) * 2);
    }

    #[test]
    fn invalid_arguments() {
        let r = &mut rng(0);
        assert!(init_parameterization(ParamKind::LowRank, 4, 3, 4, 0.0, r).is_err());
        assert!(init_parameterization(ParamKind::LowRank, 4, 3, 0, 0.0, r).is_err());
        assert!(init_parameterization(ParamKind::SlTrain, 4, 3, 1, 1.5, r).is_err());
        assert!(init_parameterization(ParamKind::Full, 0, 3, 1, 0.0, r).is_err());
    }

    #[test]
    fn materialize_zero_factors() {
        let mut p = init_parameterization(ParamKind::LowRank, 3, 3, 1, 0.0, &mut rng(2)).unwrap();
        if let Some((b, _)) = p.factors_mut() {
            b.fill(0.0);
        }
        assert_eq!(p.materialize(), Matrix::zeros(3, 3));

        let mut p = init_parameterization(ParamKind::Lora, 3, 3, 1, 0.0, &mut rng(2)).unwrap();
        if let Some((b, _)) = p.factors_mut() {
            b.fill(0.0);
        }
        let Parameterization::Lora { w0, .. } = &p else {
            unreachable!()
        };
        assert_eq!(&p.materialize(), w0);
    }

    #[test]
    fn materialize_sltrain_by_hand() {
        let p = Parameterization::SlTrain {
            b: Matrix::from_rows(&[vec![1.0], vec![0.0]]),
            a: Matrix::from_rows(&[vec![2.0, 0.0]]),
            s: SparseMatrix::new(2, 2, vec![(1, 1)], vec![3.0]).unwrap(),
        };
        assert_eq!(
            p.materialize(),
            Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]])
        );
    }

    #[test]
    fn factor_gradients_by_hand() {
        let p = Parameterization::LowRank {
            b: Matrix::from_rows(&[vec![1.0], vec![1.0]]),
            a: Matrix::from_rows(&[vec![1.0, 1.0]]),
        };
        let g = p.factor_gradients(&Matrix::identity(2)).unwrap();
        assert_eq!(
            g,
            FactorGradients::LowRank {
                b: Matrix::from_rows(&[vec![1.0], vec![1.0]]),
                a: Matrix::from_rows(&[vec![1.0, 1.0]]),
            }
        );
        let zero = p.factor_gradients(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.squared_norm(), 0.0);
        assert!(p.factor_gradients(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn sparse_validation() {
        assert!(SparseMatrix::new(2, 2, vec![(1, 0), (0, 1)], vec![1.0, 2.0]).is_err());
        assert!(SparseMatrix::new(2, 2, vec![(0, 1), (0, 1)], vec![1.0, 2.0]).is_err());
        assert!(SparseMatrix::new(2, 2, vec![(2, 0)], vec![1.0]).is_err());
        assert!(SparseMatrix::new(2, 2, vec![(0, 0)], vec![]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_all_variants() {
        for kind in [
            ParamKind::Full,
            ParamKind::LowRank,
            ParamKind::Lora,
            ParamKind::SlTrain,
        ] {
            let p = init_parameterization(kind, 5, 4, 2, 0.25, &mut rng(8)).unwrap();
            let mut buf = Vec::new();
            p.write_checkpoint(&mut buf).unwrap();
            let q = Parameterization::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(p, q);
        }
        assert!(Parameterization::read_checkpoint(&b"XXXX"[..]).is_err());
    }
}

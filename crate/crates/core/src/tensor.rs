//! Dense row-major tensors with trailing-dimension broadcasting.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// Dense n-dimensional array. `shape` may be empty (a scalar) and may hold
/// zero extents (an empty tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Result shape of broadcasting `a` against `b` (numpy rules, aligned on the
/// trailing axis).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k < rank - a.len() { 1 } else { a[k - (rank - a.len())] };
        let db = if k < rank - b.len() { 1 } else { b[k - (rank - b.len())] };
        out[k] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::IncompatibleShapes {
                a: a.to_vec(),
                b: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Strides of `shape` seen through the broadcast `target` shape; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        strides[k + offset] = if shape[k] == 1 && target[k + offset] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[k];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, handing the flat
/// offsets into each operand.
fn for_each_offset(shape: &[usize], strides: &[&[usize]], mut f: impl FnMut(&[usize])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; strides.len()];
    for _ in 0..total {
        f(&offs);
        for k in (0..rank).rev() {
            idx[k] += 1;
            for (o, s) in offs.iter_mut().zip(strides) {
                *o += s[k];
            }
            if idx[k] < shape[k] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides) {
                *o -= s[k] * shape[k];
            }
            idx[k] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Number of leading-axis records.
    pub fn records(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Values per leading-axis record.
    pub fn record_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            numel(&self.shape[1..])
        }
    }

    pub fn record(&self, i: usize) -> &[T] {
        let w = self.record_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn record_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.record_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Tensor made of the listed leading-axis records, in order.
    pub fn select_records(&self, rows: &[usize]) -> Self {
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * self.record_len());
        for &r in rows {
            data.extend_from_slice(self.record(r));
        }
        Self { shape, data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let target = broadcast_shapes(&self.shape, shape)?;
        if target != shape {
            return Err(Error::IncompatibleShapes {
                a: self.shape.clone(),
                b: shape.to_vec(),
            });
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let strides = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        for_each_offset(shape, &[&strides], |o| data.push(self.data[o[0]]));
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Applies `f` to broadcast-aligned entries of `self` and `other`.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shapes(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for_each_offset(&shape, &[&sa, &sb], |o| {
            data.push(f(self.data[o[0]], other.data[o[1]]))
        });
        Ok(Self { shape, data })
    }

    pub fn elementwise(op: BinaryOp, a: &Self, b: &Self) -> Result<Self> {
        a.zip_with(b, |x, y| op.apply(x, y))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Mul, self, other)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Inner product over all entries; shapes must match exactly.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::IncompatibleShapes {
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn min(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::min)
    }

    pub fn max(&self) -> Option<T> {
        self.data.iter().copied().reduce(T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// CSV text: a `shape=d0xd1x...` header, then one line per leading index.
    pub fn to_csv_string(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let mut out = format!("shape={}\n", dims.join("x"));
        let (rows, width) = if self.shape.is_empty() {
            (1, 1)
        } else {
            (self.shape[0], self.record_len())
        };
        for r in 0..rows {
            for (k, v) in self.data[r * width..(r + 1) * width].iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                // Display output of f32/f64 round-trips exactly.
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Tensor::to_csv_string`] output. Lines starting with `#` are
    /// comments.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor file".into()))?;
        let dims = header
            .trim()
            .strip_prefix("shape=")
            .ok_or_else(|| Error::Parse(format!("expected `shape=` header, got `{header}`")))?;
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| {
                    d.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("bad extent `{d}`: {e}")))
                })
                .collect::<Result<_>>()?
        };
        let mut data = Vec::with_capacity(numel(&shape));
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            for field in line.split(',') {
                let v = field
                    .trim()
                    .parse::<T>()
                    .map_err(|_| Error::Parse(format!("bad value `{field}`")))?;
                data.push(v);
            }
        }
        Self::from_vec(shape, data)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// I.i.d. standard normal entries drawn from `source`.
pub fn sample_normal(source: &mut RandomSource, shape: &[usize]) -> Tensor<f64> {
    let data = (0..numel(shape)).map(|_| source.normal()).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Same as [`sample_normal`] at another precision.
pub fn sample_normal_as<T: Scalar>(source: &mut RandomSource, shape: &[usize]) -> Tensor<T> {
    sample_normal(source, shape).cast()
}

/// I.i.d. uniform `[0, 1)` entries.
pub fn sample_uniform(source: &mut RandomSource, shape: &[usize]) -> Tensor<f64> {
    let data = (0..numel(shape)).map(|_| source.uniform()).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trailing_rule() {
        assert_eq!(broadcast_shapes(&[4, 1, 8], &[4, 3, 1]).unwrap(), vec![4, 3, 8]);
        assert_eq!(
            broadcast_shapes(&[5, 1, 1, 1], &[5, 3, 4, 4]).unwrap(),
            vec![5, 3, 4, 4]
        );
        assert!(matches!(
            broadcast_shapes(&[2, 3], &[4, 3]),
            Err(Error::IncompatibleShapes { .. })
        ));
        assert_eq!(broadcast_shapes(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert_eq!(broadcast_shapes(&[0], &[1]).unwrap(), vec![0]);
    }

    #[test]
    fn mul_by_zero_scalar() {
        let x = Tensor::from_vec([3], vec![1.5, -2.0, 7.0]).unwrap();
        let out = Tensor::scalar(0.0).mul(&x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[3]);
    }

    #[test]
    fn elementwise_arithmetic() {
        let t = Tensor::from_vec([2], vec![0.5, 0.25]).unwrap();
        let x = Tensor::from_vec([2], vec![2.0, 4.0]).unwrap();
        assert_eq!(t.mul(&x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn channel_broadcast_matches_index_loops() {
        let (n, c, h, w) = (2, 3, 2, 4);
        let mut src = RandomSource::new(3);
        let a = sample_normal(&mut src, &[n, 1, h, w]);
        let b = sample_normal(&mut src, &[n, c, h, w]);
        let sum = a.add(&b).unwrap();
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let av = a.data()[(i * h + y) * w + x];
                        let bv = b.data()[((i * c + j) * h + y) * w + x];
                        assert_eq!(sum.data()[((i * c + j) * h + y) * w + x], av + bv);
                    }
                }
            }
        }
    }

    #[test]
    fn normal_is_deterministic() {
        let a = sample_normal(&mut RandomSource::at(9, 4), &[16]);
        let b = sample_normal(&mut RandomSource::at(9, 4), &[16]);
        assert_eq!(a, b);
        assert!(sample_normal(&mut RandomSource::new(1), &[0]).is_empty());
    }

    #[test]
    fn normal_moments() {
        let x = sample_normal(&mut RandomSource::new(2024), &[100_000]);
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn csv_round_trip_scalar_and_empty() {
        let s = Tensor::scalar(0.1f64);
        assert_eq!(Tensor::<f64>::from_csv_str(&s.to_csv_string()).unwrap(), s);
        let e = Tensor::<f64>::zeros([0, 3]);
        assert_eq!(Tensor::<f64>::from_csv_str(&e.to_csv_string()).unwrap(), e);
    }

    #[test]
    fn csv_layout() {
        let t = Tensor::from_vec([2, 1, 2], vec![1.0, 2.5, -3.0, 4.0]).unwrap();
        assert_eq!(t.to_csv_string(), "shape=2x1x2\n1,2.5\n-3,4\n");
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(prop::sample::select(vec![1usize, 2, 3]), 0..4)
    }

    proptest! {
        #[test]
        fn broadcast_is_associative(a in shape_strategy(), b in shape_strategy(), c in shape_strategy()) {
            let left = broadcast_shapes(&a, &b).and_then(|ab| broadcast_shapes(&ab, &c));
            let right = broadcast_shapes(&b, &c).and_then(|bc| broadcast_shapes(&a, &bc));
            match (left, right) {
                (Ok(l), Ok(r)) => prop_assert_eq!(l, r),
                (Err(_), Err(_)) => {}
                (l, r) => prop_assert!(false, "{:?} vs {:?}", l, r),
            }
        }

        #[test]
        fn mul_by_ones_is_identity(vals in prop::collection::vec(-1e6f64..1e6, 1..32)) {
            let n = vals.len();
            let a = Tensor::from_vec([n], vals).unwrap();
            let out = a.mul(&Tensor::ones([n])).unwrap();
            prop_assert_eq!(out.data(), a.data());
        }

        #[test]
        fn csv_round_trip_is_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..24)) {
            let n = vals.len();
            let t = Tensor::from_vec([n], vals).unwrap();
            let back = Tensor::<f64>::from_csv_str(&t.to_csv_string()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

//! Dense rank-4 `f64` tensor in NCHW layout and its binary golden-file format.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";

/// A dense `(N, C, H, W)` array of doubles, row-major with N outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(shape_err!("dimensions must be positive, got {dims:?}"));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dimensions must be positive");
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut i = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f([a, b, y, x]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = StandardNormal.sample(rng);
        }
        t
    }

    /// Entries uniform in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = rng.random_range(-bound..bound);
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The `(n, c)` spatial plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.plane_len()]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(invalid!("{what}: non-finite value at flat index {i}")),
            None => Ok(()),
        }
    }

    pub fn same_dims(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "{what}: dims {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_dims(other, "elementwise op")?;
        Ok(Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_dims(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Concatenates along the channel axis. All parts share N, H and W.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, _, h, w] = first.dims;
        for p in parts {
            if p.dims[0] != n || p.dims[2] != h || p.dims[3] != w {
                return Err(shape_err!(
                    "concat: {:?} incompatible with {:?}",
                    p.dims,
                    first.dims
                ));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                let per = p.dims[1] * h * w;
                data.extend_from_slice(&p.data[b * per..(b + 1) * per]);
            }
        }
        Tensor::new([n, c_total, h, w], data)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if len == 0 || start + len > c {
            return Err(shape_err!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let from = (b * c + start) * hw;
            data.extend_from_slice(&self.data[from..from + len * hw]);
        }
        Tensor::new([n, len, h, w], data)
    }

    /// Sample `n` as a `(1, C, H, W)` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.dims[1] * self.plane_len();
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks `(1, C, H, W)` samples along the batch axis.
    pub fn stack_batch(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| shape_err!("stack of zero samples"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in samples {
            if s.dims != [1, c, h, w] {
                return Err(shape_err!("stack: {:?} vs [1, {c}, {h}, {w}]", s.dims));
            }
            data.extend_from_slice(&s.data);
        }
        Tensor::new([samples.len(), c, h, w], data)
    }

    /// Writes the `TNSR` golden format: magic, `u32` rank, `u64` dims, `f64` data, all little-endian.
    pub fn write_golden<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&4u32.to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the `TNSR` golden format. Ranks below 4 are left-padded with unit dims.
    pub fn read_golden<R: Read>(mut input: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid!("bad tensor magic {magic:?}"));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank == 0 || rank > 4 {
            return Err(invalid!("unsupported tensor rank {rank}"));
        }
        let mut dims = [1usize; 4];
        let mut b8 = [0u8; 8];
        for slot in dims.iter_mut().skip(4 - rank) {
            input.read_exact(&mut b8)?;
            *slot = usize::try_from(u64::from_le_bytes(b8))
                .map_err(|_| invalid!("dimension does not fit in memory"))?;
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            input.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(dims, data)
    }
}

impl TryFrom<(&[usize], Vec<f64>)> for Tensor {
    type Error = Error;

    fn try_from((dims, data): (&[usize], Vec<f64>)) -> Result<Self> {
        let d: [usize; 4] = dims
            .try_into()
            .map_err(|_| shape_err!("expected 4 dims, got {}", dims.len()))?;
        Tensor::new(d, data)
    }
}

//! Dense-array substrate: shapes, matrix product, deterministic RNG, Xavier
//! initialization, and the `MSTC` binary blob format.

use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("blob format error: {0}")]
    Format(String),
    #[error("blob truncated: {0}")]
    Truncated(String),
    #[error("blob dtype mismatch: expected {expected:?}, found code {found}")]
    DtypeMismatch { expected: Dtype, found: u8 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Element type codes used by the blob format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element of a [`Tensor`]. Implemented for `f32` (training)
/// and `f64` (gradient checking).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Raw bit pattern, widened to u64, for bit-exactness tests.
    fn bits(self) -> u64;
    fn put_le(self, buf: &mut [u8]);
    fn get_le(buf: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn ln_1p(self) -> Self {
        f32::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn put_le(self, buf: &mut [u8]) {
        buf.copy_from_slice(&self.to_le_bytes());
    }
    fn get_le(buf: &[u8]) -> Self {
        f32::from_le_bytes(buf.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn put_le(self, buf: &mut [u8]) {
        buf.copy_from_slice(&self.to_le_bytes());
    }
    fn get_le(buf: &[u8]) -> Self {
        f64::from_le_bytes(buf.try_into().unwrap())
    }
}

/// Dense array with explicit shape, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::ZERO)
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = checked_len(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let n = checked_len(shape)?;
        if n != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    /// Same data, new shape; element count must match.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Tensor::from_vec(shape, self.data)
    }

    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        i * self.shape[1] + j
    }

    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[self.idx2(i, j)]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let idx = self.idx2(i, j);
        self.data[idx] = v;
    }

    #[inline]
    pub fn get3(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.idx3(i, j, k)]
    }

    #[inline]
    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.idx3(i, j, k);
        self.data[idx] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Bitwise equality, shape included.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Converts elements through `f64`, e.g. to lift an `f32` tensor to `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "transpose2 requires rank 2");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_in_place(&mut self, other: &Tensor<T>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_in_place",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::Dimension("empty shape".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(TensorError::Dimension(format!(
                "zero dimension in shape {:?}",
                shape
            )));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| TensorError::Dimension(format!("shape {:?} overflows", shape)))?;
    }
    Ok(n)
}

/// Matrix product of `a` [m,k] and `b` [k,n]. Fixed i-k-j loop order so the
/// per-element summation order (and thus the bit pattern) is reproducible.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    {
        let av = a.data();
        let bv = b.data();
        let ov = out.data_mut();
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut ov[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    if !out.all_finite() {
        return Err(TensorError::NonFinite("matmul"));
    }
    Ok(out)
}

// Fixed, published generator: splitmix64 for seeding, xoshiro256++ for draws.
// Constants are pinned here so golden tests never drift across platforms.
const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG: identical seed gives an identical draw sequence on
/// every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in s.iter_mut() {
            *slot = splitmix64(&mut sm);
        }
        if s == [0; 4] {
            s[0] = SPLITMIX_GAMMA;
        }
        Rng { s }
    }

    /// Independent substream `idx` of `seed` (workers, epochs, steps).
    pub fn stream(seed: u64, idx: u64) -> Self {
        let mut sm = idx;
        let tweak = splitmix64(&mut sm);
        Rng::new(seed ^ tweak)
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n). Fixed-point multiply keeps it branch-free
    /// and platform-stable.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index bound must be positive");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller (no spare caching; state stays minimal).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Xavier (Glorot) uniform draw over [-b, b] with b = sqrt(6/(fan_in+fan_out)),
/// returned as a [fan_in, fan_out] tensor.
pub fn xavier_init<T: Scalar>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>, TensorError> {
    xavier_shaped(&[fan_in, fan_out], fan_in, fan_out, rng)
}

/// Xavier draw with explicit fan counts for non-matrix kernels.
pub fn xavier_shaped<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>, TensorError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::Dimension(format!(
            "xavier fan counts must be positive, got ({fan_in}, {fan_out})"
        )));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = checked_len(shape)?;
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

const BLOB_MAGIC: &[u8; 4] = b"MSTC";

/// Writes `t` in the blob format: magic "MSTC", u8 dtype code, u8 rank,
/// rank x u64 little-endian dims, then raw little-endian values. Returns the
/// byte count.
pub fn blob_write<T: Scalar, W: Write>(t: &Tensor<T>, sink: &mut W) -> Result<usize, TensorError> {
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(TensorError::Dimension(format!("rank {rank} exceeds 255")));
    }
    sink.write_all(BLOB_MAGIC)?;
    sink.write_all(&[T::DTYPE.code(), rank as u8])?;
    for &d in t.shape() {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    let elem = T::DTYPE.size();
    let mut buf = vec![0u8; elem * t.len()];
    for (i, &v) in t.data().iter().enumerate() {
        v.put_le(&mut buf[i * elem..(i + 1) * elem]);
    }
    sink.write_all(&buf)?;
    Ok(4 + 2 + 8 * rank + buf.len())
}

/// Reads a blob written by [`blob_write`]; `read(write(t))` is bit-identical
/// to `t`.
pub fn blob_read<T: Scalar, R: Read>(source: &mut R) -> Result<Tensor<T>, TensorError> {
    let mut head = [0u8; 6];
    read_exact(source, &mut head, "header")?;
    if &head[..4] != BLOB_MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &head[..4],
            BLOB_MAGIC
        )));
    }
    let code = head[4];
    match Dtype::from_code(code) {
        Some(d) if d == T::DTYPE => {}
        _ => {
            return Err(TensorError::DtypeMismatch {
                expected: T::DTYPE,
                found: code,
            })
        }
    }
    let rank = head[5] as usize;
    if rank == 0 {
        return Err(TensorError::Format("zero rank".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_exact(source, &mut d, "dims")?;
        let dim = u64::from_le_bytes(d);
        if dim == 0 {
            return Err(TensorError::Format("zero dimension".into()));
        }
        shape.push(dim as usize);
    }
    let n = checked_len(&shape)?;
    let elem = T::DTYPE.size();
    let mut buf = vec![0u8; n * elem];
    read_exact(source, &mut buf, "values")?;
    let data = (0..n)
        .map(|i| T::get_le(&buf[i * elem..(i + 1) * elem]))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<(), TensorError> {
    src.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorError::Truncated(format!("stream ended inside {what}"))
        } else {
            TensorError::Io(e)
        }
    })
}

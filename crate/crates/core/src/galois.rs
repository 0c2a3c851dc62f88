//! Arithmetic over GF(2^s) and the small amount of dense linear algebra the
//! Vandermonde erasure code needs.
//!
//! Multiplication goes through log/antilog tables built once per field. The
//! field width is configurable between 2 and 8 bits; elements are stored in a
//! `u8` and every value is guaranteed to be below `2^s`.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::sync::OnceLock;

use thiserror::Error;

/// Width used by the erasure code unless configured otherwise.
pub const DEFAULT_BITS: u32 = 8;

/// x^8 + x^4 + x^3 + x^2 + 1.
pub const GF256_POLY: u16 = 0x11D;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GaloisError {
    #[error("field width {0} is not supported (expected 2..=8 bits)")]
    UnsupportedWidth(u32),
    #[error("polynomial {poly:#x} is not primitive for GF(2^{bits})")]
    NotPrimitive { poly: u16, bits: u32 },
    #[error("element {value} is outside GF(2^{bits})")]
    ElementOutOfRange { value: u32, bits: u32 },
    #[error("generator index {index} outside 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("row length {len} exceeds the {max} nonzero field elements")]
    RowTooLong { len: usize, max: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {left_cols} columns against {right_rows} rows")]
    DimensionMismatch { left_cols: usize, right_rows: usize },
}

/// One symbol of GF(2^s). Addition is XOR and needs no field context;
/// multiplication goes through [`GaloisField`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(transparent)]
pub struct GfElement(pub u8);

impl GfElement {
    pub const ZERO: GfElement = GfElement(0);
    pub const ONE: GfElement = GfElement(1);

    #[inline]
    pub fn value(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for GfElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#04x}", self.0)
    }
}

impl Add for GfElement {
    type Output = GfElement;

    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn add(self, rhs: GfElement) -> GfElement {
        GfElement(self.0 ^ rhs.0)
    }
}

impl AddAssign for GfElement {
    #[inline]
    #[allow(clippy::suspicious_op_assign_impl)]
    fn add_assign(&mut self, rhs: GfElement) {
        self.0 ^= rhs.0;
    }
}

/// Default primitive polynomial for each supported width.
pub fn default_polynomial(bits: u32) -> Result<u16, GaloisError> {
    Ok(match bits {
        2 => 0x7,
        3 => 0xB,
        4 => 0x13,
        5 => 0x25,
        6 => 0x43,
        7 => 0x89,
        8 => GF256_POLY,
        other => return Err(GaloisError::UnsupportedWidth(other)),
    })
}

/// GF(2^s) defined by a primitive polynomial, with `x` (the element `2`) as
/// the primitive element `g`.
#[derive(Clone, PartialEq, Eq)]
pub struct GaloisField {
    bits: u32,
    poly: u16,
    // exp[k] = g^k for k in 0..2N so products of logs never need a modulo.
    exp: Vec<u8>,
    // log[0] is unused.
    log: Vec<u16>,
}

impl fmt::Debug for GaloisField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaloisField")
            .field("bits", &self.bits)
            .field("poly", &format_args!("{:#x}", self.poly))
            .finish()
    }
}

impl GaloisField {
    pub fn new(bits: u32, poly: u16) -> Result<Self, GaloisError> {
        if !(2..=8).contains(&bits) {
            return Err(GaloisError::UnsupportedWidth(bits));
        }
        let order = 1usize << bits;
        let n = order - 1;
        if poly >> bits != 1 {
            return Err(GaloisError::NotPrimitive { poly, bits });
        }
        let mut exp = vec![0u8; 2 * n];
        let mut log = vec![0u16; order];
        let mut seen = vec![false; order];
        let mut x: u16 = 1;
        for k in 0..n {
            if seen[x as usize] {
                return Err(GaloisError::NotPrimitive { poly, bits });
            }
            seen[x as usize] = true;
            exp[k] = x as u8;
            exp[k + n] = x as u8;
            log[x as usize] = k as u16;
            x <<= 1;
            if x & (1 << bits) != 0 {
                x ^= poly;
            }
        }
        if x != 1 {
            return Err(GaloisError::NotPrimitive { poly, bits });
        }
        Ok(Self { bits, poly, exp, log })
    }

    /// Field of the given width with its default primitive polynomial.
    pub fn with_bits(bits: u32) -> Result<Self, GaloisError> {
        Self::new(bits, default_polynomial(bits)?)
    }

    /// Shared GF(256) instance.
    pub fn gf256() -> &'static GaloisField {
        static FIELD: OnceLock<GaloisField> = OnceLock::new();
        FIELD.get_or_init(|| GaloisField::new(8, GF256_POLY).expect("0x11D is primitive"))
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn polynomial(&self) -> u16 {
        self.poly
    }

    /// Number of field elements, 2^s.
    pub fn order(&self) -> usize {
        1 << self.bits
    }

    /// Number of nonzero elements, N = 2^s - 1. Also the number of distinct
    /// coded packets per message.
    pub fn nonzero_count(&self) -> usize {
        self.order() - 1
    }

    pub fn element(&self, value: u32) -> Result<GfElement, GaloisError> {
        if (value as usize) < self.order() {
            Ok(GfElement(value as u8))
        } else {
            Err(GaloisError::ElementOutOfRange {
                value,
                bits: self.bits,
            })
        }
    }

    #[inline]
    pub fn mul(&self, a: GfElement, b: GfElement) -> GfElement {
        if a.is_zero() || b.is_zero() {
            return GfElement::ZERO;
        }
        let k = self.log[a.0 as usize] as usize + self.log[b.0 as usize] as usize;
        GfElement(self.exp[k])
    }

    /// Multiplicative inverse; `None` for zero.
    #[inline]
    pub fn inv(&self, a: GfElement) -> Option<GfElement> {
        if a.is_zero() {
            return None;
        }
        let n = self.nonzero_count();
        let k = self.log[a.0 as usize] as usize;
        Some(GfElement(self.exp[(n - k) % n]))
    }

    pub fn pow(&self, a: GfElement, e: usize) -> GfElement {
        if e == 0 {
            return GfElement::ONE;
        }
        if a.is_zero() {
            return GfElement::ZERO;
        }
        let n = self.nonzero_count();
        let k = (self.log[a.0 as usize] as usize * (e % n)) % n;
        GfElement(self.exp[k])
    }

    pub fn primitive_element(&self) -> GfElement {
        GfElement(2)
    }

    /// `alpha_i = g^i` for `1 <= i <= N`. Index `N` maps to the unit element,
    /// so the N indices enumerate every nonzero element exactly once.
    pub fn alpha(&self, index: usize) -> Result<GfElement, GaloisError> {
        let n = self.nonzero_count();
        if index == 0 || index > n {
            return Err(GaloisError::IndexOutOfRange { index, max: n });
        }
        Ok(GfElement(self.exp[index % n]))
    }

    /// Row `[1, alpha_i, alpha_i^2, ..., alpha_i^(len-1)]` of the generator matrix.
    pub fn generator_row(&self, index: usize, len: usize) -> Result<Vec<GfElement>, GaloisError> {
        let n = self.nonzero_count();
        if len > n {
            return Err(GaloisError::RowTooLong { len, max: n });
        }
        let alpha = self.alpha(index)?;
        let mut row = Vec::with_capacity(len);
        let mut acc = GfElement::ONE;
        for _ in 0..len {
            row.push(acc);
            acc = self.mul(acc, alpha);
        }
        Ok(row)
    }

    /// `sum_j a[j] * b[j]`.
    #[inline]
    pub fn dot(&self, a: &[GfElement], b: &[GfElement]) -> GfElement {
        a.iter()
            .zip(b)
            .fold(GfElement::ZERO, |acc, (&x, &y)| acc + self.mul(x, y))
    }
}

/// Dense row-major matrix over GF(2^s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GfMatrix {
    rows: usize,
    cols: usize,
    data: Vec<GfElement>,
}

impl GfMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![GfElement::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, GfElement::ONE);
        }
        m
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: Vec<Vec<GfElement>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == cols),
            "GfMatrix rows must have equal length"
        );
        let n = rows.len();
        Self {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    /// Stacks generator rows for the given packet indices.
    pub fn generator(field: &GaloisField, indices: &[usize], len: usize) -> Result<Self, GaloisError> {
        let rows = indices
            .iter()
            .map(|&i| field.generator_row(i, len))
            .collect::<Result<Vec<_>, _>>()?;
        let mut m = Self::from_rows(rows);
        m.cols = len;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> GfElement {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: GfElement) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[GfElement] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [GfElement] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul(&self, field: &GaloisField, rhs: &GfMatrix) -> Result<GfMatrix, GaloisError> {
        if self.cols != rhs.rows {
            return Err(GaloisError::DimensionMismatch {
                left_cols: self.cols,
                right_rows: rhs.rows,
            });
        }
        let mut out = GfMatrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a.is_zero() {
                    continue;
                }
                for c in 0..rhs.cols {
                    let v = out.get(r, c) + field.mul(a, rhs.get(k, c));
                    out.set(r, c, v);
                }
            }
        }
        Ok(out)
    }

    /// Gauss-Jordan inversion, pivoting on the first nonzero entry of each column.
    pub fn invert(&self, field: &GaloisField) -> Result<GfMatrix, GaloisError> {
        if self.rows != self.cols {
            return Err(GaloisError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut work = self.clone();
        let mut inv = GfMatrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .find(|&r| !work.get(r, col).is_zero())
                .ok_or(GaloisError::Singular)?;
            if pivot != col {
                work.swap_rows(pivot, col);
                inv.swap_rows(pivot, col);
            }
            let scale = field.inv(work.get(col, col)).expect("pivot is nonzero");
            work.scale_row(field, col, scale);
            inv.scale_row(field, col, scale);
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = work.get(r, col);
                if factor.is_zero() {
                    continue;
                }
                work.add_scaled_row(field, r, col, factor);
                inv.add_scaled_row(field, r, col, factor);
            }
        }
        Ok(inv)
    }

    pub fn rank(&self, field: &GaloisField) -> usize {
        let mut work = self.clone();
        let mut rank = 0;
        for col in 0..self.cols {
            if rank == self.rows {
                break;
            }
            let Some(pivot) = (rank..self.rows).find(|&r| !work.get(r, col).is_zero()) else {
                continue;
            };
            work.swap_rows(pivot, rank);
            let scale = field.inv(work.get(rank, col)).expect("pivot is nonzero");
            work.scale_row(field, rank, scale);
            for r in rank + 1..self.rows {
                let factor = work.get(r, col);
                if !factor.is_zero() {
                    work.add_scaled_row(field, r, rank, factor);
                }
            }
            rank += 1;
        }
        rank
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }

    fn scale_row(&mut self, field: &GaloisField, r: usize, s: GfElement) {
        for v in self.row_mut(r) {
            *v = field.mul(*v, s);
        }
    }

    // row[dst] += factor * row[src]
    fn add_scaled_row(&mut self, field: &GaloisField, dst: usize, src: usize, factor: GfElement) {
        for c in 0..self.cols {
            let v = self.get(dst, c) + field.mul(factor, self.get(src, c));
            self.set(dst, c, v);
        }
    }
}

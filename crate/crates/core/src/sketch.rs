//! Count-sketch operators over rows of weight matrices.
//!
//! An operator is determined by `(input_dim, sketch_len, seed)`: each source
//! index `j < input_dim` hashes to a bucket `h(j) < sketch_len` and a sign
//! `s(j)` in {-1, +1}. As a matrix, `H[b][j] = s(j)` when `h(j) == b` and 0
//! otherwise, so `H x` adds signed coordinates into buckets and `H^T y`
//! reads them back out. The descriptor is 24 bytes regardless of size; both
//! ends of a connection rebuild identical tables from the seed.
//!
//! Bucket and sign tables come from the fixed SplitMix64 mixer in
//! [`crate::seeding`]. No hashing framework, no platform dependence.

use crate::error::{Error, Result};
use crate::numerics::{median_of, Matrix, Vector};
use crate::seeding::{derive, mix64};

/// Tag separating bucket derivation from sign derivation.
const BUCKET_TAG: u64 = 0x6275_636b;
const SIGN_TAG: u64 = 0x7369_676e;

/// Whether sketch operators hash randomly or pass rows through unchanged.
/// `Identity` is a test hook: `sketch_len == input_dim`, `h(j) = j`,
/// `s(j) = +1`, so sketching is lossless and compressed runs can be compared
/// bit for bit against uncompressed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchMode {
    Random,
    Identity,
}

/// A single count-sketch operator `H` with shape `sketch_len x input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchOperator {
    input_dim: usize,
    sketch_len: usize,
    seed: Option<u64>,
    buckets: Vec<u32>,
    signs: Vec<f64>,
}

impl SketchOperator {
    /// Derives the bucket/sign tables for `(input_dim, sketch_len, seed)`.
    /// Errors unless `0 < sketch_len <= input_dim`.
    pub fn new(input_dim: usize, sketch_len: usize, seed: u64) -> Result<Self> {
        Self::check_dims("SketchOperator::new", input_dim, sketch_len)?;
        let bucket_base = derive(seed, BUCKET_TAG);
        let sign_base = derive(seed, SIGN_TAG);
        let mut buckets = Vec::with_capacity(input_dim);
        let mut signs = Vec::with_capacity(input_dim);
        for j in 0..input_dim {
            let jm = mix64(j as u64);
            buckets.push((mix64(bucket_base ^ jm) % sketch_len as u64) as u32);
            signs.push(if mix64(sign_base ^ jm) >> 63 == 1 { -1.0 } else { 1.0 });
        }
        Ok(SketchOperator { input_dim, sketch_len, seed: Some(seed), buckets, signs })
    }

    /// Lossless pass-through operator: `sketch_len == input_dim`, identity
    /// hash, all-positive signs.
    pub fn identity(dim: usize) -> Self {
        SketchOperator {
            input_dim: dim,
            sketch_len: dim,
            seed: None,
            buckets: (0..dim as u32).collect(),
            signs: vec![1.0; dim],
        }
    }

    /// Builds an operator from explicit tables, mainly so tests can plant
    /// known hash patterns. Errors on out-of-range buckets, signs outside
    /// {-1, +1}, or mismatched table lengths.
    pub fn from_tables(sketch_len: usize, buckets: Vec<u32>, signs: Vec<f64>) -> Result<Self> {
        let input_dim = buckets.len();
        Self::check_dims("SketchOperator::from_tables", input_dim, sketch_len)?;
        if signs.len() != input_dim {
            return Err(Error::shape(
                "SketchOperator::from_tables",
                format!("{} buckets but {} signs", input_dim, signs.len()),
            ));
        }
        if buckets.iter().any(|&b| b as usize >= sketch_len) {
            return Err(Error::arg("SketchOperator::from_tables", "bucket out of range"));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::arg("SketchOperator::from_tables", "signs must be +1 or -1"));
        }
        Ok(SketchOperator { input_dim, sketch_len, seed: None, buckets, signs })
    }

    fn check_dims(op: &'static str, input_dim: usize, sketch_len: usize) -> Result<()> {
        if input_dim == 0 || sketch_len == 0 {
            return Err(Error::arg(op, "dimensions must be positive"));
        }
        if sketch_len > input_dim {
            return Err(Error::arg(
                op,
                format!("sketch length {sketch_len} exceeds input dimension {input_dim}"),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn sketch_len(&self) -> usize {
        self.sketch_len
    }

    /// Seed the tables were derived from; `None` for identity or explicit
    /// tables, which cannot travel as a 24-byte descriptor.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    #[inline]
    pub fn bucket_of(&self, j: usize) -> usize {
        self.buckets[j] as usize
    }

    #[inline]
    pub fn sign_of(&self, j: usize) -> f64 {
        self.signs[j]
    }

    /// Number of source indices landing in each bucket.
    pub fn bucket_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.sketch_len];
        for &b in &self.buckets {
            sizes[b as usize] += 1;
        }
        sizes
    }

    /// `H x`: fold `input_dim` coordinates into `sketch_len` signed buckets.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.input_dim {
            return Err(Error::shape(
                "SketchOperator::apply",
                format!("vector len {} for input dim {}", x.len(), self.input_dim),
            ));
        }
        let mut out = Vector::zeros(self.sketch_len);
        for j in 0..self.input_dim {
            let b = self.buckets[j] as usize;
            out.data_mut()[b] += self.signs[j] * x.get(j);
        }
        Ok(out)
    }

    /// `H^T y`: read each coordinate's bucket back out with its sign.
    pub fn apply_transpose(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.sketch_len {
            return Err(Error::shape(
                "SketchOperator::apply_transpose",
                format!("vector len {} for sketch len {}", y.len(), self.sketch_len),
            ));
        }
        let mut out = Vector::zeros(self.input_dim);
        for j in 0..self.input_dim {
            out.data_mut()[j] = self.signs[j] * y.get(self.buckets[j] as usize);
        }
        Ok(out)
    }

    /// `H W`: sketch the rows of a `input_dim x n` matrix into
    /// `sketch_len x n`, in O(input_dim * n) without materializing `H`.
    pub fn sketch_matrix(&self, w: &Matrix) -> Result<Matrix> {
        if w.rows() != self.input_dim {
            return Err(Error::shape(
                "SketchOperator::sketch_matrix",
                format!("matrix rows {} for input dim {}", w.rows(), self.input_dim),
            ));
        }
        let mut out = Matrix::zeros(self.sketch_len, w.cols());
        for j in 0..self.input_dim {
            let s = self.signs[j];
            let b = self.buckets[j] as usize;
            let src = w.row(j);
            let dst = out.row_mut(b);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += s * v;
            }
        }
        Ok(out)
    }

    /// `H^T S`: expand a `sketch_len x n` payload back to `input_dim x n`.
    pub fn unsketch_matrix(&self, s: &Matrix) -> Result<Matrix> {
        if s.rows() != self.sketch_len {
            return Err(Error::shape(
                "SketchOperator::unsketch_matrix",
                format!("matrix rows {} for sketch len {}", s.rows(), self.sketch_len),
            ));
        }
        let mut out = Matrix::zeros(self.input_dim, s.cols());
        for j in 0..self.input_dim {
            let sign = self.signs[j];
            let src = s.row(self.buckets[j] as usize);
            let dst = out.row_mut(j);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = sign * v;
            }
        }
        Ok(out)
    }

    /// `M H^T`: sketch the columns of an `m x input_dim` matrix.
    pub fn sketch_cols(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.input_dim {
            return Err(Error::shape(
                "SketchOperator::sketch_cols",
                format!("matrix cols {} for input dim {}", m.cols(), self.input_dim),
            ));
        }
        let mut out = Matrix::zeros(m.rows(), self.sketch_len);
        for i in 0..m.rows() {
            let src = m.row(i);
            for j in 0..self.input_dim {
                let b = self.buckets[j] as usize;
                out.row_mut(i)[b] += self.signs[j] * src[j];
            }
        }
        Ok(out)
    }

    /// `M H`: expand the columns of an `m x sketch_len` matrix back to
    /// `m x input_dim`.
    pub fn unsketch_cols(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.sketch_len {
            return Err(Error::shape(
                "SketchOperator::unsketch_cols",
                format!("matrix cols {} for sketch len {}", m.cols(), self.sketch_len),
            ));
        }
        let mut out = Matrix::zeros(m.rows(), self.input_dim);
        for i in 0..m.rows() {
            let src = m.row(i);
            let dst = out.row_mut(i);
            for j in 0..self.input_dim {
                dst[j] = self.signs[j] * src[self.buckets[j] as usize];
            }
        }
        Ok(out)
    }

    /// Dense `sketch_len x input_dim` copy of `H`. Intended for tests and
    /// analysis at small sizes; the training path never calls this.
    pub fn materialize(&self) -> Matrix {
        let mut h = Matrix::zeros(self.sketch_len, self.input_dim);
        for j in 0..self.input_dim {
            h.set(self.buckets[j] as usize, j, self.signs[j]);
        }
        h
    }
}

/// A bundle of `count` independent operators over the same dimensions, used
/// for median-of-sketches recovery.
#[derive(Debug, Clone)]
pub struct MultiSketch {
    ops: Vec<SketchOperator>,
}

impl MultiSketch {
    /// Derives `count` operators with child seeds `derive(seed, i)`.
    pub fn new(input_dim: usize, sketch_len: usize, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::arg("MultiSketch::new", "count must be positive"));
        }
        let ops = (0..count)
            .map(|i| SketchOperator::new(input_dim, sketch_len, derive(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiSketch { ops })
    }

    /// Wraps existing operators. Errors if dimensions disagree.
    pub fn from_ops(ops: Vec<SketchOperator>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::EmptyInput { op: "MultiSketch::from_ops" });
        }
        let (d, c) = (ops[0].input_dim(), ops[0].sketch_len());
        if ops.iter().any(|o| o.input_dim() != d || o.sketch_len() != c) {
            return Err(Error::shape("MultiSketch::from_ops", "operators disagree on dimensions"));
        }
        Ok(MultiSketch { ops })
    }

    pub fn ops(&self) -> &[SketchOperator] {
        &self.ops
    }

    pub fn count(&self) -> usize {
        self.ops.len()
    }

    pub fn input_dim(&self) -> usize {
        self.ops[0].input_dim()
    }

    pub fn sketch_len(&self) -> usize {
        self.ops[0].sketch_len()
    }

    /// Sketches `w` under every operator.
    pub fn sketch_matrix(&self, w: &Matrix) -> Result<Vec<Matrix>> {
        self.ops.iter().map(|o| o.sketch_matrix(w)).collect()
    }

    /// Entrywise median across the per-operator expansions `H_i^T S_i`.
    /// With one operator this is exactly that operator's expansion.
    pub fn recover_median(&self, sketches: &[Matrix]) -> Result<Matrix> {
        if sketches.len() != self.ops.len() {
            return Err(Error::shape(
                "MultiSketch::recover_median",
                format!("{} sketches for {} operators", sketches.len(), self.ops.len()),
            ));
        }
        let expanded = self
            .ops
            .iter()
            .zip(sketches)
            .map(|(o, s)| o.unsketch_matrix(s))
            .collect::<Result<Vec<_>>>()?;
        entrywise_median(&expanded)
    }
}

/// Entrywise median over same-shaped matrices.
pub(crate) fn entrywise_median(mats: &[Matrix]) -> Result<Matrix> {
    let first = mats.first().ok_or(Error::EmptyInput { op: "entrywise_median" })?;
    let (rows, cols) = (first.rows(), first.cols());
    if mats.iter().any(|m| m.rows() != rows || m.cols() != cols) {
        return Err(Error::shape("entrywise_median", "matrices disagree on shape"));
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut buf = vec![0.0f64; mats.len()];
    for idx in 0..rows * cols {
        for (b, m) in buf.iter_mut().zip(mats) {
            *b = m.data()[idx];
        }
        out.data_mut()[idx] = median_of(&buf)?;
    }
    Ok(out)
}

/// A sketched weight: the operator that produced it plus the compact
/// `sketch_len x n` payload. This is what the server sends downlink.
#[derive(Debug, Clone)]
pub struct SketchedWeight {
    pub op: SketchOperator,
    pub payload: Matrix,
}

impl SketchedWeight {
    pub fn new(op: SketchOperator, payload: Matrix) -> Result<Self> {
        if payload.rows() != op.sketch_len() {
            return Err(Error::shape(
                "SketchedWeight::new",
                format!("payload rows {} for sketch len {}", payload.rows(), op.sketch_len()),
            ));
        }
        Ok(SketchedWeight { op, payload })
    }

    /// Sketches `w` under `op`.
    pub fn sketch(op: SketchOperator, w: &Matrix) -> Result<Self> {
        let payload = op.sketch_matrix(w)?;
        Ok(SketchedWeight { op, payload })
    }

    /// `H^T (H W)`: the dense surrogate this sketch represents.
    pub fn expand(&self) -> Result<Matrix> {
        self.op.unsketch_matrix(&self.payload)
    }
}

/// `H1 w H2^T`: compress both modes of a square-ish matrix at once.
pub fn two_sided_sketch(
    row_op: &SketchOperator,
    col_op: &SketchOperator,
    w: &Matrix,
) -> Result<Matrix> {
    let rows_done = row_op.sketch_matrix(w)?;
    col_op.sketch_cols(&rows_done)
}

/// `H1^T s H2`: expand a two-sided sketch back to full shape.
pub fn two_sided_recover(
    row_op: &SketchOperator,
    col_op: &SketchOperator,
    s: &Matrix,
) -> Result<Matrix> {
    let rows_done = row_op.unsketch_matrix(s)?;
    col_op.unsketch_cols(&rows_done)
}

/// Entrywise median of per-pair two-sided recoveries.
pub fn two_sided_recover_median(
    pairs: &[(SketchOperator, SketchOperator)],
    sketches: &[Matrix],
) -> Result<Matrix> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput { op: "two_sided_recover_median" });
    }
    if pairs.len() != sketches.len() {
        return Err(Error::shape(
            "two_sided_recover_median",
            format!("{} pairs for {} sketches", pairs.len(), sketches.len()),
        ));
    }
    let recovered = pairs
        .iter()
        .zip(sketches)
        .map(|((r, c), s)| two_sided_recover(r, c, s))
        .collect::<Result<Vec<_>>>()?;
    entrywise_median(&recovered)
}

/// Serialized form of a sketched weight, used by the communication ledger to
/// count bytes. Layout: three little-endian u64s `(input_dim, sketch_len,
/// seed)`, then the payload as row-major little-endian f32s. The receiver
/// rebuilds the operator tables from the seed, so `H` itself never travels.
pub mod wire {
    use super::{SketchOperator, SketchedWeight};
    use crate::error::{Error, Result};
    use crate::numerics::Matrix;

    pub const HEADER_BYTES: usize = 24;

    /// Bytes on the wire for a `sketch_len x n` payload.
    pub fn sketched_weight_bytes(sketch_len: usize, n: usize) -> usize {
        HEADER_BYTES + 4 * sketch_len * n
    }

    /// Encodes descriptor + payload. Errors when the operator has no seed
    /// (identity or explicit tables cannot be reconstructed from 24 bytes).
    pub fn encode(sw: &SketchedWeight) -> Result<Vec<u8>> {
        let seed = sw.op.seed().ok_or_else(|| {
            Error::Unsupported("only seed-derived operators have a wire form".into())
        })?;
        let mut out = Vec::with_capacity(sketched_weight_bytes(
            sw.op.sketch_len(),
            sw.payload.cols(),
        ));
        out.extend_from_slice(&(sw.op.input_dim() as u64).to_le_bytes());
        out.extend_from_slice(&(sw.op.sketch_len() as u64).to_le_bytes());
        out.extend_from_slice(&seed.to_le_bytes());
        for &v in sw.payload.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes a buffer produced by [`encode`]. The payload column count is
    /// inferred from the buffer length.
    pub fn decode(bytes: &[u8]) -> Result<SketchedWeight> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::MalformedWire(format!(
                "{} bytes is shorter than the {HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        let input_dim = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let sketch_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if sketch_len == 0 {
            return Err(Error::MalformedWire("zero sketch length".into()));
        }
        let body = &bytes[HEADER_BYTES..];
        if body.len() % (4 * sketch_len) != 0 {
            return Err(Error::MalformedWire(format!(
                "{} payload bytes do not divide into {sketch_len} float rows",
                body.len()
            )));
        }
        let n = body.len() / (4 * sketch_len);
        let op = SketchOperator::new(input_dim, sketch_len, seed)
            .map_err(|e| Error::MalformedWire(e.to_string()))?;
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let payload = Matrix::from_vec(sketch_len, n, data)?;
        SketchedWeight::new(op, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::spectral_norm;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_tables_give_identity_operator() {
        let op = SketchOperator::from_tables(4, vec![0, 1, 2, 3], vec![1.0; 4]).unwrap();
        let h = op.materialize();
        assert_eq!(h, Matrix::identity(4));
        let x = Vector::from_vec(vec![1.0, -2.0, 3.0, 4.0]);
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.apply_transpose(&x).unwrap(), x);
    }

    #[test]
    fn buckets_cover_input_and_stay_in_range() {
        let op = SketchOperator::new(1000, 10, 99).unwrap();
        let sizes = op.bucket_sizes();
        assert_eq!(sizes.len(), 10);
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn different_seeds_give_different_tables() {
        let a = SketchOperator::new(64, 8, 1).unwrap();
        let b = SketchOperator::new(64, 8, 2).unwrap();
        let differs = (0..64).any(|j| a.bucket_of(j) != b.bucket_of(j) || a.sign_of(j) != b.sign_of(j));
        assert!(differs);
    }

    #[test]
    fn same_seed_reproduces_bit_identical_tables() {
        let a = SketchOperator::new(128, 16, 777).unwrap();
        let b = SketchOperator::new(128, 16, 777).unwrap();
        assert_eq!(a.materialize(), b.materialize());
    }

    #[test]
    fn constructor_rejects_degenerate_dims() {
        assert!(SketchOperator::new(8, 0, 1).is_err());
        assert!(SketchOperator::new(0, 1, 1).is_err());
        assert!(SketchOperator::new(4, 8, 1).is_err());
    }

    #[test]
    fn apply_routes_basis_vectors() {
        let op = SketchOperator::new(32, 4, 5).unwrap();
        for j in 0..32 {
            let mut e = Vector::zeros(32);
            e.set(j, 1.0);
            let y = op.apply(&e).unwrap();
            for b in 0..4 {
                let want = if b == op.bucket_of(j) { op.sign_of(j) } else { 0.0 };
                assert_eq!(y.get(b), want);
            }
        }
    }

    #[test]
    fn apply_matches_materialized_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let op = SketchOperator::new(48, 7, 6).unwrap();
        let h = op.materialize();
        for _ in 0..10 {
            let x = random_vec(&mut rng, 48);
            let fast = op.apply(&x).unwrap();
            let slow = h.matvec(&x).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
            let y = random_vec(&mut rng, 7);
            let fast_t = op.apply_transpose(&y).unwrap();
            let slow_t = h.matvec_transposed(&y).unwrap();
            for (a, b) in fast_t.data().iter().zip(slow_t.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn apply_zero_gives_zero() {
        let op = SketchOperator::new(16, 4, 3).unwrap();
        assert_eq!(op.apply(&Vector::zeros(16)).unwrap(), Vector::zeros(4));
    }

    #[test]
    fn sketch_matrix_matches_materialized_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let op = SketchOperator::new(16, 4, 12).unwrap();
        let w = random_mat(&mut rng, 16, 5);
        let fast = op.sketch_matrix(&w).unwrap();
        let slow = op.materialize().matmul(&w).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let s = random_mat(&mut rng, 4, 5);
        let fast_t = op.unsketch_matrix(&s).unwrap();
        let slow_t = op.materialize().transpose().matmul(&s).unwrap();
        for (a, b) in fast_t.data().iter().zip(slow_t.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sketch_of_identity_matrix_is_the_operator() {
        let op = SketchOperator::new(12, 3, 8).unwrap();
        let s = op.sketch_matrix(&Matrix::identity(12)).unwrap();
        assert_eq!(s, op.materialize());
    }

    #[test]
    fn sketch_matrix_zero_gives_zero() {
        let op = SketchOperator::new(12, 3, 8).unwrap();
        let s = op.sketch_matrix(&Matrix::zeros(12, 7)).unwrap();
        assert_eq!(s, Matrix::zeros(3, 7));
    }

    #[test]
    fn column_mode_helpers_match_materialized_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let op = SketchOperator::new(10, 4, 9).unwrap();
        let h = op.materialize();
        let m = random_mat(&mut rng, 6, 10);
        let fast = op.sketch_cols(&m).unwrap();
        let slow = m.matmul(&h.transpose()).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let p = random_mat(&mut rng, 6, 4);
        let fast_u = op.unsketch_cols(&p).unwrap();
        let slow_u = p.matmul(&h).unwrap();
        for (a, b) in fast_u.data().iter().zip(slow_u.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn linearity_is_exact_on_integer_inputs() {
        // Floating-point addition is not distributive in general, so exact
        // linearity is asserted on integer-valued data where every partial
        // sum is representable.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let op = SketchOperator::new(40, 6, 21).unwrap();
        for _ in 0..20 {
            let x = Vector::from_vec((0..40).map(|_| rng.random_range(-20..20) as f64).collect());
            let y = Vector::from_vec((0..40).map(|_| rng.random_range(-20..20) as f64).collect());
            let (a, b) = (3.0, -2.0);
            let mut combo = Vector::zeros(40);
            for j in 0..40 {
                combo.set(j, a * x.get(j) + b * y.get(j));
            }
            let lhs = op.apply(&combo).unwrap();
            let mut rhs = op.apply(&x).unwrap();
            rhs.scale(a);
            let mut yb = op.apply(&y).unwrap();
            yb.scale(b);
            rhs.add_assign(&yb).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn linearity_holds_to_rounding_on_real_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let op = SketchOperator::new(40, 6, 22).unwrap();
        let x = random_vec(&mut rng, 40);
        let y = random_vec(&mut rng, 40);
        let (a, b) = (0.37, -1.21);
        let mut combo = Vector::zeros(40);
        for j in 0..40 {
            combo.set(j, a * x.get(j) + b * y.get(j));
        }
        let lhs = op.apply(&combo).unwrap();
        let mut rhs = op.apply(&x).unwrap();
        rhs.scale(a);
        let mut yb = op.apply(&y).unwrap();
        yb.scale(b);
        rhs.add_assign(&yb).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn round_trip_is_unbiased_over_seeds() {
        // E[H^T H x] = x because signs are independent across indices. Mean
        // over many independent operators must sit within 3 standard errors.
        let d = 8;
        let x = Vector::from_vec(vec![0.9, -0.4, 0.2, 1.4, -1.1, 0.6, -0.3, 0.05]);
        let n = 10_000;
        let mut sums = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for seed in 0..n {
            let op = SketchOperator::new(d, 3, seed as u64).unwrap();
            let z = op.apply_transpose(&op.apply(&x).unwrap()).unwrap();
            for j in 0..d {
                sums[j] += z.get(j);
                sq[j] += z.get(j) * z.get(j);
            }
        }
        for j in 0..d {
            let mean = sums[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - x.get(j)).abs() <= 3.0 * se + 1e-12,
                "coordinate {j}: mean {mean} vs {} (se {se})",
                x.get(j)
            );
        }
    }

    #[test]
    fn gram_frobenius_follows_bucket_sizes() {
        // (H^T H)[i][j] is +-1 exactly when i and j share a bucket, so the
        // squared Frobenius norm is the sum of squared bucket sizes.
        let op = SketchOperator::new(60, 7, 31).unwrap();
        let h = op.materialize();
        let gram = h.transpose().matmul(&h).unwrap();
        let want: usize = op.bucket_sizes().iter().map(|&n| n * n).sum();
        let got = gram.frobenius_norm();
        assert_eq!(got * got, want as f64);
        let est = spectral_norm(&gram, 2000, 1e-10);
        assert!(est.value <= got + 1e-9);
    }

    #[test]
    fn multi_sketch_derives_distinct_operators() {
        let ms = MultiSketch::new(64, 8, 5, 54).unwrap();
        assert_eq!(ms.count(), 5);
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(ms.ops()[i].materialize(), ms.ops()[j].materialize());
            }
        }
    }

    #[test]
    fn recover_median_with_one_operator_is_plain_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ms = MultiSketch::new(24, 6, 1, 3).unwrap();
        let w = random_mat(&mut rng, 24, 4);
        let sketches = ms.sketch_matrix(&w).unwrap();
        let rec = ms.recover_median(&sketches).unwrap();
        let direct = ms.ops()[0].unsketch_matrix(&sketches[0]).unwrap();
        assert_eq!(rec, direct);
        // Per-column agreement with apply_transpose(apply(col)).
        for col in 0..4 {
            let x = Vector::from_vec((0..24).map(|r| w.get(r, col)).collect());
            let rt = ms.ops()[0].apply_transpose(&ms.ops()[0].apply(&x).unwrap()).unwrap();
            for r in 0..24 {
                assert_eq!(rec.get(r, col), rt.get(r));
            }
        }
    }

    #[test]
    fn recover_median_zero_sketches_give_zero() {
        let ms = MultiSketch::new(16, 4, 3, 9).unwrap();
        let zeros: Vec<Matrix> = (0..3).map(|_| Matrix::zeros(4, 2)).collect();
        assert_eq!(ms.recover_median(&zeros).unwrap(), Matrix::zeros(16, 2));
    }

    #[test]
    fn recover_median_rejects_count_mismatch() {
        let ms = MultiSketch::new(16, 4, 3, 9).unwrap();
        let two: Vec<Matrix> = (0..2).map(|_| Matrix::zeros(4, 2)).collect();
        assert!(ms.recover_median(&two).is_err());
    }

    #[test]
    fn planted_heavy_entry_survives_median_recovery() {
        // One dominant entry in a noisy matrix; with the sketch length sized
        // as 20 * ||W||_F^2 / eps^2 and a 9-way median, per-trial recovery of
        // the heavy entry within eps should fail at most 5% of the time.
        // In practice the margin is enormous; 5% is the contract.
        let d = 64;
        let n = 4;
        let k = 9;
        let eps = 0.6;
        let trials = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut w = Matrix::zeros(d, n);
        for v in w.data_mut() {
            *v = rng.random_range(-0.01..0.01);
        }
        w.set(17, 2, 1.0);
        let f2 = w.frobenius_norm().powi(2);
        let c = ((20.0 * f2 / (eps * eps)).ceil() as usize).min(d);
        assert!(c < d, "sizing should stay below the cap here (got {c})");
        let mut failures = 0;
        for t in 0..trials {
            let ms = MultiSketch::new(d, c, k, 1000 + t as u64).unwrap();
            let sk = ms.sketch_matrix(&w).unwrap();
            let rec = ms.recover_median(&sk).unwrap();
            if (rec.get(17, 2) - 1.0).abs() > eps {
                failures += 1;
            }
        }
        assert!(
            (failures as f64) / (trials as f64) <= 0.05,
            "{failures} failures in {trials} trials"
        );
    }

    #[test]
    fn two_sided_identity_hooks_recover_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random_mat(&mut rng, 6, 6);
        let id = SketchOperator::identity(6);
        let s = two_sided_sketch(&id, &id, &w).unwrap();
        assert_eq!(s, w);
        assert_eq!(two_sided_recover(&id, &id, &s).unwrap(), w);
    }

    #[test]
    fn two_sided_matches_materialized_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let w = random_mat(&mut rng, 8, 8);
        let r = SketchOperator::new(8, 4, 41).unwrap();
        let c = SketchOperator::new(8, 4, 42).unwrap();
        let h1 = r.materialize();
        let h2 = c.materialize();
        let s = two_sided_sketch(&r, &c, &w).unwrap();
        let want_s = h1.matmul(&w).unwrap().matmul(&h2.transpose()).unwrap();
        for (a, b) in s.data().iter().zip(want_s.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let rec = two_sided_recover(&r, &c, &s).unwrap();
        let want_r = h1.transpose().matmul(&want_s).unwrap().matmul(&h2).unwrap();
        for (a, b) in rec.data().iter().zip(want_r.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_sided_zero_stays_zero() {
        let r = SketchOperator::new(8, 4, 1).unwrap();
        let c = SketchOperator::new(8, 4, 2).unwrap();
        let s = two_sided_sketch(&r, &c, &Matrix::zeros(8, 8)).unwrap();
        assert_eq!(s, Matrix::zeros(4, 4));
        assert_eq!(two_sided_recover(&r, &c, &s).unwrap(), Matrix::zeros(8, 8));
    }

    #[test]
    fn two_sided_median_with_identical_pairs_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let w = random_mat(&mut rng, 8, 8);
        let r = SketchOperator::new(8, 3, 7).unwrap();
        let c = SketchOperator::new(8, 3, 8).unwrap();
        let s = two_sided_sketch(&r, &c, &w).unwrap();
        let pairs = vec![(r.clone(), c.clone()), (r.clone(), c.clone()), (r.clone(), c.clone())];
        let med =
            two_sided_recover_median(&pairs, &[s.clone(), s.clone(), s.clone()]).unwrap();
        assert_eq!(med, two_sided_recover(&r, &c, &s).unwrap());
    }

    #[test]
    fn materialized_columns_have_one_signed_entry() {
        let op = SketchOperator::new(20, 5, 77).unwrap();
        let h = op.materialize();
        for j in 0..20 {
            let mut nonzeros = 0;
            for b in 0..5 {
                let v = h.get(b, j);
                if v != 0.0 {
                    nonzeros += 1;
                    assert_eq!(b, op.bucket_of(j));
                    assert_eq!(v, op.sign_of(j));
                }
            }
            assert_eq!(nonzeros, 1);
        }
    }

    #[test]
    fn wire_round_trip_is_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let op = SketchOperator::new(32, 8, 4242).unwrap();
        let w = random_mat(&mut rng, 32, 5);
        let sw = SketchedWeight::sketch(op, &w).unwrap();
        let bytes = wire::encode(&sw).unwrap();
        assert_eq!(bytes.len(), wire::sketched_weight_bytes(8, 5));
        let back = wire::decode(&bytes).unwrap();
        assert_eq!(back.op, sw.op);
        let again = wire::encode(&back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn wire_rejects_malformed_buffers() {
        assert!(matches!(wire::decode(&[0u8; 10]), Err(Error::MalformedWire(_))));
        let op = SketchOperator::new(8, 2, 1).unwrap();
        let sw = SketchedWeight::sketch(op, &Matrix::zeros(8, 3)).unwrap();
        let mut bytes = wire::encode(&sw).unwrap();
        bytes.pop();
        assert!(matches!(wire::decode(&bytes), Err(Error::MalformedWire(_))));
    }

    #[test]
    fn wire_refuses_identity_operators() {
        let sw = SketchedWeight::sketch(SketchOperator::identity(4), &Matrix::zeros(4, 2)).unwrap();
        assert!(matches!(wire::encode(&sw), Err(Error::Unsupported(_))));
    }
}

//! Tile-granular fused kernels: `C ← φ(A ⋆ B + D)` for the two expert GEMMs
//! and the weighted combine.

use crate::error::ConfigError;
use crate::gate::Route;
use crate::types::{Activation, TokenMatrix};

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        activation(self, x)
    }
}

/// `relu` and `identity` are exact; `gelu` uses the erf form evaluated in f64.
pub fn activation(phi: Activation, x: f32) -> f32 {
    match phi {
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
        Activation::Gelu => {
            let x = x as f64;
            (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
        }
    }
}

/// Parses an activation id; unknown ids are configuration errors.
pub fn activation_by_name(name: &str) -> Result<Activation, ConfigError> {
    name.parse()
}

/// Borrowed row-major matrix with an explicit row stride.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds its buffer");
        MatRef {
            data,
            rows,
            cols,
            stride: cols,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.stride + c]
    }

    pub fn row(&self, r: usize) -> &'a [f32] {
        &self.data[r * self.stride..r * self.stride + self.cols]
    }
}

impl<'a> From<&'a TokenMatrix> for MatRef<'a> {
    fn from(m: &'a TokenMatrix) -> Self {
        MatRef::new(m.data(), m.rows(), m.cols())
    }
}

#[derive(Debug)]
pub struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds its buffer");
        MatMut {
            data,
            rows,
            cols,
            stride: cols,
        }
    }
}

impl<'a> From<&'a mut TokenMatrix> for MatMut<'a> {
    fn from(m: &'a mut TokenMatrix) -> Self {
        let (rows, cols) = m.shape();
        MatMut::new(m.data_mut(), rows, cols)
    }
}

/// Rectangular block of an output matrix; edge tiles may be smaller than `bM × bN`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tile {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tile {
    /// Block `(row_block, col_block)` of a `rows × cols` matrix cut into `bm × bn` tiles.
    pub fn at(row_block: usize, col_block: usize, bm: usize, bn: usize, rows: usize, cols: usize) -> Tile {
        let row0 = row_block * bm;
        let col0 = col_block * bn;
        Tile {
            row0,
            col0,
            rows: bm.min(rows.saturating_sub(row0)),
            cols: bn.min(cols.saturating_sub(col0)),
        }
    }
}

/// Disjoint cover of a `rows × cols` matrix by `bm × bn` tiles, row-block major.
pub fn tiles(rows: usize, cols: usize, bm: usize, bn: usize) -> impl Iterator<Item = Tile> {
    let (rb, cb) = (rows.div_ceil(bm), cols.div_ceil(bn));
    (0..rb).flat_map(move |r| (0..cb).map(move |c| Tile::at(r, c, bm, bn, rows, cols)))
}

/// The `D` operand of the epilogue.
#[derive(Debug, Clone, Copy)]
pub enum Addend<'a> {
    Zero,
    /// Broadcast along rows; length = output columns.
    Bias(&'a [f32]),
    /// Same shape as the output.
    Matrix(MatRef<'a>),
}

fn shape_err(what: &'static str, expected: (usize, usize), actual: (usize, usize)) -> ConfigError {
    ConfigError::Shape { what, expected, actual }
}

/// `out[tile] = φ(a[tile rows, :] · b[:, tile cols] + d[tile])` in one pass.
///
/// Each output element is written exactly once; the return value is the
/// number of element writes performed.
pub fn fused_gemm_epilogue(
    a: MatRef<'_>,
    b: MatRef<'_>,
    addend: Addend<'_>,
    phi: Activation,
    tile: Tile,
    out: &mut MatMut<'_>,
) -> Result<usize, ConfigError> {
    if a.cols != b.rows {
        return Err(shape_err("inner dimension", (a.rows, b.rows), (a.rows, a.cols)));
    }
    if (out.rows, out.cols) != (a.rows, b.cols) {
        return Err(shape_err("gemm output", (a.rows, b.cols), (out.rows, out.cols)));
    }
    if tile.row0 + tile.rows > out.rows || tile.col0 + tile.cols > out.cols {
        return Err(shape_err("tile range", (out.rows, out.cols), (tile.row0 + tile.rows, tile.col0 + tile.cols)));
    }
    match addend {
        Addend::Bias(bias) if bias.len() != out.cols => {
            return Err(shape_err("bias", (out.cols, 1), (bias.len(), 1)));
        }
        Addend::Matrix(d) if (d.rows, d.cols) != (out.rows, out.cols) => {
            return Err(shape_err("addend", (out.rows, out.cols), (d.rows, d.cols)));
        }
        _ => {}
    }
    let k = a.cols;
    let mut writes = 0;
    let mut acc = vec![0.0f32; tile.cols];
    for r in tile.row0..tile.row0 + tile.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = a.row(r);
        // k-outer over the tile row keeps the inner loop contiguous in `b`;
        // each acc[c] still sums in ascending k.
        for (kk, &av) in a_row.iter().enumerate().take(k) {
            let b_row = &b.data[kk * b.stride + tile.col0..kk * b.stride + tile.col0 + tile.cols];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += av * bv;
            }
        }
        let out_row = &mut out.data[r * out.stride + tile.col0..r * out.stride + tile.col0 + tile.cols];
        for (c, (o, &s)) in out_row.iter_mut().zip(&acc).enumerate() {
            let d = match addend {
                Addend::Zero => 0.0,
                Addend::Bias(bias) => bias[tile.col0 + c],
                Addend::Matrix(m) => m.at(r, tile.col0 + c),
            };
            *o = phi.apply(s + d);
            writes += 1;
        }
    }
    Ok(writes)
}

/// Whole-matrix GEMM with fused epilogue, executed tile by tile.
pub fn gemm_tiled(
    a: MatRef<'_>,
    b: MatRef<'_>,
    addend: Addend<'_>,
    phi: Activation,
    bm: usize,
    bn: usize,
) -> Result<TokenMatrix, ConfigError> {
    let mut out = TokenMatrix::zeros(a.rows, b.cols);
    {
        let mut view = MatMut::from(&mut out);
        for t in tiles(a.rows, b.cols, bm, bn) {
            fused_gemm_epilogue(a, b, addend, phi, t, &mut view)?;
        }
    }
    Ok(out)
}

/// Destination of weighted combine rows.
pub trait RowAccumulator {
    /// `out[row, col0..col0 + values.len()] += weight * values`.
    fn accumulate(&mut self, row: usize, col0: usize, weight: f32, values: &[f32]);
}

impl RowAccumulator for MatMut<'_> {
    fn accumulate(&mut self, row: usize, col0: usize, weight: f32, values: &[f32]) {
        let start = row * self.stride + col0;
        for (o, v) in self.data[start..start + values.len()].iter_mut().zip(values) {
            *o += weight * v;
        }
    }
}

impl RowAccumulator for TokenMatrix {
    fn accumulate(&mut self, row: usize, col0: usize, weight: f32, values: &[f32]) {
        MatMut::from(self).accumulate(row, col0, weight, values)
    }
}

/// `O[token(i), col0..] += w_i · tile[i]` for every mapped row; `None` rows
/// (padding) are skipped. Returns the number of rows accumulated.
pub fn combine_tile<O: RowAccumulator + ?Sized>(
    tile: MatRef<'_>,
    routes: &[Option<Route>],
    col0: usize,
    out: &mut O,
) -> Result<usize, ConfigError> {
    if routes.len() != tile.rows {
        return Err(shape_err("combine weights", (tile.rows, 1), (routes.len(), 1)));
    }
    let mut applied = 0;
    for (i, route) in routes.iter().enumerate() {
        if let Some(r) = route {
            out.accumulate(r.token, col0, r.weight, tile.row(i));
            applied += 1;
        }
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::oracle::naive_matmul;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn max_abs(a: &TokenMatrix, b: &TokenMatrix) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn activations() {
        assert_eq!(activation(Activation::Relu, -3.0), 0.0);
        assert_eq!(activation(Activation::Relu, 2.0), 2.0);
        assert_eq!(activation(Activation::Identity, -1.25), -1.25);
        assert_eq!(activation(Activation::Gelu, 0.0), 0.0);
        assert!(matches!(activation_by_name("swish"), Err(ConfigError::UnknownActivation(_))));
        assert_eq!(activation_by_name("GELU").unwrap(), Activation::Gelu);
    }

    #[test]
    fn gelu_tracks_erf_form() {
        // Reference in f64 via the erfc complement for the negative tail.
        for i in 0..=20_000 {
            let x = -10.0 + i as f64 * 1e-3;
            let exact = 0.5 * x * libm::erfc(-x / std::f64::consts::SQRT_2);
            let got = activation(Activation::Gelu, x as f32) as f64;
            assert!((got - exact).abs() <= 1e-6, "x={x} got={got} exact={exact}");
        }
    }

    #[test]
    fn identity_times_b_is_b() {
        let mut r = rng(1);
        let b = TokenMatrix::random(4, 4, 1.0, &mut r);
        let i = TokenMatrix::identity(4);
        let out = gemm_tiled((&i).into(), (&b).into(), Addend::Zero, Activation::Identity, 2, 2).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let a = TokenMatrix::from_fn(3, 2, |_, _| 1.0);
        let b = TokenMatrix::from_fn(2, 5, |_, _| -1.0);
        let d = vec![0.5; 5];
        let out = gemm_tiled((&a).into(), (&b).into(), Addend::Bias(&d), Activation::Relu, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_8x8x8_matches_naive() {
        let mut r = rng(7);
        let a = TokenMatrix::random(8, 8, 1.0, &mut r);
        let b = TokenMatrix::random(8, 8, 1.0, &mut r);
        let out = gemm_tiled((&a).into(), (&b).into(), Addend::Zero, Activation::Identity, 3, 5).unwrap();
        assert!(max_abs(&out, &naive_matmul(&a, &b).unwrap()) <= 1e-6);
    }

    #[test]
    fn matrix_addend_and_single_write_per_element() {
        let mut r = rng(3);
        let a = TokenMatrix::random(5, 3, 1.0, &mut r);
        let b = TokenMatrix::random(3, 7, 1.0, &mut r);
        let d = TokenMatrix::random(5, 7, 1.0, &mut r);
        let mut out = TokenMatrix::zeros(5, 7);
        let mut writes = 0;
        {
            let mut view = MatMut::from(&mut out);
            for t in tiles(5, 7, 2, 3) {
                let w = fused_gemm_epilogue((&a).into(), (&b).into(), Addend::Matrix((&d).into()), Activation::Identity, t, &mut view)
                    .unwrap();
                assert_eq!(w, t.rows * t.cols);
                writes += w;
            }
        }
        assert_eq!(writes, 35);
        let mut expect = naive_matmul(&a, &b).unwrap();
        for (e, dv) in expect.data_mut().iter_mut().zip(d.data()) {
            *e += dv;
        }
        assert!(max_abs(&out, &expect) <= 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let a = TokenMatrix::zeros(2, 3);
        let b = TokenMatrix::zeros(4, 2);
        let mut out = TokenMatrix::zeros(2, 2);
        let t = Tile::at(0, 0, 2, 2, 2, 2);
        let err = fused_gemm_epilogue((&a).into(), (&b).into(), Addend::Zero, Activation::Relu, t, &mut (&mut out).into());
        assert!(matches!(err, Err(ConfigError::Shape { .. })));
        let b = TokenMatrix::zeros(3, 2);
        let err = fused_gemm_epilogue((&a).into(), (&b).into(), Addend::Bias(&[0.0]), Activation::Relu, t, &mut (&mut out).into());
        assert!(matches!(err, Err(ConfigError::Shape { what: "bias", .. })));
    }

    #[test]
    fn tiles_partition_with_ragged_edges() {
        let ts: Vec<Tile> = tiles(5, 7, 2, 3).collect();
        assert_eq!(ts.len(), 3 * 3);
        assert_eq!(ts.last().unwrap(), &Tile { row0: 4, col0: 6, rows: 1, cols: 1 });
        let area: usize = ts.iter().map(|t| t.rows * t.cols).sum();
        assert_eq!(area, 35);
    }

    #[test]
    fn combine_k1_copies_expert_row() {
        let tile = TokenMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut o = TokenMatrix::zeros(4, 3);
        let routes = [Some(Route { token: 2, weight: 1.0 }), None];
        assert_eq!(combine_tile((&tile).into(), &routes, 0, &mut o).unwrap(), 1);
        assert_eq!(o.row(2), &[1.0, 2.0, 3.0]);
        assert!(o.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_convex_pair_reconstructs_row() {
        let v = TokenMatrix::from_vec(1, 2, vec![0.75, -2.0]).unwrap();
        let mut o = TokenMatrix::zeros(1, 4);
        let half = [Some(Route { token: 0, weight: 0.5 })];
        combine_tile((&v).into(), &half, 2, &mut o).unwrap();
        combine_tile((&v).into(), &half, 2, &mut o).unwrap();
        assert_eq!(o.row(0), &[0.0, 0.0, 0.75, -2.0]);
    }

    #[test]
    fn combine_weight_length_checked() {
        let v = TokenMatrix::zeros(2, 2);
        let mut o = TokenMatrix::zeros(2, 2);
        assert!(combine_tile((&v).into(), &[None], 0, &mut o).is_err());
    }
}

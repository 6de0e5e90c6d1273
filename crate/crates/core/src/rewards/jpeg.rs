//! Differentiable JPEG round trip: YCbCr, 8x8 block DCT, quantization and
//! the inverse path. Entropy coding is omitted since it does not change the
//! decoded pixels.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

const LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., //
    18., 21., 26., 66., 99., 99., 99., 99., //
    24., 26., 56., 99., 99., 99., 99., 99., //
    47., 66., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99., //
    99., 99., 99., 99., 99., 99., 99., 99.,
];

const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

/// How the quantizer's rounding is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Rounding {
    /// True derivative of rounding: zero almost everywhere, so the
    /// reconstruction is locally constant in the input.
    #[default]
    Exact,
    /// Identity backward. Every stage of the round trip is then linear
    /// with identity composite Jacobian, so the reconstruction error has
    /// zero gradient.
    StraightThrough,
}

/// IJG quality scaling of a base table.
pub fn scaled_table(base: &[f64; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Orthonormal 8-point DCT-II matrix, `d[u][x]`.
pub fn dct8() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
        }
    }
    d
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Codec for `[3, h, w]` images in `[0, 1]` with `h`, `w` multiples of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct JpegCodec {
    pub quality: u32,
    pub rounding: Rounding,
    luma: [f64; 64],
    chroma: [f64; 64],
}

impl JpegCodec {
    pub fn new(quality: u32) -> Result<Self> {
        if !(10..=95).contains(&quality) {
            return Err(Error::invalid(format!("JPEG quality {quality} outside 10..=95")));
        }
        Ok(JpegCodec {
            quality,
            rounding: Rounding::Exact,
            luma: scaled_table(&LUMA, quality),
            chroma: scaled_table(&CHROMA, quality),
        })
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    fn dims<R: Real>(g: &Graph<'_, R>, x: Var) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape {
                op: "jpeg",
                detail: format!("expected [3, h, w], got {s:?}"),
            });
        }
        if s[1] % 8 != 0 || s[2] % 8 != 0 {
            return Err(Error::Shape {
                op: "jpeg",
                detail: format!("image {}x{} is not a multiple of 8", s[1], s[2]),
            });
        }
        Ok((s[1], s[2]))
    }

    /// `kron(I_{n/8}, D8)`, `[n, n]`.
    fn block_dct<R: Real>(n: usize, transpose: bool) -> Tensor<R> {
        let d = dct8();
        let mut m = vec![R::zero(); n * n];
        for b in 0..n / 8 {
            for u in 0..8 {
                for x in 0..8 {
                    let (r, c) = if transpose { (b * 8 + x, b * 8 + u) } else { (b * 8 + u, b * 8 + x) };
                    m[r * n + c] = R::lit(d[u][x]);
                }
            }
        }
        Tensor::from_vec(vec![n, n], m).expect("dct shape")
    }

    fn quant_tile<R: Real>(&self, h: usize, w: usize) -> Tensor<R> {
        let mut q = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let table = if c == 0 { &self.luma } else { &self.chroma };
            for y in 0..h {
                for x in 0..w {
                    q.push(R::lit(table[(y % 8) * 8 + x % 8]));
                }
            }
        }
        Tensor::from_vec(vec![3 * h, w], q).expect("tile shape")
    }

    fn quantize<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Var {
        match self.rounding {
            Rounding::Exact => g.round(x),
            Rounding::StraightThrough => {
                let r = g.round(x);
                let d = g.sub(r, x);
                let d = g.stop_grad(d);
                g.add(x, d)
            }
        }
    }

    /// Decoded image `d(c(x))` after clamping `x` to `[0, 1]`. Also returns
    /// the clamped input.
    pub fn round_trip<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<(Var, Var)> {
        let (h, w) = Self::dims(g, x)?;
        let r = |v: f64| R::lit(v);
        let xc = g.clamp(x, R::zero(), R::one());
        let p = g.scale(xc, r(255.0));
        let p = g.reshape(p, &[3, h * w]);

        let fwd: Vec<f64> = RGB_TO_YCC.iter().flatten().copied().collect();
        let inv: Vec<f64> = invert3(&RGB_TO_YCC).iter().flatten().copied().collect();
        let m = g.constant(Tensor::from_f64(&[3, 3], &fwd)?);
        let minv = g.constant(Tensor::from_f64(&[3, 3], &inv)?);
        let shift = g.constant(Tensor::from_f64(&[3], &[-128.0, 0.0, 0.0])?);
        let unshift = g.constant(Tensor::from_f64(&[3], &[128.0, 0.0, 0.0])?);

        let ycc = g.matmul(m, p);
        let ycc = g.add_channel(ycc, shift);
        let z = g.reshape(ycc, &[3 * h, w]);

        let l = g.constant(Self::block_dct(3 * h, false));
        let lt = g.constant(Self::block_dct(3 * h, true));
        let rr = g.constant(Self::block_dct(w, false));
        let rt = g.constant(Self::block_dct(w, true));
        let coef = g.matmul(l, z);
        let coef = g.matmul(coef, rt);

        let qt = g.constant(self.quant_tile(h, w));
        let q = g.div(coef, qt);
        let q = self.quantize(g, q);
        let deq = g.mul(q, qt);

        let zr = g.matmul(lt, deq);
        let zr = g.matmul(zr, rr);
        let ycc_r = g.reshape(zr, &[3, h * w]);
        let ycc_r = g.add_channel(ycc_r, unshift);
        let rgb = g.matmul(minv, ycc_r);
        let rgb = g.scale(rgb, r(1.0 / 255.0));
        Ok((g.reshape(rgb, &[3, h, w]), xc))
    }

    /// `-||x - d(c(x))||^2` summed over all pixels and channels.
    pub fn reward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let (recon, xc) = self.round_trip(g, x)?;
        let d = g.sub(xc, recon);
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        Ok(g.neg(s))
    }

    /// Forward-only decoded image.
    pub fn decode_value<R: Real>(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (recon, _) = self.round_trip(&mut g, xv)?;
        Ok(g.value(recon).clone())
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

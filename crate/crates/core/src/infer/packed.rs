//! Word-parallel ternary GEMM and convolution.

use super::bitplane::{dot_words, tail_mask, words_for, BitplaneTensor, WORD_BITS};
use super::fuse::TernaryKernel;
use crate::autograd::{im2col, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major matrix of ternary rows, each packed into `words_per_row`
/// mask and sign words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    mask: Vec<u64>,
    sign: Vec<u64>,
}

impl PackedMatrix {
    /// Pack a row-major `rows × cols` matrix of trits.
    pub fn pack(rows: usize, cols: usize, trits: &[i8]) -> Result<Self> {
        if trits.len() != rows * cols {
            return Err(Error::shape(
                "packed_matrix",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, trits.len()),
            ));
        }
        let wpr = words_for(cols);
        let mut mask = vec![0u64; rows * wpr];
        let mut sign = vec![0u64; rows * wpr];
        for r in 0..rows {
            let (m, s) = (&mut mask[r * wpr..][..wpr], &mut sign[r * wpr..][..wpr]);
            pack_row(&trits[r * cols..][..cols], r * cols, m, s)?;
        }
        Ok(PackedMatrix {
            rows,
            cols,
            words_per_row: wpr,
            mask,
            sign,
        })
    }

    /// Rebuild from stored planes, checking the padding and sign invariants.
    pub fn from_words(rows: usize, cols: usize, mask: Vec<u64>, sign: Vec<u64>) -> Result<Self> {
        let wpr = words_for(cols);
        if mask.len() != rows * wpr || sign.len() != rows * wpr {
            return Err(Error::invalid(
                "packed_matrix",
                format!("{rows} rows of {cols} need {} words per plane", rows * wpr),
            ));
        }
        let tail = tail_mask(cols);
        for r in 0..rows {
            for w in 0..wpr {
                let (m, s) = (mask[r * wpr + w], sign[r * wpr + w]);
                if s & !m != 0 {
                    return Err(Error::invalid(
                        "packed_matrix",
                        format!("row {r} word {w}: sign bit set where mask is 0"),
                    ));
                }
                if w + 1 == wpr && m & !tail != 0 {
                    return Err(Error::invalid("packed_matrix", format!("row {r}: nonzero padding bits")));
                }
            }
        }
        Ok(PackedMatrix {
            rows,
            cols,
            words_per_row: wpr,
            mask,
            sign,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn mask(&self) -> &[u64] {
        &self.mask
    }

    pub fn sign(&self) -> &[u64] {
        &self.sign
    }

    #[inline]
    fn row_words(&self, r: usize) -> (&[u64], &[u64]) {
        let w = self.words_per_row;
        (&self.mask[r * w..][..w], &self.sign[r * w..][..w])
    }

    pub fn row(&self, r: usize) -> BitplaneTensor {
        let (m, s) = self.row_words(r);
        BitplaneTensor::from_words(self.cols, m.to_vec(), s.to_vec()).expect("valid row")
    }

    pub fn decode(&self) -> Vec<i8> {
        (0..self.rows).flat_map(|r| self.row(r).decode()).collect()
    }

    pub fn nonzeros(&self) -> usize {
        self.mask.iter().map(|w| w.count_ones() as usize).sum()
    }
}

fn pack_row(trits: &[i8], offset: usize, mask: &mut [u64], sign: &mut [u64]) -> Result<()> {
    for (i, &v) in trits.iter().enumerate() {
        let bit = 1u64 << (i % WORD_BITS);
        match v {
            0 => {}
            1 => {
                mask[i / WORD_BITS] |= bit;
                sign[i / WORD_BITS] |= bit;
            }
            -1 => mask[i / WORD_BITS] |= bit,
            _ => {
                return Err(Error::NotTernary {
                    index: offset + i,
                    value: v as i64,
                })
            }
        }
    }
    Ok(())
}

/// `a · bᵀ` for packed `a: m×k` and `b: n×k`; returns the `m×n` integer
/// products.
pub fn packed_gemm(a: &PackedMatrix, b: &PackedMatrix) -> Result<Vec<i32>> {
    if a.cols != b.cols {
        return Err(Error::shape("packed_gemm", format!("inner sizes {} and {}", a.cols, b.cols)));
    }
    let mut out = vec![0i32; a.rows * b.rows];
    for i in 0..a.rows {
        let (ma, sa) = a.row_words(i);
        let dst = &mut out[i * b.rows..][..b.rows];
        for (j, d) in dst.iter_mut().enumerate() {
            let (mb, sb) = b.row_words(j);
            *d = dot_words(ma, sa, mb, sb);
        }
    }
    Ok(out)
}

/// Packed ternary kernel with its geometry and scale. Row `o` holds output
/// channel `o` flattened channel-major as `(c, ky, kx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedKernel {
    pub shape: [usize; 4],
    pub scale: f32,
    pub rows: PackedMatrix,
}

impl PackedKernel {
    pub fn new(kernel: &TernaryKernel<f32>) -> Result<Self> {
        let &[o, c, kh, kw] = kernel.shape.as_slice() else {
            return Err(Error::shape("packed_kernel", format!("expected 4-d kernel, got {:?}", kernel.shape)));
        };
        Ok(PackedKernel {
            shape: [o, c, kh, kw],
            scale: kernel.scale,
            rows: PackedMatrix::pack(o, c * kh * kw, &kernel.t)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn to_ternary(&self) -> TernaryKernel<f32> {
        TernaryKernel {
            t: self.rows.decode(),
            shape: self.shape.to_vec(),
            scale: self.scale,
        }
    }

    fn geometry(&self, input: [usize; 3], stride: usize, pad: usize) -> Result<ConvGeometry> {
        let [c, h, w] = input;
        ConvGeometry::new([1, c, h, w], self.shape, stride, pad)
    }
}

/// Packed patch matrix of one ternary `[C, H, W]` image: row `p` is the
/// receptive field of output position `p` in `(c, ky, kx)` order, padding
/// as zeros.
pub fn pack_patches(input: &[i8], geo: &ConvGeometry) -> Result<PackedMatrix> {
    let k = geo.patch_len();
    let wpr = words_for(k);
    let positions = geo.positions();
    let mut mask = vec![0u64; positions * wpr];
    let mut sign = vec![0u64; positions * wpr];
    let plane = geo.height * geo.width;
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let p = oy * geo.out_w + ox;
            let (m, s) = (&mut mask[p * wpr..][..wpr], &mut sign[p * wpr..][..wpr]);
            let mut j = 0;
            for c in 0..geo.in_channels {
                for ky in 0..geo.kernel_h {
                    for kx in 0..geo.kernel_w {
                        if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                            let v = input[c * plane + y * geo.width + x];
                            let bit = 1u64 << (j % WORD_BITS);
                            match v {
                                0 => {}
                                1 => {
                                    m[j / WORD_BITS] |= bit;
                                    s[j / WORD_BITS] |= bit;
                                }
                                -1 => m[j / WORD_BITS] |= bit,
                                _ => {
                                    return Err(Error::NotTernary {
                                        index: c * plane + y * geo.width + x,
                                        value: v as i64,
                                    })
                                }
                            }
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(PackedMatrix {
        rows: positions,
        cols: k,
        words_per_row: wpr,
        mask,
        sign,
    })
}

/// Integer output of a packed ternary convolution on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAccumulator {
    /// `[out_channels, out_h, out_w]`.
    pub shape: [usize; 3],
    pub acc: Vec<i32>,
}

impl ConvAccumulator {
    /// `scale * acc` as a float map.
    pub fn scaled(&self, scale: f32) -> Tensor<f32> {
        let data = self.acc.iter().map(|&a| scale * a as f32).collect();
        Tensor::new(self.shape.to_vec(), data).expect("accumulator shape")
    }
}

/// Integer accumulators of a ternary `[C, H, W]` image convolved with a
/// packed kernel.
pub fn ternary_conv2d_acc(
    input: &BitplaneTensor,
    input_shape: [usize; 3],
    kernel: &PackedKernel,
    stride: usize,
    pad: usize,
) -> Result<ConvAccumulator> {
    let [c, h, w] = input_shape;
    if input.len() != c * h * w {
        return Err(Error::shape(
            "ternary_conv2d",
            format!("{} packed values for shape {input_shape:?}", input.len()),
        ));
    }
    ternary_conv2d_trits(&input.decode(), input_shape, kernel, stride, pad)
}

/// As [`ternary_conv2d_acc`], from unpacked trits.
pub fn ternary_conv2d_trits(
    input: &[i8],
    input_shape: [usize; 3],
    kernel: &PackedKernel,
    stride: usize,
    pad: usize,
) -> Result<ConvAccumulator> {
    let geo = kernel.geometry(input_shape, stride, pad)?;
    if input.len() != input_shape.iter().product::<usize>() {
        return Err(Error::shape("ternary_conv2d", "input length does not match its shape"));
    }
    let patches = pack_patches(input, &geo)?;
    let acc = packed_gemm(&kernel.rows, &patches)?;
    Ok(ConvAccumulator {
        shape: [geo.out_channels, geo.out_h, geo.out_w],
        acc,
    })
}

/// `scale * (T ⊛ X)` for a ternary image.
pub fn ternary_conv2d(
    input: &BitplaneTensor,
    input_shape: [usize; 3],
    kernel: &PackedKernel,
    stride: usize,
    pad: usize,
) -> Result<Tensor<f32>> {
    Ok(ternary_conv2d_acc(input, input_shape, kernel, stride, pad)?.scaled(kernel.scale))
}

/// Ternary kernel on a full-precision `[C, H, W]` image: each output is a
/// signed sum of inputs, scaled once.
pub fn ternary_weight_conv2d(
    input: &[f32],
    input_shape: [usize; 3],
    kernel: &PackedKernel,
    stride: usize,
    pad: usize,
) -> Result<Tensor<f32>> {
    let geo = kernel.geometry(input_shape, stride, pad)?;
    if input.len() != input_shape.iter().product::<usize>() {
        return Err(Error::shape("ternary_weight_conv2d", "input length does not match its shape"));
    }
    let cols = im2col(input, &geo);
    let p = geo.positions();
    let k = geo.patch_len();
    let t = kernel.rows.decode();
    let mut out = vec![0f32; geo.out_channels * p];
    for o in 0..geo.out_channels {
        let acc = &mut out[o * p..][..p];
        for (j, &tv) in t[o * k..][..k].iter().enumerate() {
            let row = &cols[j * p..][..p];
            match tv {
                1 => acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x),
                -1 => acc.iter_mut().zip(row).for_each(|(a, &x)| *a -= x),
                _ => {}
            }
        }
        acc.iter_mut().for_each(|a| *a *= kernel.scale);
    }
    Tensor::new(vec![geo.out_channels, geo.out_h, geo.out_w], out)
}

//! A small convolutional latent decoder, run serially or split into row
//! bands across simulated devices.
//!
//! Layers are `conv_in`, then per stage a ×2 nearest upsample followed by a
//! conv, then `conv_out` to three channels. Every conv is zero-padded "same"
//! and evaluated through an unfolded patch matrix, so the temporary buffer
//! grows with the number of output rows processed at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::rng::SeededRng;
use crate::simnet::{ElapsedReport, SimNet, Topology};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub latent_channels: usize,
    /// Width after `conv_in`, then after each upsampling stage.
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_kernel() -> usize {
    3
}

pub const IMAGE_CHANNELS: usize = 3;

impl VaeSpec {
    /// Two upsampling stages, at most 16 channels.
    pub fn desk(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            channels: vec![16, 16, 8],
            kernel_size: 3,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels != 4 && self.latent_channels != 16 {
            return Err(Error::InvalidSpec(format!(
                "decoder input must have 4 or 16 channels, got {}",
                self.latent_channels
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidSpec("decoder channel widths must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidSpec(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn halo_width(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let f = 1 << self.stages();
        (IMAGE_CHANNELS, h * f, w * f)
    }

    /// `(in, out)` channels of every conv, in execution order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(self.latent_channels, self.channels[0])];
        v.extend(self.channels.windows(2).map(|p| (p[0], p[1])));
        v.push((*self.channels.last().expect("validated"), IMAGE_CHANNELS));
        v
    }

    fn layers(&self) -> Vec<Layer> {
        let convs = self.conv_shapes().len();
        let mut v = vec![Layer::Conv(0)];
        for s in 1..=self.stages() {
            v.push(Layer::Upsample);
            v.push(Layer::Conv(s));
        }
        v.push(Layer::Conv(convs - 1));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv(usize),
    Upsample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// `[out, in, k, k]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeWeights {
    pub convs: Vec<ConvWeights>,
}

impl VaeWeights {
    pub fn init(spec: &VaeSpec, rng: &mut SeededRng) -> Self {
        let k = spec.kernel_size;
        let convs = spec
            .conv_shapes()
            .into_iter()
            .map(|(ci, co)| {
                let scale = 1.0 / ((ci * k * k) as f64).sqrt();
                ConvWeights {
                    kernel: rng.normal_tensor(&[co, ci, k, k]).scale(scale),
                    bias: rng.normal_tensor(&[co]).scale(0.1),
                }
            })
            .collect();
        Self { convs }
    }

    pub fn check(&self, spec: &VaeSpec) -> Result<()> {
        let k = spec.kernel_size;
        let shapes = spec.conv_shapes();
        if shapes.len() != self.convs.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} convs, weights have {}",
                shapes.len(),
                self.convs.len()
            )));
        }
        for (i, ((ci, co), c)) in shapes.into_iter().zip(&self.convs).enumerate() {
            if c.kernel.shape() != [co, ci, k, k] || c.bias.shape() != [co] {
                return Err(Error::InvalidSpec(format!("conv {i} has shape {:?}", c.kernel.shape())));
            }
        }
        Ok(())
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::InvalidSpec(format!("expected a [c, h, w] tensor, got {s:?}"))),
    }
}

/// Rows `range` of a `[c, h, w]` tensor.
fn band_rows(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let (c, h, w) = dims3(t).expect("3-d tensor");
    let mut out = Vec::with_capacity(c * range.len() * w);
    for ch in 0..c {
        out.extend_from_slice(&t.data()[(ch * h + range.start) * w..(ch * h + range.end) * w]);
    }
    Tensor::new(vec![c, range.len(), w], out).expect("consistent shape")
}

/// Stacks `[c, h_i, w]` tensors along rows.
fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let (c, _, w) = dims3(parts[0])?;
    let mut h = 0;
    for p in parts {
        let (pc, ph, pw) = dims3(p)?;
        if pc != c || pw != w {
            return Err(Error::InvalidSpec(format!("cannot stack {:?} onto [{c}, _, {w}]", p.shape())));
        }
        h += ph;
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in parts {
            let ph = p.shape()[1];
            out.extend_from_slice(&p.data()[ch * ph * w..(ch + 1) * ph * w]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

fn upsample2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + x] = t.data()[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor::new(vec![c, 2 * h, 2 * w], out)?)
}

fn bias_act(t: &Tensor, bias: &Tensor, act: Option<Activation>) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    let mut data = t.data().to_vec();
    for ch in 0..c {
        let b = bias.data()[ch];
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v += b;
            if act == Some(Activation::Silu) {
                *v /= 1.0 + (-*v).exp();
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], data)?)
}

/// Output of a chunked convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedConv {
    pub output: Tensor,
    /// Largest unfolded patch matrix held at once, in elements.
    pub temp_elements: usize,
}

/// Output rows `out_rows` of the zero-padded convolution of a band whose
/// first row is global row `row0`, `chunk_rows` output rows at a time.
fn conv_band(
    x: &Tensor,
    row0: isize,
    global_h: usize,
    kernel: &Tensor,
    out_rows: std::ops::Range<usize>,
    chunk_rows: usize,
) -> Result<ChunkedConv> {
    let (ci, xh, w) = dims3(x)?;
    let (co, k) = match kernel.shape() {
        [co, kci, kh, kw] if *kci == ci && kh == kw && kh % 2 == 1 => (*co, *kh),
        s => return Err(Error::InvalidSpec(format!("kernel {s:?} does not fit input {:?}", x.shape()))),
    };
    if chunk_rows == 0 {
        return Err(Error::InvalidSpec("chunk_rows must be at least 1".into()));
    }
    let pad = (k / 2) as isize;
    let weights = kernel.clone().reshape(&[co, ci * k * k])?;
    let mut chunks = Vec::new();
    let mut temp = 0;
    let mut start = out_rows.start;
    while start < out_rows.end {
        let end = (start + chunk_rows).min(out_rows.end);
        let cols = (end - start) * w;
        let mut patches = vec![0.0; ci * k * k * cols];
        for c in 0..ci {
            for ky in 0..k {
                for (yy, y) in (start..end).enumerate() {
                    let gy = y as isize + ky as isize - pad;
                    if gy < 0 || gy as usize >= global_h {
                        continue;
                    }
                    let local = gy - row0;
                    if local < 0 || local as usize >= xh {
                        return Err(Error::InvalidSpec(format!("input row {gy} is not in the band")));
                    }
                    let src = &x.data()[(c * xh + local as usize) * w..(c * xh + local as usize + 1) * w];
                    for kx in 0..k {
                        let row = &mut patches[((c * k + ky) * k + kx) * cols + yy * w..][..w];
                        for (xx, dst) in row.iter_mut().enumerate() {
                            let gx = xx as isize + kx as isize - pad;
                            if gx >= 0 && (gx as usize) < w {
                                *dst = src[gx as usize];
                            }
                        }
                    }
                }
            }
        }
        temp = temp.max(patches.len());
        let unfolded = Tensor::new(vec![ci * k * k, cols], patches)?;
        chunks.push(matmul(&weights, &unfolded)?.reshape(&[co, end - start, w])?);
        start = end;
    }
    let refs: Vec<&Tensor> = chunks.iter().collect();
    let output = if refs.is_empty() {
        Tensor::zeros(&[co, 0, w])
    } else {
        stack_rows(&refs)?
    };
    Ok(ChunkedConv {
        output,
        temp_elements: temp,
    })
}

/// Zero-padded same-size convolution of `x: [c, h, w]` processed
/// `chunk_rows` output rows at a time. Matches `tensor::conv2d` bit for bit.
pub fn chunked_conv(x: &Tensor, kernel: &Tensor, chunk_rows: usize) -> Result<ChunkedConv> {
    let (_, h, _) = dims3(x)?;
    conv_band(x, 0, h, kernel, 0..h, chunk_rows)
}

/// Unfolded patch matrix size for one chunk, in elements.
pub fn chunk_temp_elements(in_channels: usize, kernel: usize, rows: usize, width: usize) -> usize {
    in_channels * kernel * kernel * rows * width
}

fn check_latent(spec: &VaeSpec, weights: &VaeWeights, latent: &Tensor) -> Result<(usize, usize)> {
    spec.validate()?;
    weights.check(spec)?;
    let (c, h, w) = dims3(latent)?;
    if c != spec.latent_channels {
        return Err(Error::InvalidSpec(format!(
            "latent has {c} channels, decoder expects {}",
            spec.latent_channels
        )));
    }
    Ok((h, w))
}

/// Decoded image plus the largest `input + output + temp` footprint of any layer.
pub fn serial_decode_instrumented(
    spec: &VaeSpec,
    weights: &VaeWeights,
    latent: &Tensor,
    element_size: usize,
) -> Result<(Tensor, u64)> {
    check_latent(spec, weights, latent)?;
    let layers = spec.layers();
    let mut x = latent.clone();
    let mut peak = 0usize;
    for (i, layer) in layers.iter().enumerate() {
        let y = match *layer {
            Layer::Upsample => {
                let y = upsample2(&x)?;
                peak = peak.max(x.len() + y.len());
                y
            }
            Layer::Conv(c) => {
                let h = x.shape()[1];
                let cw = &weights.convs[c];
                let r = conv_band(&x, 0, h, &cw.kernel, 0..h, h.max(1))?;
                peak = peak.max(x.len() + r.output.len() + r.temp_elements);
                let act = (i + 1 < layers.len()).then_some(spec.activation);
                bias_act(&r.output, &cw.bias, act)?
            }
        };
        x = y;
    }
    Ok((x, (peak * element_size) as u64))
}

/// Reference decode of `latent: [c, h, w]` to `[3, h·2^s, w·2^s]`.
pub fn serial_decode(spec: &VaeSpec, weights: &VaeWeights, latent: &Tensor) -> Result<Tensor> {
    Ok(serial_decode_instrumented(spec, weights, latent, 8)?.0)
}

/// Rows of a `[c, h, w]` image held by one device, starting at global row `row0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub row0: isize,
    pub data: Tensor,
}

impl Band {
    pub fn rows(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Extends every band by `width` rows on both sides. Interior rows come
/// from the neighbouring devices over point-to-point links; rows beyond the
/// image edge are zeros. Band `i` lives on device `i`.
pub fn halo_exchange(net: &mut SimNet, bands: &[Band], width: usize, tag: &str) -> Result<Vec<Band>> {
    if width == 0 {
        return Ok(bands.to_vec());
    }
    let n = bands.len();
    for (i, b) in bands.iter().enumerate() {
        if b.rows() < width {
            return Err(Error::Infeasible(format!(
                "band {i} has {} rows, thinner than halo width {width}",
                b.rows()
            )));
        }
    }
    for i in 0..n {
        let rows = bands[i].rows();
        if i > 0 {
            net.send(i, i - 1, &format!("{tag}/up"), band_rows(&bands[i].data, 0..width), true)?;
        }
        if i + 1 < n {
            net.send(i, i + 1, &format!("{tag}/down"), band_rows(&bands[i].data, rows - width..rows), true)?;
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (c, _, w) = dims3(&bands[i].data)?;
        let above = if i > 0 {
            net.recv(i, i - 1, &format!("{tag}/down"))?
        } else {
            Tensor::zeros(&[c, width, w])
        };
        let below = if i + 1 < n {
            net.recv(i, i + 1, &format!("{tag}/up"))?
        } else {
            Tensor::zeros(&[c, width, w])
        };
        out.push(Band {
            row0: bands[i].row0 - width as isize,
            data: stack_rows(&[&above, &bands[i].data, &below])?,
        });
    }
    Ok(out)
}

/// Near-even split of `h` rows into `n` bands.
pub fn band_ranges(h: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (h / n.max(1), h % n.max(1));
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Output rows per unfolded chunk; `None` processes the whole band at once.
    pub chunk_rows: Option<usize>,
    pub element_size: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            chunk_rows: None,
            element_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelDecode {
    pub image: Tensor,
    pub report: ElapsedReport,
    /// Largest `input + halo + output + temp` footprint per device, in bytes.
    pub peak_bytes: Vec<u64>,
}

/// Decodes `latent` with its rows split across `n` devices.
pub fn patch_parallel_decode(
    spec: &VaeSpec,
    weights: &VaeWeights,
    latent: &Tensor,
    n: usize,
    topology: &Topology,
    opts: &DecodeOptions,
) -> Result<ParallelDecode> {
    let (h, _) = check_latent(spec, weights, latent)?;
    if n == 0 || n > h {
        return Err(Error::Infeasible(format!("cannot split {h} latent rows into {n} bands")));
    }
    let mut net = SimNet::new(topology.clone(), n, opts.element_size)?;
    let halo = spec.halo_width();
    let k = spec.kernel_size;
    let layers = spec.layers();
    let mut bands: Vec<Band> = band_ranges(h, n)
        .into_iter()
        .map(|r| Band {
            row0: r.start as isize,
            data: band_rows(latent, r),
        })
        .collect();
    let mut global_h = h;
    let mut peak = vec![0usize; n];
    for (li, layer) in layers.iter().enumerate() {
        match *layer {
            Layer::Upsample => {
                for (d, b) in bands.iter_mut().enumerate() {
                    let up = upsample2(&b.data)?;
                    peak[d] = peak[d].max(b.data.len() + up.len());
                    *b = Band {
                        row0: 2 * b.row0,
                        data: up,
                    };
                }
                global_h *= 2;
            }
            Layer::Conv(c) => {
                let cw = &weights.convs[c];
                let ext = if n > 1 {
                    halo_exchange(&mut net, &bands, halo, &format!("halo/{li}"))?
                } else {
                    bands.clone()
                };
                let act = (li + 1 < layers.len()).then_some(spec.activation);
                for d in 0..n {
                    let start = bands[d].row0 as usize;
                    let rows = bands[d].rows();
                    let chunk = opts.chunk_rows.unwrap_or(rows).max(1);
                    let r = conv_band(&ext[d].data, ext[d].row0, global_h, &cw.kernel, start..start + rows, chunk)?;
                    let (ci, co) = (ext[d].data.shape()[0], r.output.shape()[0]);
                    net.compute(d, flops::conv(ci, co, k, rows, r.output.shape()[2]));
                    peak[d] = peak[d].max(ext[d].data.len() + r.output.len() + r.temp_elements);
                    bands[d].data = bias_act(&r.output, &cw.bias, act)?;
                }
            }
        }
    }
    let refs: Vec<&Tensor> = bands.iter().map(|b| &b.data).collect();
    Ok(ParallelDecode {
        image: stack_rows(&refs)?,
        report: net.elapsed_report(),
        peak_bytes: peak.into_iter().map(|p| (p * opts.element_size) as u64).collect(),
    })
}

/// Closed-form per-device activation footprint, in bytes, each term
/// maximised over layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    /// Input plus output band.
    pub band: u64,
    pub halo: u64,
    pub temp: u64,
    /// Largest per-layer sum of the three.
    pub total: u64,
}

pub fn peak_memory_estimate(
    spec: &VaeSpec,
    h: usize,
    w: usize,
    n: usize,
    chunk_rows: usize,
    element_size: usize,
) -> Result<MemoryEstimate> {
    spec.validate()?;
    if n == 0 || chunk_rows == 0 {
        return Err(Error::InvalidSpec("device count and chunk_rows must be positive".into()));
    }
    let shapes = spec.conv_shapes();
    let k = spec.kernel_size;
    let halo_rows = if n > 1 { 2 * spec.halo_width() } else { 0 };
    let (mut gh, mut gw) = (h, w);
    let mut channels = spec.latent_channels;
    let mut est = MemoryEstimate {
        band: 0,
        halo: 0,
        temp: 0,
        total: 0,
    };
    let e = element_size as u64;
    let mut note = |band: usize, halo: usize, temp: usize| {
        let (band, halo, temp) = (band as u64 * e, halo as u64 * e, temp as u64 * e);
        est.band = est.band.max(band);
        est.halo = est.halo.max(halo);
        est.temp = est.temp.max(temp);
        est.total = est.total.max(band + halo + temp);
    };
    for layer in spec.layers() {
        let rows = gh.div_ceil(n);
        match layer {
            Layer::Upsample => {
                note(channels * rows * gw + channels * 4 * rows * gw, 0, 0);
                gh *= 2;
                gw *= 2;
            }
            Layer::Conv(c) => {
                let (ci, co) = shapes[c];
                let temp = chunk_temp_elements(ci, k, chunk_rows.min(rows), gw);
                note(ci * rows * gw + co * rows * gw, ci * halo_rows * gw, temp);
                channels = co;
            }
        }
    }
    Ok(est)
}

/// How halo traffic is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaloAccounting {
    /// Boundary rows sent to each neighbour.
    PointToPoint,
    /// Every device all-gathers every band's boundary rows.
    AllGather,
}

/// Bytes sent by the busiest device over a whole decode.
pub fn halo_bytes(spec: &VaeSpec, w: usize, n: usize, element_size: usize, mode: HaloAccounting) -> Result<u64> {
    spec.validate()?;
    if n <= 1 {
        return Ok(0);
    }
    let width = spec.halo_width();
    let shapes = spec.conv_shapes();
    let mut gw = w;
    let mut total = 0;
    for layer in spec.layers() {
        match layer {
            Layer::Upsample => gw *= 2,
            Layer::Conv(c) => {
                let rows = shapes[c].0 * width * gw;
                total += match mode {
                    HaloAccounting::PointToPoint => (n - 1).min(2) * rows,
                    HaloAccounting::AllGather => (n - 1) * 2 * rows,
                };
            }
        }
    }
    Ok((total * element_size) as u64)
}

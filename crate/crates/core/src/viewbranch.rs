//! Multi-view modality.
//!
//! Views are rendered by orthographic depth splatting around the Z axis and
//! passed through a shared convolutional backbone. Feature maps are held
//! channel-last as `[M, H·W, C]`, with spatial location `l = row·W + col`;
//! external `M × C × H × W` files are transposed at ingestion.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numkit::{ParamStore, Tape, Tensor, Var};
use crate::pointbranch::PointCloud;

/// `M` single-channel images taken at uniformly spaced azimuths.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewStack {
    images: Tensor,
    azimuths: Vec<f64>,
}

impl ViewStack {
    /// `images` is `M × 1 × H × W`; azimuths default to `j · 360 / M` degrees.
    pub fn new(images: Tensor) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("view stack", s, &[0, 1, 0, 0]));
        }
        let m = s[0];
        let azimuths = (0..m).map(|j| j as f64 * 360.0 / m as f64).collect();
        Ok(ViewStack { images, azimuths })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.azimuths
    }

    pub fn num_views(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Pixels of view `j`, row-major.
    pub fn view(&self, j: usize) -> &[f64] {
        let (h, w) = self.resolution();
        &self.images.data()[j * h * w..(j + 1) * h * w]
    }

    /// The first `v` views in azimuth order.
    pub fn first_views(&self, v: usize) -> Result<ViewStack> {
        let m = self.num_views();
        if v == 0 || v > m {
            return Err(Error::contract(format!("cannot keep {v} of {m} views")));
        }
        let (h, w) = self.resolution();
        let data = self.images.data()[..v * h * w].to_vec();
        Ok(ViewStack {
            images: Tensor::from_raw(vec![v, 1, h, w], data),
            azimuths: self.azimuths[..v].to_vec(),
        })
    }
}

/// Renders `m` views at azimuths `0, 360/m, …` degrees.
///
/// The cloud is rotated about Z by the azimuth and projected orthographically
/// along +Y onto the X/Z plane, `[-1, 1]²` filling the image with +Z up. Each
/// point writes `1 − (y + 1)/2` into its pixel, keeping the per-pixel maximum;
/// the background is 0.
pub fn render_views(cloud: &PointCloud, m: usize, height: usize, width: usize) -> Result<ViewStack> {
    if cloud.is_empty() {
        return Err(Error::contract("cannot render an empty cloud"));
    }
    if m == 0 || 360 % m != 0 {
        return Err(Error::contract(format!("view count {m} must divide 360")));
    }
    if height == 0 || width == 0 {
        return Err(Error::contract("render resolution must be positive"));
    }
    let mut data = vec![0.0; m * height * width];
    for j in 0..m {
        let phi = (j as f64 * 360.0 / m as f64).to_radians();
        let (s, c) = phi.sin_cos();
        let img = &mut data[j * height * width..(j + 1) * height * width];
        for p in cloud.points() {
            let u = p[0] * c - p[1] * s;
            let depth = p[0] * s + p[1] * c;
            let v = p[2];
            if !(-1.0..=1.0).contains(&u) || !(-1.0..=1.0).contains(&v) {
                continue;
            }
            let col = (((u + 1.0) * 0.5 * width as f64) as usize).min(width - 1);
            let row = (((1.0 - v) * 0.5 * height as f64) as usize).min(height - 1);
            let shade = (1.0 - (depth + 1.0) * 0.5).clamp(0.0, 1.0);
            let px = &mut img[row * width + col];
            if shade > *px {
                *px = shade;
            }
        }
    }
    ViewStack::new(Tensor::from_raw(vec![m, 1, height, width], data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewCnnConfig {
    pub widths: Vec<usize>,
    pub input_size: usize,
}

impl Default for ViewCnnConfig {
    fn default() -> Self {
        ViewCnnConfig {
            widths: vec![16, 32, 64],
            input_size: 32,
        }
    }
}

impl ViewCnnConfig {
    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap_or(&1)
    }

    /// Spatial side of the output maps.
    pub fn output_size(&self) -> usize {
        self.input_size >> self.widths.len()
    }
}

/// Shared per-view backbone: blocks of 3×3 convolution (zero padding), relu,
/// and 2×2 stride-2 average pooling. Global pooling and the classifier are
/// left to the caller.
#[derive(Clone, Debug)]
pub struct ViewCnn {
    pub config: ViewCnnConfig,
    pub convs: Vec<Linear>,
}

impl ViewCnn {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ViewCnnConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(Error::config("view backbone needs at least one conv block"));
        }
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Linear::new(store, &format!("{prefix}.conv{i}"), 9 * c_in, w, 2f64.sqrt(), true, seed)?);
            c_in = w;
        }
        Ok(ViewCnn {
            config: config.clone(),
            convs,
        })
    }

    /// Per-view feature maps as `[M, H·W, C]`.
    pub fn forward(&self, tape: &mut Tape, views: &ViewStack) -> Result<Var> {
        let (h0, w0) = views.resolution();
        let m = views.num_views();
        let blocks = self.convs.len();
        if h0 % (1 << blocks) != 0 || w0 % (1 << blocks) != 0 {
            return Err(Error::shape("view backbone", views.images().shape(), &[m, 1, 1 << blocks, 1 << blocks]));
        }
        let input = views.images().clone().reshape(&[m * h0 * w0, 1])?;
        let mut x = tape.constant(input);
        let (mut h, mut w) = (h0, w0);
        for conv in &self.convs {
            let c_in = tape.shape(x)[1];
            let cols = tape.gather_rows(x, &im2col_index(m, h, w))?;
            let cols = tape.reshape(cols, &[m * h * w, 9 * c_in])?;
            let y = conv.forward(tape, cols)?;
            let y = tape.relu(y)?;
            let c_out = conv.out_dim;
            let pooled = tape.select_rows(y, &pool_index(m, h, w))?;
            let pooled = tape.reshape(pooled, &[m * (h / 2) * (w / 2), 4, c_out])?;
            x = tape.mean(pooled, 1)?;
            h /= 2;
            w /= 2;
        }
        let c = tape.shape(x)[1];
        tape.reshape(x, &[m, h * w, c])
    }
}

/// Rows feeding a 3×3 zero-padded convolution, offset-major per output pixel.
fn im2col_index(m: usize, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(m * h * w * 9);
    for v in 0..m {
        for r in 0..h {
            for c in 0..w {
                for dr in 0..3 {
                    for dc in 0..3 {
                        let (rr, cc) = (r as isize + dr - 1, c as isize + dc - 1);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            idx.push(None);
                        } else {
                            idx.push(Some((v * h + rr as usize) * w + cc as usize));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Rows of each 2×2 pooling window, window-major.
fn pool_index(m: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(m * ho * wo * 4);
    for v in 0..m {
        for r in 0..ho {
            for c in 0..wo {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    idx.push((v * h + 2 * r + dr) * w + 2 * c + dc);
                }
            }
        }
    }
    idx
}

/// Converts externally supplied `M × C × H × W` maps to `[M, H·W, C]`.
pub fn maps_from_external(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("view feature maps", s, &[0, 0, 0, 0]));
    }
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for v in 0..m {
        for ch in 0..c {
            for l in 0..h * w {
                out[(v * h * w + l) * c + ch] = x[(v * c + ch) * h * w + l];
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, h * w, c], out))
}

/// Average across views at every spatial location: `[M, HW, C] → [HW, C]`.
pub fn inter_view_pool(tape: &mut Tape, maps: Var) -> Result<Var> {
    let s = tape.shape(maps).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("inter_view_pool", &s, &[0, 0, 0]));
    }
    tape.mean(maps, 0)
}

/// Spatial average of each view's map: `[M, HW, C] → [M, C]`.
pub fn intra_view_pool(tape: &mut Tape, maps: Var) -> Result<Var> {
    let s = tape.shape(maps).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("intra_view_pool", &s, &[0, 0, 0]));
    }
    tape.mean(maps, 1)
}

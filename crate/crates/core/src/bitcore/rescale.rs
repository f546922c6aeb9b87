use crate::error::{Error, Result};

/// Learned rescaling applied to the integer output of a binary dot product.
///
/// For an output of `rows x channels`, `Rank1` views each row index `r` as a
/// (height, width) position: `h = (r / width.len()) % height.len()` and
/// `w = r % width.len()`. In an EdgeConv layer rows are (node, neighbour
/// slot) pairs, so height indexes points and width indexes neighbour slots.
#[derive(Clone, Debug, PartialEq)]
pub enum RescaleTensor {
    ChannelWise(Vec<f64>),
    Rank1 {
        channel: Vec<f64>,
        height: Vec<f64>,
        width: Vec<f64>,
    },
}

impl RescaleTensor {
    pub fn ones(channels: usize) -> Self {
        RescaleTensor::ChannelWise(vec![1.0; channels])
    }

    pub fn channels(&self) -> usize {
        match self {
            RescaleTensor::ChannelWise(a) => a.len(),
            RescaleTensor::Rank1 { channel, .. } => channel.len(),
        }
    }

    /// Factor for output element (`row`, `col`).
    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f64 {
        match self {
            RescaleTensor::ChannelWise(a) => a[col],
            RescaleTensor::Rank1 {
                channel,
                height,
                width,
            } => {
                let w = width.len();
                channel[col] * height[(row / w) % height.len()] * width[row % w]
            }
        }
    }

    /// Checks that the factors broadcast onto a `rows x cols` output.
    pub fn check_output(&self, rows: usize, cols: usize) -> Result<()> {
        if self.channels() != cols {
            return Err(Error::Shape(format!(
                "rescale has {} channels, output has {cols}",
                self.channels()
            )));
        }
        if let RescaleTensor::Rank1 { height, width, .. } = self {
            let block = height.len() * width.len();
            if block == 0 || rows % block != 0 {
                return Err(Error::Shape(format!(
                    "rank-1 rescale covers blocks of {} x {} rows, output has {rows} rows",
                    height.len(),
                    width.len()
                )));
            }
        }
        if self.factors().iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::Params("non-finite rescale factor".into()));
        }
        Ok(())
    }

    pub fn factors(&self) -> Vec<&[f64]> {
        match self {
            RescaleTensor::ChannelWise(a) => vec![a],
            RescaleTensor::Rank1 {
                channel,
                height,
                width,
            } => vec![channel, height, width],
        }
    }

    pub fn factors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            RescaleTensor::ChannelWise(a) => vec![a],
            RescaleTensor::Rank1 {
                channel,
                height,
                width,
            } => vec![channel, height, width],
        }
    }

    /// `out[r, c] *= value(r, c)`.
    pub fn apply(&self, out: &mut [f64], cols: usize) {
        match self {
            RescaleTensor::ChannelWise(a) => {
                for row in out.chunks_exact_mut(cols) {
                    for (v, g) in row.iter_mut().zip(a) {
                        *v *= g;
                    }
                }
            }
            RescaleTensor::Rank1 {
                channel,
                height,
                width,
            } => {
                let (hl, wl) = (height.len(), width.len());
                for (r, row) in out.chunks_exact_mut(cols).enumerate() {
                    let (h, w) = (height[(r / wl) % hl], width[r % wl]);
                    for (v, c) in row.iter_mut().zip(channel) {
                        *v *= c * h * w;
                    }
                }
            }
        }
    }

    /// Gradients of `sum(upstream * (pre ⊙ Γ))` with respect to each factor,
    /// in `factors()` order, plus the gradient with respect to `pre`.
    pub fn backward(&self, pre: &[f64], upstream: &[f64], cols: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut dpre = upstream.to_vec();
        self.apply(&mut dpre, cols);
        let grads = match self {
            RescaleTensor::ChannelWise(a) => {
                let mut da = vec![0.0; a.len()];
                for (p, g) in pre.chunks_exact(cols).zip(upstream.chunks_exact(cols)) {
                    for c in 0..cols {
                        da[c] += g[c] * p[c];
                    }
                }
                vec![da]
            }
            RescaleTensor::Rank1 {
                channel,
                height,
                width,
            } => {
                let (hl, wl) = (height.len(), width.len());
                let mut dc = vec![0.0; channel.len()];
                let mut dh = vec![0.0; hl];
                let mut dw = vec![0.0; wl];
                for (r, (p, g)) in pre.chunks_exact(cols).zip(upstream.chunks_exact(cols)).enumerate() {
                    let (h, w) = ((r / wl) % hl, r % wl);
                    let mut s_hw = 0.0;
                    for c in 0..cols {
                        let gp = g[c] * p[c];
                        dc[c] += gp * height[h] * width[w];
                        s_hw += gp * channel[c];
                    }
                    dh[h] += s_hw * width[w];
                    dw[w] += s_hw * height[h];
                }
                vec![dc, dh, dw]
            }
        };
        (grads, dpre)
    }
}

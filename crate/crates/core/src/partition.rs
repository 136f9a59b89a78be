//! Saliency-guided window partitioning.
//!
//! The feature map is split into four coarse quadrants, and each quadrant into
//! four fine sub-windows. Flattening follows one canonical slot layout: coarse
//! windows in row-major window order, each owning `T / 4` consecutive slots.
//! Inside a slot range the coarse flattening lists the quadrant row-major and
//! the fine flattening lists its four sub-windows (row-major) one after the
//! other. Because both flattenings keep every quadrant in the same slot range,
//! blending them slot by slot with the upsampled window mask is well-defined.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::spectral::Plane;
use crate::tensor::Tensor;
use crate::wkv::Segment;

/// Number of coarse windows.
pub const COARSE_WINDOWS: usize = 4;
/// Number of fine windows.
pub const FINE_WINDOWS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    /// Windows per side: 1 (whole map), 2 (coarse) or 4 (fine).
    pub grid: usize,
    pub height: usize,
    pub width: usize,
}

/// Number of sub-windows along one axis of a coarse window and their size.
fn split_axis(len: usize) -> Result<(usize, usize)> {
    match len {
        1 => Ok((1, 1)),
        n if n % 2 == 0 => Ok((2, n / 2)),
        n => Err(CoreError::shape(format!(
            "coarse window side {n} cannot be split into fine windows"
        ))),
    }
}

impl WindowLayout {
    pub fn new(grid: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::shape("empty feature map"));
        }
        match grid {
            1 => {}
            2 | 4 => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(CoreError::shape(format!(
                        "{height}x{width} feature cannot be tiled by coarse windows"
                    )));
                }
                if grid == 4 {
                    split_axis(height / 2)?;
                    split_axis(width / 2)?;
                }
            }
            g => return Err(CoreError::shape(format!("unsupported window grid {g}"))),
        }
        Ok(Self { grid, height, width })
    }

    pub fn coarse(height: usize, width: usize) -> Result<Self> {
        Self::new(2, height, width)
    }

    pub fn fine(height: usize, width: usize) -> Result<Self> {
        Self::new(4, height, width)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn window_count(&self) -> usize {
        self.grid * self.grid
    }

    pub fn tokens_per_window(&self) -> usize {
        self.tokens() / self.window_count()
    }
}

/// Spatial ids in canonical slot order for `layout`.
pub fn local_scan_order(layout: &WindowLayout) -> Vec<usize> {
    let (h, w) = (layout.height, layout.width);
    if layout.grid == 1 {
        return (0..h * w).collect();
    }
    let (ch, cw) = (h / 2, w / 2);
    let (ny, sh) = if layout.grid == 4 { split_axis(ch).expect("validated") } else { (1, ch) };
    let (nx, sw) = if layout.grid == 4 { split_axis(cw).expect("validated") } else { (1, cw) };
    let mut order = Vec::with_capacity(h * w);
    for wr in 0..2 {
        for wc in 0..2 {
            for sr in 0..ny {
                for sc in 0..nx {
                    for r in 0..sh {
                        for c in 0..sw {
                            let y = wr * ch + sr * sh + r;
                            let x = wc * cw + sc * sw + c;
                            order.push(y * w + x);
                        }
                    }
                }
            }
        }
    }
    order
}

pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        if p >= perm.len() || inv[p] != usize::MAX {
            return Err(CoreError::Domain(format!("corrupted provenance: entry {p} at slot {i}")));
        }
        inv[p] = i;
    }
    Ok(inv)
}

/// Per-coarse-window sums of a saliency map, windows in row-major order.
pub fn energy_map(saliency: &Plane, layout: &WindowLayout) -> Result<Vec<f64>> {
    let g = layout.grid;
    if saliency.height != layout.height || saliency.width != layout.width {
        return Err(CoreError::shape(format!(
            "saliency {}x{} vs layout {}x{}",
            saliency.height, saliency.width, layout.height, layout.width
        )));
    }
    if saliency.height % g != 0 || saliency.width % g != 0 {
        return Err(CoreError::shape(format!(
            "{}x{} map is not divisible by a {g}x{g} grid",
            saliency.height, saliency.width
        )));
    }
    let (wh, ww) = (saliency.height / g, saliency.width / g);
    let mut energies = vec![0.0; g * g];
    for y in 0..saliency.height {
        for x in 0..saliency.width {
            energies[(y / wh) * g + x / ww] += saliency.at(y, x);
        }
    }
    Ok(energies)
}

/// Block-average downsampling of a saliency map to `height x width`.
pub fn pool_to(plane: &Plane, height: usize, width: usize) -> Result<Plane> {
    if height == 0 || width == 0 || plane.height % height != 0 || plane.width % width != 0 {
        return Err(CoreError::shape(format!(
            "cannot pool {}x{} to {height}x{width}",
            plane.height, plane.width
        )));
    }
    let (fy, fx) = (plane.height / height, plane.width / width);
    let area = (fy * fx) as f64;
    Ok(Plane::from_fn(height, width, |y, x| {
        let mut s = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                s += plane.at(y * fy + dy, x * fx + dx);
            }
        }
        s / area
    }))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Indices of the `k` largest entries in descending order (ties: lowest index first).
pub fn topk_select(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(CoreError::Domain("top-k over an empty vector".into()));
    }
    if k == 0 || k > values.len() {
        return Err(CoreError::Domain(format!("k = {k} for {} values", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Domain("top-k over non-finite energies".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Standard Gumbel(0, 1) samples.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((s + noise) / tau)`.
pub fn gumbel_soft(scores: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(CoreError::Domain(format!("temperature must be positive, got {tau}")));
    }
    if scores.is_empty() || scores.len() != noise.len() {
        return Err(CoreError::shape(format!(
            "{} scores with {} noise values",
            scores.len(),
            noise.len()
        )));
    }
    let logits: Vec<f64> = scores.iter().zip(noise).map(|(s, g)| (s + g) / tau).collect();
    let mut out = vec![0.0; logits.len()];
    crate::autograd::softmax_into(&logits, &mut out);
    Ok(out)
}

/// Window-selection mask. With `hard`, the one-hot of the argmax.
pub fn gumbel_softmax(scores: &[f64], tau: f64, hard: bool, noise: &[f64]) -> Result<Vec<f64>> {
    let soft = gumbel_soft(scores, noise, tau)?;
    if !hard {
        return Ok(soft);
    }
    let k = argmax(&soft).expect("non-empty");
    Ok((0..soft.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
}

/// Broadcasts a per-window mask onto the `tokens` sequence slots.
pub fn upsample_mask(mask: &[f64], tokens: usize) -> Result<Vec<f64>> {
    if mask.is_empty() || tokens % mask.len() != 0 {
        return Err(CoreError::shape(format!(
            "cannot spread {} window values over {tokens} slots",
            mask.len()
        )));
    }
    let per = tokens / mask.len();
    Ok((0..tokens).map(|p| mask[p / per]).collect())
}

/// Where the tokens of a sequence came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    /// Slot `i` holds spatial token `ids[i]`.
    Permutation(Vec<usize>),
    /// Slot `i` holds `(1 - mask[i]) * coarse[i] + mask[i] * fine[i]`.
    Blend {
        coarse: Vec<usize>,
        fine: Vec<usize>,
        mask: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn ids(&self) -> Option<&[usize]> {
        match &self.provenance {
            Provenance::Permutation(ids) => Some(ids),
            Provenance::Blend { .. } => None,
        }
    }
}

/// Flattens a `[h * w, c]` feature into the canonical slot order of `layout`.
pub fn flatten_windows(feature: &Tensor, layout: &WindowLayout) -> Result<TokenSequence> {
    if feature.rows() != layout.tokens() {
        return Err(CoreError::shape(format!(
            "{} tokens for a {}x{} layout",
            feature.rows(),
            layout.height,
            layout.width
        )));
    }
    let order = local_scan_order(layout);
    let c = feature.cols();
    let mut data = Vec::with_capacity(feature.len());
    for &id in &order {
        data.extend_from_slice(feature.row(id));
    }
    Ok(TokenSequence {
        tokens: Tensor::matrix(order.len(), c, data)?,
        provenance: Provenance::Permutation(order),
    })
}

/// Slot-wise `(1 - M_L) ⊙ coarse + M_L ⊙ fine`.
pub fn compose_sequence(coarse: &TokenSequence, fine: &TokenSequence, token_mask: &[f64]) -> Result<TokenSequence> {
    let (Some(cids), Some(fids)) = (coarse.ids(), fine.ids()) else {
        return Err(CoreError::Domain("compose_sequence needs flattened (permutation) inputs".into()));
    };
    if coarse.tokens.shape() != fine.tokens.shape() || token_mask.len() != coarse.tokens.rows() {
        return Err(CoreError::shape(format!(
            "compose {:?} with {:?} under a {}-slot mask",
            coarse.tokens.shape(),
            fine.tokens.shape(),
            token_mask.len()
        )));
    }
    let c = coarse.tokens.cols();
    let mut data = Vec::with_capacity(coarse.tokens.len());
    for (p, &m) in token_mask.iter().enumerate() {
        for j in 0..c {
            data.push((1.0 - m) * coarse.tokens.at(p, j) + m * fine.tokens.at(p, j));
        }
    }
    let hard = token_mask.iter().all(|&m| m == 0.0 || m == 1.0);
    let provenance = if hard {
        Provenance::Permutation(
            token_mask
                .iter()
                .enumerate()
                .map(|(p, &m)| if m == 1.0 { fids[p] } else { cids[p] })
                .collect(),
        )
    } else {
        Provenance::Blend {
            coarse: cids.to_vec(),
            fine: fids.to_vec(),
            mask: token_mask.to_vec(),
        }
    };
    Ok(TokenSequence {
        tokens: Tensor::matrix(token_mask.len(), c, data)?,
        provenance,
    })
}

/// Returns sequence tokens to their spatial positions.
///
/// A blended sequence scatters each slot back through both flattenings,
/// weighted by the slot's mask value; for a hard mask this is the exact
/// inverse permutation.
pub fn inverse_window_transform(seq: &TokenSequence) -> Result<Tensor> {
    let (t, c) = (seq.tokens.rows(), seq.tokens.cols());
    let mut out = vec![0.0; t * c];
    match &seq.provenance {
        Provenance::Permutation(ids) => {
            if ids.len() != t {
                return Err(CoreError::Domain("provenance length differs from the sequence".into()));
            }
            let inv = invert_permutation(ids)?;
            for (id, &slot) in inv.iter().enumerate() {
                out[id * c..(id + 1) * c].copy_from_slice(seq.tokens.row(slot));
            }
        }
        Provenance::Blend { coarse, fine, mask } => {
            if coarse.len() != t || fine.len() != t || mask.len() != t {
                return Err(CoreError::Domain("slot metadata length differs from the sequence".into()));
            }
            invert_permutation(coarse)?;
            invert_permutation(fine)?;
            for p in 0..t {
                for j in 0..c {
                    let v = seq.tokens.at(p, j);
                    out[coarse[p] * c + j] += (1.0 - mask[p]) * v;
                    out[fine[p] * c + j] += mask[p] * v;
                }
            }
        }
    }
    Tensor::matrix(t, c, out)
}

/// Attention segments in canonical slot order: one per coarse window, or one
/// per fine sub-window for the `refined` coarse windows.
pub fn scan_segments(height: usize, width: usize, refined: &[usize]) -> Result<Vec<Segment>> {
    let coarse = WindowLayout::coarse(height, width)?;
    let (ny, sh) = split_axis(height / 2)?;
    let (nx, sw) = split_axis(width / 2)?;
    let per = coarse.tokens_per_window();
    let mut segments = Vec::new();
    for win in 0..COARSE_WINDOWS {
        let start = win * per;
        if refined.contains(&win) {
            for s in 0..ny * nx {
                segments.push(Segment::new(start + s * sh * sw, sh * sw));
            }
        } else {
            segments.push(Segment::new(start, per));
        }
    }
    Ok(segments)
}

/// Precomputed permutations for one feature resolution.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub height: usize,
    pub width: usize,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
    pub inv_coarse: Vec<usize>,
    pub inv_fine: Vec<usize>,
}

impl WindowPlan {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let coarse = local_scan_order(&WindowLayout::coarse(height, width)?);
        let fine = local_scan_order(&WindowLayout::fine(height, width)?);
        Ok(Self {
            height,
            width,
            inv_coarse: invert_permutation(&coarse)?,
            inv_fine: invert_permutation(&fine)?,
            coarse,
            fine,
        })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Snapshot of one block's window selection.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionState {
    pub energies: Vec<f64>,
    pub selected_index: usize,
    pub window_mask: Vec<f64>,
    pub token_mask: Vec<f64>,
    pub temperature: f64,
    pub hard: bool,
}

impl PartitionState {
    /// Deterministic (noise-free) selection from saliency energies.
    pub fn from_energies(energies: &[f64], tokens: usize, temperature: f64, hard: bool) -> Result<Self> {
        let selected = topk_select(energies, 1)?[0];
        let window_mask = gumbel_softmax(energies, temperature, hard, &vec![0.0; energies.len()])?;
        let token_mask = upsample_mask(&window_mask, tokens)?;
        Ok(Self {
            energies: energies.to_vec(),
            selected_index: selected,
            window_mask,
            token_mask,
            temperature,
            hard,
        })
    }
}

/// How a block orders and segments its tokens for attention.
#[derive(Clone, Debug)]
pub enum Routing<'p> {
    /// Row-major spatial order, one segment over the whole map.
    Sequential,
    /// Saliency-guided windows. `token_mask` is a `[T, 1]` graph node.
    Windowed {
        plan: &'p WindowPlan,
        token_mask: Var,
        segments: Vec<Segment>,
    },
}

impl<'p> Routing<'p> {
    /// Builds the differentiable selection mask from saliency energies.
    pub fn select(
        g: &mut Graph,
        plan: &'p WindowPlan,
        energies: &[f64],
        noise: &[f64],
        tau: f64,
        hard: bool,
        top_k: usize,
    ) -> Result<Self> {
        let s = g.constant(Tensor::matrix(energies.len(), 1, energies.to_vec())?);
        let mask = g.gumbel_softmax(s, noise, tau, hard, top_k)?;
        Self::from_window_mask(g, plan, mask)
    }

    /// Routing for a fixed [`PartitionState`].
    pub fn from_state(g: &mut Graph, plan: &'p WindowPlan, state: &PartitionState) -> Result<Self> {
        let m = &state.window_mask;
        let mask = g.constant(Tensor::matrix(m.len(), 1, m.clone())?);
        Self::from_window_mask(g, plan, mask)
    }

    /// `mask` is a `[windows, 1]` column.
    fn from_window_mask(g: &mut Graph, plan: &'p WindowPlan, mask: Var) -> Result<Self> {
        let m = g.value(mask).data().to_vec();
        let refined: Vec<usize> = if m.iter().all(|&v| v == 0.0 || v == 1.0) && m.iter().any(|&v| v == 1.0) {
            (0..m.len()).filter(|&i| m[i] == 1.0).collect()
        } else {
            vec![argmax(&m).ok_or_else(|| CoreError::shape("empty window mask"))?]
        };
        let t = plan.tokens();
        let per = t / m.len();
        let index: Vec<usize> = (0..t).map(|p| p / per).collect();
        let token_mask = g.gather_rows(mask, &index)?;
        Ok(Routing::Windowed {
            plan,
            token_mask,
            segments: scan_segments(plan.height, plan.width, &refined)?,
        })
    }
}

//! Orthonormal 2D Haar transform: single analysis/synthesis steps, the
//! multi-level cascade on the low-pass branch, and single-band
//! back-projection of directional subbands to input resolution.
//!
//! Subband naming follows row-index-is-vertical: for a 2x2 block
//! `[[a, b], [c, d]]`, `LH = (a + b - c - d) / 2` responds to horizontal edges,
//! `HL = (a - b + c - d) / 2` to vertical edges.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const MIN_LEVELS: usize = 1;
pub const MAX_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subband {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl Subband {
    pub const DIRECTIONS: [Subband; 3] = [Subband::Lh, Subband::Hl, Subband::Hh];

    pub fn name(self) -> &'static str {
        match self {
            Subband::Ll => "LL",
            Subband::Lh => "LH",
            Subband::Hl => "HL",
            Subband::Hh => "HH",
        }
    }
}

/// The four half-resolution outputs of one analysis step.
#[derive(Clone, Debug, PartialEq)]
pub struct Subbands {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

impl Subbands {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            ll: Array2::zeros((rows, cols)),
            lh: Array2::zeros((rows, cols)),
            hl: Array2::zeros((rows, cols)),
            hh: Array2::zeros((rows, cols)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.ll.dim()
    }

    pub fn band(&self, b: Subband) -> &Array2<f64> {
        match b {
            Subband::Ll => &self.ll,
            Subband::Lh => &self.lh,
            Subband::Hl => &self.hl,
            Subband::Hh => &self.hh,
        }
    }

    pub fn band_mut(&mut self, b: Subband) -> &mut Array2<f64> {
        match b {
            Subband::Ll => &mut self.ll,
            Subband::Lh => &mut self.lh,
            Subband::Hl => &mut self.hl,
            Subband::Hh => &mut self.hh,
        }
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// One orthonormal Haar analysis step with stride-2 downsampling.
pub fn dwt_level(input: ArrayView2<f64>) -> Result<Subbands> {
    let (h, w) = input.dim();
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "haar analysis needs positive even dimensions, got {h}x{w}"
        )));
    }
    let (hh_, hw) = (h / 2, w / 2);
    let mut out = Subbands::zeros(hh_, hw);
    for i in 0..hh_ {
        for j in 0..hw {
            let a = input[[2 * i, 2 * j]];
            let b = input[[2 * i, 2 * j + 1]];
            let c = input[[2 * i + 1, 2 * j]];
            let d = input[[2 * i + 1, 2 * j + 1]];
            out.ll[[i, j]] = (a + b + c + d) * 0.5;
            out.lh[[i, j]] = (a + b - c - d) * 0.5;
            out.hl[[i, j]] = (a - b + c - d) * 0.5;
            out.hh[[i, j]] = (a - b - c + d) * 0.5;
        }
    }
    Ok(out)
}

/// One synthesis step, the exact inverse of [`dwt_level`].
pub fn idwt_level(bands: &Subbands) -> Result<Array2<f64>> {
    let dim = bands.ll.dim();
    if bands.lh.dim() != dim || bands.hl.dim() != dim || bands.hh.dim() != dim {
        return Err(Error::dim("subbands of one level must share a shape"));
    }
    let (h, w) = dim;
    let mut out = Array2::zeros((2 * h, 2 * w));
    for i in 0..h {
        for j in 0..w {
            let ll = bands.ll[[i, j]];
            let lh = bands.lh[[i, j]];
            let hl = bands.hl[[i, j]];
            let hh = bands.hh[[i, j]];
            out[[2 * i, 2 * j]] = (ll + lh + hl + hh) * 0.5;
            out[[2 * i, 2 * j + 1]] = (ll + lh - hl - hh) * 0.5;
            out[[2 * i + 1, 2 * j]] = (ll - lh + hl - hh) * 0.5;
            out[[2 * i + 1, 2 * j + 1]] = (ll - lh - hl + hh) * 0.5;
        }
    }
    Ok(out)
}

pub fn check_levels(levels: usize) -> Result<()> {
    if !(MIN_LEVELS..=MAX_LEVELS).contains(&levels) {
        return Err(Error::Config(format!(
            "dwt level count must be in {MIN_LEVELS}..={MAX_LEVELS}, got {levels}"
        )));
    }
    Ok(())
}

/// Coefficients of an L-level cascade. `levels[0]` is level 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandPyramid {
    input_dim: (usize, usize),
    levels: Vec<Subbands>,
}

/// Runs `levels` analysis steps, each on the previous step's LL band.
pub fn dwt_cascade(input: ArrayView2<f64>, levels: usize) -> Result<SubbandPyramid> {
    check_levels(levels)?;
    let (h, w) = input.dim();
    let m = 1usize << levels;
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} input is not divisible by 2^{levels}; pad first"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = input.to_owned();
    for _ in 0..levels {
        let bands = dwt_level(current.view())?;
        current = bands.ll.clone();
        out.push(bands);
    }
    Ok(SubbandPyramid {
        input_dim: (h, w),
        levels: out,
    })
}

impl SubbandPyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn input_dim(&self) -> (usize, usize) {
        self.input_dim
    }

    /// Subbands at 1-based `level`.
    pub fn level(&self, level: usize) -> &Subbands {
        &self.levels[level - 1]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut Subbands {
        &mut self.levels[level - 1]
    }

    pub fn levels(&self) -> &[Subbands] {
        &self.levels
    }

    /// Full synthesis from the coarsest LL and every detail band.
    pub fn reconstruct(&self) -> Result<Array2<f64>> {
        let last = self.levels.last().expect("pyramid has at least one level");
        let mut current = last.ll.clone();
        for bands in self.levels.iter().rev() {
            let step = Subbands {
                ll: current,
                lh: bands.lh.clone(),
                hl: bands.hl.clone(),
                hh: bands.hh.clone(),
            };
            current = idwt_level(&step)?;
        }
        Ok(current)
    }

    /// Back-projected directional maps of `level` at input resolution.
    pub fn directional(&self, level: usize) -> Result<DirectionalMaps> {
        let b = self.level(level);
        idwt_directional(&b.lh, &b.hl, &b.hh, level, self.input_dim)
    }
}

/// Reconstructs `coeffs`, treated as the only nonzero band of `band` at
/// `level`, through `level` synthesis steps with every other band zeroed.
pub fn back_project(
    coeffs: &Array2<f64>,
    band: Subband,
    level: usize,
    target: (usize, usize),
) -> Result<Array2<f64>> {
    check_levels(level)?;
    let (h, w) = coeffs.dim();
    if h << level != target.0 || w << level != target.1 {
        return Err(Error::dim(format!(
            "level-{level} band of {h}x{w} does not belong to a {}x{} image",
            target.0, target.1
        )));
    }
    let mut bands = Subbands::zeros(h, w);
    *bands.band_mut(band) = coeffs.clone();
    let mut current = idwt_level(&bands)?;
    for _ in 1..level {
        let (ch, cw) = current.dim();
        let mut up = Subbands::zeros(ch, cw);
        up.ll = current;
        current = idwt_level(&up)?;
    }
    Ok(current)
}

/// Directional high-frequency maps of one level, all at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalMaps {
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

impl DirectionalMaps {
    pub fn dim(&self) -> (usize, usize) {
        self.lh.dim()
    }

    pub fn get(&self, b: Subband) -> &Array2<f64> {
        match b {
            Subband::Lh => &self.lh,
            Subband::Hl => &self.hl,
            Subband::Hh => &self.hh,
            Subband::Ll => panic!("LL is not a directional band"),
        }
    }

    /// `(LH, HL, HH)` stacked as channels.
    pub fn concat(&self) -> Array3<f64> {
        concat_directions(&self.lh, &self.hl, &self.hh).expect("maps share a shape")
    }

    fn crop(&self, h: usize, w: usize) -> Self {
        Self {
            lh: crop(&self.lh, h, w),
            hl: crop(&self.hl, h, w),
            hh: crop(&self.hh, h, w),
        }
    }
}

/// Back-projects each directional band of `level` independently to `target`.
pub fn idwt_directional(
    lh: &Array2<f64>,
    hl: &Array2<f64>,
    hh: &Array2<f64>,
    level: usize,
    target: (usize, usize),
) -> Result<DirectionalMaps> {
    if lh.dim() != hl.dim() || lh.dim() != hh.dim() {
        return Err(Error::dim("directional bands must share a shape"));
    }
    Ok(DirectionalMaps {
        lh: back_project(lh, Subband::Lh, level, target)?,
        hl: back_project(hl, Subband::Hl, level, target)?,
        hh: back_project(hh, Subband::Hh, level, target)?,
    })
}

/// Channel stack in fixed `(LH, HL, HH)` order: output shape `(3, H, W)`.
pub fn concat_directions(
    lh: &Array2<f64>,
    hl: &Array2<f64>,
    hh: &Array2<f64>,
) -> Result<Array3<f64>> {
    if lh.dim() != hl.dim() || lh.dim() != hh.dim() {
        return Err(Error::dim(format!(
            "cannot stack maps of shapes {:?}, {:?}, {:?}",
            lh.dim(),
            hl.dim(),
            hh.dim()
        )));
    }
    ndarray::stack(Axis(0), &[lh.view(), hl.view(), hh.view()])
        .map_err(|e| Error::dim(e.to_string()))
}

/// Half-sample symmetric index into `[0, n)`: `-1 -> 0`, `n -> n - 1`.
fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Symmetric padding on the bottom/right edges up to the next multiple.
pub fn pad_symmetric(input: ArrayView2<f64>, multiple: usize) -> Array2<f64> {
    let (h, w) = input.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return input.to_owned();
    }
    Array2::from_shape_fn((ph, pw), |(i, j)| {
        input[[
            symmetric_index(i as isize, h),
            symmetric_index(j as isize, w),
        ]]
    })
}

pub fn crop(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    if a.dim() == (h, w) {
        return a.clone();
    }
    a.slice(s![..h, ..w]).to_owned()
}

/// Everything the fusion front-end needs from one image: per-level
/// directional maps and the level-1 low-pass back-projection, all cropped to
/// the original size.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub pyramid: SubbandPyramid,
    pub directional: Vec<DirectionalMaps>,
    pub low_pass: Array2<f64>,
    pub input_dim: (usize, usize),
}

impl Decomposition {
    pub fn num_levels(&self) -> usize {
        self.directional.len()
    }
}

/// Pads (if needed), runs the cascade, back-projects every directional band and
/// the level-1 LL band to input resolution, and crops back.
pub fn decompose(image: ArrayView2<f64>, levels: usize) -> Result<Decomposition> {
    check_levels(levels)?;
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::dim("empty image"));
    }
    let padded = pad_symmetric(image, 1 << levels);
    let pyramid = dwt_cascade(padded.view(), levels)?;
    let pdim = pyramid.input_dim();
    let directional = (1..=levels)
        .map(|l| pyramid.directional(l).map(|d| d.crop(h, w)))
        .collect::<Result<Vec<_>>>()?;
    let low_pass = crop(&back_project(&pyramid.level(1).ll, Subband::Ll, 1, pdim)?, h, w);
    Ok(Decomposition {
        pyramid,
        directional,
        low_pass,
        input_dim: (h, w),
    })
}

/// Channelwise [`decompose`] for a `(C, H, W)` tensor.
pub fn decompose_channels(image: &Array3<f64>, levels: usize) -> Result<Vec<Decomposition>> {
    image
        .axis_iter(Axis(0))
        .map(|ch| decompose(ch, levels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn energy(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v * v).sum()
    }

    #[test]
    fn constant_image_has_no_detail() {
        let b = dwt_level(Array2::ones((4, 4)).view()).unwrap();
        assert!(b.ll.iter().all(|&v| (v - 2.0).abs() < 1e-15));
        for d in [&b.lh, &b.hl, &b.hh] {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_closed_form() {
        let (a, b, c, d) = (1.0, 2.0, 4.0, 8.0);
        let out = dwt_level(array![[a, b], [c, d]].view()).unwrap();
        assert_eq!(out.ll[[0, 0]], (a + b + c + d) / 2.0);
        assert_eq!(out.lh[[0, 0]], (a + b - c - d) / 2.0);
        assert_eq!(out.hl[[0, 0]], (a - b + c - d) / 2.0);
        assert_eq!(out.hh[[0, 0]], (a - b - c + d) / 2.0);
    }

    #[test]
    fn one_step_preserves_energy() {
        let x = random(8, 8, 7);
        let b = dwt_level(x.view()).unwrap();
        assert_abs_diff_eq!(b.energy(), energy(&x), epsilon = 1e-6);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            dwt_level(Array2::zeros((3, 4)).view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cascade_level_one_matches_single_step() {
        let x = random(8, 6, 3);
        let p = dwt_cascade(x.view(), 1).unwrap();
        assert_eq!(p.level(1), &dwt_level(x.view()).unwrap());
    }

    #[test]
    fn cascade_on_constant_scales_low_pass() {
        let p = dwt_cascade(Array2::ones((8, 8)).view(), 2).unwrap();
        assert!(p.level(2).ll.iter().all(|&v| (v - 4.0).abs() < 1e-12));
        for l in 1..=2 {
            let b = p.level(l);
            for d in [&b.lh, &b.hl, &b.hh] {
                assert!(d.iter().all(|&v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn cascade_round_trip() {
        let x = random(16, 16, 11);
        let p = dwt_cascade(x.view(), 3).unwrap();
        let back = p.reconstruct().unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn cascade_rejects_bad_level_counts() {
        let x = Array2::zeros((32, 32));
        assert!(matches!(dwt_cascade(x.view(), 0), Err(Error::Config(_))));
        assert!(matches!(dwt_cascade(x.view(), 5), Err(Error::Config(_))));
        assert!(matches!(
            dwt_cascade(Array2::zeros((12, 12)).view(), 3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_bands_reconstruct_to_zero() {
        let z = Array2::zeros((4, 4));
        let maps = idwt_directional(&z, &z, &z, 2, (16, 16)).unwrap();
        assert_eq!(maps.dim(), (16, 16));
        assert!(maps.lh.iter().chain(&maps.hl).chain(&maps.hh).all(|&v| v == 0.0));
    }

    #[test]
    fn single_band_reconstructions_sum_to_input() {
        let x = random(8, 8, 5);
        let p = dwt_cascade(x.view(), 1).unwrap();
        let maps = p.directional(1).unwrap();
        let ll = back_project(&p.level(1).ll, Subband::Ll, 1, (8, 8)).unwrap();
        let total = &ll + &maps.lh + &maps.hl + &maps.hh;
        for (a, b) in total.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn hh_impulse_gives_synthesis_atom() {
        let mut hh = Array2::zeros((2, 2));
        hh[[1, 0]] = 1.0;
        let z = Array2::zeros((2, 2));
        let maps = idwt_directional(&z, &z, &hh, 1, (4, 4)).unwrap();
        let mut expected = Array2::zeros((4, 4));
        expected
            .slice_mut(s![2..4, 0..2])
            .assign(&array![[0.5, -0.5], [-0.5, 0.5]]);
        assert_eq!(maps.hh, expected);
    }

    #[test]
    fn directional_rejects_inconsistent_target() {
        let z = Array2::zeros((4, 4));
        assert!(matches!(
            idwt_directional(&z, &z, &z, 1, (16, 16)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concat_keeps_order() {
        let maps: Vec<_> = (1..=3).map(|v| Array2::from_elem((3, 5), v as f64)).collect();
        let c = concat_directions(&maps[0], &maps[1], &maps[2]).unwrap();
        assert_eq!(c.dim(), (3, 3, 5));
        for ch in 0..3 {
            assert!(c.index_axis(Axis(0), ch).iter().all(|&v| v == (ch + 1) as f64));
        }
        let z = Array2::zeros((2, 2));
        assert!(concat_directions(&z, &z, &z).unwrap().iter().all(|&v| v == 0.0));
        assert!(concat_directions(&z, &z, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn concat_of_round_trip_maps_is_identity() {
        let x = random(16, 16, 9);
        let maps = dwt_cascade(x.view(), 2).unwrap().directional(2).unwrap();
        let c = concat_directions(&maps.lh, &maps.hl, &maps.hh).unwrap();
        assert_eq!(c.index_axis(Axis(0), 0), maps.lh);
        assert_eq!(c.index_axis(Axis(0), 1), maps.hl);
        assert_eq!(c.index_axis(Axis(0), 2), maps.hh);
    }

    #[test]
    fn symmetric_padding_mirrors_edges() {
        let x = array![[1.0, 2.0, 3.0]];
        let p = pad_symmetric(x.view(), 4);
        assert_eq!(p.dim(), (4, 4));
        assert_eq!(p.row(0).to_vec(), vec![1.0, 2.0, 3.0, 3.0]);
        assert_eq!(p.row(3).to_vec(), vec![1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn decompose_odd_sizes_keeps_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for levels in 1..=4 {
            let (h, w) = (rng.gen_range(5..40), rng.gen_range(5..40));
            let d = decompose(random(h, w, levels as u64).view(), levels).unwrap();
            assert_eq!(d.low_pass.dim(), (h, w));
            for m in &d.directional {
                assert_eq!(m.dim(), (h, w));
            }
        }
    }

    #[test]
    fn decompose_low_pass_plus_details_recovers_level_one() {
        let x = random(16, 16, 2);
        let d = decompose(x.view(), 1).unwrap();
        let m = &d.directional[0];
        let total = &d.low_pass + &m.lh + &m.hl + &m.hh;
        for (a, b) in total.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn linearity(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let x = random(8, 8, seed);
                let y = random(8, 8, seed + 1);
                let mix = &x * a + &y * b;
                let (bx, by, bm) = (
                    dwt_level(x.view()).unwrap(),
                    dwt_level(y.view()).unwrap(),
                    dwt_level(mix.view()).unwrap(),
                );
                for band in [Subband::Ll, Subband::Lh, Subband::Hl, Subband::Hh] {
                    let expect = bx.band(band) * a + by.band(band) * b;
                    for (u, v) in bm.band(band).iter().zip(expect.iter()) {
                        prop_assert!((u - v).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn perfect_reconstruction(seed in 0u64..1000, levels in 1usize..=4) {
                let n = 1 << (levels + 1);
                let x = random(n, 2 * n, seed);
                let back = dwt_cascade(x.view(), levels).unwrap().reconstruct().unwrap();
                for (u, v) in back.iter().zip(x.iter()) {
                    prop_assert!((u - v).abs() < 1e-6);
                }
            }
        }
    }
}

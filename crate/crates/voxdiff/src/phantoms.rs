//! Procedural brain-phantom generator.
//!
//! Each subject is a rotated ellipsoid "brain" with a cortical shell, a
//! central ventricle, a smooth intensity bias field, and a class-controlled
//! pathology attribute: hyperintense lesions with a banded total volume for
//! the lesion task, or ventricle enlargement plus cortical thinning for the
//! cognition task. Rendering is a pure function of
//! (geometry, class, lesion_seed), and two renders of the same subject under
//! different levels differ only inside the pathology region, bitwise.

use crate::conditioning::{build_prompt, Level, PromptClass, Task};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const VOLUME_EXTENT: usize = 32;
const CENTER: f64 = (VOLUME_EXTENT as f64 - 1.0) / 2.0;

/// Lesion volume as a fraction of the brain mask, per level. Desk-scale
/// analogue of clinical lesion-load bands; disjoint by construction.
pub const LESION_BANDS: [(f64, f64); 3] = [(0.000, 0.005), (0.005, 0.015), (0.015, 0.040)];

/// Ventricle scale multiplier per cognition level.
pub const VENTRICLE_SCALES: [f64; 3] = [1.0, 1.35, 1.8];

/// Cortical thickness multiplier per cognition level.
pub const CORTICAL_THINNING: [f64; 3] = [1.0, 0.92, 0.84];

const SHELL_THICKNESS: f64 = 0.15;
const VENTRICLE_INTENSITY: f64 = 0.05;
const LESION_CONTRAST: f64 = 0.35;

const STREAM_GEOMETRY: u64 = 0x47454F4D; // "GEOM"
const STREAM_TARGET: u64 = 0x54474554;
const STREAM_SPHERES: u64 = 0x53504852;
const STREAM_SUBJECTS: u64 = 0x53554244;
const STREAM_LESIONS: u64 = 0x4C45534E;
const STREAM_CLASSES: u64 = 0x434C5353;

/// Subject identity: everything about a phantom except its pathology level.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectGeometry {
    pub seed: u64,
    pub semi_axes: [f64; 3],
    pub angles: [f64; 3],
    pub ventricle_base: [f64; 3],
    pub cortical_intensity: f64,
    pub white_matter_intensity: f64,
    pub bias_coeffs: [f64; 6],
}

/// Pure function of the seed. Semi-axes are clamped so the brain fits the
/// grid with at least a 2-voxel margin under any rotation.
pub fn generate_subject(seed: u64) -> SubjectGeometry {
    let mut rng = CounterRng::new(seed).split(STREAM_GEOMETRY);
    let max_semi = CENTER - 2.0; // rotation-invariant bound
    let semi_axes = [
        (10.0 + 3.0 * rng.uniform()).min(max_semi),
        (10.0 + 3.0 * rng.uniform()).min(max_semi),
        (10.0 + 3.0 * rng.uniform()).min(max_semi),
    ];
    let angles = [
        rng.uniform_range(-0.3, 0.3),
        rng.uniform_range(-0.3, 0.3),
        rng.uniform_range(-0.3, 0.3),
    ];
    let ventricle_base = [
        2.2 + 0.6 * rng.uniform(),
        1.8 + 0.5 * rng.uniform(),
        1.8 + 0.5 * rng.uniform(),
    ];
    let cortical_intensity = 0.66 + 0.06 * rng.uniform();
    let white_matter_intensity = 0.48 + 0.04 * rng.uniform();
    let mut bias_coeffs = [0.0; 6];
    for c in &mut bias_coeffs {
        *c = rng.uniform_range(-0.015, 0.015);
    }
    SubjectGeometry {
        seed,
        semi_axes,
        angles,
        ventricle_base,
        cortical_intensity,
        white_matter_intensity,
        bias_coeffs,
    }
}

/// One rendered volume with its class label and provenance.
#[derive(Clone, Debug)]
pub struct PhantomExample {
    /// [1, 32, 32, 32] with intensities in [0, 1].
    pub volume: Tensor,
    pub class: PromptClass,
    pub subject_seed: u64,
    pub lesion_seed: u64,
    pub prompt: String,
}

/// Render output with the masks tests and calibration need.
#[derive(Clone, Debug)]
pub struct RenderedPhantom {
    pub example: PhantomExample,
    /// Voxels the class level is allowed to touch.
    pub pathology_mask: Vec<bool>,
    pub brain_mask: Vec<bool>,
    pub lesion_voxels: usize,
}

struct Frame {
    rot: [[f64; 3]; 3],
    geo: SubjectGeometry,
}

impl Frame {
    fn new(geo: &SubjectGeometry) -> Frame {
        let [a, b, g] = geo.angles;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        // R = Rz(g) * Ry(b) * Rx(a)
        let rot = [
            [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
            [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
            [-sb, cb * sa, cb * ca],
        ];
        Frame {
            rot,
            geo: geo.clone(),
        }
    }

    /// Normalized elliptical radius of a grid point (1.0 = brain surface)
    /// and the ventricle radius at the given scale.
    fn radii(&self, z: usize, y: usize, x: usize, vent_scale: f64) -> (f64, f64) {
        let p = [z as f64 - CENTER, y as f64 - CENTER, x as f64 - CENTER];
        let mut q = [0.0; 3];
        for i in 0..3 {
            q[i] = self.rot[i][0] * p[0] + self.rot[i][1] * p[1] + self.rot[i][2] * p[2];
        }
        let mut rho2 = 0.0;
        let mut vr2 = 0.0;
        for i in 0..3 {
            let br = q[i] / self.geo.semi_axes[i];
            rho2 += br * br;
            let vv = q[i] / (self.geo.ventricle_base[i] * vent_scale);
            vr2 += vv * vv;
        }
        (rho2.sqrt(), vr2.sqrt())
    }

    fn bias(&self, z: usize, y: usize, x: usize) -> f64 {
        let n = |v: usize| 2.0 * v as f64 / (VOLUME_EXTENT as f64 - 1.0) - 1.0;
        let (zz, yy, xx) = (n(z), n(y), n(x));
        let c = &self.geo.bias_coeffs;
        c[0] * xx + c[1] * yy + c[2] * zz + c[3] * xx * yy + c[4] * yy * zz + c[5] * xx * zz
    }
}

#[inline]
fn idx(z: usize, y: usize, x: usize) -> usize {
    (z * VOLUME_EXTENT + y) * VOLUME_EXTENT + x
}

fn level_params(class: PromptClass) -> (f64, f64, (f64, f64)) {
    match class.task {
        Task::LesionLoad => (1.0, 1.0, LESION_BANDS[class.level.index()]),
        Task::Cognition => (
            VENTRICLE_SCALES[class.level.index()],
            CORTICAL_THINNING[class.level.index()],
            (0.0, 0.0),
        ),
    }
}

/// Rasterize one phantom. Lesion placement draws spheres from the
/// lesion-seed stream until the banded voxel budget is met; the sequence is
/// shared across levels, so a lower level's lesion set is a prefix of a
/// higher level's for the same (geometry, lesion_seed).
pub fn render(
    geo: &SubjectGeometry,
    class: PromptClass,
    lesion_seed: u64,
) -> Result<RenderedPhantom> {
    let frame = Frame::new(geo);
    let n = VOLUME_EXTENT * VOLUME_EXTENT * VOLUME_EXTENT;
    let (vent_scale, thin, band) = level_params(class);
    let shell_inner = 1.0 - SHELL_THICKNESS * thin;
    let max_vent_scale = VENTRICLE_SCALES[2];

    let mut data = vec![0.0; n];
    let mut brain_mask = vec![false; n];
    let mut pathology_mask = vec![false; n];
    let mut brain_voxels = 0usize;

    for z in 0..VOLUME_EXTENT {
        for y in 0..VOLUME_EXTENT {
            for x in 0..VOLUME_EXTENT {
                let (rho, _) = frame.radii(z, y, x, 1.0);
                if rho >= 1.0 {
                    continue;
                }
                let i = idx(z, y, x);
                brain_mask[i] = true;
                brain_voxels += 1;
                let base = if rho >= shell_inner {
                    frame.geo.cortical_intensity
                } else {
                    frame.geo.white_matter_intensity
                };
                let (_, vr) = frame.radii(z, y, x, vent_scale);
                let v = if vr < 1.0 { VENTRICLE_INTENSITY } else { base };
                data[i] = (v + frame.bias(z, y, x)).clamp(0.0, 1.0);
                if class.task == Task::Cognition {
                    // Union of regions any level may touch: the largest
                    // ventricle and the thickest cortical band.
                    let (_, vr_max) = frame.radii(z, y, x, max_vent_scale);
                    if vr_max < 1.0 || rho >= 1.0 - SHELL_THICKNESS {
                        pathology_mask[i] = true;
                    }
                }
            }
        }
    }

    let mut lesion_voxels = 0usize;
    if class.task == Task::LesionLoad {
        let u = CounterRng::new(lesion_seed).split(STREAM_TARGET).uniform();
        let (lo, hi) = band;
        // Keep draws in the middle of the band: classes stay cleanly
        // separated even after blurring or generative smoothing.
        let frac = lo + (hi - lo) * (0.20 + 0.60 * u);
        let target = (frac * brain_voxels as f64).round() as usize;
        let mut sphere_rng = CounterRng::new(lesion_seed).split(STREAM_SPHERES);
        let mut placed = vec![false; n];
        let mut attempts = 0usize;
        while lesion_voxels < target {
            attempts += 1;
            if attempts > 5000 {
                return Err(Error::data(format!(
                    "lesion placement failed: {lesion_voxels}/{target} voxels after {attempts} spheres (subject {})",
                    geo.seed
                )));
            }
            let cz = sphere_rng.uniform_range(2.0, VOLUME_EXTENT as f64 - 2.0);
            let cy = sphere_rng.uniform_range(2.0, VOLUME_EXTENT as f64 - 2.0);
            let cx = sphere_rng.uniform_range(2.0, VOLUME_EXTENT as f64 - 2.0);
            let radius = sphere_rng.uniform_range(2.0, 3.2);
            // Center must sit deep in white matter, clear of shell and
            // ventricle at any level's scale.
            let (rho_c, _) = frame.radii(cz as usize, cy as usize, cx as usize, 1.0);
            let (_, vr_c) = frame.radii(cz as usize, cy as usize, cx as usize, max_vent_scale);
            if rho_c > 0.62 || vr_c < 1.3 {
                continue;
            }
            let r_ceil = radius.ceil() as isize;
            for dz in -r_ceil..=r_ceil {
                for dy in -r_ceil..=r_ceil {
                    for dx in -r_ceil..=r_ceil {
                        if lesion_voxels >= target {
                            break;
                        }
                        let (z, y, x) = (
                            cz as isize + dz,
                            cy as isize + dy,
                            cx as isize + dx,
                        );
                        if z < 0 || y < 0 || x < 0 {
                            continue;
                        }
                        let (z, y, x) = (z as usize, y as usize, x as usize);
                        if z >= VOLUME_EXTENT || y >= VOLUME_EXTENT || x >= VOLUME_EXTENT {
                            continue;
                        }
                        let dist2 = (z as f64 - cz) * (z as f64 - cz)
                            + (y as f64 - cy) * (y as f64 - cy)
                            + (x as f64 - cx) * (x as f64 - cx);
                        if dist2 > radius * radius {
                            continue;
                        }
                        let i = idx(z, y, x);
                        if placed[i] || !brain_mask[i] {
                            continue;
                        }
                        let (rho, _) = frame.radii(z, y, x, 1.0);
                        let (_, vr) = frame.radii(z, y, x, max_vent_scale);
                        if rho > 0.70 || vr < 1.15 {
                            continue;
                        }
                        placed[i] = true;
                        pathology_mask[i] = true;
                        lesion_voxels += 1;
                        data[i] = (frame.geo.white_matter_intensity
                            + LESION_CONTRAST
                            + frame.bias(z, y, x))
                        .clamp(0.0, 1.0);
                    }
                }
            }
        }
        let measured = lesion_voxels as f64 / brain_voxels as f64;
        if target > 0 && !(lo <= measured && measured <= hi) {
            return Err(Error::numeric(format!(
                "lesion fraction {measured:.5} escaped band [{lo}, {hi}]"
            )));
        }
    }

    let volume = Tensor::new(
        &[1, VOLUME_EXTENT, VOLUME_EXTENT, VOLUME_EXTENT],
        data,
    )?;
    Ok(RenderedPhantom {
        example: PhantomExample {
            volume,
            class,
            subject_seed: geo.seed,
            lesion_seed,
            prompt: build_prompt(class),
        },
        pathology_mask,
        brain_mask,
        lesion_voxels,
    })
}

/// Two renders of one subject under different levels of the same task.
/// The pair differs only inside the union of their pathology masks.
pub fn ground_truth_counterfactual(
    geo: &SubjectGeometry,
    class_a: PromptClass,
    class_b: PromptClass,
    lesion_seed: u64,
) -> Result<(RenderedPhantom, RenderedPhantom)> {
    if class_a.task != class_b.task {
        return Err(Error::invalid("counterfactual classes must share a task"));
    }
    if class_a.level == class_b.level {
        return Err(Error::invalid(
            "counterfactual classes must differ in level",
        ));
    }
    Ok((
        render(geo, class_a, lesion_seed)?,
        render(geo, class_b, lesion_seed)?,
    ))
}

/// Train/val/test index lists, disjoint and covering.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(Error::data(format!("split index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::data("split does not cover the dataset"));
        }
        let targets = apportion(n, &[0.70, 0.15, 0.15]);
        for (part, &target) in [&self.train, &self.val, &self.test].iter().zip(&targets) {
            if part.len().abs_diff(target) > 1 {
                return Err(Error::data(format!(
                    "split size {} misses 70/15/15 target {target}",
                    part.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhantomDataset {
    pub task: Task,
    pub seed: u64,
    pub examples: Vec<PhantomExample>,
    pub split: DatasetSplit,
}

/// Largest-remainder apportionment with deterministic tie-break toward the
/// earlier bucket.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let mut base: Vec<usize> = weights.iter().map(|w| (w * total as f64) as usize).collect();
    let mut fracs: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w * total as f64 - base[i] as f64))
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = base.iter().sum();
    for k in 0..total - assigned {
        base[fracs[k % fracs.len()].0] += 1;
    }
    base
}

impl PhantomDataset {
    /// One example per subject; class imbalance defaults to 60/30/10
    /// (low/medium/high) and the split is stratified per class at 70/15/15.
    pub fn generate(n_subjects: usize, task: Task, seed: u64) -> Result<PhantomDataset> {
        Self::generate_with_imbalance(n_subjects, task, seed, [0.6, 0.3, 0.1])
    }

    pub fn generate_with_imbalance(
        n_subjects: usize,
        task: Task,
        seed: u64,
        imbalance: [f64; 3],
    ) -> Result<PhantomDataset> {
        if n_subjects < 10 {
            return Err(Error::invalid(format!(
                "dataset needs >= 10 subjects, got {n_subjects}"
            )));
        }
        let counts = apportion(n_subjects, &imbalance);
        let mut labels = Vec::with_capacity(n_subjects);
        for (li, &c) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(Level::from_index(li)?, c));
        }
        // Deterministic shuffle so classes spread over subject indices.
        let mut shuffle_rng = CounterRng::new(seed).split(STREAM_CLASSES);
        for i in (1..labels.len()).rev() {
            let j = shuffle_rng.uniform_int(i as u64 + 1) as usize;
            labels.swap(i, j);
        }
        let subj_base = CounterRng::new(seed).split(STREAM_SUBJECTS);
        let les_base = CounterRng::new(seed).split(STREAM_LESIONS);
        let mut examples = Vec::with_capacity(n_subjects);
        for (i, &level) in labels.iter().enumerate() {
            let geo = generate_subject(subj_base.split(i as u64).key());
            let lesion_seed = les_base.split(i as u64).key();
            let rendered = render(&geo, PromptClass::new(task, level), lesion_seed)?;
            examples.push(rendered.example);
        }
        // Stratified split. Per-class apportionment is nudged so the overall
        // sizes land exactly on the 70/15/15 apportionment of n.
        let overall = apportion(n_subjects, &[0.70, 0.15, 0.15]);
        let members: Vec<Vec<usize>> = Level::all()
            .iter()
            .map(|&level| {
                examples
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.class.level == level)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let mut counts: Vec<Vec<usize>> = members
            .iter()
            .map(|m| apportion(m.len(), &[0.70, 0.15, 0.15]))
            .collect();
        loop {
            let sums: Vec<usize> = (0..3)
                .map(|s| counts.iter().map(|c| c[s]).sum())
                .collect();
            let over = (0..3).find(|&s| sums[s] > overall[s]);
            let under = (0..3).find(|&s| sums[s] < overall[s]);
            match (over, under) {
                (Some(so), Some(su)) => {
                    // Donate from the class with the largest count in the
                    // over-full bucket, preferring donors that keep at least
                    // one member there.
                    let donor = (0..counts.len())
                        .filter(|&c| counts[c][so] >= 2)
                        .max_by_key(|&c| counts[c][so])
                        .or_else(|| {
                            (0..counts.len())
                                .filter(|&c| counts[c][so] >= 1)
                                .max_by_key(|&c| counts[c][so])
                        })
                        .expect("over-full bucket has a donor");
                    counts[donor][so] -= 1;
                    counts[donor][su] += 1;
                }
                _ => break,
            }
        }
        let mut split = DatasetSplit::default();
        for (m, c) in members.iter().zip(counts.iter()) {
            split.train.extend(&m[..c[0]]);
            split.val.extend(&m[c[0]..c[0] + c[1]]);
            split.test.extend(&m[c[0] + c[1]..]);
        }
        split.validate(n_subjects)?;
        Ok(PhantomDataset {
            task,
            seed,
            examples,
            split,
        })
    }

    pub fn class_counts(&self, indices: &[usize]) -> [usize; 3] {
        let mut counts = [0; 3];
        for &i in indices {
            counts[self.examples[i].class.level.index()] += 1;
        }
        counts
    }
}

/// Fraction of brain-mask voxels above the lesion threshold; the trivial
/// rule that separates lesion classes by construction.
pub fn lesion_fraction(volume: &Tensor, threshold: f64) -> f64 {
    let data = volume.data();
    let brain: Vec<&f64> = data.iter().filter(|&&v| v > 0.01).collect();
    if brain.is_empty() {
        return 0.0;
    }
    brain.iter().filter(|&&&v| v >= threshold).count() as f64 / brain.len() as f64
}

/// Ventricle voxel count (hypointense interior), the separating statistic
/// for the cognition task.
pub fn ventricle_voxels(volume: &Tensor) -> usize {
    volume
        .data()
        .iter()
        .filter(|&&v| v > 0.001 && v < 0.15)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_geometry() {
        assert_eq!(generate_subject(7), generate_subject(7));
    }

    #[test]
    fn adjacent_seeds_differ_over_100_pairs() {
        for s in 0..100u64 {
            let a = generate_subject(s);
            let b = generate_subject(s + 1);
            assert_ne!(a, b, "seed {s} and {} gave identical geometry", s + 1);
        }
    }

    #[test]
    fn semi_axes_leave_two_voxel_margin() {
        for s in 0..50u64 {
            let g = generate_subject(s);
            for a in g.semi_axes {
                assert!(a <= CENTER - 2.0);
            }
        }
    }

    #[test]
    fn render_intensities_in_unit_range_and_lesions_inside_brain() {
        let geo = generate_subject(3);
        let r = render(&geo, PromptClass::new(Task::LesionLoad, Level::High), 11).unwrap();
        for &v in r.example.volume.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        for (i, &p) in r.pathology_mask.iter().enumerate() {
            if p {
                assert!(r.brain_mask[i], "lesion voxel {i} outside brain mask");
            }
        }
        assert!(r.lesion_voxels > 0);
    }

    #[test]
    fn lesion_fraction_always_within_band_over_100_renders() {
        let (lo, hi) = LESION_BANDS[2];
        for s in 0..100u64 {
            let geo = generate_subject(s);
            let r = render(&geo, PromptClass::new(Task::LesionLoad, Level::High), s * 31 + 7)
                .unwrap();
            let brain = r.brain_mask.iter().filter(|&&b| b).count();
            let frac = r.lesion_voxels as f64 / brain as f64;
            assert!(
                (lo..=hi).contains(&frac),
                "seed {s}: fraction {frac} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn lesion_levels_change_only_lesion_voxels() {
        let geo = generate_subject(9);
        let (a, b) = ground_truth_counterfactual(
            &geo,
            PromptClass::new(Task::LesionLoad, Level::Low),
            PromptClass::new(Task::LesionLoad, Level::High),
            55,
        )
        .unwrap();
        let va = a.example.volume.data();
        let vb = b.example.volume.data();
        for i in 0..va.len() {
            if va[i].to_bits() != vb[i].to_bits() {
                assert!(
                    a.pathology_mask[i] || b.pathology_mask[i],
                    "voxel {i} changed outside the pathology region"
                );
            }
        }
        // lower level's lesions are a prefix of the higher level's
        for i in 0..va.len() {
            if a.pathology_mask[i] {
                assert!(b.pathology_mask[i], "low-level lesion absent at high level");
            }
        }
    }

    #[test]
    fn cognition_levels_change_only_ventricle_and_cortex() {
        let geo = generate_subject(13);
        let (a, b) = ground_truth_counterfactual(
            &geo,
            PromptClass::new(Task::Cognition, Level::Low),
            PromptClass::new(Task::Cognition, Level::High),
            0,
        )
        .unwrap();
        let va = a.example.volume.data();
        let vb = b.example.volume.data();
        let mut changed = 0;
        for i in 0..va.len() {
            if va[i].to_bits() != vb[i].to_bits() {
                changed += 1;
                assert!(
                    a.pathology_mask[i],
                    "voxel {i} changed outside ventricle+cortex region"
                );
            }
        }
        assert!(changed > 0, "CN vs AD renders should differ");
        assert!(ventricle_voxels(&b.example.volume) > ventricle_voxels(&a.example.volume));
    }

    #[test]
    fn degenerate_counterfactual_rejected() {
        let geo = generate_subject(1);
        assert!(ground_truth_counterfactual(
            &geo,
            PromptClass::new(Task::LesionLoad, Level::Low),
            PromptClass::new(Task::LesionLoad, Level::Low),
            0,
        )
        .is_err());
        assert!(ground_truth_counterfactual(
            &geo,
            PromptClass::new(Task::LesionLoad, Level::Low),
            PromptClass::new(Task::Cognition, Level::High),
            0,
        )
        .is_err());
    }

    #[test]
    fn dataset_counts_split_and_determinism() {
        let ds = PhantomDataset::generate(100, Task::LesionLoad, 42).unwrap();
        let all: Vec<usize> = (0..100).collect();
        assert_eq!(ds.class_counts(&all), [60, 30, 10]);
        assert_eq!(ds.split.train.len(), 70);
        assert_eq!(ds.split.val.len(), 15);
        assert_eq!(ds.split.test.len(), 15);
        // every class present in every split
        for part in [&ds.split.train, &ds.split.val, &ds.split.test] {
            let c = ds.class_counts(part);
            assert!(c.iter().all(|&x| x > 0), "class missing from a split: {c:?}");
        }
        // full dataset is a pure function of (n, task, seed)
        let ds2 = PhantomDataset::generate(100, Task::LesionLoad, 42).unwrap();
        for (a, b) in ds.examples.iter().zip(ds2.examples.iter()) {
            assert!(a.volume.bit_eq(&b.volume));
            assert_eq!(a.class, b.class);
        }
        assert_eq!(ds.split, ds2.split);
    }

    #[test]
    fn dataset_below_minimum_rejected() {
        assert!(PhantomDataset::generate(5, Task::LesionLoad, 1).is_err());
    }

    #[test]
    fn no_subject_in_two_splits() {
        let ds = PhantomDataset::generate(40, Task::Cognition, 9).unwrap();
        ds.split.validate(40).unwrap();
    }


    #[test]
    fn rendered_intensity_threshold_classifies_perfectly() {
        // Lesion voxels are the only voxels above 0.76 by construction, so
        // the banded fraction rule classifies rendered volumes exactly.
        for s in 0..30u64 {
            let geo = generate_subject(3000 + s);
            for level in Level::all() {
                let r = render(&geo, PromptClass::new(Task::LesionLoad, level), 13 + s).unwrap();
                let frac = lesion_fraction(&r.example.volume, 0.76);
                let predicted = if frac < LESION_BANDS[1].0 {
                    Level::Low
                } else if frac < LESION_BANDS[2].0 {
                    Level::Medium
                } else {
                    Level::High
                };
                assert_eq!(predicted, level, "seed {s}: fraction {frac}");
            }
        }
    }

    #[test]
    fn lesion_intensity_band_disjoint_from_cortex() {
        for s in 0..20u64 {
            let geo = generate_subject(4000 + s);
            let r = render(&geo, PromptClass::new(Task::LesionLoad, Level::High), s).unwrap();
            let v = r.example.volume.data();
            for i in 0..v.len() {
                if r.pathology_mask[i] {
                    assert!(v[i] >= 0.76, "lesion voxel {i} at {} below threshold", v[i]);
                } else {
                    assert!(v[i] < 0.76, "non-lesion voxel {i} at {} above threshold", v[i]);
                }
            }
        }
    }

    #[test]
    fn classes_are_separable_by_thresholding() {
        // Lesion task: fraction of bright voxels ranks the three levels with
        // zero overlap; cognition: ventricle voxel count does.
        let mut lesion_stats: Vec<Vec<f64>> = vec![vec![]; 3];
        for s in 0..30u64 {
            let geo = generate_subject(1000 + s);
            for level in Level::all() {
                let r = render(&geo, PromptClass::new(Task::LesionLoad, level), 77 + s).unwrap();
                let brain = r.brain_mask.iter().filter(|&&b| b).count();
                lesion_stats[level.index()].push(r.lesion_voxels as f64 / brain as f64);
            }
        }
        let max_low = lesion_stats[0].iter().cloned().fold(0.0, f64::max);
        let min_med = lesion_stats[1].iter().cloned().fold(1.0, f64::min);
        let max_med = lesion_stats[1].iter().cloned().fold(0.0, f64::max);
        let min_high = lesion_stats[2].iter().cloned().fold(1.0, f64::min);
        assert!(max_low < min_med, "low/medium overlap: {max_low} vs {min_med}");
        assert!(max_med < min_high, "medium/high overlap: {max_med} vs {min_high}");

        let mut vent_stats: Vec<Vec<usize>> = vec![vec![]; 3];
        for s in 0..20u64 {
            let geo = generate_subject(2000 + s);
            for level in Level::all() {
                let r = render(&geo, PromptClass::new(Task::Cognition, level), 0).unwrap();
                vent_stats[level.index()].push(ventricle_voxels(&r.example.volume));
            }
        }
        let max_cn = *vent_stats[0].iter().max().unwrap();
        let min_mci = *vent_stats[1].iter().min().unwrap();
        let max_mci = *vent_stats[1].iter().max().unwrap();
        let min_ad = *vent_stats[2].iter().min().unwrap();
        assert!(max_cn < min_mci, "CN/MCI overlap: {max_cn} vs {min_mci}");
        assert!(max_mci < min_ad, "MCI/AD overlap: {max_mci} vs {min_ad}");
    }
}

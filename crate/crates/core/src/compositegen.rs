//! Composite construction by foreground exchange inside a scene group,
//! mixed style labels, and train/test dataset emission.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seeds;
use crate::synthscene::{
    load_image_png, load_mask_png, save_image_png, CorpusScene, Family, SceneGroup, STYLE_COUNT,
};

const TAG_PAIRS: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Rendered,
    Real,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Rendered => "rendered",
            Domain::Real => "real",
        }
    }

    fn of(family: Family) -> Domain {
        match family {
            Family::Rendered => Domain::Rendered,
            Family::RealLike => Domain::Real,
        }
    }
}

/// K-dimensional probability vector over styles.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLabel {
    probs: Vec<f64>,
}

impl StyleLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != STYLE_COUNT {
            return Err(Error::InvalidDistribution(format!(
                "label has {} entries, expected {STYLE_COUNT}",
                probs.len()
            )));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidDistribution(
                "label entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "label sums to {sum}, expected 1"
            )));
        }
        Ok(StyleLabel { probs })
    }

    pub fn one_hot(index: usize) -> Self {
        let mut probs = vec![0.0; STYLE_COUNT];
        probs[index] = 1.0;
        StyleLabel { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// One training or evaluation record: a composite, its ground truth, the
/// shared mask, and (rendered domain only) the style labels.
#[derive(Clone, Debug)]
pub struct HarmonySample {
    pub composite: Tensor,
    pub ground_truth: Tensor,
    pub mask: Tensor,
    pub domain: Domain,
    pub fg_ratio: f64,
    pub composite_label: Option<StyleLabel>,
    pub gt_label: Option<StyleLabel>,
    pub scene_id: u64,
    /// Position (within the group) the foreground came from.
    pub fg_index: usize,
    /// Position the background and ground truth came from.
    pub bg_index: usize,
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask);
    }
    Ok(())
}

/// Area of the foreground over the area of the whole image.
pub fn foreground_ratio(mask: &Tensor) -> Result<f64> {
    check_binary(mask)?;
    Ok(mask.data().iter().sum::<f64>() / mask.numel() as f64)
}

/// r * y_fg + (1 - r) * y_bg.
pub fn mix_style_labels(y_fg: &StyleLabel, y_bg: &StyleLabel, r: f64) -> Result<StyleLabel> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "mixing ratio {r} outside [0, 1]"
        )));
    }
    if r == 0.0 {
        return Ok(y_bg.clone());
    }
    if r == 1.0 {
        return Ok(y_fg.clone());
    }
    let probs = y_fg
        .probs
        .iter()
        .zip(&y_bg.probs)
        .map(|(&f, &b)| r * f + (1.0 - r) * b)
        .collect();
    Ok(StyleLabel { probs })
}

/// mask * fg + (1 - mask) * bg, bit-exact on both sides of a binary mask.
pub fn compose(fg: &Tensor, bg: &Tensor, mask: &Tensor) -> Tensor {
    let plane = mask.numel();
    let channels = fg.numel() / plane;
    let mut out = bg.clone();
    for c in 0..channels {
        let base = c * plane;
        for (j, &m) in mask.data().iter().enumerate() {
            if m == 1.0 {
                out.data_mut()[base + j] = fg.data()[base + j];
            }
        }
    }
    out
}

fn sample_from_exchange(
    group_images: &[Tensor],
    mask: &Tensor,
    domain: Domain,
    scene_id: u64,
    style_ids: Option<&[usize]>,
    fg: usize,
    bg: usize,
    r: f64,
) -> Result<HarmonySample> {
    let composite = compose(&group_images[fg], &group_images[bg], mask);
    let (composite_label, gt_label) = match (domain, style_ids) {
        (Domain::Rendered, Some(ids)) => {
            let y_fg = StyleLabel::one_hot(ids[fg]);
            let y_bg = StyleLabel::one_hot(ids[bg]);
            (
                Some(mix_style_labels(&y_fg, &y_bg, r)?),
                Some(y_bg),
            )
        }
        _ => (None, None),
    };
    Ok(HarmonySample {
        composite,
        ground_truth: group_images[bg].clone(),
        mask: mask.clone(),
        domain,
        fg_ratio: r,
        composite_label,
        gt_label,
        scene_id,
        fg_index: fg,
        bg_index: bg,
    })
}

/// Exchange the foregrounds of positions `i` and `j`: returns the sample
/// whose foreground comes from image i pasted on the background of image j
/// (ground truth j), and the symmetric exchange.
pub fn make_pair(group: &SceneGroup, i: usize, j: usize) -> Result<(HarmonySample, HarmonySample)> {
    if i == j {
        return Err(Error::InvalidArgument(
            "foreground exchange needs two distinct styles".into(),
        ));
    }
    if i >= group.images.len() || j >= group.images.len() {
        return Err(Error::InvalidArgument(format!(
            "style position out of range: ({i}, {j})"
        )));
    }
    let r = foreground_ratio(&group.mask)?;
    if r == 0.0 {
        return Err(Error::EmptyMask);
    }
    let domain = Domain::of(group.family);
    let ids: Vec<usize> = group.style_ids.iter().map(|s| s.index()).collect();
    let style_ids = (domain == Domain::Rendered).then_some(ids.as_slice());
    let a = sample_from_exchange(
        &group.images,
        &group.mask,
        domain,
        group.scene_id,
        style_ids,
        i,
        j,
        r,
    )?;
    let b = sample_from_exchange(
        &group.images,
        &group.mask,
        domain,
        group.scene_id,
        style_ids,
        j,
        i,
        r,
    )?;
    Ok((a, b))
}

/// All K*(K-1) ordered exchanges in a fixed order.
fn ordered_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Draw `count` ordered exchanges without replacement, deterministically.
pub fn sample_pairs(k: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let max = k * (k - 1);
    if count == 0 || count > max {
        return Err(Error::InvalidArgument(format!(
            "pairs_per_group must be in 1..={max}, got {count}"
        )));
    }
    let mut pairs = ordered_pairs(k);
    let mut rng = seeds::rng(seed);
    for idx in (1..pairs.len()).rev() {
        let j = rng.gen_range(0..=idx);
        pairs.swap(idx, j);
    }
    pairs.truncate(count);
    Ok(pairs)
}

/// Build `groups.len() * pairs_per_group` samples by seeded sampling of
/// ordered exchanges per group.
pub fn build_dataset(
    groups: &[SceneGroup],
    pairs_per_group: usize,
    seed: u64,
) -> Result<Vec<HarmonySample>> {
    let mut out = Vec::with_capacity(groups.len() * pairs_per_group);
    for group in groups {
        let pair_seed = seeds::derive(seed, &[TAG_PAIRS, group.family.tag_u64(), group.scene_id]);
        for (i, j) in sample_pairs(group.images.len(), pairs_per_group, pair_seed)? {
            let (sample, _) = make_pair(group, i, j)?;
            out.push(sample);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk dataset manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub composite_path: String,
    pub gt_path: String,
    pub mask_path: String,
    pub domain: Domain,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite_label: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<Vec<f64>>,
    pub scene_id: u64,
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
}

fn path_string(base: &Path, target: &Path) -> String {
    target
        .strip_prefix(base)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| target.to_string_lossy().into_owned())
}

/// Build composites for the given corpus scenes and write them plus a
/// manifest under `out_dir`. Ground-truth and mask paths refer back into the
/// corpus tree. Returns the manifest.
pub fn write_dataset(
    scenes: &[&CorpusScene],
    corpus_root: &Path,
    out_dir: &Path,
    manifest_name: &str,
    pairs_per_group: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let composites = out_dir.join("composites");
    fs::create_dir_all(&composites)?;
    let mut manifest = DatasetManifest::default();
    for scene in scenes {
        let domain = Domain::of(scene.family);
        let r = foreground_ratio(&scene.mask)?;
        if r == 0.0 {
            return Err(Error::EmptyMask);
        }
        let pair_seed = seeds::derive(seed, &[TAG_PAIRS, scene.family.tag_u64(), scene.scene_id]);
        for (i, j) in sample_pairs(scene.images.len(), pairs_per_group, pair_seed)? {
            let composite = compose(&scene.images[i], &scene.images[j], &scene.mask);
            let name = format!("{}_{i}_{j}.png", scene.scene_id);
            save_image_png(&composites.join(&name), &composite)?;
            let (composite_label, gt_label) = match (domain, &scene.style_ids) {
                (Domain::Rendered, Some(ids)) => {
                    let y_fg = StyleLabel::one_hot(ids[i]);
                    let y_bg = StyleLabel::one_hot(ids[j]);
                    let mixed = mix_style_labels(&y_fg, &y_bg, r)?;
                    (
                        Some(mixed.probs().to_vec()),
                        Some(y_bg.probs().to_vec()),
                    )
                }
                _ => (None, None),
            };
            let scene_dir = corpus_root.join("scenes").join(scene.scene_id.to_string());
            manifest.records.push(DatasetRecord {
                composite_path: format!("composites/{name}"),
                gt_path: path_string(out_dir, &scene_dir.join(format!("style_{j}.png"))),
                mask_path: path_string(out_dir, &scene_dir.join("mask.png")),
                domain,
                r,
                composite_label,
                gt_label,
                scene_id: scene.scene_id,
                i,
                j,
            });
        }
    }
    fs::write(
        out_dir.join(manifest_name),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Load one record's tensors. Relative paths resolve against the manifest's
/// directory. Verifies the stored foreground ratio against the mask.
pub fn load_sample(manifest_dir: &Path, record: &DatasetRecord) -> Result<HarmonySample> {
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    };
    let composite = load_image_png(&resolve(&record.composite_path))?;
    let ground_truth = load_image_png(&resolve(&record.gt_path))?;
    let mask = load_mask_png(&resolve(&record.mask_path))?;
    let r = foreground_ratio(&mask)?;
    if r != record.r {
        return Err(Error::Dataset(format!(
            "scene {} exchange ({}, {}): stored ratio {} but mask gives {r}",
            record.scene_id, record.i, record.j, record.r
        )));
    }
    let to_label = |v: &Option<Vec<f64>>| -> Result<Option<StyleLabel>> {
        v.as_ref().map(|p| StyleLabel::new(p.clone())).transpose()
    };
    Ok(HarmonySample {
        composite,
        ground_truth,
        mask,
        domain: record.domain,
        fg_ratio: r,
        composite_label: to_label(&record.composite_label)?,
        gt_label: to_label(&record.gt_label)?,
        scene_id: record.scene_id,
        fg_index: record.i,
        bg_index: record.j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::build_corpus;

    #[test]
    fn foreground_ratio_cases() {
        let full = Tensor::filled(&[1, 4, 4], 1.0);
        assert_eq!(foreground_ratio(&full).unwrap(), 1.0);

        let mut m = Tensor::zeros(&[1, 8, 8]);
        for j in 0..16 {
            m.data_mut()[j] = 1.0;
        }
        assert_eq!(foreground_ratio(&m).unwrap(), 0.25);

        let empty = Tensor::zeros(&[1, 8, 8]);
        assert_eq!(foreground_ratio(&empty).unwrap(), 0.0);

        let mut bad = Tensor::zeros(&[1, 2, 2]);
        bad.data_mut()[0] = 0.5;
        assert!(matches!(
            foreground_ratio(&bad).unwrap_err(),
            Error::NonBinaryMask
        ));
    }

    #[test]
    fn label_mixing_boundaries_and_arithmetic() {
        let a = StyleLabel::one_hot(0);
        let b = StyleLabel::one_hot(1);
        assert_eq!(mix_style_labels(&a, &b, 0.0).unwrap(), b);
        assert_eq!(mix_style_labels(&a, &b, 1.0).unwrap(), a);
        let mixed = mix_style_labels(&a, &b, 0.25).unwrap();
        assert_eq!(mixed.probs()[0], 0.25);
        assert_eq!(mixed.probs()[1], 0.75);
        assert!(mixed.probs()[2..].iter().all(|&p| p == 0.0));
        assert!(mix_style_labels(&a, &b, 1.5).is_err());
    }

    #[test]
    fn exchange_is_an_involution() {
        let groups = build_corpus(1, 24, 24, Family::Rendered, 3).unwrap();
        let g = &groups[0];
        let (s_ji, s_ij) = make_pair(g, 2, 5).unwrap();
        // pasting the foregrounds back recovers the originals bit-exactly
        let back_j = compose(&s_ij.composite, &s_ji.composite, &g.mask);
        let back_i = compose(&s_ji.composite, &s_ij.composite, &g.mask);
        assert_eq!(back_j, g.images[5]);
        assert_eq!(back_i, g.images[2]);
    }

    #[test]
    fn composite_carries_foreground_of_i_and_background_of_j() {
        let groups = build_corpus(1, 24, 24, Family::Rendered, 8).unwrap();
        let g = &groups[0];
        let (s, _) = make_pair(g, 1, 7).unwrap();
        let plane = g.mask.numel();
        for c in 0..3 {
            for j in 0..plane {
                let want = if g.mask.data()[j] == 1.0 {
                    g.images[1].data()[c * plane + j]
                } else {
                    g.images[7].data()[c * plane + j]
                };
                assert_eq!(s.composite.data()[c * plane + j].to_bits(), want.to_bits());
            }
        }
        assert_eq!(s.ground_truth, g.images[7]);
        // background equality with the ground truth
        for c in 0..3 {
            for j in 0..plane {
                if g.mask.data()[j] == 0.0 {
                    assert_eq!(
                        s.composite.data()[c * plane + j].to_bits(),
                        s.ground_truth.data()[c * plane + j].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn mixed_label_uses_foreground_ratio() {
        let groups = build_corpus(1, 16, 16, Family::Rendered, 21).unwrap();
        let g = &groups[0];
        let (s, _) = make_pair(g, 3, 7).unwrap();
        let r = s.fg_ratio;
        let label = s.composite_label.as_ref().unwrap();
        assert!((label.probs()[3] - r).abs() < 1e-15);
        assert!((label.probs()[7] - (1.0 - r)).abs() < 1e-15);
        assert!((label.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert_eq!(s.gt_label.as_ref().unwrap(), &StyleLabel::one_hot(7));
    }

    #[test]
    fn same_style_exchange_is_rejected() {
        let groups = build_corpus(1, 16, 16, Family::Rendered, 2).unwrap();
        assert!(make_pair(&groups[0], 4, 4).is_err());
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let groups = build_corpus(3, 16, 16, Family::Rendered, 5).unwrap();
        let a = build_dataset(&groups, 20, 77).unwrap();
        assert_eq!(a.len(), 60);
        let b = build_dataset(&groups, 20, 77).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.composite, y.composite);
            assert_eq!((x.fg_index, x.bg_index), (y.fg_index, y.bg_index));
        }
        // distinct draws without replacement
        let one = build_dataset(&groups[..1].to_vec(), 2, 9).unwrap();
        assert_ne!(
            (one[0].fg_index, one[0].bg_index),
            (one[1].fg_index, one[1].bg_index)
        );
    }

    #[test]
    fn exhaustive_pairing_covers_every_ordered_pair_once() {
        let pairs = sample_pairs(STYLE_COUNT, 90, 4).unwrap();
        assert_eq!(pairs.len(), 90);
        let mut seen = std::collections::BTreeSet::new();
        for p in &pairs {
            assert!(p.0 != p.1);
            assert!(seen.insert(*p));
        }
        assert!(sample_pairs(STYLE_COUNT, 91, 4).is_err());
    }

    #[test]
    fn real_domain_samples_carry_no_labels() {
        let groups = build_corpus(1, 16, 16, Family::RealLike, 6).unwrap();
        let ds = build_dataset(&groups, 5, 1).unwrap();
        for s in &ds {
            assert_eq!(s.domain, Domain::Real);
            assert!(s.composite_label.is_none());
            assert!(s.gt_label.is_none());
            assert!(s.fg_ratio > 0.0 && s.fg_ratio < 1.0);
        }
    }

    #[test]
    fn disk_dataset_round_trip() {
        use crate::synthscene::{load_corpus, write_corpus};
        let rendered = build_corpus(2, 16, 16, Family::Rendered, 31).unwrap();
        let real = build_corpus(1, 16, 16, Family::RealLike, 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &rendered, &real).unwrap();
        let scenes = load_corpus(dir.path()).unwrap();
        let refs: Vec<&CorpusScene> = scenes.iter().collect();
        let manifest =
            write_dataset(&refs, dir.path(), dir.path(), "dataset.json", 4, 99).unwrap();
        assert_eq!(manifest.records.len(), 12);
        let loaded = load_manifest(&dir.path().join("dataset.json")).unwrap();
        assert_eq!(loaded.records.len(), 12);
        for rec in &loaded.records {
            let s = load_sample(dir.path(), rec).unwrap();
            // background of composite equals background of ground truth
            let plane = s.mask.numel();
            for c in 0..3 {
                for j in 0..plane {
                    if s.mask.data()[j] == 0.0 {
                        assert_eq!(
                            s.composite.data()[c * plane + j].to_bits(),
                            s.ground_truth.data()[c * plane + j].to_bits()
                        );
                    }
                }
            }
            match rec.domain {
                Domain::Rendered => assert!(s.composite_label.is_some()),
                Domain::Real => assert!(s.composite_label.is_none()),
            }
        }
    }
}

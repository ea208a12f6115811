//! Deterministic dataset slicing: nested prefix fractions of one seeded
//! shuffle, exact complements, the detection/segmentation task partition,
//! and a plain-text manifest format so every run can reload the same ids.

use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::rng;

pub type Fraction = Ratio<u64>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub name: String,
    pub ids: Vec<String>,
    pub parent: Option<String>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn new(name: &str, ids: Vec<String>, parent: Option<String>, seed: u64) -> Result<Self> {
        check_unique(&ids)?;
        Ok(Self {
            name: name.to_string(),
            ids,
            parent,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update([b'\n']);
        }
        hex(&h.finalize())
    }

    /// Confirms the recorded parent really contains every id of this split.
    pub fn verify_parent(&self, parent: &SplitManifest) -> Result<()> {
        match &self.parent {
            None => Err(Error::Input(format!("split {} has no parent", self.name))),
            Some(p) if p != &parent.name => Err(Error::Input(format!(
                "split {} expects parent {p}, got {}",
                self.name, parent.name
            ))),
            Some(_) => {
                let have: std::collections::HashSet<&str> =
                    parent.ids.iter().map(String::as_str).collect();
                match self.ids.iter().find(|id| !have.contains(id.as_str())) {
                    Some(missing) => Err(Error::Consistency(format!(
                        "split {}: id {missing} not in parent {}",
                        self.name, parent.name
                    ))),
                    None => Ok(()),
                }
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Input(format!("duplicate id {id}")));
        }
    }
    Ok(())
}

/// Prefix length under round-half-up.
fn prefix_len(fraction: Fraction, n: usize) -> usize {
    let scaled = fraction * Fraction::new(n as u64, 1) + Fraction::new(1, 2);
    let bounded = scaled.floor().to_integer() as usize;
    bounded.min(n)
}

/// One seeded shuffle of `ids`; each fraction becomes the prefix of length
/// `round(fraction * N)`. Smaller fractions are therefore nested inside
/// larger ones, and each manifest's parent is the next larger one.
pub fn make_prefix_fractions(
    ids: &[String],
    fractions: &[Fraction],
    seed: u64,
) -> Result<Vec<SplitManifest>> {
    if ids.is_empty() {
        return Err(Error::Input("no ids to split".into()));
    }
    check_unique(ids)?;
    if fractions.is_empty() {
        return Err(Error::Input("no fractions requested".into()));
    }
    for &f in fractions {
        if f <= Fraction::new(0, 1) || f > Fraction::new(1, 1) {
            return Err(Error::Input(format!("fraction {f} outside (0, 1]")));
        }
    }
    for (i, f) in fractions.iter().enumerate() {
        if fractions[..i].contains(f) {
            return Err(Error::Input(format!("duplicate fraction {f}")));
        }
    }
    let mut shuffled = ids.to_vec();
    let mut r = rng::stream(seed, "split-shuffle");
    shuffled.shuffle(&mut r);

    // assign parents by descending fraction, report in input order
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| fractions[b].cmp(&fractions[a]));
    let name_of = |f: Fraction| format!("prefix-{}of{}", f.numer(), f.denom());
    let mut out: Vec<Option<SplitManifest>> = vec![None; fractions.len()];
    let mut prev: Option<String> = None;
    for &i in &order {
        let f = fractions[i];
        let len = prefix_len(f, ids.len());
        let m = SplitManifest::new(&name_of(f), shuffled[..len].to_vec(), prev.clone(), seed)?;
        prev = Some(m.name.clone());
        out[i] = Some(m);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Ids of `universe` not in `split`, in universe order.
pub fn complement(split: &SplitManifest, universe: &[String]) -> Result<SplitManifest> {
    check_unique(universe)?;
    let have: std::collections::HashSet<&str> = universe.iter().map(String::as_str).collect();
    if let Some(missing) = split.ids.iter().find(|id| !have.contains(id.as_str())) {
        return Err(Error::Input(format!(
            "split {} id {missing} not in universe",
            split.name
        )));
    }
    let in_split: std::collections::HashSet<&str> =
        split.ids.iter().map(String::as_str).collect();
    let ids: Vec<String> = universe
        .iter()
        .filter(|id| !in_split.contains(id.as_str()))
        .cloned()
        .collect();
    SplitManifest::new(&format!("{}-complement", split.name), ids, None, split.seed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPartition {
    pub det_ids: Vec<String>,
    pub seg_ids: Vec<String>,
}

/// Deterministically partition a pool into a detection-labeled part and a
/// segmentation-labeled part. Together they cover every id; they never
/// overlap.
pub fn make_task_partition(
    ids: &[String],
    det_fraction: Fraction,
    seed: u64,
) -> Result<TaskPartition> {
    if ids.is_empty() {
        return Err(Error::Input("no ids to partition".into()));
    }
    check_unique(ids)?;
    if det_fraction <= Fraction::new(0, 1) || det_fraction >= Fraction::new(1, 1) {
        return Err(Error::Input(format!(
            "det fraction {det_fraction} outside (0, 1)"
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut r = rng::stream(seed, "task-partition");
    shuffled.shuffle(&mut r);
    let cut = prefix_len(det_fraction, ids.len());
    let seg_ids = shuffled.split_off(cut);
    Ok(TaskPartition {
        det_ids: shuffled,
        seg_ids,
    })
}

/// Ids of samples that carry both annotation kinds; the validation-set rule
/// that drops segmentation-only images.
pub fn both_task_ids(samples: &[ImageSample]) -> Vec<String> {
    samples
        .iter()
        .filter(|s| s.has_detection() && s.has_segmentation())
        .map(|s| s.id.clone())
        .collect()
}

pub fn save_manifest(split: &SplitManifest, path: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "name={}", split.name);
    let _ = writeln!(text, "seed={}", split.seed);
    if let Some(p) = &split.parent {
        let _ = writeln!(text, "parent={p}");
    }
    let _ = writeln!(text, "checksum={}", split.checksum());
    for id in &split.ids {
        let _ = writeln!(text, "{id}");
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut name = None;
    let mut seed = None;
    let mut parent = None;
    let mut checksum = None;
    let mut ids = Vec::new();
    for line in text.lines() {
        if ids.is_empty() && checksum.is_none() {
            if let Some(v) = line.strip_prefix("name=") {
                name = Some(v.to_string());
                continue;
            }
            if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| corrupt(format!("bad seed {v:?}")))?,
                );
                continue;
            }
            if let Some(v) = line.strip_prefix("parent=") {
                parent = Some(v.to_string());
                continue;
            }
            if let Some(v) = line.strip_prefix("checksum=") {
                checksum = Some(v.to_string());
                continue;
            }
            return Err(corrupt(format!("unexpected header line {line:?}")));
        }
        if !line.is_empty() {
            ids.push(line.to_string());
        }
    }
    let name = name.ok_or_else(|| corrupt("missing name".into()))?;
    let seed = seed.ok_or_else(|| corrupt("missing seed".into()))?;
    let checksum = checksum.ok_or_else(|| corrupt("missing checksum".into()))?;
    let m = SplitManifest::new(&name, ids, parent, seed).map_err(|e| corrupt(e.to_string()))?;
    let actual = m.checksum();
    if actual != checksum {
        return Err(corrupt(format!(
            "checksum mismatch: recorded {checksum}, computed {actual}"
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:05}")).collect()
    }

    fn frac(n: u64, d: u64) -> Fraction {
        Fraction::new(n, d)
    }

    #[test]
    fn voc_sized_prefixes_round_half_up() {
        let pool = ids(16_551);
        let splits =
            make_prefix_fractions(&pool, &[frac(1, 2), frac(1, 4), frac(1, 8)], 7).unwrap();
        assert_eq!(splits[0].len(), 8_276);
        assert_eq!(splits[1].len(), 4_138);
        assert_eq!(splits[2].len(), 2_069);

        // nesting: each smaller manifest is a strict prefix of the larger
        assert_eq!(splits[1].ids[..], splits[0].ids[..4_138]);
        assert_eq!(splits[2].ids[..], splits[1].ids[..2_069]);
        assert_eq!(splits[1].parent.as_deref(), Some("prefix-1of2"));
        assert_eq!(splits[2].parent.as_deref(), Some("prefix-1of4"));
        assert!(splits[0].parent.is_none());
        splits[1].verify_parent(&splits[0]).unwrap();
        splits[2].verify_parent(&splits[1]).unwrap();

        // determinism and seed sensitivity
        let again =
            make_prefix_fractions(&pool, &[frac(1, 2), frac(1, 4), frac(1, 8)], 7).unwrap();
        assert_eq!(splits, again);
        let other = make_prefix_fractions(&pool, &[frac(1, 2)], 8).unwrap();
        assert_ne!(splits[0].ids, other[0].ids);
    }

    #[test]
    fn full_fraction_is_identity_as_a_set() {
        let pool = ids(31);
        let splits = make_prefix_fractions(&pool, &[frac(1, 1)], 3).unwrap();
        assert_eq!(splits[0].len(), 31);
        let mut sorted = splits[0].ids.clone();
        sorted.sort();
        assert_eq!(sorted, pool);
        // the shuffle itself must not be the identity permutation
        assert_ne!(splits[0].ids, pool);
    }

    #[test]
    fn input_validation() {
        let mut pool = ids(4);
        pool.push("img00001".into());
        assert!(matches!(
            make_prefix_fractions(&pool, &[frac(1, 2)], 0),
            Err(Error::Input(_))
        ));
        assert!(make_prefix_fractions(&[], &[frac(1, 2)], 0).is_err());
        let pool = ids(4);
        assert!(make_prefix_fractions(&pool, &[frac(0, 2)], 0).is_err());
        assert!(make_prefix_fractions(&pool, &[frac(3, 2)], 0).is_err());
        assert!(make_prefix_fractions(&pool, &[frac(1, 2), frac(2, 4)], 0).is_err());
        assert!(make_prefix_fractions(&pool, &[], 0).is_err());
    }

    #[test]
    fn complement_partitions_the_universe() {
        let pool = ids(16_551);
        let half = &make_prefix_fractions(&pool, &[frac(1, 2)], 7).unwrap()[0];
        let rest = complement(half, &pool).unwrap();
        assert_eq!(rest.len(), 8_275);

        let eighth = &make_prefix_fractions(&pool, &[frac(1, 8)], 7).unwrap()[0];
        let rest8 = complement(eighth, &pool).unwrap();
        assert_eq!(rest8.len(), 16_551 - 2_069);

        // disjoint, union = universe, order follows the universe
        let in_half: std::collections::HashSet<_> = half.ids.iter().collect();
        assert!(rest.ids.iter().all(|id| !in_half.contains(id)));
        assert_eq!(half.len() + rest.len(), pool.len());
        let mut merged: Vec<&String> = rest.ids.iter().collect();
        let rest_set: std::collections::HashSet<_> = rest.ids.iter().collect();
        let expected_order: Vec<&String> =
            pool.iter().filter(|id| rest_set.contains(id)).collect();
        merged.sort_by_key(|id| pool.iter().position(|p| &p == id).unwrap());
        assert_eq!(merged, expected_order);
        assert_eq!(rest.ids, rest.ids.iter().cloned().collect::<Vec<_>>());

        // complement of everything is empty
        let full = SplitManifest::new("all", pool.clone(), None, 0).unwrap();
        assert!(complement(&full, &pool).unwrap().is_empty());

        // non-subset input is rejected
        let alien = SplitManifest::new("alien", vec!["zzz".into()], None, 0).unwrap();
        assert!(matches!(complement(&alien, &pool), Err(Error::Input(_))));
    }

    #[test]
    fn task_partition_matches_published_pool_sizes() {
        // two-task pool of 15,214 images split 7,558 / 7,656
        let pool = ids(15_214);
        let part = make_task_partition(&pool, frac(7_558, 15_214), 11).unwrap();
        assert_eq!(part.det_ids.len(), 7_558);
        assert_eq!(part.seg_ids.len(), 7_656);
        let det: std::collections::HashSet<_> = part.det_ids.iter().collect();
        assert!(part.seg_ids.iter().all(|id| !det.contains(id)));
        assert_eq!(part.det_ids.len() + part.seg_ids.len(), pool.len());

        let again = make_task_partition(&pool, frac(7_558, 15_214), 11).unwrap();
        assert_eq!(part, again);
    }

    #[test]
    fn small_partition_and_validation() {
        let pool = ids(10);
        let part = make_task_partition(&pool, frac(1, 2), 5).unwrap();
        assert_eq!(part.det_ids.len(), 5);
        assert_eq!(part.seg_ids.len(), 5);
        assert!(make_task_partition(&pool, frac(1, 1), 5).is_err());
        assert!(make_task_partition(&pool, frac(0, 1), 5).is_err());

        // detection ids can be halved further, still deterministic
        let halves = make_prefix_fractions(&part.det_ids, &[frac(1, 2)], 6).unwrap();
        assert_eq!(halves[0].len(), 3); // round(2.5) = 3
    }

    #[test]
    fn both_task_filter_drops_single_task_samples() {
        use crate::dataset::{generate_shapes, ClassCatalog, ShapeType, ShapesConfig};
        let cfg = ShapesConfig {
            n_images: 6,
            image_size: 64,
            shapes_per_image: (1, 2),
            shape_types: vec![ShapeType::Rectangle, ShapeType::Circle, ShapeType::Triangle],
            seed: 2,
        };
        let samples = generate_shapes(&cfg, &ClassCatalog::shapes()).unwrap();
        let mut mixed: Vec<_> = samples.iter().map(|s| s.detection_only()).collect();
        mixed.extend(samples.iter().skip(3).cloned());
        let kept = both_task_ids(&mixed);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept, vec!["shape000003", "shape000004", "shape000005"]);
    }

    #[test]
    fn manifest_round_trip_and_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let m = SplitManifest::new(
            "half",
            ids(40),
            Some("all".into()),
            9,
        )
        .unwrap();
        let path = dir.path().join("half.split");
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);

        // tamper with one id
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("img00020", "img99999")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Corrupt { .. })));

        // drop an id entirely
        let shorter: String = text.lines().take(text.lines().count() - 1).fold(
            String::new(),
            |mut acc, l| {
                acc.push_str(l);
                acc.push('\n');
                acc
            },
        );
        std::fs::write(&path, shorter).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn legacy_manifest_without_parent_loads() {
        let dir = tempfile::tempdir().unwrap();
        let m = SplitManifest::new("old", ids(3), None, 1).unwrap();
        let path = dir.path().join("old.split");
        let text = format!(
            "name=old\nseed=1\nchecksum={}\nimg00000\nimg00001\nimg00002\n",
            m.checksum()
        );
        std::fs::write(&path, text).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.parent, None);
        assert_eq!(loaded, m);
    }

    #[test]
    fn parent_verification_catches_violations() {
        let a = SplitManifest::new("a", ids(10), None, 0).unwrap();
        let mut b = SplitManifest::new("b", ids(4), Some("a".into()), 0).unwrap();
        b.verify_parent(&a).unwrap();
        b.ids.push("stranger".into());
        assert!(matches!(b.verify_parent(&a), Err(Error::Consistency(_))));
        let c = SplitManifest::new("c", ids(2), Some("zzz".into()), 0).unwrap();
        assert!(c.verify_parent(&a).is_err());
        let d = SplitManifest::new("d", ids(2), None, 0).unwrap();
        assert!(d.verify_parent(&a).is_err());
    }
}

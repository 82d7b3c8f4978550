//! Patient-level dataset splitting and subject-disjoint N-way K-shot episode
//! sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_QUERIES: usize = 15;
/// Classes with at most this many patients have every support/query
/// partition enumerated; larger classes fall back to rejection sampling.
pub const MAX_ENUMERATED_PATIENTS: usize = 16;
const PARTITION_RETRIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub item_id: String,
    pub relative_path: String,
    pub class_label: String,
    pub patient_id: String,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn new(items: Vec<ManifestItem>) -> Self {
        Self { items }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let items = rdr.deserialize().collect::<std::result::Result<Vec<ManifestItem>, _>>()?;
        Ok(Self { items })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(file)
    }

    pub fn to_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for item in &self.items {
            w.serialize(item)?;
        }
        w.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sorted class labels.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.items.iter().map(|i| i.class_label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Sorted patient ids per class.
    pub fn patients_by_class(&self) -> BTreeMap<String, Vec<String>> {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for item in &self.items {
            map.entry(item.class_label.clone())
                .or_default()
                .insert(item.patient_id.clone());
        }
        map.into_iter().map(|(c, p)| (c, p.into_iter().collect())).collect()
    }

    /// Indices of items in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].split == Some(split))
            .collect()
    }

    pub fn patients_in(&self, split: Split) -> BTreeSet<&str> {
        self.items
            .iter()
            .filter(|i| i.split == Some(split))
            .map(|i| i.patient_id.as_str())
            .collect()
    }

    /// Checks that no patient spans two splits or two classes.
    pub fn check_patient_exclusive(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, (&str, Option<Split>)> = BTreeMap::new();
        for item in &self.items {
            let entry = (item.class_label.as_str(), item.split);
            match seen.get(item.patient_id.as_str()) {
                Some(prev) if *prev != entry => {
                    return Err(Error::InvalidArgument(format!(
                        "patient `{}` appears under both {:?} and {:?}",
                        item.patient_id, prev, entry
                    )))
                }
                _ => {
                    seen.insert(&item.patient_id, entry);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 5.0,
            val: 3.0,
            test: 2.0,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|r| !r.is_finite() || *r < 0.0) || a.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {self}")));
        }
        Ok(())
    }

    /// Per-split patient counts for `n` patients: largest-remainder rounding,
    /// then at least one patient for every split with a nonzero ratio.
    pub fn counts(&self, n: usize) -> Option<[usize; 3]> {
        let a = self.as_array();
        let needed = a.iter().filter(|r| **r > 0.0).count();
        if n < needed {
            return None;
        }
        let total: f64 = a.iter().sum();
        let exact: Vec<f64> = a.iter().map(|r| r / total * n as f64).collect();
        let mut counts = [0usize; 3];
        for i in 0..3 {
            counts[i] = exact[i].floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())));
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if a[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        for i in 0..3 {
            if a[i] > 0.0 && counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))?;
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
        Some(counts)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split ratios must look like 5:3:2, got `{s}`")))?;
        let [train, val, test] = parts[..] else {
            return Err(Error::Config(format!("split ratios need three parts, got `{s}`")));
        };
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }
}

/// Assigns whole patients to splits, per class, with a seeded shuffle.
pub fn split_by_patient(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut check = manifest.clone();
    for item in &mut check.items {
        item.split = None;
    }
    check.check_patient_exclusive()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (class, mut patients) in manifest.patients_by_class() {
        let required = [ratios.train, ratios.val, ratios.test].iter().filter(|r| **r > 0.0).count();
        let counts = ratios.counts(patients.len()).ok_or(Error::TooFewPatients {
            class: class.clone(),
            found: patients.len(),
            required,
        })?;
        patients.shuffle(&mut rng);
        let mut it = patients.into_iter();
        for (split, &count) in Split::ALL.iter().zip(counts.iter()) {
            for p in it.by_ref().take(count) {
                assignment.insert(p, *split);
            }
        }
    }
    let mut out = manifest.clone();
    for item in &mut out.items {
        item.split = Some(assignment[&item.patient_id]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Class labels in episode order; position is the episode label.
    pub classes: Vec<String>,
    /// `support[c]` holds `K` manifest indices for class `c`.
    pub support: Vec<Vec<usize>>,
    /// `query[c]` holds `Q` manifest indices for class `c`.
    pub query: Vec<Vec<usize>>,
}

impl EpisodeSpec {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Flattened query indices with their episode labels.
    pub fn labelled_queries(&self) -> Vec<(usize, usize)> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(c, q)| q.iter().map(move |&i| (i, c)))
            .collect()
    }

    /// True when, for every class, support and query patients are disjoint
    /// and all items carry the class label.
    pub fn is_subject_disjoint(&self, manifest: &DatasetManifest) -> bool {
        self.classes.iter().enumerate().all(|(c, label)| {
            let pats = |idx: &[usize]| -> BTreeSet<&str> {
                idx.iter().map(|&i| manifest.items[i].patient_id.as_str()).collect()
            };
            let labels_ok = self.support[c]
                .iter()
                .chain(&self.query[c])
                .all(|&i| &manifest.items[i].class_label == label);
            labels_ok && pats(&self.support[c]).is_disjoint(&pats(&self.query[c]))
        })
    }
}

#[derive(Clone, Debug)]
struct ClassPool {
    label: String,
    /// Item indices per patient, patients sorted by id.
    patients: Vec<Vec<usize>>,
    /// Feasible support-side patient masks, when enumerated.
    masks: Option<Vec<u32>>,
}

/// Precomputed per-class pools for one split and episode shape.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pools: Vec<ClassPool>,
    n: usize,
    k: usize,
    q: usize,
}

impl EpisodeSampler {
    pub fn new(manifest: &DatasetManifest, split: Split, n: usize, k: usize, q: usize) -> Result<Self> {
        if n < 2 || k == 0 || q == 0 {
            return Err(Error::InvalidArgument(format!(
                "episode shape needs N >= 2, K >= 1, Q >= 1; got {n}/{k}/{q}"
            )));
        }
        let mut by_class: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
        for (i, item) in manifest.items.iter().enumerate() {
            if item.split == Some(split) {
                by_class
                    .entry(&item.class_label)
                    .or_default()
                    .entry(&item.patient_id)
                    .or_default()
                    .push(i);
            }
        }
        if by_class.len() < n {
            return Err(Error::InvalidArgument(format!(
                "split {split} has {} classes, episode needs {n}",
                by_class.len()
            )));
        }
        let mut pools = Vec::with_capacity(by_class.len());
        for (label, patients) in by_class {
            let patients: Vec<Vec<usize>> = patients.into_values().collect();
            let infeasible = |reason: String| Error::InfeasibleClass {
                class: label.to_string(),
                reason,
            };
            if patients.len() < 2 {
                return Err(infeasible("only one patient, support and query cannot be disjoint".into()));
            }
            let masks = if patients.len() <= MAX_ENUMERATED_PATIENTS {
                let p = patients.len();
                let masks: Vec<u32> = (1..(1u32 << p) - 1)
                    .filter(|&m| partition_ok(&patients, m, k, q))
                    .collect();
                if masks.is_empty() {
                    return Err(infeasible(format!(
                        "no patient partition gives {k} support and {q} query items"
                    )));
                }
                Some(masks)
            } else {
                None
            };
            pools.push(ClassPool {
                label: label.to_string(),
                patients,
                masks,
            });
        }
        Ok(Self { pools, n, k, q })
    }

    pub fn num_classes(&self) -> usize {
        self.pools.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<EpisodeSpec> {
        let mut chosen = index::sample(rng, self.pools.len(), self.n).into_vec();
        chosen.sort_unstable();
        let mut spec = EpisodeSpec {
            classes: Vec::with_capacity(self.n),
            support: Vec::with_capacity(self.n),
            query: Vec::with_capacity(self.n),
        };
        for c in chosen {
            let pool = &self.pools[c];
            let mask = match &pool.masks {
                Some(masks) => masks[rng.gen_range(0..masks.len())],
                None => self.random_mask(pool, rng)?,
            };
            let (mut s_items, mut q_items) = (Vec::new(), Vec::new());
            for (p, items) in pool.patients.iter().enumerate() {
                if mask >> p & 1 == 1 {
                    s_items.extend_from_slice(items);
                } else {
                    q_items.extend_from_slice(items);
                }
            }
            let pick = |items: &[usize], m: usize, rng: &mut R| -> Vec<usize> {
                index::sample(rng, items.len(), m).into_iter().map(|i| items[i]).collect()
            };
            spec.classes.push(pool.label.clone());
            spec.support.push(pick(&s_items, self.k, rng));
            spec.query.push(pick(&q_items, self.q, rng));
        }
        Ok(spec)
    }

    fn random_mask<R: Rng>(&self, pool: &ClassPool, rng: &mut R) -> Result<u32> {
        // Large classes: draw random bipartitions until one is feasible.
        let p = pool.patients.len().min(32);
        for _ in 0..PARTITION_RETRIES {
            let m: u32 = rng.gen::<u32>() & (u32::MAX >> (32 - p));
            if m != 0 && m.count_ones() < p as u32 && partition_ok(&pool.patients, m, self.k, self.q) {
                return Ok(m);
            }
        }
        Err(Error::InfeasibleClass {
            class: pool.label.clone(),
            reason: format!("no feasible patient partition found for K={} Q={}", self.k, self.q),
        })
    }
}

fn partition_ok(patients: &[Vec<usize>], mask: u32, k: usize, q: usize) -> bool {
    let (mut s, mut qn) = (0, 0);
    for (p, items) in patients.iter().enumerate() {
        if mask >> p & 1 == 1 {
            s += items.len();
        } else {
            qn += items.len();
        }
    }
    s >= k && qn >= q
}

pub fn sample_episode<R: Rng>(
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<EpisodeSpec> {
    EpisodeSampler::new(manifest, split, n, k, q)?.sample(rng)
}

/// Reproducible stream of independent episodes.
pub struct EpisodeStream {
    sampler: EpisodeSampler,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl Iterator for EpisodeStream {
    type Item = Result<EpisodeSpec>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.sampler.sample(&mut self.rng))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

pub fn episode_batcher(
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    k: usize,
    q: usize,
    count: usize,
    seed: u64,
) -> Result<EpisodeStream> {
    Ok(EpisodeStream {
        sampler: EpisodeSampler::new(manifest, split, n, k, q)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
        remaining: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn manifest(patients: &[usize], per_patient: usize) -> DatasetManifest {
        let mut items = Vec::new();
        for (c, &np) in patients.iter().enumerate() {
            for p in 0..np {
                for i in 0..per_patient {
                    items.push(ManifestItem {
                        item_id: format!("c{c}p{p}i{i}"),
                        relative_path: format!("c{c}/p{p}_{i}.png"),
                        class_label: format!("class{c}"),
                        patient_id: format!("c{c}p{p}"),
                        split: None,
                    });
                }
            }
        }
        DatasetManifest::new(items)
    }

    #[test]
    fn exact_ratio_counts() {
        let m = split_by_patient(&manifest(&[10, 10], 2), SplitRatios::default(), 1).unwrap();
        for class in m.classes() {
            for (split, want) in Split::ALL.iter().zip([5, 3, 2]) {
                let n = m
                    .items
                    .iter()
                    .filter(|i| i.class_label == class && i.split == Some(*split))
                    .map(|i| &i.patient_id)
                    .collect::<BTreeSet<_>>()
                    .len();
                assert_eq!(n, want);
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let base = manifest(&[7, 9], 3);
        let a = split_by_patient(&base, SplitRatios::default(), 4).unwrap();
        let b = split_by_patient(&base, SplitRatios::default(), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uneven_classes_never_leak_patients() {
        let m = split_by_patient(&manifest(&[5, 6, 3, 7], 4), SplitRatios::default(), 2).unwrap();
        m.check_patient_exclusive().unwrap();
        let sets: Vec<_> = Split::ALL.iter().map(|s| m.patients_in(*s)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        for class in m.classes() {
            for s in Split::ALL {
                assert!(m.items.iter().any(|i| i.class_label == class && i.split == Some(s)));
            }
        }
    }

    #[test]
    fn too_few_patients_names_class() {
        let err = split_by_patient(&manifest(&[5, 2], 1), SplitRatios::default(), 0).unwrap_err();
        match err {
            Error::TooFewPatients { class, found, required } => {
                assert_eq!(class, "class1");
                assert_eq!((found, required), (2, 3));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_ratio_split_is_allowed() {
        let r: SplitRatios = "3:0:2".parse().unwrap();
        assert_eq!(r.counts(5), Some([3, 0, 2]));
        assert_eq!(SplitRatios::default().counts(5), Some([3, 1, 1]));
        assert!("1:2".parse::<SplitRatios>().is_err());
        assert!("a:b:c".parse::<SplitRatios>().is_err());
    }

    proptest! {
        #[test]
        fn counts_sum_and_cover(n in 3usize..200, a in 0.1f64..10.0, b in 0.1f64..10.0, c in 0.1f64..10.0) {
            let r = SplitRatios { train: a, val: b, test: c };
            let counts = r.counts(n).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            prop_assert!(counts.iter().all(|&x| x >= 1));
        }
    }

    fn all_train(m: DatasetManifest) -> DatasetManifest {
        let mut m = m;
        for i in &mut m.items {
            i.split = Some(Split::Train);
        }
        m
    }

    #[test]
    fn two_patient_class_always_separates() {
        let m = all_train(manifest(&[2, 2], 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let ep = sample_episode(&m, Split::Train, 2, 1, 1, &mut rng).unwrap();
            assert!(ep.is_subject_disjoint(&m));
        }
    }

    #[test]
    fn infeasible_requests_fail() {
        let m = all_train(manifest(&[2, 2], 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_episode(&m, Split::Train, 3, 1, 1, &mut rng).is_err());
        let err = sample_episode(&m, Split::Train, 2, 1, 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InfeasibleClass { .. }));
        let single = all_train(manifest(&[1, 2], 3));
        let err = sample_episode(&single, Split::Train, 2, 1, 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InfeasibleClass { class, .. } if class == "class0"));
    }

    #[test]
    fn sampled_episodes_are_disjoint_and_labelled() {
        let m = split_by_patient(&manifest(&[5, 6, 3, 7], 8), "2:0:1".parse().unwrap(), 3).unwrap();
        let stream = episode_batcher(&m, Split::Train, 4, 1, 2, 1000, 9).unwrap();
        let mut n = 0;
        for ep in stream {
            let ep = ep.unwrap();
            assert!(ep.is_subject_disjoint(&m));
            assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 4);
            assert!(ep.classes.windows(2).all(|w| w[0] < w[1]));
            n += 1;
        }
        assert_eq!(n, 1000);
    }

    #[test]
    fn batcher_counts_and_determinism() {
        let m = all_train(manifest(&[3, 3, 3], 4));
        assert_eq!(episode_batcher(&m, Split::Train, 2, 1, 1, 0, 1).unwrap().count(), 0);
        let a: Vec<_> = episode_batcher(&m, Split::Train, 2, 2, 3, 100, 5).unwrap().map(|e| e.unwrap()).collect();
        let b: Vec<_> = episode_batcher(&m, Split::Train, 2, 2, 3, 100, 5).unwrap().map(|e| e.unwrap()).collect();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
    }

    #[test]
    fn large_classes_use_random_partitions() {
        let m = all_train(manifest(&[20, 20], 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let ep = sample_episode(&m, Split::Train, 2, 5, 5, &mut rng).unwrap();
            assert!(ep.is_subject_disjoint(&m));
        }
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = split_by_patient(&manifest(&[3, 3, 3], 2), SplitRatios::default(), 0).unwrap();
        let mut buf = Vec::new();
        m.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("item_id,relative_path,class_label,patient_id,split"));
        assert_eq!(DatasetManifest::from_reader(&buf[..]).unwrap(), m);
        let bare = "item_id,relative_path,class_label,patient_id\na,a.png,x,p1\n";
        let parsed = DatasetManifest::from_reader(bare.as_bytes()).unwrap();
        assert_eq!(parsed.items[0].split, None);
    }

    #[test]
    fn patient_in_two_classes_is_rejected() {
        let mut m = manifest(&[3, 3, 3], 1);
        m.items[0].patient_id = "c1p0".into();
        assert!(split_by_patient(&m, SplitRatios::default(), 0).is_err());
    }
}

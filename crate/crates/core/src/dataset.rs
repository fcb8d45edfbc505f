//! Synthetic category-prototype world and the category-balanced split
//! between the two agents.
//!
//! Captions follow a slot template: position `s` holds the token of the
//! image's category from super-category `s`, or that slot's filler token.
//! Worlds therefore have exactly `L` super-categories.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::density::normal_sample;
use crate::agent::{Caption, ModelDims, Observation};
use crate::error::{Error, Result};
use crate::metrics::{match_categories, Lexicon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub super_category: usize,
    /// Mean observation of an image showing only this category.
    pub prototype: Vec<f64>,
    /// Tokens that name the category; the first one is used in captions.
    pub lexicon: Vec<usize>,
    /// Relative frequency within its super-category.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub vocab: usize,
    pub caption_len: usize,
    pub obs_dim: usize,
    pub categories: Vec<CategorySpec>,
    pub common: usize,
    /// Filler token of every caption slot.
    pub fillers: Vec<usize>,
    /// Probabilities of an image showing 1, 2, 3, ... categories.
    pub categories_per_image: Vec<f64>,
    /// Relative frequency of each super-category.
    pub super_weights: Vec<f64>,
    pub obs_noise: f64,
    pub images: usize,
    pub seed: u64,
    #[serde(default)]
    pub observation: ObservationModel,
    /// Background vector of every caption slot; used by
    /// [`ObservationModel::SlotMean`] only.
    #[serde(default)]
    pub backgrounds: Vec<Vec<f64>>,
}

/// How an image's noise-free observation is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationModel {
    /// Mean of the prototypes of the shown categories.
    #[default]
    CategoryMean,
    /// Mean over the `L` caption slots: the prototype of the category in a
    /// slot, or the slot background when the slot holds a filler. This is the
    /// map the mean-of-embeddings text encoder can represent exactly.
    SlotMean,
}

impl WorldSpec {
    /// Desk-scale default: 12 categories in 4 super-categories, V = 24,
    /// L = 4, D_o = 16, 2,400 images. Prototypes are drawn from `seed`.
    pub fn desk_default(seed: u64) -> Self {
        let (vocab, caption_len, obs_dim) = (24, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_3071d);
        let names = [
            "person", "dog", "cat", "car", "bus", "bicycle", "apple", "pizza", "cake", "chair", "sofa", "table",
        ];
        let weights = [3.0, 1.0, 1.0, 1.4, 1.0, 0.7, 1.3, 1.0, 0.8, 1.2, 1.0, 0.9];
        let categories = names
            .iter()
            .enumerate()
            .map(|(i, name)| CategorySpec {
                name: (*name).to_string(),
                super_category: i / 3,
                prototype: (0..obs_dim).map(|_| normal_sample(&mut rng, 0.0, 1.0)).collect(),
                lexicon: vec![i],
                weight: weights[i],
            })
            .collect();
        let backgrounds = (0..caption_len)
            .map(|_| (0..obs_dim).map(|_| normal_sample(&mut rng, 0.0, 1.0)).collect())
            .collect();
        Self {
            vocab,
            caption_len,
            obs_dim,
            categories,
            common: 0,
            fillers: vec![12, 13, 14, 15],
            categories_per_image: vec![0.2, 0.45, 0.35],
            super_weights: vec![1.6, 1.0, 1.0, 1.0],
            obs_noise: 0.15,
            images: 2400,
            seed,
            observation: ObservationModel::SlotMean,
            backgrounds,
        }
    }

    pub fn dims(&self, latent: usize) -> Result<ModelDims> {
        ModelDims::new(self.vocab, latent, self.caption_len, self.obs_dim)
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon(self.categories.iter().map(|c| c.lexicon.clone()).collect())
    }

    pub fn super_categories(&self) -> usize {
        self.caption_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("world spec: {m}")));
        if self.vocab == 0 || self.caption_len == 0 || self.obs_dim == 0 {
            return bad("vocab, caption_len and obs_dim must be positive".into());
        }
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        if self.common >= self.categories.len() {
            return bad(format!("common category {} does not exist", self.common));
        }
        if self.fillers.len() != self.caption_len {
            return bad(format!("{} fillers for {} slots", self.fillers.len(), self.caption_len));
        }
        if self.super_weights.len() != self.caption_len {
            return bad("one super-category weight per caption slot is required".into());
        }
        if self.categories_per_image.is_empty() || self.categories_per_image.len() > self.caption_len {
            return bad("categories_per_image must list 1..=L probabilities".into());
        }
        let positive = |w: &[f64]| w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().any(|x| *x > 0.0);
        if !positive(&self.categories_per_image) || !positive(&self.super_weights) {
            return bad("weights must be non-negative with a positive entry".into());
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return bad("obs_noise must be non-negative".into());
        }
        if self.images == 0 {
            return bad("images must be positive".into());
        }
        if self.observation == ObservationModel::SlotMean
            && (self.backgrounds.len() != self.caption_len
                || self.backgrounds.iter().any(|b| b.len() != self.obs_dim || b.iter().any(|x| !x.is_finite())))
        {
            return bad(format!("slot-mean observations need {} finite backgrounds of length {}", self.caption_len, self.obs_dim));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.super_category >= self.caption_len {
                return bad(format!("category {i} has super-category {} >= L", c.super_category));
            }
            if c.prototype.len() != self.obs_dim || c.prototype.iter().any(|x| !x.is_finite()) {
                return bad(format!("category {i} prototype must have {} finite entries", self.obs_dim));
            }
            if c.lexicon.is_empty() {
                return bad(format!("category {i} has an empty lexicon"));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return bad(format!("category {i} weight must be positive"));
            }
        }
        self.lexicon().check(self.vocab).or_else(|e| bad(e.to_string()))?;
        for &f in &self.fillers {
            if f >= self.vocab {
                return bad(format!("filler {f} outside vocabulary"));
            }
            if self.categories.iter().any(|c| c.lexicon.contains(&f)) {
                return bad(format!("filler {f} is also a category token"));
            }
        }
        Ok(())
    }

    /// Ground-truth caption of an image showing `categories`.
    pub fn caption(&self, categories: &BTreeSet<usize>) -> Caption {
        let mut tokens = self.fillers.clone();
        for &c in categories {
            let spec = &self.categories[c];
            tokens[spec.super_category] = spec.lexicon[0];
        }
        Caption::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    A,
    B,
    Others,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub observation: Observation,
    pub categories: BTreeSet<usize>,
    pub caption: Caption,
    pub split: SplitTag,
}

/// Samples every image of the world.
///
/// Per image: the number of categories, then that many distinct
/// super-categories, one category in each, then the observation noise.
pub fn generate_world(spec: &WorldSpec) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count_dist = WeightedIndex::new(&spec.categories_per_image).map_err(|e| Error::Config(e.to_string()))?;
    let members: Vec<Vec<usize>> = (0..spec.super_categories())
        .map(|s| (0..spec.categories.len()).filter(|&c| spec.categories[c].super_category == s).collect())
        .collect();
    let available: Vec<usize> = (0..spec.super_categories()).filter(|&s| !members[s].is_empty()).collect();
    let mut records = Vec::with_capacity(spec.images);
    for _ in 0..spec.images {
        let n = (count_dist.sample(&mut rng) + 1).min(available.len());
        let mut supers = available.clone();
        let mut chosen = Vec::with_capacity(n);
        for _ in 0..n {
            let w: Vec<f64> = supers.iter().map(|&s| spec.super_weights[s]).collect();
            let i = WeightedIndex::new(&w).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng);
            chosen.push(supers.remove(i));
        }
        let mut categories = BTreeSet::new();
        for s in chosen {
            let w: Vec<f64> = members[s].iter().map(|&c| spec.categories[c].weight).collect();
            let i = WeightedIndex::new(&w).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng);
            categories.insert(members[s][i]);
        }
        let parts: Vec<&[f64]> = match spec.observation {
            ObservationModel::CategoryMean => categories.iter().map(|&c| spec.categories[c].prototype.as_slice()).collect(),
            ObservationModel::SlotMean => {
                let mut slots: Vec<&[f64]> = spec.backgrounds.iter().map(Vec::as_slice).collect();
                for &c in &categories {
                    slots[spec.categories[c].super_category] = &spec.categories[c].prototype;
                }
                slots
            }
        };
        let k = parts.len() as f64;
        let values = (0..spec.obs_dim)
            .map(|d| {
                let mean = parts.iter().map(|p| p[d]).sum::<f64>() / k;
                if spec.obs_noise == 0.0 {
                    mean
                } else {
                    normal_sample(&mut rng, mean, spec.obs_noise)
                }
            })
            .collect();
        let caption = spec.caption(&categories);
        records.push(ImageRecord { observation: Observation::new(values)?, categories, caption, split: SplitTag::Unassigned });
    }
    Ok(records)
}

/// Images annotated with each category.
pub fn category_counts(spec: &WorldSpec, records: &[ImageRecord]) -> Vec<usize> {
    let mut counts = vec![0; spec.categories.len()];
    for r in records {
        for &c in &r.categories {
            counts[c] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub images_a: usize,
    pub images_b: usize,
    pub categories_a: usize,
    pub categories_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPartition {
    pub common: usize,
    pub a_only: Vec<usize>,
    pub b_only: Vec<usize>,
    /// Image counts of the non-common categories on each side.
    pub balance: BalanceReport,
}

impl CategoryPartition {
    pub fn side_of(&self, category: usize) -> Option<SplitTag> {
        if self.a_only.contains(&category) {
            Some(SplitTag::A)
        } else if self.b_only.contains(&category) {
            Some(SplitTag::B)
        } else {
            None
        }
    }
}

/// Assigns every non-common category to side a or b.
///
/// Super-categories are visited in index order; inside each, categories go
/// in descending image count (then ascending id) to the side with fewer
/// images so far, ties to the side with fewer categories, then to a.
pub fn split_categories(spec: &WorldSpec, counts: &[usize]) -> Result<CategoryPartition> {
    if counts.len() != spec.categories.len() {
        return Err(Error::Input(format!("{} counts for {} categories", counts.len(), spec.categories.len())));
    }
    let mut p = CategoryPartition {
        common: spec.common,
        a_only: Vec::new(),
        b_only: Vec::new(),
        balance: BalanceReport { images_a: 0, images_b: 0, categories_a: 0, categories_b: 0 },
    };
    for s in 0..spec.super_categories() {
        let mut cats: Vec<usize> = (0..spec.categories.len())
            .filter(|&c| c != spec.common && spec.categories[c].super_category == s)
            .collect();
        cats.sort_by(|&x, &y| counts[y].cmp(&counts[x]).then(x.cmp(&y)));
        for c in cats {
            let b = &mut p.balance;
            let to_a = (b.images_a, b.categories_a) <= (b.images_b, b.categories_b);
            if to_a {
                p.a_only.push(c);
                b.images_a += counts[c];
                b.categories_a += 1;
            } else {
                p.b_only.push(c);
                b.images_b += counts[c];
                b.categories_b += 1;
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub partition: CategoryPartition,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub others: Vec<usize>,
}

/// Routes every record and sets its tag. An image whose categories all lie
/// in `common ∪ a_only` goes to a, symmetric for b, anything else to others.
/// Images showing only the common category go to a at even record index
/// and to b at odd.
pub fn route_images(records: &mut [ImageRecord], partition: &CategoryPartition) -> SplitResult {
    let mut out = SplitResult { partition: partition.clone(), a: Vec::new(), b: Vec::new(), others: Vec::new() };
    for (i, r) in records.iter_mut().enumerate() {
        let fits = |side: &[usize]| r.categories.iter().all(|c| *c == partition.common || side.contains(c));
        let tag = match (fits(&partition.a_only), fits(&partition.b_only)) {
            (true, true) if i % 2 == 0 => SplitTag::A,
            (true, true) => SplitTag::B,
            (true, false) => SplitTag::A,
            (false, true) => SplitTag::B,
            (false, false) => SplitTag::Others,
        };
        r.split = tag;
        match tag {
            SplitTag::A => out.a.push(i),
            SplitTag::B => out.b.push(i),
            _ => out.others.push(i),
        }
    }
    out
}

/// Generates, splits and routes a world in one go.
pub fn build_world(spec: &WorldSpec) -> Result<(Vec<ImageRecord>, SplitResult)> {
    let mut records = generate_world(spec)?;
    let partition = split_categories(spec, &category_counts(spec, &records))?;
    let split = route_images(&mut records, &partition);
    Ok((records, split))
}

/// Fraction of records whose matched categories equal their annotations.
pub fn caption_round_trip_rate(spec: &WorldSpec, records: &[ImageRecord]) -> f64 {
    if records.is_empty() {
        return 1.0;
    }
    let lexicon = spec.lexicon();
    let ok = records.iter().filter(|r| match_categories(&r.caption, &lexicon) == r.categories).count();
    ok as f64 / records.len() as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    world: WorldSpec,
}

/// JSON lines: a `{"world": ...}` header, then one record per line.
pub fn write_dataset<W: Write>(mut w: W, spec: &WorldSpec, records: &[ImageRecord]) -> Result<()> {
    serde_json::to_writer(&mut w, &Header { world: spec.clone() })?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(WorldSpec, Vec<ImageRecord>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Input("dataset is empty".into()))??;
    let spec = serde_json::from_str::<Header>(&header)?.world;
    spec.validate()?;
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("dataset line {}: {e}", n + 2)))?;
        rec.caption.check(spec.vocab, spec.caption_len)?;
        if rec.observation.dim() != spec.obs_dim {
            return Err(Error::Input(format!("dataset line {}: observation dimension", n + 2)));
        }
        if let Some(c) = rec.categories.iter().find(|&&c| c >= spec.categories.len()) {
            return Err(Error::Input(format!("dataset line {}: unknown category {c}", n + 2)));
        }
        records.push(rec);
    }
    Ok((spec, records))
}

/// Deterministic subsample of `indices` of size `n` (all of them if fewer).
pub fn subsample<R: Rng + ?Sized>(indices: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v.sort_unstable();
    v
}

//! Seeded synthetic scenes on a token grid.
//!
//! Each person occupies a contiguous block of grid cells. Its tokens carry a
//! presence flag, one channel per atomic class it takes part in, a code
//! shared with the other members of its social group, and its position
//! inside the block. Everything is drawn from one ChaCha stream, so a seed
//! fully determines the dataset.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Corners;
use crate::data::record::{Group, ImageRecord};
use crate::data::taxonomy::{taxonomy, Arity, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GROUP_CODE_DIM: usize = 4;
const PRESENCE: usize = 0;
const CLASS_BASE: usize = 1;
const CODE_BASE: usize = CLASS_BASE + NUM_CLASSES;
const LOCAL_BASE: usize = CODE_BASE + GROUP_CODE_DIM;

/// Channels per token.
pub const TOKEN_DIM: usize = LOCAL_BASE + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub images: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    #[serde(default = "default_cell_px")]
    pub cell_px: u32,
    /// Person block extents in cells, inclusive ranges.
    #[serde(default = "default_person_w")]
    pub person_w: [usize; 2],
    #[serde(default = "default_person_h")]
    pub person_h: [usize; 2],
    /// Total number of annotated interactions (groups) to plant.
    pub annotations: usize,
    /// Relative weight per atomic class name.
    pub mix: BTreeMap<String, u32>,
}

fn default_cell_px() -> u32 {
    32
}
fn default_person_w() -> [usize; 2] {
    [1, 2]
}
fn default_person_h() -> [usize; 2] {
    [2, 3]
}

impl SynthSpec {
    /// 16 images of 2–4 people with six classes spanning all broad types.
    pub fn standard() -> Self {
        let mix = ["mutual-gaze", "handshake", "smile", "neutral", "wave", "arm-cross"]
            .iter()
            .map(|n| (n.to_string(), 1))
            .collect();
        SynthSpec {
            images: 16,
            persons_min: 2,
            persons_max: 4,
            grid_w: 8,
            grid_h: 8,
            cell_px: default_cell_px(),
            person_w: default_person_w(),
            person_h: default_person_h(),
            annotations: 48,
            mix,
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Exact per-class counts: proportional shares with largest remainders
    /// going to the lowest class ids.
    pub fn class_counts(&self) -> Result<Vec<(usize, usize)>> {
        let tax = taxonomy();
        let mut weights: Vec<(usize, u64)> = self
            .mix
            .iter()
            .map(|(name, &w)| Ok((tax.by_name(name)?.id, w as u64)))
            .collect::<Result<_>>()?;
        weights.sort_unstable();
        let total: u64 = weights.iter().map(|w| w.1).sum();
        if total == 0 {
            return Err(Error::Generation("class mix has zero total weight".into()));
        }
        let n = self.annotations as u64;
        let mut counts: Vec<(usize, usize, u64)> = weights
            .iter()
            .map(|&(id, w)| (id, (n * w / total) as usize, (n * w) % total))
            .collect();
        let assigned: usize = counts.iter().map(|c| c.1).sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].2.cmp(&counts[a].2).then(a.cmp(&b)));
        for &k in order.iter().take(self.annotations - assigned) {
            counts[k].1 += 1;
        }
        Ok(counts.into_iter().map(|(id, c, _)| (id, c)).collect())
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generation(m.to_string()));
        if self.images == 0 {
            return bad("at least one image is required");
        }
        if self.persons_min == 0 || self.persons_min > self.persons_max {
            return bad("persons range must be non-empty and positive");
        }
        if self.grid_w == 0 || self.grid_h == 0 || self.cell_px == 0 {
            return bad("grid and cell size must be positive");
        }
        for r in [self.person_w, self.person_h] {
            if r[0] == 0 || r[0] > r[1] {
                return bad("person extents must be positive ranges");
            }
        }
        if self.person_w[1] > self.grid_w || self.person_h[1] > self.grid_h {
            return bad("persons don't fit the grid");
        }
        Ok(())
    }
}

/// Token grids keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub token_count: usize,
    pub token_dim: usize,
    pub images: Vec<(u64, Tensor)>,
}

const TOKEN_MAGIC: &[u8; 8] = b"NVITOK1\0";

impl TokenSet {
    pub fn get(&self, image_id: u64) -> Option<&Tensor> {
        self.images.iter().find(|(id, _)| *id == image_id).map(|(_, t)| t)
    }

    /// Magic, then `count, tokens, dim` as u32 LE, then per image a u64 id
    /// followed by `tokens × dim` f64 LE values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TOKEN_MAGIC)?;
        for v in [self.images.len(), self.token_count, self.token_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (id, t) in &self.images {
            w.write_all(&id.to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TOKEN_MAGIC {
            return Err(Error::validation("tokens", "bad magic"));
        }
        let mut u32s = [0usize; 3];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b) as usize;
        }
        let [count, token_count, token_dim] = u32s;
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let id = u64::from_le_bytes(b);
            let mut data = vec![0.0; token_count * token_dim];
            for v in &mut data {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            images.push((id, Tensor::new(vec![token_count, token_dim], data)?));
        }
        Ok(TokenSet {
            token_count,
            token_dim,
            images,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// What the generator planted, for cross-checking statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthPlan {
    pub seed: u64,
    pub persons_per_image: Vec<usize>,
    /// `(atomic id, count)` in id order.
    pub class_counts: Vec<(usize, usize)>,
    /// Group-arity group size → count.
    pub group_sizes: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub tokens: TokenSet,
    pub records: Vec<ImageRecord>,
    pub plan: SynthPlan,
}

#[derive(Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

/// Cycles through images in a fixed order, handing out free slots.
fn deal(instances: &[usize], capacity: &mut [usize], order: &[usize]) -> Vec<Vec<usize>> {
    let mut per_image = vec![Vec::new(); capacity.len()];
    let mut cursor = 0;
    for &inst in instances {
        while capacity[order[cursor % order.len()]] == 0 {
            cursor += 1;
        }
        let img = order[cursor % order.len()];
        capacity[img] -= 1;
        per_image[img].push(inst);
        cursor += 1;
    }
    per_image
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.check()?;
    let tax = taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_counts = spec.class_counts()?;

    let persons: Vec<usize> = (0..spec.images)
        .map(|_| rng.gen_range(spec.persons_min..=spec.persons_max))
        .collect();

    let mut group_instances = Vec::new();
    let mut single_instances = Vec::new();
    for &(id, count) in &class_counts {
        let list = match tax.entries()[id].arity() {
            Arity::Group => &mut group_instances,
            Arity::Individual => &mut single_instances,
        };
        list.extend(std::iter::repeat_n(id, count));
    }
    group_instances.shuffle(&mut rng);
    single_instances.shuffle(&mut rng);

    let mut group_cap: Vec<usize> = persons.iter().map(|p| p / 2).collect();
    let mut single_cap = persons.clone();
    if group_instances.len() > group_cap.iter().sum() {
        return Err(Error::Generation(format!(
            "{} group interactions need more people than the {} images provide",
            group_instances.len(),
            spec.images
        )));
    }
    if single_instances.len() > single_cap.iter().sum() {
        return Err(Error::Generation(format!(
            "{} individual interactions exceed the number of people",
            single_instances.len()
        )));
    }
    let mut order: Vec<usize> = (0..spec.images).collect();
    order.shuffle(&mut rng);
    let groups_per_image = deal(&group_instances, &mut group_cap, &order);
    let singles_per_image = deal(&single_instances, &mut single_cap, &order);

    let (gw, gh) = (spec.grid_w, spec.grid_h);
    let cell = spec.cell_px as f64;
    let (width, height) = (gw as u32 * spec.cell_px, gh as u32 * spec.cell_px);
    let mut images = Vec::with_capacity(spec.images);
    let mut records = Vec::with_capacity(spec.images);
    let mut group_sizes = BTreeMap::new();

    for img in 0..spec.images {
        let image_id = img as u64;
        // place people
        let mut rects: Vec<Rect> = Vec::with_capacity(persons[img]);
        for _ in 0..persons[img] {
            let w = rng.gen_range(spec.person_w[0]..=spec.person_w[1]);
            let h = rng.gen_range(spec.person_h[0]..=spec.person_h[1]);
            let free: Vec<Rect> = (0..=gh - h)
                .flat_map(|y| (0..=gw - w).map(move |x| Rect { x, y, w, h }))
                .filter(|r| rects.iter().all(|o| !r.overlaps(o)))
                .collect();
            let Some(&r) = free.choose(&mut rng) else {
                return Err(Error::Generation(format!(
                    "image {image_id}: persons don't fit the {gw}x{gh} grid"
                )));
            };
            rects.push(r);
        }
        let individuals: Vec<Corners> = rects
            .iter()
            .map(|r| {
                Corners::new(
                    r.x as f64 * cell,
                    r.y as f64 * cell,
                    (r.x + r.w) as f64 * cell,
                    (r.y + r.h) as f64 * cell,
                )
            })
            .collect();

        // group membership: two people each, leftovers may join
        let mut free_people: Vec<usize> = (0..persons[img]).collect();
        free_people.shuffle(&mut rng);
        let mut memberships: Vec<(usize, Vec<usize>)> = groups_per_image[img]
            .iter()
            .map(|&class| (class, free_people.drain(..2).collect()))
            .collect();
        if !memberships.is_empty() {
            for p in free_people {
                if rng.gen_bool(0.5) {
                    let k = rng.gen_range(0..memberships.len());
                    memberships[k].1.push(p);
                }
            }
        }
        let mut singles: Vec<usize> = (0..persons[img]).collect();
        singles.shuffle(&mut rng);
        let mut codes: Vec<usize> = (0..1 << GROUP_CODE_DIM).collect();
        codes.shuffle(&mut rng);

        let mut tokens = Tensor::zeros(&[gw * gh, TOKEN_DIM]);
        let mut mark = |person: usize, channel: usize, value: f64| {
            let r = rects[person];
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    tokens.set(y * gw + x, channel, value);
                }
            }
        };
        for p in 0..persons[img] {
            mark(p, PRESENCE, 1.0);
        }
        let mut groups = Vec::new();
        for (k, (class, members)) in memberships.iter_mut().enumerate() {
            members.sort_unstable();
            for &m in members.iter() {
                mark(m, CLASS_BASE + *class, 1.0);
                for bit in 0..GROUP_CODE_DIM {
                    let v = if codes[k] >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    mark(m, CODE_BASE + bit, v);
                }
            }
            *group_sizes.entry(members.len()).or_insert(0) += 1;
            let cover = Corners::cover(members.iter().map(|&m| individuals[m])).unwrap();
            groups.push(Group {
                members: members.clone(),
                broad: tax.entries()[*class].broad,
                atomic: *class,
                bbox: cover.normalized(width as f64, height as f64),
            });
        }
        for (&class, &person) in singles_per_image[img].iter().zip(&singles) {
            mark(person, CLASS_BASE + class, 1.0);
            groups.push(Group {
                members: vec![person],
                broad: tax.entries()[class].broad,
                atomic: class,
                bbox: individuals[person].normalized(width as f64, height as f64),
            });
        }
        for r in &rects {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    let t = y * gw + x;
                    tokens.set(t, LOCAL_BASE, (x - r.x) as f64 / r.w as f64 + 0.5 / r.w as f64);
                    tokens.set(t, LOCAL_BASE + 1, (y - r.y) as f64 / r.h as f64 + 0.5 / r.h as f64);
                }
            }
        }

        let record = ImageRecord {
            image_id,
            width,
            height,
            individuals: individuals
                .iter()
                .map(|c| c.normalized(width as f64, height as f64))
                .collect(),
            groups,
        };
        record.validate()?;
        records.push(record);
        images.push((image_id, tokens));
    }

    Ok(SynthDataset {
        tokens: TokenSet {
            token_count: gw * gh,
            token_dim: TOKEN_DIM,
            images,
        },
        records,
        plan: SynthPlan {
            seed,
            persons_per_image: persons,
            class_counts,
            group_sizes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::standard();
        let a = synth_generate(&spec, 4).unwrap();
        let b = synth_generate(&spec, 4).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.records, b.records);
        let c = synth_generate(&spec, 5).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn smile_only_spec() {
        let mut spec = SynthSpec::standard();
        spec.mix = [("smile".to_string(), 1)].into_iter().collect();
        spec.annotations = 20;
        let d = synth_generate(&spec, 1).unwrap();
        let triplets: Vec<_> = d.records.iter().flat_map(|r| r.expand_triplets()).collect();
        assert_eq!(triplets.len(), 20);
        for t in triplets {
            assert_eq!(t.atomic, 8);
            assert_eq!(t.group, t.individual);
        }
    }

    #[test]
    fn class_histogram_matches_mix() {
        let spec = SynthSpec::standard();
        let d = synth_generate(&spec, 9).unwrap();
        let mut hist = BTreeMap::new();
        for g in d.records.iter().flat_map(|r| &r.groups) {
            *hist.entry(g.atomic).or_insert(0) += 1;
        }
        for (id, count) in spec.class_counts().unwrap() {
            assert_eq!(count, 8);
            assert_eq!(hist[&id], 8);
        }
    }

    #[test]
    fn largest_remainder_counts() {
        let mut spec = SynthSpec::standard();
        spec.annotations = 7;
        let counts = spec.class_counts().unwrap();
        assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), 7);
        // mutual-gaze (id 1) holds the lowest id, so it takes the extra one
        assert_eq!(counts[0], (1, 2));
    }

    #[test]
    fn infeasible_specs() {
        let mut spec = SynthSpec::standard();
        spec.grid_w = 2;
        spec.grid_h = 3;
        spec.persons_min = 4;
        assert!(matches!(synth_generate(&spec, 0), Err(Error::Generation(_))));
        let mut spec = SynthSpec::standard();
        spec.annotations = 500;
        assert!(matches!(synth_generate(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn token_file_round_trip() {
        let d = synth_generate(&SynthSpec::standard(), 2).unwrap();
        let mut buf = Vec::new();
        d.tokens.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], TOKEN_MAGIC);
        assert_eq!(TokenSet::read_from(buf.as_slice()).unwrap(), d.tokens);
    }
}

//! Seeded random inputs for the oracle suites and property tests.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::Corners;
use crate::data::{taxonomy, Arity, Group, ImageRecord, TripletPrediction};
use crate::tensor::Tensor;

/// Symmetric matrix with unit diagonal and off-diagonal entries in
/// `[-1, 1]`, rounded to a tenth half the time so ties occur.
pub fn random_affinity(rng: &mut impl Rng, n: usize) -> Tensor {
    let coarse = rng.gen_bool(0.5);
    let mut a = Tensor::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            if coarse {
                v = (v * 10.0).round() / 10.0;
            }
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Random zero/one incidence, `n×m`.
pub fn random_incidence(rng: &mut impl Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).collect()
}

fn random_person(rng: &mut impl Rng, width: u32, height: u32) -> Corners {
    let (w, h) = (width as f64, height as f64);
    let bw = rng.gen_range(0.05..0.4) * w;
    let bh = rng.gen_range(0.1..0.6) * h;
    let x1 = (rng.gen_range(0.0..(w - bw)) * 4.0).round() / 4.0;
    let y1 = (rng.gen_range(0.0..(h - bh)) * 4.0).round() / 4.0;
    Corners::new(x1, y1, x1 + (bw * 4.0).round() / 4.0, y1 + (bh * 4.0).round() / 4.0)
}

/// A valid record with at least one interaction drawn from `classes`
/// (which must include an individual-arity class). Draws that need more
/// people than the image has, or repeat an interaction, are redrawn.
pub fn random_record(rng: &mut impl Rng, image_id: u64, classes: &[usize]) -> ImageRecord {
    let tax = taxonomy();
    let (width, height) = (rng.gen_range(64..=640), rng.gen_range(64..=480));
    let persons = rng.gen_range(1..=5);
    let pixels: Vec<Corners> = (0..persons).map(|_| random_person(rng, width, height)).collect();
    let (w, h) = (width as f64, height as f64);
    let individuals = pixels.iter().map(|c| c.normalized(w, h)).collect::<Vec<_>>();
    let mut groups = Vec::new();
    let wanted = rng.gen_range(1..=4);
    let mut attempts = 0;
    while groups.len() < wanted && (groups.is_empty() || attempts < 50) {
        attempts += 1;
        let atomic = *classes.choose(rng).unwrap();
        let entry = &tax.entries()[atomic];
        let members: Vec<usize> = match entry.arity() {
            Arity::Individual => vec![rng.gen_range(0..persons)],
            Arity::Group if persons >= 2 => {
                let size = rng.gen_range(2..=persons.min(3));
                let mut m = rand::seq::index::sample(rng, persons, size).into_vec();
                m.sort_unstable();
                m
            }
            Arity::Group => continue,
        };
        if groups.iter().any(|g: &Group| g.atomic == atomic && g.members == members) {
            continue;
        }
        let cover = Corners::cover(members.iter().map(|&i| pixels[i])).unwrap();
        groups.push(Group {
            members,
            broad: entry.broad,
            atomic,
            bbox: cover.normalized(w, h),
        });
    }
    ImageRecord {
        image_id,
        width,
        height,
        individuals,
        groups,
    }
}

pub fn random_records(rng: &mut impl Rng, count: usize, classes: &[usize]) -> Vec<ImageRecord> {
    (0..count as u64).map(|id| random_record(rng, id * 3 + 1, classes)).collect()
}

fn jitter(rng: &mut impl Rng, c: Corners, amount: f64) -> Corners {
    let (w, h) = (c.width(), c.height());
    let mut d = |s: f64| rng.gen_range(-amount..=amount) * s;
    Corners::new(c.x1 + d(w), c.y1 + d(h), c.x2 + d(w), c.y2 + d(h))
}

/// Up to `max_per_image` predictions per image: jittered copies of ground
/// truth (sometimes with the wrong class) mixed with unrelated boxes.
/// Confidences are coarse so ranking ties occur.
pub fn random_predictions(rng: &mut impl Rng, records: &[ImageRecord], classes: &[usize], max_per_image: usize) -> Vec<TripletPrediction> {
    let mut out = Vec::new();
    for r in records {
        let (w, h) = r.size();
        let triplets = r.expand_triplets();
        for _ in 0..rng.gen_range(0..=max_per_image) {
            let (individual, group, mut atomic) = match triplets.choose(rng) {
                Some(t) if rng.gen_bool(0.7) => {
                    let amount = rng.gen_range(0.0..0.5);
                    (
                        jitter(rng, t.individual.to_pixels(w, h), amount),
                        jitter(rng, t.group.to_pixels(w, h), amount),
                        t.atomic,
                    )
                }
                _ => {
                    let a = random_person(rng, r.width, r.height);
                    let b = random_person(rng, r.width, r.height);
                    (a, Corners::cover([a, b]).unwrap(), *classes.choose(rng).unwrap())
                }
            };
            if rng.gen_bool(0.15) {
                atomic = *classes.choose(rng).unwrap();
            }
            out.push(TripletPrediction {
                image_id: r.image_id,
                individual,
                group,
                atomic,
                confidence: rng.gen_range(1..=20) as f64 / 20.0,
            });
        }
    }
    out.shuffle(rng);
    out
}

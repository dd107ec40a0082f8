use crate::boxes::{BBox, Corners};
use crate::data::taxonomy::{taxonomy, Arity, BroadType};
use crate::error::{Error, Result};

/// Tolerance for a group box to count as the cover of its members.
pub const COVER_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub members: Vec<usize>,
    pub broad: BroadType,
    pub atomic: usize,
    pub bbox: BBox,
}

/// One annotated scene. Boxes are normalized center boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub individuals: Vec<BBox>,
    pub groups: Vec<Group>,
}

/// `⟨individual, group, interaction⟩` ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub member: usize,
    pub group_index: usize,
    pub atomic: usize,
    pub individual: BBox,
    pub group: BBox,
}

/// A scored triplet, boxes in pixel corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletPrediction {
    pub image_id: u64,
    pub individual: Corners,
    pub group: Corners,
    pub atomic: usize,
    pub confidence: f64,
}

fn same_members(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

impl ImageRecord {
    pub fn size(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }

    /// Checks every record invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let tax = taxonomy();
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(
                format!("image {}: width/height", self.image_id),
                "must be positive",
            ));
        }
        for (i, b) in self.individuals.iter().enumerate() {
            if !(b.w > 0.0 && b.h > 0.0) || !b.to_array().iter().all(|v| v.is_finite()) {
                return Err(Error::validation(
                    format!("image {}: individuals[{i}]", self.image_id),
                    "box must have positive width and height",
                ));
            }
        }
        for (g, group) in self.groups.iter().enumerate() {
            let field = |name: &str| format!("image {}: groups[{g}].{name}", self.image_id);
            let entry = tax.get(group.atomic).map_err(|_| {
                Error::validation(field("atomic"), format!("class id {} out of range", group.atomic))
            })?;
            if entry.broad != group.broad {
                return Err(Error::validation(
                    field("broad"),
                    format!("{} belongs to {}, not {}", entry.name, entry.broad, group.broad),
                ));
            }
            if let Some(&m) = group.members.iter().find(|&&m| m >= self.individuals.len()) {
                return Err(Error::validation(field("members"), format!("index {m} out of range")));
            }
            let mut sorted = group.members.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != group.members.len() {
                return Err(Error::validation(field("members"), "duplicate member"));
            }
            match entry.arity() {
                Arity::Group if group.members.len() < 2 => {
                    return Err(Error::validation(field("members"), format!("{} needs at least 2 members", entry.name)));
                }
                Arity::Individual if group.members.len() != 1 => {
                    return Err(Error::validation(field("members"), format!("{} needs exactly 1 member", entry.name)));
                }
                _ => {}
            }
            if self.groups[..g].iter().any(|o| o.atomic == group.atomic && same_members(&o.members, &group.members)) {
                return Err(Error::validation(field("members"), format!("{} is annotated twice on the same people", entry.name)));
            }
            let cover = Corners::cover(group.members.iter().map(|&m| self.individuals[m].corners())).unwrap();
            if cover.max_abs_diff(group.bbox.corners()) > COVER_TOLERANCE {
                return Err(Error::validation(
                    field("box"),
                    "does not equal the minimal box covering its members",
                ));
            }
        }
        Ok(())
    }

    /// One triplet per (member, group), members ascending, groups in order.
    /// Individual interactions use the member's own box as the group box.
    pub fn expand_triplets(&self) -> Vec<GtTriplet> {
        let mut out = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let mut members = group.members.clone();
            members.sort_unstable();
            for m in members {
                let individual = self.individuals[m];
                let group_box = match group.broad.arity() {
                    Arity::Individual => individual,
                    Arity::Group => group.bbox,
                };
                out.push(GtTriplet {
                    member: m,
                    group_index: g,
                    atomic: group.atomic,
                    individual,
                    group: group_box,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> ImageRecord {
        let w = 200.0;
        let px = |x1, y1, x2, y2| Corners::new(x1, y1, x2, y2).normalized(w, w);
        let people = vec![px(0.0, 0.0, 20.0, 40.0), px(40.0, 0.0, 60.0, 40.0), px(100.0, 100.0, 120.0, 160.0)];
        let gaze = Group {
            members: vec![0, 1, 2],
            broad: BroadType::Gaze,
            atomic: 0,
            bbox: px(0.0, 0.0, 120.0, 160.0),
        };
        let smile = Group {
            members: vec![1],
            broad: BroadType::Expression,
            atomic: 8,
            bbox: people[1],
        };
        ImageRecord {
            image_id: 7,
            width: 200,
            height: 200,
            individuals: people,
            groups: vec![gaze, smile],
        }
    }

    #[test]
    fn expansion() {
        let r = sample();
        r.validate().unwrap();
        let t = r.expand_triplets();
        assert_eq!(t.len(), 4);
        assert!(t[..3].iter().all(|x| x.group == r.groups[0].bbox && x.atomic == 0));
        assert_eq!(t[3].group, r.individuals[1]);
        assert_eq!(t[3].atomic, 8);
    }

    #[test]
    fn validation_failures() {
        let mut r = sample();
        r.groups[0].bbox.w += 0.01;
        let err = r.validate().unwrap_err().to_string();
        assert!(err.contains("groups[0].box"), "{err}");

        let mut r = sample();
        r.groups[0].members = vec![0];
        r.groups[0].bbox = r.individuals[0];
        assert!(r.validate().unwrap_err().to_string().contains("at least 2"));

        let mut r = sample();
        r.groups[1].broad = BroadType::Posture;
        assert!(r.validate().unwrap_err().to_string().contains("groups[1].broad"));

        let mut r = sample();
        r.groups[1].members = vec![5];
        assert!(r.validate().unwrap_err().to_string().contains("out of range"));
    }

    #[test]
    fn two_groups_sizes_two_and_three() {
        let mut r = sample();
        r.groups[1] = Group {
            members: vec![0, 2],
            broad: BroadType::Touch,
            atomic: 4,
            bbox: Corners::cover([r.individuals[0].corners(), r.individuals[2].corners()])
                .unwrap()
                .normalized(1.0, 1.0),
        };
        r.validate().unwrap();
        assert_eq!(r.expand_triplets().len(), 5);
    }
}

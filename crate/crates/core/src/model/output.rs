use crate::boxes::BBox;
use crate::tape::{Tape, Var};

/// Per-query predictions. Row `i` of every field refers to the same
/// individual–group candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOutput {
    /// `N×4` individual boxes, `(cx, cy, w, h)` in `[0, 1]`.
    pub boxes_h: Var,
    /// `N×4` group boxes.
    pub boxes_g: Var,
    /// `N×K` interaction logits (sigmoid is applied downstream).
    pub logits: Var,
}

impl ModelOutput {
    pub fn queries(&self, tape: &Tape) -> usize {
        tape.value(self.logits).rows()
    }

    pub fn individual_boxes(&self, tape: &Tape) -> Vec<BBox> {
        read_boxes(tape, self.boxes_h)
    }

    pub fn group_boxes(&self, tape: &Tape) -> Vec<BBox> {
        read_boxes(tape, self.boxes_g)
    }
}

fn read_boxes(tape: &Tape, var: Var) -> Vec<BBox> {
    let t = tape.value(var);
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            BBox::new(r[0], r[1], r[2], r[3])
        })
        .collect()
}

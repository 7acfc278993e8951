use crate::domain::Fixation;

/// One grid-cell label per fixation.
pub type ClusterString = Vec<usize>;

/// Fixed spatial grid used to turn fixations into cell labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub gx: usize,
    pub gy: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { gx: 8, gy: 6 }
    }
}

impl Grid {
    /// Column and row of the cell holding `f`; coordinates of exactly 1 fall
    /// into the last cell.
    pub fn cell(&self, f: &Fixation) -> (usize, usize) {
        let col = ((f.x * self.gx as f64).floor().max(0.0) as usize).min(self.gx - 1);
        let row = ((f.y * self.gy as f64).floor().max(0.0) as usize).min(self.gy - 1);
        (col, row)
    }

    pub fn label(&self, f: &Fixation) -> usize {
        let (col, row) = self.cell(f);
        col + self.gx * row
    }
}

pub fn quantize(fixations: &[Fixation], grid: Grid) -> ClusterString {
    fixations.iter().map(|f| grid.label(f)).collect()
}

/// Levenshtein distance with unit costs, two-row dynamic program.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − ED/max(|a|,|b|)`; two empty strings score 1.
pub fn sequence_score(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_boundaries() {
        let g = Grid::default();
        assert_eq!(quantize(&[Fixation::new(0.0, 0.0)], g), vec![0]);
        assert_eq!(quantize(&[Fixation::new(1.0, 1.0)], g), vec![47]);
        let s = quantize(&[Fixation::new(0.51, 0.2), Fixation::new(0.52, 0.21)], g);
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn edit_distance_examples() {
        // kitten -> sitting
        let kitten = [10, 8, 19, 19, 4, 13];
        let sitting = [18, 8, 19, 19, 8, 13, 6];
        assert_eq!(edit_distance(&kitten, &sitting), 3);
        assert_eq!(edit_distance(&kitten, &kitten), 0);
        assert_eq!(edit_distance(&[], &[1, 2, 3]), 3);
    }

    #[test]
    fn sequence_score_examples() {
        assert_eq!(sequence_score(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(sequence_score(&[1, 2], &[1, 3]), 0.5);
        assert_eq!(sequence_score(&[], &[]), 1.0);
        assert_eq!(sequence_score(&[], &[4]), 0.0);
    }
}

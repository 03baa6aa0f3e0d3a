//! Seeded inputs shared by the benchmarks.

use tinydetr::{Box, CostMatrix, Rng};

pub fn random_box(rng: &mut Rng) -> Box {
    let w = rng.uniform_range(0.01, 0.4);
    let h = rng.uniform_range(0.01, 0.4);
    Box {
        cx: rng.uniform_range(w / 2.0, 1.0 - w / 2.0),
        cy: rng.uniform_range(h / 2.0, 1.0 - h / 2.0),
        w,
        h,
    }
}

pub fn box_pairs(n: usize, seed: u64) -> Vec<(Box, Box)> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect()
}

pub fn signal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.normal()).collect()
}

pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    CostMatrix::new(rows, cols, signal(rows * cols, seed)).expect("finite costs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_valid_and_seeded() {
        let p = box_pairs(100, 1);
        assert!(p.iter().all(|(a, b)| a.validate().is_ok() && b.validate().is_ok()));
        assert_eq!(p, box_pairs(100, 1));
        assert_eq!(cost_matrix(3, 4, 2).at(2, 3), cost_matrix(3, 4, 2).at(2, 3));
    }
}

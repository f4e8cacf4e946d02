use std::collections::BTreeMap;

use ndarray::Array2;

use super::InstanceMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// Neighbours already visited in a raster scan.
    fn backward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass union-find labelling. Labels are numbered `1..=n` in raster
/// order of each component's first pixel.
pub fn connected_components(binary: &Array2<bool>, connectivity: Connectivity) -> InstanceMask {
    let (h, w) = binary.dim();
    let mut provisional = Array2::<u32>::zeros((h, w));
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !binary[[y, x]] {
                continue;
            }
            let mut best: Option<u32> = None;
            for &(dy, dx) in connectivity.backward_offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let l = provisional[[ny as usize, nx as usize]];
                if l == 0 {
                    continue;
                }
                best = Some(match best {
                    None => l,
                    Some(b) => {
                        let (rb, rl) = (find(&mut parent, b), find(&mut parent, l));
                        let (lo, hi) = (rb.min(rl), rb.max(rl));
                        parent[hi as usize] = lo;
                        lo
                    }
                });
            }
            provisional[[y, x]] = match best {
                Some(l) => l,
                None => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
            };
        }
    }
    let mut compact = vec![0u32; parent.len()];
    let mut next = 0u32;
    let labels = provisional.mapv(|l| {
        if l == 0 {
            return 0;
        }
        let root = find(&mut parent, l) as usize;
        if compact[root] == 0 {
            next += 1;
            compact[root] = next;
        }
        compact[root]
    });
    InstanceMask::new(labels).expect("input dims are non-empty")
}

/// Per-instance geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub label: u32,
    pub area: usize,
    /// `2 sqrt(area / pi)`: diameter of the disk with the same area.
    pub equivalent_diameter: f64,
    /// `(row, col)`.
    pub centroid: (f64, f64),
}

pub fn equivalent_diameter(area: usize) -> f64 {
    2.0 * (area as f64 / std::f64::consts::PI).sqrt()
}

/// One entry per positive label, ascending by label.
pub fn instance_stats(mask: &InstanceMask) -> Vec<InstanceStats> {
    let mut acc: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
    for ((y, x), &l) in mask.labels().indexed_iter() {
        if l > 0 {
            let e = acc.entry(l).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += y as f64;
            e.2 += x as f64;
        }
    }
    acc.into_iter()
        .map(|(label, (area, sy, sx))| InstanceStats {
            label,
            area,
            equivalent_diameter: equivalent_diameter(area),
            centroid: (sy / area as f64, sx / area as f64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Independent labelling by depth-first flood fill.
    fn flood_fill_count(binary: &Array2<bool>, eight: bool) -> (usize, Array2<usize>) {
        let (h, w) = binary.dim();
        let mut seen = Array2::<usize>::zeros((h, w));
        let mut n = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !binary[[sy, sx]] || seen[[sy, sx]] != 0 {
                    continue;
                }
                n += 1;
                let mut stack = vec![(sy, sx)];
                seen[[sy, sx]] = n;
                while let Some((y, x)) = stack.pop() {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                                continue;
                            }
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if binary[[ny, nx]] && seen[[ny, nx]] == 0 {
                                seen[[ny, nx]] = n;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
        (n, seen)
    }

    #[test]
    fn all_false_gives_empty_mask() {
        let m = connected_components(&Array2::from_elem((5, 7), false), Connectivity::Eight);
        assert_eq!(m.instance_count(), 0);
    }

    #[test]
    fn two_blocks_two_labels() {
        let mut b = Array2::from_elem((6, 6), false);
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (4, 4), (4, 5), (5, 4), (5, 5)] {
            b[[y, x]] = true;
        }
        let m = connected_components(&b, Connectivity::Four);
        let stats = instance_stats(&m);
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.area == 4));
    }

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let b = array![[true, false], [false, true]];
        assert_eq!(flood_fill_count(&b, true).0, 1);
        assert_eq!(flood_fill_count(&b, false).0, 2);
        assert_eq!(connected_components(&b, Connectivity::Eight).instance_count(), 1);
        assert_eq!(connected_components(&b, Connectivity::Four).instance_count(), 2);
    }

    #[test]
    fn u_shape_merges_late() {
        let b = array![
            [true, false, true],
            [true, false, true],
            [true, true, true]
        ];
        assert_eq!(connected_components(&b, Connectivity::Four).instance_count(), 1);
    }

    #[test]
    fn stats_formula() {
        let mut l = Array2::<u32>::zeros((8, 8));
        l.slice_mut(ndarray::s![2..6, 2..6]).fill(4);
        l[[0, 7]] = 9;
        let stats = instance_stats(&InstanceMask::new(l).unwrap());
        assert_eq!(stats[0].area, 16);
        assert!((stats[0].equivalent_diameter - 4.5135).abs() < 1e-4);
        assert_eq!(stats[0].centroid, (3.5, 3.5));
        assert!((stats[1].equivalent_diameter - 1.1284).abs() < 1e-4);
        assert!(instance_stats(&InstanceMask::empty(3, 3).unwrap()).is_empty());
    }

    proptest! {
        #[test]
        fn labelling_agrees_with_flood_fill(
            bits in proptest::collection::vec(any::<bool>(), 12 * 9),
            eight in any::<bool>(),
        ) {
            let b = Array2::from_shape_vec((12, 9), bits).unwrap();
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let m = connected_components(&b, conn);
            let (n, oracle) = flood_fill_count(&b, eight);
            prop_assert_eq!(m.instance_count(), n);
            // Same partition: label maps are a bijection of each other.
            let mut fwd = std::collections::HashMap::new();
            for (a, o) in m.labels().iter().zip(oracle.iter()) {
                prop_assert_eq!(*a == 0, *o == 0);
                if *a > 0 {
                    let e = fwd.entry(*a).or_insert(*o);
                    prop_assert_eq!(*e, *o);
                }
            }
            let total: usize = instance_stats(&m).iter().map(|s| s.area).sum();
            prop_assert_eq!(total, b.iter().filter(|&&v| v).count());
        }
    }
}

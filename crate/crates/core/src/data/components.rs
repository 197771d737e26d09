use super::Mask;

/// Connected-component labelling result. Label 0 is background; components
/// are numbered from 1 in raster order of their first pixel.
#[derive(Clone, Debug)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Component ids sorted by decreasing size (ties by id).
    pub fn by_size(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (1..=self.sizes.len() as u32).collect();
        ids.sort_by(|a, b| {
            self.sizes[*b as usize - 1]
                .cmp(&self.sizes[*a as usize - 1])
                .then(a.cmp(b))
        });
        ids
    }
}

/// Flood-fill labelling with 4- or 8-connectivity.
pub fn connected_components(mask: &Mask, eight: bool) -> Components {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let neighbours: &[(isize, isize)] = if eight {
        &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ]
    } else {
        &[(-1, 0), (0, -1), (0, 1), (1, 0)]
    };
    for start in 0..h * w {
        if mask.bits()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in neighbours {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.bits()[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let m = Mask::from_fn(3, 3, |y, x| {
            (y == 0 && x == 0) || (y == 1 && x == 1) || (y == 2 && x == 0)
        });
        assert_eq!(connected_components(&m, false).count(), 3);
        assert_eq!(connected_components(&m, true).count(), 1);
    }

    #[test]
    fn sizes_and_ordering() {
        let m = Mask::from_fn(2, 6, |_, x| !(1..=2).contains(&x));
        let c = connected_components(&m, false);
        assert_eq!(c.sizes, vec![2, 6]);
        assert_eq!(c.by_size(), vec![2, 1]);
    }
}

//! 8-connected component labelling.
//!
//! Labelling is a single raster pass with a union-find over provisional
//! labels, followed by a resolve pass that assigns final ids in raster order
//! of each component's first pixel. Pixel lists are stored flat, one
//! contiguous run per component.

use std::ops::Range;

use crate::model::BinaryMask;

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    fn point(row: usize, col: usize) -> Self {
        Self {
            min_row: row,
            min_col: col,
            max_row: row,
            max_col: col,
        }
    }

    fn extend(&mut self, row: usize, col: usize) {
        self.min_row = self.min_row.min(row);
        self.min_col = self.min_col.min(col);
        self.max_row = self.max_row.max(row);
        self.max_col = self.max_col.max(col);
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.min_row..=self.max_row).contains(&row) && (self.min_col..=self.max_col).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub id: usize,
    pub size: usize,
    pub bbox: BBox,
    span: Range<usize>,
}

/// Disjoint components of one image plus a per-pixel lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSet {
    width: usize,
    height: usize,
    components: Vec<Component>,
    // 0 = background, otherwise component id + 1
    index: Vec<u32>,
    pixels: Vec<usize>,
}

impl ComponentSet {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Component id covering the linear pixel index, if any.
    pub fn component_at(&self, pixel: usize) -> Option<usize> {
        match self.index[pixel] {
            0 => None,
            id => Some(id as usize - 1),
        }
    }

    /// Linear pixel indices of a component, in raster order.
    pub fn pixels(&self, id: usize) -> &[usize] {
        &self.pixels[self.components[id].span.clone()]
    }

    /// (row, col) positions of a component, in raster order.
    pub fn positions(&self, id: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.pixels(id).iter().map(move |&p| (p / w, p % w))
    }

    pub fn total_pixels(&self) -> usize {
        self.pixels.len()
    }

    /// Assembles a set from per-pixel provisional ids (0 = background, ids
    /// need not be dense). Final ids follow raster order of first pixels.
    fn from_provisional(
        width: usize,
        height: usize,
        mut labels: Vec<u32>,
        mut resolve: impl FnMut(u32) -> u32,
    ) -> Self {
        let mut remap: Vec<u32> = Vec::new();
        let mut sizes: Vec<usize> = Vec::new();
        let mut boxes: Vec<BBox> = Vec::new();

        for (p, slot) in labels.iter_mut().enumerate() {
            if *slot == 0 {
                continue;
            }
            let root = resolve(*slot) as usize;
            if remap.len() <= root {
                remap.resize(root + 1, 0);
            }
            if remap[root] == 0 {
                sizes.push(0);
                boxes.push(BBox::point(p / width, p % width));
                remap[root] = sizes.len() as u32;
            }
            let id = remap[root];
            let k = id as usize - 1;
            sizes[k] += 1;
            boxes[k].extend(p / width, p % width);
            *slot = id;
        }

        let mut components = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for (id, (&size, &bbox)) in sizes.iter().zip(&boxes).enumerate() {
            components.push(Component {
                id,
                size,
                bbox,
                span: start..start + size,
            });
            start += size;
        }

        let mut cursor: Vec<usize> = components.iter().map(|c| c.span.start).collect();
        let mut pixels = vec![0usize; start];
        for (p, &id) in labels.iter().enumerate() {
            if id != 0 {
                let k = id as usize - 1;
                pixels[cursor[k]] = p;
                cursor[k] += 1;
            }
        }

        Self {
            width,
            height,
            components,
            index: labels,
            pixels,
        }
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let next = parent[parent[x as usize] as usize];
        parent[x as usize] = next;
        x = next;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let ra = find(parent, a);
    let rb = find(parent, b);
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// All maximal 8-connected components of the true pixels of `mask`.
pub fn extract_components(mask: &BinaryMask) -> ComponentSet {
    extract_from_slice(mask.width(), mask.height(), mask.as_slice())
}

pub(crate) fn extract_from_slice(width: usize, height: usize, mask: &[bool]) -> ComponentSet {
    debug_assert_eq!(mask.len(), width * height);
    let mut labels = vec![0u32; mask.len()];
    // parent[0] is the background sentinel
    let mut parent: Vec<u32> = vec![0];

    for row in 0..height {
        let base = row * width;
        for col in 0..width {
            let p = base + col;
            if !mask[p] {
                continue;
            }
            let mut current = 0u32;
            let mut neighbours = [0u32; 4];
            if col > 0 {
                neighbours[0] = labels[p - 1];
            }
            if row > 0 {
                let up = p - width;
                if col > 0 {
                    neighbours[1] = labels[up - 1];
                }
                neighbours[2] = labels[up];
                if col + 1 < width {
                    neighbours[3] = labels[up + 1];
                }
            }
            for n in neighbours.into_iter().filter(|&n| n != 0) {
                current = if current == 0 {
                    find(&mut parent, n)
                } else {
                    union(&mut parent, current, n)
                };
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            labels[p] = current;
        }
    }

    ComponentSet::from_provisional(width, height, labels, |l| find(&mut parent, l))
}

/// Keeps components with `size >= min_size`; ids are re-assigned in raster
/// order and the index rebuilt.
pub fn filter_by_size(set: &ComponentSet, min_size: usize) -> ComponentSet {
    if set.components.iter().all(|c| c.size >= min_size) {
        return set.clone();
    }
    let keep: Vec<bool> = set.components.iter().map(|c| c.size >= min_size).collect();
    let mut components = Vec::new();
    let mut pixels = Vec::new();
    let mut index = vec![0u32; set.index.len()];
    for c in set.components.iter().filter(|c| keep[c.id]) {
        let id = components.len();
        let start = pixels.len();
        for &p in set.pixels(c.id) {
            index[p] = id as u32 + 1;
            pixels.push(p);
        }
        components.push(Component {
            id,
            size: c.size,
            bbox: c.bbox,
            span: start..pixels.len(),
        });
    }
    ComponentSet {
        width: set.width,
        height: set.height,
        components,
        index,
        pixels,
    }
}

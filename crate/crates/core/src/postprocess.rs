//! From a 32×32 soft mask to binary masks and tight boxes: upsample,
//! threshold, label 8-connected components, drop small ones, box the rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::SoftMask;

/// Pixel rectangle `[x0, x1) × [y0, y1)`, serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::argument(format!(
                "empty box [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::argument(format!(
                "binary mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_box(width: usize, height: usize, b: &BoundingBox) -> Self {
        let data = (0..width * height)
            .map(|i| b.contains((i % width) as u32, (i / width) as u32))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Horizontal run `[x0, x1)` on row `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub y: u32,
    pub x0: u32,
    pub x1: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Runs in scan order.
    pub runs: Vec<Run>,
    pub area: usize,
    pub bbox: BoundingBox,
}

impl Component {
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (r.x0..r.x1).map(move |x| (x, r.y)))
    }
}

/// A box in image coordinates with the mean soft value of its component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
    pub area: usize,
}

/// True iff `value >= threshold`. Thresholds above 255 produce an empty mask.
pub fn threshold_mask(mask: &SoftMask, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: mask.width(),
        height: mask.height(),
        data: mask.data().iter().map(|&v| v as f64 >= threshold).collect(),
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    /// The smaller label always becomes the root, so roots are the first
    /// provisional label of each component in scan order.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra < rb {
            self.parent[rb as usize] = ra;
        } else if rb < ra {
            self.parent[ra as usize] = rb;
        }
    }
}

/// 8-connected components, ordered by their first pixel in scan order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; w * h];
    let mut sets = DisjointSet { parent: Vec::new() };

    for y in 0..h {
        for x in 0..w {
            if !mask.data[y * w + x] {
                continue;
            }
            let mut neighbors = [NONE; 4];
            if x > 0 {
                neighbors[0] = labels[y * w + x - 1];
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbors[1] = labels[up + x - 1];
                }
                neighbors[2] = labels[up + x];
                if x + 1 < w {
                    neighbors[3] = labels[up + x + 1];
                }
            }
            let label = match neighbors.iter().copied().filter(|&l| l != NONE).min() {
                Some(l) => {
                    for &n in neighbors.iter().filter(|&&l| l != NONE) {
                        sets.union(l, n);
                    }
                    l
                }
                None => {
                    let l = sets.parent.len() as u32;
                    sets.parent.push(l);
                    l
                }
            };
            labels[y * w + x] = label;
        }
    }

    // Roots are visited in increasing order of their first pixel, so dense
    // ids assigned on first sight follow scan order.
    let mut dense = vec![NONE; sets.parent.len()];
    let mut components: Vec<Component> = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let l = labels[y * w + x];
            if l == NONE {
                x += 1;
                continue;
            }
            let root = sets.find(l);
            let start = x;
            // A run of set pixels always belongs to one component.
            while x < w && labels[y * w + x] != NONE {
                x += 1;
            }
            let id = if dense[root as usize] == NONE {
                dense[root as usize] = components.len() as u32;
                components.push(Component {
                    runs: Vec::new(),
                    area: 0,
                    bbox: BoundingBox {
                        x0: start as u32,
                        y0: y as u32,
                        x1: x as u32,
                        y1: y as u32 + 1,
                    },
                });
                components.len() - 1
            } else {
                dense[root as usize] as usize
            };
            let c = &mut components[id];
            c.runs.push(Run {
                y: y as u32,
                x0: start as u32,
                x1: x as u32,
            });
            c.area += x - start;
            c.bbox.x0 = c.bbox.x0.min(start as u32);
            c.bbox.x1 = c.bbox.x1.max(x as u32);
            c.bbox.y1 = y as u32 + 1;
        }
    }
    components
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxParams {
    /// Threshold as a fraction of the upsampled mask's maximum.
    pub threshold_rel: f64,
    /// Minimum component area as a fraction of the image area.
    pub min_area_frac: f64,
}

impl Default for BoxParams {
    fn default() -> Self {
        Self {
            threshold_rel: 0.5,
            min_area_frac: 0.01,
        }
    }
}

/// Upsamples and thresholds at `threshold_rel × max`. An all-zero mask
/// yields an all-false result.
pub fn binarize(
    mask: &SoftMask,
    width: usize,
    height: usize,
    threshold_rel: f64,
) -> Result<(SoftMask, BinaryMask)> {
    let up = mask.resize(width, height)?;
    let max = up.max_value();
    let threshold = if max == 0 {
        f64::INFINITY
    } else {
        threshold_rel * max as f64
    };
    let binary = threshold_mask(&up, threshold);
    Ok((up, binary))
}

pub fn fit_boxes(
    mask: &SoftMask,
    width: usize,
    height: usize,
    params: &BoxParams,
) -> Result<Vec<ScoredBox>> {
    let (up, binary) = binarize(mask, width, height, params.threshold_rel)?;
    let floor = params.min_area_frac * (width * height) as f64;
    let mut boxes: Vec<ScoredBox> = connected_components(&binary)
        .into_iter()
        .filter(|c| c.area as f64 >= floor)
        .map(|c| {
            let sum: u64 = c.pixels().map(|(x, y)| up.get(x as usize, y as usize) as u64).sum();
            ScoredBox {
                bbox: c.bbox,
                score: sum as f64 / c.area as f64,
                area: c.area,
            }
        })
        .collect();
    // Stable: equal scores keep scan order.
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(boxes)
}

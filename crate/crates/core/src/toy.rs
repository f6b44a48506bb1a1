//! The seeded two-texture toy corpus.
//!
//! Images are rectangles and discs on a flat background. Domain X fills
//! shapes with horizontal stripes, domain Y with a checkerboard, both of
//! period 4. Training pools for X and Y use independent geometry; the
//! validation pairs share geometry and exist only for evaluation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::{read_pgm, write_pgm, SeededWeightStream};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn opposite(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDomainSpec {
    pub image_size: usize,
    pub train_per_domain: usize,
    pub val_pairs: usize,
    pub seed: u64,
    pub background: f64,
    pub fill_lo: f64,
    pub fill_hi: f64,
    pub max_shapes: usize,
}

impl Default for ToyDomainSpec {
    fn default() -> Self {
        ToyDomainSpec {
            image_size: 32,
            train_per_domain: 64,
            val_pairs: 16,
            seed: 0,
            background: 0.1,
            fill_lo: 0.4,
            fill_hi: 0.9,
            max_shapes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

fn geometry(s: &mut SeededWeightStream, size: usize, max_shapes: usize) -> Vec<Shape> {
    let n = 1 + s.next_below(max_shapes.max(1));
    (0..n)
        .map(|_| {
            if s.next_below(2) == 0 {
                let h = size / 4 + s.next_below(size / 3 + 1);
                let w = size / 4 + s.next_below(size / 3 + 1);
                Shape::Rect {
                    y0: s.next_below(size - h + 1),
                    x0: s.next_below(size - w + 1),
                    h,
                    w,
                }
            } else {
                let r = (size / 8 + s.next_below(size / 6 + 1)) as f64;
                let span = size as f64 - 2.0 * r;
                Shape::Disc {
                    cy: r + s.next_unit() * span,
                    cx: r + s.next_unit() * span,
                    r,
                }
            }
        })
        .collect()
}

/// Whether `(y, x)` lies in the "high" half of the domain's texture.
pub fn texture_high(domain: Domain, y: usize, x: usize) -> bool {
    match domain {
        Domain::X => y % 4 < 2,
        Domain::Y => (y % 4 < 2) ^ (x % 4 < 2),
    }
}

impl ToyDomainSpec {
    fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.train_per_domain == 0 || self.val_pairs == 0 {
            return Err(Error::Config(format!(
                "toy corpus needs image size ≥ 8 and non-empty pools (size {}, train {}, val {})",
                self.image_size, self.train_per_domain, self.val_pairs
            )));
        }
        Ok(())
    }

    fn render(&self, shapes: &[Shape], domain: Domain) -> Grid {
        let n = self.image_size;
        Grid::from_fn(1, n, n, |_, y, x| {
            if shapes.iter().any(|s| s.contains(y, x)) {
                if texture_high(domain, y, x) {
                    self.fill_hi
                } else {
                    self.fill_lo
                }
            } else {
                self.background
            }
        })
    }

    pub fn generate(&self) -> Result<ToyCorpus> {
        self.validate()?;
        let stream = |tag: u64| SeededWeightStream::new(self.seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let (mut sx, mut sy, mut sv) = (stream(1), stream(2), stream(3));
        let pool = |s: &mut SeededWeightStream, d: Domain| -> Vec<Grid> {
            (0..self.train_per_domain)
                .map(|_| self.render(&geometry(s, self.image_size, self.max_shapes), d))
                .collect()
        };
        let x_train = pool(&mut sx, Domain::X);
        let y_train = pool(&mut sy, Domain::Y);
        let mut val_x = Vec::with_capacity(self.val_pairs);
        let mut val_y = Vec::with_capacity(self.val_pairs);
        for _ in 0..self.val_pairs {
            let g = geometry(&mut sv, self.image_size, self.max_shapes);
            val_x.push(self.render(&g, Domain::X));
            val_y.push(self.render(&g, Domain::Y));
        }
        Ok(ToyCorpus {
            x_train,
            y_train,
            val_x,
            val_y,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub x_train: Vec<Grid>,
    pub y_train: Vec<Grid>,
    /// Validation inputs, domain X.
    pub val_x: Vec<Grid>,
    /// Paired ground truth for `val_x`, domain Y. Evaluation only.
    pub val_y: Vec<Grid>,
}

pub const MANIFEST: &str = "manifest.csv";

impl ToyCorpus {
    pub fn pool(&self, d: Domain) -> &[Grid] {
        match d {
            Domain::X => &self.x_train,
            Domain::Y => &self.y_train,
        }
    }

    /// Writes `X/train`, `Y/train` and `pairs/val` PGM trees plus a manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = String::from("split,domain,index,path\n");
        let mut put = |rel: String, g: &Grid, split: &str, domain: &str, i: usize| -> Result<()> {
            let path = dir.join(&rel);
            if let Some(p) = path.parent() {
                fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            write_pgm(g, &path)?;
            manifest.push_str(&format!("{split},{domain},{i},{rel}\n"));
            Ok(())
        };
        for (i, g) in self.x_train.iter().enumerate() {
            put(format!("X/train/{i:04}.pgm"), g, "train", "X", i)?;
        }
        for (i, g) in self.y_train.iter().enumerate() {
            put(format!("Y/train/{i:04}.pgm"), g, "train", "Y", i)?;
        }
        for (i, (x, y)) in self.val_x.iter().zip(&self.val_y).enumerate() {
            put(format!("pairs/val/{i:04}_x.pgm"), x, "val", "X", i)?;
            put(format!("pairs/val/{i:04}_y.pgm"), y, "val", "Y", i)?;
        }
        crate::formats::atomic_write(&dir.join(MANIFEST), manifest.as_bytes())
    }

    /// Reads a tree written by [`ToyCorpus::save`] through its manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut c = ToyCorpus {
            x_train: vec![],
            y_train: vec![],
            val_x: vec![],
            val_y: vec![],
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Config(format!("{}:{}: expected 4 fields", mpath.display(), n + 1)));
            }
            let g = read_pgm(dir.join(f[3]))?;
            match (f[0], f[1]) {
                ("train", "X") => c.x_train.push(g),
                ("train", "Y") => c.y_train.push(g),
                ("val", "X") => c.val_x.push(g),
                ("val", "Y") => c.val_y.push(g),
                _ => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown split/domain {},{}",
                        mpath.display(),
                        n + 1,
                        f[0],
                        f[1]
                    )))
                }
            }
        }
        if c.x_train.is_empty() || c.y_train.is_empty() || c.val_x.len() != c.val_y.len() {
            return Err(Error::Config(format!("{} describes an incomplete corpus", mpath.display())));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_sized() {
        let spec = ToyDomainSpec {
            train_per_domain: 5,
            val_pairs: 3,
            ..ToyDomainSpec::default()
        };
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_eq!((a.x_train.len(), a.y_train.len(), a.val_x.len()), (5, 5, 3));
        assert_eq!(a.x_train[0].shape(), crate::grid::Shape::new(1, 32, 32));
        let b = ToyDomainSpec { seed: 1, ..spec }.generate().unwrap();
        assert_ne!(a.x_train, b.x_train);
    }

    #[test]
    fn pairs_share_geometry_and_differ_in_fill() {
        let spec = ToyDomainSpec::default();
        let c = spec.generate().unwrap();
        for (x, y) in c.val_x.iter().zip(&c.val_y) {
            let mut differ = false;
            for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(*a == spec.background, *b == spec.background);
                differ |= a != b;
            }
            assert!(differ);
        }
    }

    #[test]
    fn fills_follow_texture() {
        let spec = ToyDomainSpec::default();
        let c = spec.generate().unwrap();
        for (d, imgs) in [(Domain::X, &c.x_train), (Domain::Y, &c.y_train)] {
            for g in imgs.iter().take(8) {
                for y in 0..32 {
                    for x in 0..32 {
                        let v = g.at(0, y, x);
                        if v != spec.background {
                            let hi = texture_high(d, y, x);
                            assert_eq!(v, if hi { spec.fill_hi } else { spec.fill_lo });
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDomainSpec {
            train_per_domain: 3,
            val_pairs: 2,
            ..ToyDomainSpec::default()
        };
        let c = spec.generate().unwrap();
        c.save(dir.path()).unwrap();
        let back = ToyCorpus::load(dir.path()).unwrap();
        assert_eq!(back.x_train.len(), 3);
        for (a, b) in c.val_y.iter().zip(&back.val_y) {
            assert!(a.max_abs_diff(b).unwrap() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_spec() {
        let spec = ToyDomainSpec {
            val_pairs: 0,
            ..ToyDomainSpec::default()
        };
        assert!(spec.generate().is_err());
    }
}

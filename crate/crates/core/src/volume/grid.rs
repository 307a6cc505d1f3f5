use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial extent of a volume in `(depth, height, width)` order; width varies fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn from_dims(dims: [usize; 3]) -> Self {
        Self::new(dims[0], dims[1], dims[2])
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.width;
        let rest = idx / self.width;
        (rest / self.height, rest % self.height, x)
    }

    /// Indices of the (up to six) face neighbours of `idx`.
    pub fn face_neighbors(&self, idx: usize) -> impl Iterator<Item = usize> {
        let (z, y, x) = self.coords(idx);
        let s = *self;
        let candidates = [
            (z > 0).then(|| idx - s.height * s.width),
            (z + 1 < s.depth).then(|| idx + s.height * s.width),
            (y > 0).then(|| idx - s.width),
            (y + 1 < s.height).then(|| idx + s.width),
            (x > 0).then(|| idx - 1),
            (x + 1 < s.width).then(|| idx + 1),
        ];
        candidates.into_iter().flatten()
    }

    /// Number of in-bounds face neighbours; less than six on the volume border.
    pub fn face_neighbor_count(&self, idx: usize) -> usize {
        self.face_neighbors(idx).count()
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

/// Voxel size in millimetres along `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(Spacing(spacing))
        } else {
            Err(Error::Format(format!(
                "voxel spacing must be strictly positive, got {spacing:?}"
            )))
        }
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::ISOTROPIC
    }
}

/// Dense 3D grid with row-major `(z, y, x)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T> Grid3<T> {
    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape(format!("grid shape {shape} has a zero extent")));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "grid shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.depth {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[self.shape.index(z, y, x)]
    }

    pub fn get_mut(&mut self, z: usize, y: usize, x: usize) -> &mut T {
        let i = self.shape.index(z, y, x);
        &mut self.data[i]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid3<T> {
    pub fn filled(shape: Shape3, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }
}

impl<T> std::ops::Index<usize> for Grid3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T> std::ops::IndexMut<usize> for Grid3<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

pub(crate) fn ensure_same_shape(a: Shape3, b: Shape3, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: shape {a} does not match {b}")))
    }
}

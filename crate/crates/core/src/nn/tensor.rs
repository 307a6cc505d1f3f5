use crate::volume::Shape3;

/// Multi-channel 3D feature map, layout `[channel][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * shape.len()],
        }
    }

    pub fn from_vec(channels: usize, shape: Shape3, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * shape.len(), "tensor data length");
        Self { channels, shape, data }
    }

    pub fn voxels(&self) -> usize {
        self.shape.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "concat shape mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.channels + b.channels, a.shape, data)
    }

    /// Inverse of [`Tensor::concat`] for gradients: first `channels` go left.
    pub fn split(self, channels: usize) -> (Tensor, Tensor) {
        let n = self.voxels();
        let rest = self.channels - channels;
        let mut data = self.data;
        let right = data.split_off(channels * n);
        (
            Tensor::from_vec(channels, self.shape, data),
            Tensor::from_vec(rest, self.shape, right),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

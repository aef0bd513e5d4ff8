use crate::tensor::Tensor;

/// Policy input: a labelled `N×6` cloud (XYZ then label colour) and the
/// robot state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudObservation {
    pub points: Tensor,
    pub robot_state: Tensor,
}

impl PointCloudObservation {
    pub fn n_points(&self) -> usize {
        self.points.rows()
    }

    /// Columns 0..3 of the cloud as an `N×3` tensor.
    pub fn xyz(&self) -> Tensor {
        let n = self.points.rows();
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            data.extend_from_slice(&self.points.row(i)[..3]);
        }
        Tensor::new(vec![n, 3], data).expect("cloud has at least one point")
    }

    /// Same observation with cloud rows in `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let c = self.points.cols();
        let data = order
            .iter()
            .flat_map(|&i| self.points.row(i).iter().copied())
            .collect();
        Self {
            points: Tensor::new(vec![order.len(), c], data).expect("permutation keeps extents"),
            robot_state: self.robot_state.clone(),
        }
    }
}

/// Snapshot of replica 0 after one step: contribution weights for every
/// entity (environment first) and the agents' aliveness.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub agents: usize,
    /// `[cell][entity]`, `cells * (agents + 1)` values.
    pub weights: Vec<f32>,
    /// `[cell][agent]`, `cells * agents` values.
    pub alive: Vec<f32>,
}

impl Frame {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn entities(&self) -> usize {
        self.agents + 1
    }

    pub fn weight(&self, cell: usize, entity: usize) -> f32 {
        self.weights[cell * self.entities() + entity]
    }

    pub fn cell_weights(&self, cell: usize) -> &[f32] {
        let e = self.entities();
        &self.weights[cell * e..(cell + 1) * e]
    }

    /// Entity with the largest weight at `cell`, lowest index on ties.
    pub fn winner(&self, cell: usize) -> usize {
        let w = self.cell_weights(cell);
        let mut best = 0;
        for (i, &v) in w.iter().enumerate().skip(1) {
            if v > w[best] {
                best = i;
            }
        }
        best
    }

    pub fn winner_map(&self) -> Vec<usize> {
        (0..self.cells()).map(|c| self.winner(c)).collect()
    }

    /// Summed contribution weight of each entity over the grid.
    pub fn entity_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0f64; self.entities()];
        for row in self.weights.chunks_exact(self.entities()) {
            for (m, &w) in mass.iter_mut().zip(row) {
                *m += w as f64;
            }
        }
        mass
    }

    /// Summed aliveness of each agent over the grid.
    pub fn alive_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0f64; self.agents];
        for row in self.alive.chunks_exact(self.agents.max(1)) {
            for (m, &a) in mass.iter_mut().zip(row) {
                *m += a as f64;
            }
        }
        mass
    }

    /// Frame where `entity` owns every cell outright.
    pub fn uniform(height: usize, width: usize, agents: usize, entity: usize) -> Self {
        let cells = height * width;
        let mut weights = vec![0.0; cells * (agents + 1)];
        let mut alive = vec![0.0; cells * agents];
        for c in 0..cells {
            weights[c * (agents + 1) + entity] = 1.0;
            if entity > 0 {
                alive[c * agents + entity - 1] = 1.0;
            }
        }
        Self {
            height,
            width,
            agents,
            weights,
            alive,
        }
    }
}

/// Frames produced by one meta-iteration rollout of a world.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub healthy: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winner_prefers_lowest_index_on_ties() {
        let f = Frame {
            height: 1,
            width: 2,
            agents: 2,
            weights: vec![0.2, 0.4, 0.4, 0.5, 0.25, 0.25],
            alive: vec![0.0; 4],
        };
        assert_eq!(f.winner_map(), vec![1, 0]);
    }

    #[test]
    fn uniform_frame_masses() {
        let f = Frame::uniform(2, 3, 2, 2);
        assert_eq!(f.entity_mass(), vec![0.0, 0.0, 6.0]);
        assert_eq!(f.alive_mass(), vec![0.0, 6.0]);
    }
}

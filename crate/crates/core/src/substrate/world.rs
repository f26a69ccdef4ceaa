use std::sync::Arc;

use petri_grad::{Adam, AdamConfig, GridDims, NodeId, Tape, Tensor};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AgentNet, ChannelLayout, Frame, HyperParams, Result, SubstrateError, Trajectory, WorldConfig,
    ALIVE_THRESHOLD, COSINE_EPS, LOSS_EPS, STATE_BOUND,
};

/// Randomness consumed by one step: the environment's proposal and, when
/// `per_hid_upd < 1`, which cells apply the agents' hidden-channel deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    /// `[B*H*W, C]`, each row unit-norm.
    pub env: Tensor,
    pub hidden_keep: Option<Vec<bool>>,
}

/// Losses and own-parameter gradients of every agent after a segment.
#[derive(Clone, Debug)]
pub struct SegmentGradients {
    pub losses: Vec<f32>,
    /// Per agent, in [`AgentNet::tensors`] order.
    pub grads: Vec<[Tensor; 4]>,
}

/// Intermediate values of one step, for checking the competition rules.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    /// Per entity (environment first); `None` when the entity proposes nowhere.
    pub proposals: Vec<Option<Tensor>>,
    /// `[B*H*W, N+1]` competitive strengths before the temperature.
    pub strength: Tensor,
    /// `[B*H*W, N+1]` contribution weights.
    pub weights: Tensor,
    /// `[B*H*W, N+1]` participation mask (environment always true).
    pub participating: Vec<bool>,
    pub frame: Frame,
}

struct StepRecord {
    x_next: NodeId,
    weights: NodeId,
    strength: NodeId,
    proposals: Vec<Option<NodeId>>,
    participating: Arc<[bool]>,
    alive_next: Tensor,
}

struct SegmentOutcome {
    frames: Vec<Frame>,
    grid: Tensor,
    alive: Tensor,
    gradients: Option<SegmentGradients>,
}

/// One world: grid replicas, aliveness, agent networks and their optimizers.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    hparams: HyperParams,
    /// `[B*H*W, C]`
    grid: Tensor,
    /// `[B*H*W, N]`
    alive: Tensor,
    nets: Vec<AgentNet>,
    optims: Vec<Adam>,
    steps: u64,
    rng: ChaCha8Rng,
    healthy: bool,
}

impl World {
    /// Fresh world seeded from a 64-bit seed.
    pub fn seeded(config: WorldConfig, hparams: HyperParams, seed: u64) -> Result<Self> {
        Self::init(config, hparams, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Fresh world: cell states uniform in `(-0.1, 0.1)`, each agent alive on
    /// a square seed patch, patches centered on an evenly spaced lattice.
    pub fn init(config: WorldConfig, hparams: HyperParams, mut rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if config.height < 8 || config.width < 8 {
            return Err(SubstrateError::Config(format!(
                "grid {}x{} is smaller than 8x8",
                config.height, config.width
            )));
        }
        let patches = seed_patches(&config)?;
        let nets: Vec<AgentNet> = (0..config.agents)
            .map(|_| AgentNet::init(&config, &mut rng))
            .collect();
        let batch = hparams.batch_size.max(1) as usize;
        let cells = config.cells();
        let c = config.channels();
        let dist = Uniform::new(-0.1f32, 0.1);
        let grid = Tensor::from_fn([batch * cells, c], |_| dist.sample(&mut rng));
        let n = config.agents;
        let mut alive = Tensor::zeros([batch * cells, n]);
        for b in 0..batch {
            for (k, patch) in patches.iter().enumerate() {
                for &cell in patch {
                    alive.data_mut()[(b * cells + cell) * n + k] = 1.0;
                }
            }
        }
        Self::from_parts(config, hparams, grid, alive, nets, rng)
    }

    /// Assemble a world from explicit state. Any grid size is accepted here;
    /// the batch size is taken from the grid tensor.
    pub fn from_parts(
        config: WorldConfig,
        mut hparams: HyperParams,
        grid: Tensor,
        alive: Tensor,
        nets: Vec<AgentNet>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let cells = config.cells();
        let c = config.channels();
        if grid.rank() != 2 || grid.last_dim() != c || grid.rows() % cells != 0 || grid.rows() == 0
        {
            return Err(SubstrateError::Config(format!(
                "grid tensor {:?} does not fit {}x{}x{}",
                grid.shape(),
                config.height,
                config.width,
                c
            )));
        }
        let batch = grid.rows() / cells;
        if alive.shape() != [batch * cells, config.agents] {
            return Err(SubstrateError::Config(format!(
                "aliveness tensor {:?} does not fit the grid",
                alive.shape()
            )));
        }
        if nets.len() != config.agents || nets.iter().any(|n| !n.conforms_to(&config)) {
            return Err(SubstrateError::Config(
                "agent networks do not match the configuration".into(),
            ));
        }
        hparams.batch_size = batch as u32;
        let optims = nets
            .iter()
            .map(|n| Adam::new(AdamConfig::default(), n.tensors()))
            .collect();
        Ok(Self {
            config,
            hparams,
            grid,
            alive,
            nets,
            optims,
            steps: 0,
            rng,
            healthy: true,
        })
    }

    /// Replace the optimizer states and counters, e.g. when restoring.
    pub fn restore_progress(&mut self, optims: Vec<Adam>, steps: u64, healthy: bool) -> Result<()> {
        if optims.len() != self.nets.len() {
            return Err(SubstrateError::Config(
                "one optimizer per agent is required".into(),
            ));
        }
        self.optims = optims;
        self.steps = steps;
        self.healthy = healthy;
        Ok(())
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn hparams(&self) -> &HyperParams {
        &self.hparams
    }

    /// New hyperparameters take effect at the next segment; a changed batch
    /// size resizes the replica set then.
    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn set_hparams(&mut self, hparams: HyperParams) {
        self.hparams = hparams;
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn alive(&self) -> &Tensor {
        &self.alive
    }

    pub fn nets(&self) -> &[AgentNet] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [AgentNet] {
        &mut self.nets
    }

    pub fn optims(&self) -> &[Adam] {
        &self.optims
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn is_healthy(&self) -> bool {
        self.healthy
    }

    pub fn mark_unhealthy(&mut self) {
        self.healthy = false;
    }

    /// Number of grid replicas currently held.
    pub fn batch(&self) -> usize {
        self.grid.rows() / self.config.cells()
    }

    fn dims(&self) -> GridDims {
        GridDims::new(self.batch(), self.config.height, self.config.width)
    }

    /// Log-aliveness loss of agent `k` on the current mask, averaged over
    /// replicas.
    pub fn aliveness_loss(&self, k: usize) -> f32 {
        let n = self.config.agents;
        let mass: f64 = self
            .alive
            .data()
            .chunks_exact(n)
            .map(|row| row[k] as f64)
            .sum();
        aliveness_loss_from_mass(mass, self.batch())
    }

    /// Grow or shrink the replica set to `hparams.batch_size`. New replicas
    /// copy existing ones cyclically.
    fn sync_batch(&mut self) {
        let target = self.hparams.batch_size.max(1) as usize;
        let current = self.batch();
        if target == current {
            return;
        }
        let cells = self.config.cells();
        let resize = |t: &Tensor| {
            let width = t.last_dim();
            let plane = cells * width;
            let data = (0..target)
                .flat_map(|b| {
                    let src = b % current;
                    t.data()[src * plane..(src + 1) * plane].iter().copied()
                })
                .collect();
            Tensor::new([target * cells, width], data).expect("resized replica shape")
        };
        self.grid = resize(&self.grid);
        self.alive = resize(&self.alive);
    }

    /// Draw the randomness for one step from the world's stream.
    pub fn draw_noise(&mut self) -> StepNoise {
        let rows = self.grid.rows();
        let c = self.config.channels();
        let dist = Uniform::new_inclusive(-1.0f32, 1.0);
        let mut env = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            let start = env.len();
            env.extend((0..c).map(|_| dist.sample(&mut self.rng)));
            let row = &mut env[start..];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let p = self.hparams.per_hid_upd;
        let hidden_keep = (p < 1.0).then(|| {
            (0..rows)
                .map(|_| self.rng.gen_bool(p.clamp(0.0, 1.0)))
                .collect()
        });
        StepNoise {
            env: Tensor::new([rows, c], env).expect("noise shape"),
            hidden_keep,
        }
    }

    /// Agent `k` participates at a cell when it is alive anywhere in the
    /// cell's 3x3 neighborhood. Returns `[row][entity]` with the environment
    /// always participating.
    fn participation(&self, dims: GridDims, alive: &Tensor) -> Vec<bool> {
        let n = self.config.agents;
        let e = n + 1;
        let a = alive.data();
        let mut mask = vec![false; dims.cells() * e];
        for row in 0..dims.cells() {
            mask[row * e] = true;
            for nb in dims.neighborhood(row) {
                for k in 0..n {
                    if a[nb * n + k] > 0.0 {
                        mask[row * e + k + 1] = true;
                    }
                }
            }
        }
        mask
    }

    fn record_step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        params: &[[NodeId; 4]],
        alive: &Tensor,
        noise: &StepNoise,
    ) -> Result<StepRecord> {
        let dims = self.dims();
        let rows = dims.cells();
        let n = self.config.agents;
        let e = n + 1;
        let c = self.config.channels();
        let layout = self.config.layout;
        let participating: Arc<[bool]> = self.participation(dims, alive).into();
        let hidden_mask = noise.hidden_keep.as_ref().map(|keep| {
            let mut m = vec![1.0f32; rows * c];
            for (row, &k) in keep.iter().enumerate() {
                if !k {
                    m[row * c + layout.attack + layout.defense..(row + 1) * c].fill(0.0);
                }
            }
            Tensor::new([rows, c], m).expect("mask shape")
        });
        let hidden_mask = hidden_mask.map(|m| tape.constant(m));

        let mut proposals = Vec::with_capacity(e);
        proposals.push(Some(tape.constant(noise.env.clone())));
        for (k, p) in params.iter().enumerate() {
            let cells: Arc<[u32]> = (0..rows)
                .filter(|&r| participating[r * e + k + 1])
                .map(|r| r as u32)
                .collect::<Vec<_>>()
                .into();
            if cells.is_empty() {
                proposals.push(None);
                continue;
            }
            let h = tape.neighbor_linear(dims, cells.clone(), x, p[0], p[1])?;
            let h = tape.tanh(h)?;
            let out = tape.matmul(h, p[2])?;
            let out = tape.add(out, p[3])?;
            let mut delta = tape.scatter_rows(out, cells, rows)?;
            if let Some(mask) = hidden_mask {
                delta = tape.mul(delta, mask)?;
            }
            proposals.push(Some(delta));
        }

        let (strength, weights) = record_competition(
            tape,
            &layout,
            &proposals,
            participating.clone(),
            rows,
            self.hparams.softmax_temp as f32,
        )?;

        let mut acc = x;
        for (ent, delta) in proposals.iter().enumerate() {
            let Some(delta) = *delta else { continue };
            let w = tape.slice_cols(weights, ent, 1)?;
            let term = tape.mul(delta, w)?;
            acc = tape.add(acc, term)?;
        }
        let x_next = tape.clip(acc, -STATE_BOUND, STATE_BOUND)?;

        let wv = tape.value(weights).data();
        let alive_next = Tensor::from_fn([rows, n], |i| {
            let w = wv[(i / n) * e + i % n + 1];
            if w > ALIVE_THRESHOLD {
                w
            } else {
                0.0
            }
        });
        Ok(StepRecord {
            x_next,
            weights,
            strength,
            proposals,
            participating,
            alive_next,
        })
    }

    fn frame(&self, weights: &Tensor, alive: &Tensor) -> Frame {
        let cells = self.config.cells();
        let n = self.config.agents;
        Frame {
            height: self.config.height,
            width: self.config.width,
            agents: n,
            weights: weights.data()[..cells * (n + 1)].to_vec(),
            alive: alive.data()[..cells * n].to_vec(),
        }
    }

    fn run_segment(&self, noise: &[StepNoise], with_grads: bool) -> Result<SegmentOutcome> {
        let mut tape = Tape::new();
        let params: Vec<[NodeId; 4]> = self
            .nets
            .iter()
            .map(|net| net.tensors().map(|t| tape.leaf(t.clone())))
            .collect();
        let mut x = tape.constant(self.grid.clone());
        let mut alive = self.alive.clone();
        let mut frames = Vec::with_capacity(noise.len());
        let mut last_weights = None;
        for nz in noise {
            let rec = self.record_step(&mut tape, x, &params, &alive, nz)?;
            frames.push(self.frame(tape.value(rec.weights), &rec.alive_next));
            x = rec.x_next;
            alive = rec.alive_next;
            last_weights = Some(rec.weights);
        }
        let gradients = match (with_grads, last_weights) {
            (true, Some(weights)) => Some(self.agent_gradients(&mut tape, weights, &params)?),
            _ => None,
        };
        Ok(SegmentOutcome {
            frames,
            grid: tape.value(x).clone(),
            alive,
            gradients,
        })
    }

    /// `L_k = -log(eps + sum(A_k) / B)` on the last step, differentiated with
    /// respect to agent `k`'s own parameters only.
    fn agent_gradients(
        &self,
        tape: &mut Tape,
        weights: NodeId,
        params: &[[NodeId; 4]],
    ) -> Result<SegmentGradients> {
        let batch = self.batch() as f32;
        let mut losses = Vec::with_capacity(params.len());
        let mut grads = Vec::with_capacity(params.len());
        for (k, p) in params.iter().enumerate() {
            let w = tape.slice_cols(weights, k + 1, 1)?;
            let keep = tape
                .value(w)
                .map_values(|v| if v > ALIVE_THRESHOLD { 1.0 } else { 0.0 });
            let keep = tape.constant(keep);
            let a = tape.mul(w, keep)?;
            let total = tape.sum(a)?;
            let mean = tape.scale(total, 1.0 / batch)?;
            let guarded = tape.offset(mean, LOSS_EPS)?;
            let log = tape.log(guarded)?;
            let loss = tape.neg(log)?;
            losses.push(tape.value(loss).item().expect("scalar loss"));
            let g = tape.backward_wrt(loss, p)?.into_vec();
            let [g0, g1, g2, g3]: [Tensor; 4] = g.try_into().expect("four parameter tensors");
            grads.push([g0, g1, g2, g3]);
        }
        Ok(SegmentGradients { losses, grads })
    }

    /// Losses and gradients for a segment driven by `noise`, without changing
    /// the world.
    pub fn segment_gradients(&self, noise: &[StepNoise]) -> Result<SegmentGradients> {
        let out = self.run_segment(noise, true)?;
        Ok(out.gradients.unwrap_or_else(|| SegmentGradients {
            losses: vec![],
            grads: vec![],
        }))
    }

    fn fail<T>(&mut self, err: SubstrateError) -> Result<T> {
        self.healthy = false;
        Err(err)
    }

    /// One untrained update of all replicas.
    pub fn step(&mut self) -> Result<Frame> {
        Ok(self.step_with_diagnostics()?.frame)
    }

    pub fn step_with_diagnostics(&mut self) -> Result<StepDiagnostics> {
        self.sync_batch();
        let noise = self.draw_noise();
        let mut tape = Tape::new();
        let params: Vec<[NodeId; 4]> = self
            .nets
            .iter()
            .map(|net| net.tensors().map(|t| tape.constant(t.clone())))
            .collect();
        let x = tape.constant(self.grid.clone());
        let rec = match self.record_step(&mut tape, x, &params, &self.alive, &noise) {
            Ok(r) => r,
            Err(e) => return self.fail(e),
        };
        let frame = self.frame(tape.value(rec.weights), &rec.alive_next);
        let diag = StepDiagnostics {
            proposals: rec
                .proposals
                .iter()
                .map(|p| p.map(|id| tape.value(id).clone()))
                .collect(),
            strength: tape.value(rec.strength).clone(),
            weights: tape.value(rec.weights).clone(),
            participating: rec.participating.to_vec(),
            frame,
        };
        self.grid = tape.value(rec.x_next).clone();
        self.alive = rec.alive_next;
        self.steps += 1;
        Ok(diag)
    }

    /// Run `steps_per_update` recorded steps, take one Adam step per agent on
    /// its own log-aliveness loss, and detach. Returns the replica-0 frames.
    pub fn train_segment(&mut self) -> Result<Vec<Frame>> {
        self.sync_batch();
        let tau = self.hparams.steps_per_update.max(1) as usize;
        let noise: Vec<StepNoise> = (0..tau).map(|_| self.draw_noise()).collect();
        let outcome = match self.run_segment(&noise, true) {
            Ok(o) => o,
            Err(e) => return self.fail(e),
        };
        let lr = self.hparams.learning_rate as f32;
        let gradients = outcome.gradients.expect("segment has at least one step");
        let mut nets = self.nets.clone();
        let mut optims = self.optims.clone();
        for ((net, optim), grads) in nets.iter_mut().zip(optims.iter_mut()).zip(gradients.grads) {
            let mut params: Vec<Tensor> = net.tensors().iter().map(|t| (*t).clone()).collect();
            if let Err(e) = optim.step(&mut params, &grads, lr) {
                return self.fail(e.into());
            }
            let [w1, b1, w2, b2]: [Tensor; 4] = params.try_into().expect("four tensors");
            *net = AgentNet::from_tensors([w1, b1, w2, b2]);
        }
        self.nets = nets;
        self.optims = optims;
        self.grid = outcome.grid;
        self.alive = outcome.alive;
        self.steps += tau as u64;
        Ok(outcome.frames)
    }

    /// `segments` training segments. Stops at the first failing segment; the
    /// trajectory then holds only the frames of completed segments.
    pub fn rollout(&mut self, segments: usize) -> Trajectory {
        if !self.healthy {
            return Trajectory::default();
        }
        rollout_with(self, segments, World::train_segment)
    }
}

pub(crate) fn rollout_with<W>(
    world: &mut W,
    segments: usize,
    mut segment: impl FnMut(&mut W) -> Result<Vec<Frame>>,
) -> Trajectory {
    let mut frames = Vec::new();
    for i in 0..segments {
        match segment(world) {
            Ok(f) => frames.extend(f),
            Err(e) => {
                log::warn!("rollout stopped at segment {i}: {e}");
                return Trajectory {
                    frames,
                    healthy: false,
                };
            }
        }
    }
    Trajectory {
        frames,
        healthy: true,
    }
}

trait MapValues {
    fn map_values(&self, f: impl Fn(f32) -> f32) -> Tensor;
}

impl MapValues for Tensor {
    fn map_values(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(
            self.shape().to_vec(),
            self.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("same shape")
    }
}

/// Record the attack/defense competition: for each participating pair,
/// `phi_ef = cos(a_e, d_f) - cos(d_e, a_f)`; strength `psi_e` sums `phi_ef`
/// over all other entities; weights are the masked softmax of
/// `psi / temperature` over entities.
fn record_competition(
    tape: &mut Tape,
    layout: &ChannelLayout,
    proposals: &[Option<NodeId>],
    participating: Arc<[bool]>,
    rows: usize,
    temperature: f32,
) -> Result<(NodeId, NodeId)> {
    let e = proposals.len();
    let blocks: Vec<Option<(NodeId, NodeId)>> = proposals
        .iter()
        .map(|p| {
            p.map(|id| -> Result<(NodeId, NodeId)> {
                let a = tape.slice_cols(id, 0, layout.attack)?;
                let d = tape.slice_cols(id, layout.attack, layout.defense)?;
                Ok((a, d))
            })
            .transpose()
        })
        .collect::<Result<_>>()?;

    let mut terms: Vec<Vec<NodeId>> = vec![Vec::new(); e];
    for i in 0..e {
        for j in i + 1..e {
            let (Some((ai, di)), Some((aj, dj))) = (blocks[i], blocks[j]) else {
                continue;
            };
            let attack_i = tape.cosine(ai, dj, COSINE_EPS)?;
            let attack_j = tape.cosine(aj, di, COSINE_EPS)?;
            let back = tape.neg(attack_j)?;
            let phi = tape.add(attack_i, back)?;
            let neg_phi = tape.neg(phi)?;
            terms[i].push(phi);
            terms[j].push(neg_phi);
        }
    }
    let mut columns = Vec::with_capacity(e);
    for t in &terms {
        let col = match t.split_first() {
            None => tape.constant(Tensor::zeros([rows, 1])),
            Some((&first, rest)) => {
                let mut acc = first;
                for &next in rest {
                    acc = tape.add(acc, next)?;
                }
                acc
            }
        };
        columns.push(col);
    }
    let strength = tape.concat_cols(&columns)?;
    let logits = if temperature == 1.0 {
        strength
    } else {
        tape.scale(strength, 1.0 / temperature)?
    };
    let weights = tape.softmax_masked(logits, participating)?;
    Ok((strength, weights))
}

/// Contribution weights for explicit proposals. `proposals[0]` is the
/// environment; `None` marks an entity that does not participate anywhere.
/// All proposals share the shape `[rows, C]`.
pub fn contribution_weights(
    layout: &ChannelLayout,
    proposals: &[Option<&Tensor>],
    temperature: f32,
) -> Result<Tensor> {
    let rows = proposals
        .iter()
        .flatten()
        .next()
        .map(|t| t.rows())
        .ok_or_else(|| SubstrateError::Config("no proposals".into()))?;
    let mut tape = Tape::new();
    let ids: Vec<Option<NodeId>> = proposals
        .iter()
        .map(|p| p.map(|t| tape.constant(t.clone())))
        .collect();
    let e = proposals.len();
    let participating: Arc<[bool]> = (0..rows * e)
        .map(|i| proposals[i % e].is_some())
        .collect::<Vec<_>>()
        .into();
    let (_, weights) =
        record_competition(&mut tape, layout, &ids, participating, rows, temperature)?;
    Ok(tape.value(weights).clone())
}

/// `-log(eps + mass / batch)`.
pub fn aliveness_loss_from_mass(mass: f64, batch: usize) -> f32 {
    -((LOSS_EPS as f64 + mass / batch.max(1) as f64).ln()) as f32
}

fn seed_patches(config: &WorldConfig) -> Result<Vec<Vec<usize>>> {
    let n = config.agents;
    let side = config.patch_side();
    let lattice = (n as f64).sqrt().ceil() as usize;
    let (slot_h, slot_w) = (config.height / lattice, config.width / lattice);
    if side > slot_h || side > slot_w {
        return Err(SubstrateError::PatchesDoNotFit {
            agents: n,
            side,
            height: config.height,
            width: config.width,
        });
    }
    Ok((0..n)
        .map(|k| {
            let (i, j) = (k / lattice, k % lattice);
            let top = i * slot_h + (slot_h - side) / 2;
            let left = j * slot_w + (slot_w - side) / 2;
            (0..side)
                .flat_map(|du| (0..side).map(move |dv| (top + du) * config.width + left + dv))
                .collect()
        })
        .collect())
}

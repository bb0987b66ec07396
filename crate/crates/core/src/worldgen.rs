//! Synthetic room/object world and its trajectory experience stream.
//!
//! Rooms are Gaussian cluster centroids, objects are Gaussian feature
//! vectors attached to one or two rooms, and an agent performs a room-level
//! random walk. The state embedding at each timestep is
//!
//! ```text
//! centroid[room] + mean(features of objects in room) + N(0, σ²·I)
//! ```
//!
//! rounded to `f32` precision so that the on-disk form is lossless.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};
use crate::numerics::Matrix;
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub embed_dim: usize,
    pub n_rooms: usize,
    pub room_scale: f64,
    pub n_objects: usize,
    pub objects_per_room: usize,
    /// Objects assigned to two rooms instead of one.
    pub n_shared_objects: usize,
    pub object_scale: f64,
    pub n_trajectories: usize,
    pub trajectory_len: usize,
    /// Mean of the geometric dwell time between room transitions.
    pub room_dwell_mean: usize,
    pub state_noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            embed_dim: 128,
            n_rooms: 20,
            room_scale: 2.0,
            n_objects: 50,
            objects_per_room: 5,
            n_shared_objects: 10,
            object_scale: 1.5,
            n_trajectories: 500,
            trajectory_len: 100,
            room_dwell_mean: 12,
            state_noise_sigma: 0.1,
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(PamError::config(field, "must be positive"));
            }
            Ok(())
        }
        positive("embed_dim", self.embed_dim)?;
        positive("n_rooms", self.n_rooms)?;
        positive("n_objects", self.n_objects)?;
        positive("objects_per_room", self.objects_per_room)?;
        positive("n_trajectories", self.n_trajectories)?;
        positive("room_dwell_mean", self.room_dwell_mean)?;
        if self.trajectory_len < 2 {
            return Err(PamError::config("trajectory_len", "must be greater than 1"));
        }
        for (field, v) in [("room_scale", self.room_scale), ("object_scale", self.object_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PamError::config(field, "must be a positive finite number"));
            }
        }
        if !(self.state_noise_sigma >= 0.0 && self.state_noise_sigma.is_finite()) {
            return Err(PamError::config("state_noise_sigma", "must be finite and >= 0"));
        }
        if self.n_shared_objects > self.n_objects {
            return Err(PamError::config("n_shared_objects", "cannot exceed n_objects"));
        }
        if self.n_shared_objects > 0 && self.n_rooms < 2 {
            return Err(PamError::config("n_shared_objects", "sharing needs at least 2 rooms"));
        }
        let capacity = self.objects_per_room * self.n_rooms;
        if capacity + self.n_shared_objects < self.n_objects {
            return Err(PamError::config(
                "objects_per_room",
                "objects_per_room x n_rooms must be >= n_objects - n_shared_objects",
            ));
        }
        // Every object takes one slot in its first room; shared objects take a
        // second slot elsewhere.
        if capacity < self.n_objects + self.n_shared_objects
            || self.n_objects.div_ceil(self.n_rooms) > self.objects_per_room
        {
            return Err(PamError::config(
                "objects_per_room",
                "not enough room slots for n_objects plus the second rooms of shared objects",
            ));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_trajectories * self.trajectory_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub state_id: usize,
    pub trajectory_id: usize,
    pub timestep: usize,
    pub room_id: usize,
    pub objects_present: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub room_centroids: Matrix,
    pub object_features: Matrix,
    /// Rooms of each object, ascending.
    pub object_rooms: Vec<Vec<usize>>,
    pub states: Vec<StateRecord>,
    /// One row per state, indexed by `state_id`.
    pub embeddings: Matrix,
}

impl World {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn embedding(&self, state_id: usize) -> Result<&[f64]> {
        if state_id >= self.states.len() {
            return Err(PamError::UnknownState(state_id));
        }
        Ok(self.embeddings.row(state_id))
    }

    pub fn state_id(&self, trajectory: usize, timestep: usize) -> usize {
        trajectory * self.config.trajectory_len + timestep
    }

    /// Objects of each room, ascending.
    pub fn room_objects(&self) -> Vec<Vec<usize>> {
        room_objects(&self.object_rooms, self.config.n_rooms)
    }

    /// States of trajectory `t` in timestep order.
    pub fn trajectory(&self, t: usize) -> &[StateRecord] {
        let len = self.config.trajectory_len;
        &self.states[t * len..(t + 1) * len]
    }
}

pub(crate) fn room_objects(object_rooms: &[Vec<usize>], n_rooms: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_rooms];
    for (obj, rooms) in object_rooms.iter().enumerate() {
        for &r in rooms {
            out[r].push(obj);
        }
    }
    out
}

pub fn state_count(world: &World) -> usize {
    world.states.len()
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn assign_objects(config: &WorldConfig, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut objects: Vec<usize> = (0..config.n_objects).collect();
    objects.shuffle(rng);
    let mut room_order: Vec<usize> = (0..config.n_rooms).collect();
    room_order.shuffle(rng);

    let mut load = vec![0usize; config.n_rooms];
    let mut object_rooms = vec![Vec::new(); config.n_objects];
    for (pos, &obj) in objects.iter().enumerate() {
        let room = room_order[pos % config.n_rooms];
        object_rooms[obj].push(room);
        load[room] += 1;
    }
    for &obj in objects.iter().take(config.n_shared_objects) {
        let first = object_rooms[obj][0];
        let open: Vec<usize> = (0..config.n_rooms)
            .filter(|&r| r != first && load[r] < config.objects_per_room)
            .collect();
        if open.is_empty() {
            return Err(PamError::config(
                "n_shared_objects",
                format!("no second room with free capacity for object {obj}"),
            ));
        }
        let second = open[rng.random_range(0..open.len())];
        load[second] += 1;
        object_rooms[obj].push(second);
        object_rooms[obj].sort_unstable();
    }
    Ok(object_rooms)
}

/// Room centroid plus the mean feature of the room's objects.
fn room_bases(centroids: &Matrix, features: &Matrix, room_objects: &[Vec<usize>]) -> Matrix {
    let mut bases = centroids.clone();
    for (room, objs) in room_objects.iter().enumerate() {
        if objs.is_empty() {
            continue;
        }
        let inv = 1.0 / objs.len() as f64;
        let row = bases.row_mut(room);
        for &o in objs {
            for (b, f) in row.iter_mut().zip(features.row(o)) {
                *b += f * inv;
            }
        }
    }
    bases
}

struct TrajectoryDraw {
    rooms: Vec<usize>,
    embeddings: Vec<f64>,
}

fn walk_trajectory(config: &WorldConfig, bases: &Matrix, traj: usize) -> TrajectoryDraw {
    let mut rng = substream(config.seed, Domain::Trajectory, traj as u64);
    let switch_p = 1.0 / config.room_dwell_mean as f64;
    let d = config.embed_dim;
    let mut room = rng.random_range(0..config.n_rooms);
    let mut rooms = Vec::with_capacity(config.trajectory_len);
    let mut embeddings = Vec::with_capacity(config.trajectory_len * d);
    for t in 0..config.trajectory_len {
        if t > 0 && config.n_rooms > 1 && rng.random::<f64>() < switch_p {
            let other = rng.random_range(0..config.n_rooms - 1);
            room = if other >= room { other + 1 } else { other };
        }
        rooms.push(room);
        for &b in bases.row(room) {
            let noise = rng.sample::<f64, _>(StandardNormal) * config.state_noise_sigma;
            embeddings.push((b + noise) as f32 as f64);
        }
    }
    TrajectoryDraw { rooms, embeddings }
}

pub fn gen_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut layout = substream(config.seed, Domain::WorldLayout, 0);
    let mut room_centroids =
        gaussian_matrix(&mut layout, config.n_rooms, config.embed_dim, config.room_scale);
    let mut object_features =
        gaussian_matrix(&mut layout, config.n_objects, config.embed_dim, config.object_scale);
    room_centroids.round_to_f32();
    object_features.round_to_f32();
    let object_rooms = assign_objects(config, &mut layout)?;
    let per_room = room_objects(&object_rooms, config.n_rooms);
    let bases = room_bases(&room_centroids, &object_features, &per_room);

    let draws: Vec<TrajectoryDraw> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|t| walk_trajectory(config, &bases, t))
        .collect();

    let mut states = Vec::with_capacity(config.n_states());
    let mut data = Vec::with_capacity(config.n_states() * config.embed_dim);
    for (traj, draw) in draws.into_iter().enumerate() {
        for (t, &room) in draw.rooms.iter().enumerate() {
            states.push(StateRecord {
                state_id: traj * config.trajectory_len + t,
                trajectory_id: traj,
                timestep: t,
                room_id: room,
                objects_present: per_room[room].clone(),
            });
        }
        data.extend(draw.embeddings);
    }
    Ok(World {
        config: config.clone(),
        room_centroids,
        object_features,
        object_rooms,
        embeddings: Matrix::from_vec(states.len(), config.embed_dim, data)?,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    pub(crate) fn small_config() -> WorldConfig {
        WorldConfig {
            embed_dim: 32,
            n_rooms: 6,
            n_objects: 12,
            objects_per_room: 4,
            n_shared_objects: 3,
            n_trajectories: 10,
            trajectory_len: 50,
            room_dwell_mean: 8,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let w = gen_world(&small_config()).unwrap();
        assert_eq!(state_count(&w), 500);
        assert_eq!(w.embeddings.shape(), (500, 32));
        for (i, s) in w.states.iter().enumerate() {
            assert_eq!(s.state_id, i);
            assert_eq!(s.state_id, s.trajectory_id * 50 + s.timestep);
        }
    }

    #[test]
    fn single_room_degenerate_walk() {
        let cfg = WorldConfig {
            n_rooms: 1,
            n_objects: 2,
            objects_per_room: 5,
            n_shared_objects: 0,
            n_trajectories: 1,
            trajectory_len: 2,
            ..WorldConfig::default()
        };
        let w = gen_world(&cfg).unwrap();
        assert_eq!(state_count(&w), 2);
        assert!(w.states.iter().all(|s| s.room_id == 0));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_world(&small_config()).unwrap();
        let b = gen_world(&small_config()).unwrap();
        assert_eq!(a, b);
        let c = gen_world(&WorldConfig { seed: 7, ..small_config() }).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| gen_world(&small_config()).unwrap());
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let par = pool4.install(|| gen_world(&small_config()).unwrap());
        assert_eq!(seq, par);
    }

    #[test]
    fn objects_present_match_room_and_every_object_is_placed() {
        let w = gen_world(&small_config()).unwrap();
        let per_room = w.room_objects();
        for s in &w.states {
            assert_eq!(s.objects_present, per_room[s.room_id]);
        }
        let cfg = small_config();
        let shared = w.object_rooms.iter().filter(|r| r.len() == 2).count();
        assert_eq!(shared, cfg.n_shared_objects);
        assert!(w.object_rooms.iter().all(|r| !r.is_empty() && r.len() <= 2));
        assert!(per_room.iter().all(|o| o.len() <= cfg.objects_per_room));
    }

    #[test]
    fn consecutive_states_change_at_most_one_room() {
        let w = gen_world(&small_config()).unwrap();
        let mut transitions = 0;
        for t in 0..10 {
            for pair in w.trajectory(t).windows(2) {
                if pair[0].room_id != pair[1].room_id {
                    transitions += 1;
                }
            }
        }
        // 490 steps with switch probability 1/8.
        assert!((30..=100).contains(&transitions), "{transitions}");
    }

    #[test]
    fn embeddings_are_finite_and_f32_exact() {
        let w = gen_world(&small_config()).unwrap();
        assert!(w.embeddings.is_finite());
        assert!(w.embeddings.as_slice().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn rooms_are_separated() {
        let cfg = WorldConfig {
            n_trajectories: 20,
            ..WorldConfig::default()
        };
        let w = gen_world(&cfg).unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
        for i in (0..w.n_states()).step_by(7) {
            for j in (i + 1..w.n_states()).step_by(13) {
                let c = cosine(w.embeddings.row(i), w.embeddings.row(j));
                if w.states[i].room_id == w.states[j].room_id {
                    within += c;
                    nw += 1;
                } else {
                    across += c;
                    na += 1;
                }
            }
        }
        assert!(nw > 0 && na > 0);
        assert!(within / nw as f64 > across / na as f64 + 0.5);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = WorldConfig {
            trajectory_len: 1,
            ..WorldConfig::default()
        };
        let err = gen_world(&bad).unwrap_err();
        assert!(err.to_string().contains("trajectory_len"), "{err}");
        let bad = WorldConfig {
            objects_per_room: 1,
            ..WorldConfig::default()
        };
        assert!(gen_world(&bad).unwrap_err().to_string().contains("objects_per_room"));
        let bad = WorldConfig {
            embed_dim: 0,
            ..WorldConfig::default()
        };
        assert!(gen_world(&bad).unwrap_err().to_string().contains("embed_dim"));
    }
}

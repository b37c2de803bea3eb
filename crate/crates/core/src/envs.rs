//! The noisy-observation gridworld and the two small analytic chains.

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::mdp::TabularMdp;

pub const NOISE_HALF_WIDTH: f64 = 0.5;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellObservation {
    pub x: f64,
    pub y: f64,
}

/// A `width × height` grid. Cell `(x, y)` is state `y * width + x`; moves
/// that would leave the grid keep the agent in place.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyGridworld {
    width: usize,
    height: usize,
    mdp: TabularMdp,
}

impl NoisyGridworld {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return config_err("grid dimensions must be positive");
        }
        let n = width * height;
        let mdp = TabularMdp::deterministic(
            n,
            4,
            |s, a| {
                let (x, y) = grid_step((s % width, s / width), a, width, height);
                y * width + x
            },
            vec![1.0 / n as f64; n],
        )?;
        Ok(NoisyGridworld { width, height, mdp })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, state: usize) -> (usize, usize) {
        (state % self.width, state / self.width)
    }

    pub fn state(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }

    pub fn step(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        grid_step(cell, action, self.width, self.height)
    }

    /// Cell coordinates plus independent `Unif[−0.5, 0.5)` noise.
    pub fn observe<R: Rng + ?Sized>(&self, cell: (usize, usize), rng: &mut R) -> CellObservation {
        let ex = rng.random::<f64>() - NOISE_HALF_WIDTH;
        let ey = rng.random::<f64>() - NOISE_HALF_WIDTH;
        observe_with_noise(cell, (ex, ey))
    }

    pub fn decode(&self, obs: CellObservation) -> Result<(usize, usize)> {
        Ok((decode_axis(obs.x, self.width)?, decode_axis(obs.y, self.height)?))
    }
}

/// Applies `action` and clamps at the boundary.
pub fn grid_step(cell: (usize, usize), action: usize, width: usize, height: usize) -> (usize, usize) {
    let (x, y) = cell;
    match action {
        UP if y + 1 < height => (x, y + 1),
        DOWN if y > 0 => (x, y - 1),
        LEFT if x > 0 => (x - 1, y),
        RIGHT if x + 1 < width => (x + 1, y),
        _ => (x, y),
    }
}

fn offset(center: usize, noise: f64) -> f64 {
    let c = center as f64;
    let v = c + noise;
    // Keep the interval half-open after rounding.
    if v >= c + NOISE_HALF_WIDTH { (c + NOISE_HALF_WIDTH).next_down() } else { v }
}

/// Observation for an explicit noise draw, each component in `[−0.5, 0.5)`.
pub fn observe_with_noise(cell: (usize, usize), noise: (f64, f64)) -> CellObservation {
    CellObservation { x: offset(cell.0, noise.0), y: offset(cell.1, noise.1) }
}

fn decode_axis(v: f64, size: usize) -> Result<usize> {
    if !(v >= -NOISE_HALF_WIDTH && v < size as f64 - NOISE_HALF_WIDTH) {
        return Err(Error::Decode(format!("coordinate {v} outside [-0.5, {}-0.5)", size)));
    }
    let mut i = v.round();
    // `round` sends ties away from zero; the noise interval is closed below.
    if v - i >= NOISE_HALF_WIDTH {
        i += 1.0;
    } else if i - v > NOISE_HALF_WIDTH {
        i -= 1.0;
    }
    Ok(i.max(0.0) as usize)
}

/// `n` states, one action, every state transitions to itself.
pub fn make_example1(n: usize) -> Result<TabularMdp> {
    if n == 0 {
        return config_err("example 1 needs at least one state");
    }
    TabularMdp::deterministic(n, 1, |s, _| s, vec![1.0 / n as f64; n])
}

/// Two states, one action: `s1` moves to either state with probability
/// one half, `s2` is absorbing. Starts in `s1`.
pub fn make_example2() -> TabularMdp {
    TabularMdp::new(2, 1, vec![0.5, 0.5, 0.0, 1.0], vec![1.0, 0.0]).expect("valid chain")
}

/// A named environment: its MDP plus how states are presented to a network.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Grid(NoisyGridworld),
    Chain(TabularMdp),
}

impl Env {
    /// Parses `gridworld5`, `example1:<n>` or `example2`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gridworld5" => Ok(Env::Grid(NoisyGridworld::new(5, 5)?)),
            "example2" => Ok(Env::Chain(make_example2())),
            _ => {
                if let Some(n) = name.strip_prefix("example1:") {
                    let n: usize = n
                        .parse()
                        .map_err(|_| Error::Config(format!("bad state count in {name:?}")))?;
                    Ok(Env::Chain(make_example1(n)?))
                } else {
                    config_err(format!("unknown environment {name:?}"))
                }
            }
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        match self {
            Env::Grid(g) => g.mdp(),
            Env::Chain(m) => m,
        }
    }

    /// Deterministic per-state features: cell centers for the grid, a
    /// one-hot code for chains.
    pub fn embedding(&self) -> Vec<Vec<f64>> {
        match self {
            Env::Grid(g) => (0..g.num_states())
                .map(|s| {
                    let (x, y) = g.cell(s);
                    vec![x as f64, y as f64]
                })
                .collect(),
            Env::Chain(m) => (0..m.num_states())
                .map(|s| {
                    let mut v = vec![0.0; m.num_states()];
                    v[s] = 1.0;
                    v
                })
                .collect(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Grid(_) => 2,
            Env::Chain(m) => m.num_states(),
        }
    }

    /// Training-time features. The grid adds observation noise.
    pub fn features<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Env::Grid(g) => {
                let o = g.observe(g.cell(state), rng);
                vec![o.x, o.y]
            }
            Env::Chain(m) => {
                let mut v = vec![0.0; m.num_states()];
                v[state] = 1.0;
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn moves_and_walls() {
        assert_eq!(grid_step((2, 2), RIGHT, 5, 5), (3, 2));
        assert_eq!(grid_step((0, 0), LEFT, 5, 5), (0, 0));
        assert_eq!(grid_step((0, 0), DOWN, 5, 5), (0, 0));
        assert_eq!(grid_step((4, 4), UP, 5, 5), (4, 4));
        for x in 1..4 {
            for y in 0..5 {
                assert_eq!(grid_step(grid_step((x, y), RIGHT, 5, 5), LEFT, 5, 5), (x, y));
            }
        }
    }

    #[test]
    fn table_agrees_with_step() {
        let g = NoisyGridworld::new(5, 5).unwrap();
        for s in 0..25 {
            for a in 0..4 {
                let next = g.state(g.step(g.cell(s), a));
                assert_eq!(g.mdp().prob(s, a, next), 1.0);
            }
        }
    }

    #[test]
    fn decode_edges() {
        let g = NoisyGridworld::new(5, 5).unwrap();
        assert_eq!(g.decode(CellObservation { x: 1.49, y: 2.5 - 1e-9 }).unwrap(), (1, 2));
        assert_eq!(g.decode(CellObservation { x: 0.0, y: 0.0 }).unwrap(), (0, 0));
        assert_eq!(g.decode(CellObservation { x: 0.5, y: -0.5 }).unwrap(), (1, 0));
        assert!(g.decode(CellObservation { x: 4.5, y: 0.0 }).is_err());
        assert!(g.decode(CellObservation { x: -0.51, y: 0.0 }).is_err());
        assert!(g.decode(CellObservation { x: f64::NAN, y: 0.0 }).is_err());
        assert_eq!(observe_with_noise((1, 3), (0.0, 0.0)), CellObservation { x: 1.0, y: 3.0 });
    }

    #[test]
    fn observation_mean_is_cell() {
        let g = NoisyGridworld::new(5, 5).unwrap();
        let mut rng = seeded(11);
        let n = 100_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let o = g.observe((1, 3), &mut rng);
            assert_eq!(g.decode(o).unwrap(), (1, 3));
            sx += o.x;
            sy += o.y;
        }
        let se = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((sx / n as f64 - 1.0).abs() < 3.0 * se);
        assert!((sy / n as f64 - 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn chains() {
        let m = make_example1(5).unwrap();
        for s in 0..5 {
            for g in 0..5 {
                assert_eq!(m.prob(s, 0, g), if s == g { 1.0 } else { 0.0 });
            }
        }
        let m = make_example2();
        assert_eq!(m.row(0, 0), &[0.5, 0.5]);
        assert_eq!(m.row(1, 0), &[0.0, 1.0]);
    }

    #[test]
    fn names() {
        assert!(matches!(Env::from_name("gridworld5").unwrap(), Env::Grid(_)));
        assert_eq!(Env::from_name("example1:7").unwrap().mdp().num_states(), 7);
        assert_eq!(Env::from_name("example2").unwrap().mdp().num_states(), 2);
        assert!(Env::from_name("example1:x").is_err());
        assert!(Env::from_name("maze").is_err());
    }
}

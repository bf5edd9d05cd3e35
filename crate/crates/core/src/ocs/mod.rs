//! The m-way online correlated selector.
//!
//! Every element carries a lazily sampled win sequence `x_1, x_2, ...`. In a
//! round where it appears with multiplicity `r`, it consumes the next `r`
//! entries and asks to win with probability `w = 1 - prod (1 - x)`. The
//! tournament turns `w` into a strength through the multiplicity-`r`
//! coupling, and the strongest element wins.

pub mod coupling;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use coupling::{build_coupling, TournamentCoupling, DEFAULT_CELLS};

use crate::error::{Error, Result};
use crate::win_distribution::{enumerate_prefix, SeedParams, SeedState, WinModel};

pub type ElementId = u64;

/// Element that absorbs the unassigned mass of a fractional round.
pub const DUMMY: ElementId = u64::MAX;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A round: distinct elements with multiplicities summing to `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundInput {
    entries: Vec<(ElementId, usize)>,
}

impl RoundInput {
    /// Collapses repeated ids into multiplicities.
    pub fn from_ids(ids: &[ElementId]) -> Self {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let mut entries: Vec<(ElementId, usize)> = Vec::new();
        for id in sorted {
            match entries.last_mut() {
                Some((last, count)) if *last == id => *count += 1,
                _ => entries.push((id, 1)),
            }
        }
        Self { entries }
    }

    pub fn from_multiplicities(mut entries: Vec<(ElementId, usize)>) -> Result<Self> {
        entries.sort_unstable();
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidRound("duplicate element id".into()));
        }
        if entries.iter().any(|e| e.1 == 0) {
            return Err(Error::InvalidRound("zero multiplicity".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(ElementId, usize)] {
        &self.entries
    }

    pub fn multiplicity(&self, id: ElementId) -> usize {
        self.entries.iter().find(|e| e.0 == id).map_or(0, |e| e.1)
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ElementState {
    pub id: ElementId,
    seed: SeedState,
    rng: ChaCha8Rng,
    ys: Vec<i64>,
    /// One-based index of the next unused win-sequence entry.
    pub k: usize,
}

impl ElementState {
    fn new(id: ElementId, params: &SeedParams, stream_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let seed = SeedState::initial(params, &mut rng);
        Self { id, seed, rng, ys: Vec::new(), k: 1 }
    }

    fn extend(&mut self, params: &SeedParams, len: usize) {
        while self.ys.len() < len {
            let y = self.seed.step(params, &mut self.rng);
            self.ys.push(y);
        }
    }

    /// Emitted seed values consumed so far.
    pub fn consumed(&self) -> &[i64] {
        &self.ys[..self.k - 1]
    }
}

/// Win model plus one coupling per multiplicity `r = 1..m-1`; shared across
/// selector instances.
#[derive(Debug, Clone)]
pub struct OcsModel {
    pub model: WinModel,
    pub couplings: Vec<Arc<TournamentCoupling>>,
}

impl OcsModel {
    pub fn new(model: WinModel, cells: usize) -> Result<Self> {
        let m = model.params.m;
        let couplings = (1..m)
            .map(|r| {
                let source = enumerate_prefix(&model, r)?;
                build_coupling(&source, r, m, cells).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, couplings })
    }

    pub fn m(&self) -> usize {
        self.model.params.m
    }

    pub fn coupling(&self, r: usize) -> &TournamentCoupling {
        &self.couplings[r - 1]
    }
}

#[derive(Debug, Clone)]
pub struct OcsState {
    model: Arc<OcsModel>,
    seed: u64,
    elements: HashMap<ElementId, ElementState>,
    rng: ChaCha8Rng,
}

impl OcsState {
    pub fn new(model: Arc<OcsModel>, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED));
        Self { model, seed, elements: HashMap::new(), rng }
    }

    pub fn model(&self) -> &OcsModel {
        &self.model
    }

    pub fn element(&self, id: ElementId) -> Option<&ElementState> {
        self.elements.get(&id)
    }

    fn element_mut(&mut self, id: ElementId) -> &mut ElementState {
        let params = self.model.model.params;
        let seed = mix_seed(self.seed, id);
        self.elements.entry(id).or_insert_with(|| ElementState::new(id, &params, seed))
    }

    /// Desired win probability of `id` at multiplicity `r`, without consuming.
    pub fn peek_desired(&mut self, id: ElementId, r: usize) -> f64 {
        let params = self.model.model.params;
        let el = self.element_mut(id);
        let start = el.k - 1;
        el.extend(&params, start + r);
        let ys = el.ys[start..start + r].to_vec();
        crate::win_distribution::desired_win_probability(&self.model.model, &ys)
    }

    /// One discrete round; returns the winner.
    pub fn step(&mut self, round: &RoundInput) -> Result<ElementId> {
        Ok(self.step_detailed(round)?.0)
    }

    /// One discrete round; also returns each element's desired win
    /// probability (`1.0` for an element holding all `m` slots).
    pub fn step_detailed(&mut self, round: &RoundInput) -> Result<(ElementId, Vec<(ElementId, f64)>)> {
        let m = self.model.m();
        if round.entries.is_empty() {
            return Err(Error::InvalidRound("empty round".into()));
        }
        if round.total() != m {
            return Err(Error::InvalidRound(format!("multiplicities sum to {} instead of {m}", round.total())));
        }
        let mut desired = Vec::with_capacity(round.entries.len());
        let mut winner: Option<(ElementId, f64)> = None;
        for &(id, r) in &round.entries {
            if r == m {
                desired.push((id, 1.0));
                winner = Some((id, f64::INFINITY));
                continue;
            }
            let w = self.peek_desired(id, r);
            let coupling = Arc::clone(&self.model.couplings[r - 1]);
            let strength = coupling.strength(w, &mut self.rng)?;
            desired.push((id, w));
            if winner.is_none_or(|(_, s)| strength > s) {
                winner = Some((id, strength));
            }
        }
        for &(id, r) in &round.entries {
            self.element_mut(id).k += r;
        }
        Ok((winner.unwrap().0, desired))
    }

    /// Fractional round: `m` iid draws from `probs`, with the unassigned mass
    /// given to [`DUMMY`]. Returns `None` when the dummy wins.
    pub fn continuous_step(&mut self, probs: &[(ElementId, f64)]) -> Result<Option<ElementId>> {
        if probs.iter().any(|&(id, q)| q < 0.0 || !q.is_finite() || id == DUMMY) {
            return Err(Error::InvalidRound("negative, non-finite or reserved entry".into()));
        }
        let total: f64 = probs.iter().map(|e| e.1).sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidRound(format!("probabilities sum to {total}")));
        }
        let mut ids = Vec::with_capacity(self.model.m());
        for _ in 0..self.model.m() {
            let mut u: f64 = self.rng.random();
            let mut pick = DUMMY;
            for &(id, q) in probs {
                if u < q {
                    pick = id;
                    break;
                }
                u -= q;
            }
            ids.push(pick);
        }
        let winner = self.step(&RoundInput::from_ids(&ids))?;
        Ok((winner != DUMMY).then_some(winner))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::win_distribution::build_win_model;
    use std::sync::OnceLock;

    pub(crate) fn table_model() -> Arc<OcsModel> {
        static MODEL: OnceLock<Arc<OcsModel>> = OnceLock::new();
        MODEL
            .get_or_init(|| {
                let wm = build_win_model(SeedParams::new(0.48, 6, 30).unwrap()).unwrap();
                Arc::new(OcsModel::new(wm, DEFAULT_CELLS).unwrap())
            })
            .clone()
    }

    #[test]
    fn full_multiplicity_wins_outright() {
        let mut ocs = OcsState::new(table_model(), 1);
        for _ in 0..20 {
            assert_eq!(ocs.step(&RoundInput::from_ids(&[7; 6])).unwrap(), 7);
        }
        assert_eq!(ocs.element(7).unwrap().k, 121);
    }

    #[test]
    fn rejects_bad_rounds() {
        let mut ocs = OcsState::new(table_model(), 1);
        assert!(ocs.step(&RoundInput::from_ids(&[])).is_err());
        assert!(ocs.step(&RoundInput::from_ids(&[1, 2, 3])).is_err());
        assert!(ocs.continuous_step(&[(1, 0.7), (2, 0.4)]).is_err());
        assert!(ocs.continuous_step(&[(1, -0.1)]).is_err());
    }

    #[test]
    fn fresh_elements_win_uniformly() {
        let mut ocs = OcsState::new(table_model(), 2);
        let n = 30_000u64;
        let mut wins = [0u64; 6];
        for t in 0..n {
            let ids: Vec<ElementId> = (0..6).map(|i| t * 6 + i).collect();
            let w = ocs.step(&RoundInput::from_ids(&ids)).unwrap();
            wins[(w - t * 6) as usize] += 1;
        }
        let se = (1.0 / 6.0 * 5.0 / 6.0 / n as f64).sqrt();
        for c in wins {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 4.0 * se);
        }
    }

    #[test]
    fn counters_track_multiplicity() {
        let mut ocs = OcsState::new(table_model(), 3);
        let rounds = [vec![1, 1, 2, 3, 4, 5], vec![1, 6, 7, 8, 9, 10], vec![2, 2, 2, 11, 12, 1]];
        for r in &rounds {
            let round = RoundInput::from_ids(r);
            let winner = ocs.step(&round).unwrap();
            assert!(round.multiplicity(winner) > 0);
        }
        assert_eq!(ocs.element(1).unwrap().k - 1, 4);
        assert_eq!(ocs.element(2).unwrap().k - 1, 4);
        assert_eq!(ocs.element(6).unwrap().k - 1, 1);
    }

    #[test]
    fn all_mass_on_one_element_selects_it() {
        let mut ocs = OcsState::new(table_model(), 4);
        for _ in 0..50 {
            assert_eq!(ocs.continuous_step(&[(5, 1.0)]).unwrap(), Some(5));
        }
    }

    #[test]
    fn empty_fractional_round_selects_nothing() {
        let mut ocs = OcsState::new(table_model(), 4);
        assert_eq!(ocs.continuous_step(&[]).unwrap(), None);
    }

    #[test]
    fn same_seed_replays() {
        let run = |seed| {
            let mut ocs = OcsState::new(table_model(), seed);
            (0..200u64)
                .map(|t| ocs.step(&RoundInput::from_ids(&[0, 0, 1, t + 2, t + 300, t + 600])).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}

//! Every hypothesis state an episode can reach, computed once per scene.

use rayon::prelude::*;

use crate::agent::{advance_hypothesis, AgentSettings, EpisodeEnv, EpisodeParams};
use crate::energymodel::{featurize, FeatureContext, FeatureVector, ScoreInput, Scorer};
use crate::geometry::is_pose_correct;
use crate::scene::{HypothesisPool, SyntheticScene};
use crate::{EnergyNet, Pose};

/// Poses, features, energies, step costs and correctness for each hypothesis
/// `a` and refinement count `τ ∈ 0..=τ_max`. Entry `(a, τ)` lives at
/// `a·(τ_max+1) + τ`.
#[derive(Clone, Debug)]
pub struct PrecomputedStates {
    scene_id: u64,
    n: usize,
    tau_max: u32,
    m_max: u32,
    poses: Vec<Pose>,
    features: Vec<FeatureVector>,
    energies: Vec<(f64, f64)>,
    /// Steps consumed by the refinement that leads from `(a, τ)` to `(a, τ+1)`,
    /// stored at `a·τ_max + τ`.
    steps: Vec<u32>,
    correct: Vec<bool>,
}

struct Chain {
    poses: Vec<Pose>,
    features: Vec<FeatureVector>,
    energies: Vec<(f64, f64)>,
    steps: Vec<u32>,
    correct: Vec<bool>,
}

impl PrecomputedStates {
    /// Refines each hypothesis `τ_max` times and scores every state once,
    /// `N·(τ_max+1)` scorer calls in total.
    pub fn build<S: Scorer + ?Sized>(
        scene: &SyntheticScene,
        pool: &HypothesisPool,
        scorer: &S,
        settings: &AgentSettings,
    ) -> Self {
        let params = settings.episode;
        let ctx = FeatureContext::new(
            scene,
            pool,
            settings.inlier_threshold(scene),
            params.tau_max,
        );
        let score = |pose: &Pose, features: &FeatureVector| {
            scorer.score(&ScoreInput {
                scene,
                pose,
                features,
            })
        };
        let correct = |pose: &Pose| {
            is_pose_correct(
                pose,
                &scene.truth,
                &scene.model,
                settings.threshold_fraction,
            )
        };

        let chains: Vec<Chain> = pool
            .hypotheses
            .par_iter()
            .enumerate()
            .map(|(a, start)| {
                let len = params.tau_max as usize + 1;
                let mut chain = Chain {
                    poses: Vec::with_capacity(len),
                    features: Vec::with_capacity(len),
                    energies: Vec::with_capacity(len),
                    steps: Vec::with_capacity(len - 1),
                    correct: Vec::with_capacity(len),
                };
                let mut pose = *start;
                let mut features = featurize(&ctx, scene, a, &pose, None, 0);
                for tau in 0..=params.tau_max {
                    chain.energies.push(score(&pose, &features));
                    chain.correct.push(correct(&pose));
                    chain.poses.push(pose);
                    chain.features.push(features);
                    if tau < params.tau_max {
                        let (next, next_features, result) =
                            advance_hypothesis(scene, &ctx, a, &pose, tau, params.m_max);
                        chain.steps.push(result.steps_used);
                        pose = next;
                        features = next_features;
                    }
                }
                chain
            })
            .collect();

        let mut out = Self {
            scene_id: scene.scene_id,
            n: pool.pool_size(),
            tau_max: params.tau_max,
            m_max: params.m_max,
            poses: Vec::new(),
            features: Vec::new(),
            energies: Vec::new(),
            steps: Vec::new(),
            correct: Vec::new(),
        };
        for c in chains {
            out.poses.extend(c.poses);
            out.features.extend(c.features);
            out.energies.extend(c.energies);
            out.steps.extend(c.steps);
            out.correct.extend(c.correct);
        }
        out
    }

    pub fn scene_id(&self) -> u64 {
        self.scene_id
    }

    pub fn pool_size(&self) -> usize {
        self.n
    }

    pub fn tau_max(&self) -> u32 {
        self.tau_max
    }

    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    pub fn state_count(&self) -> usize {
        self.poses.len()
    }

    #[inline]
    pub fn index(&self, a: usize, tau: u32) -> usize {
        a * (self.tau_max as usize + 1) + tau as usize
    }

    pub fn pose(&self, a: usize, tau: u32) -> &Pose {
        &self.poses[self.index(a, tau)]
    }

    pub fn features(&self, a: usize, tau: u32) -> &FeatureVector {
        &self.features[self.index(a, tau)]
    }

    /// Feature vectors in storage order.
    pub fn all_features(&self) -> &[FeatureVector] {
        &self.features
    }

    #[inline]
    pub fn energies(&self, a: usize, tau: u32) -> (f64, f64) {
        self.energies[self.index(a, tau)]
    }

    /// Steps consumed by refining `(a, τ)` once; `τ < τ_max`.
    #[inline]
    pub fn steps(&self, a: usize, tau: u32) -> u32 {
        self.steps[a * self.tau_max as usize + tau as usize]
    }

    #[inline]
    pub fn is_correct(&self, a: usize, tau: u32) -> bool {
        self.correct[self.index(a, tau)]
    }

    /// Hypotheses that are correct once refined `τ_max` times.
    pub fn recoverable_count(&self) -> usize {
        (0..self.n)
            .filter(|&a| self.is_correct(a, self.tau_max))
            .count()
    }

    /// Recomputes every energy with `net`: `N·(τ_max+1)` forward passes.
    pub fn rescore(&mut self, net: &EnergyNet) {
        for (e, f) in self.energies.iter_mut().zip(&self.features) {
            *e = net.forward(&f.to_array());
        }
    }

    /// Replaces the energies with those of an arbitrary per-state function.
    pub fn rescore_with(
        &mut self,
        mut f: impl FnMut(usize, u32, &Pose, &FeatureVector) -> (f64, f64),
    ) {
        let stride = self.tau_max as usize + 1;
        for i in 0..self.energies.len() {
            let (a, tau) = (i / stride, (i % stride) as u32);
            self.energies[i] = f(a, tau, &self.poses[i], &self.features[i]);
        }
    }

    /// Fresh episode environment over the table.
    pub fn env(&self, params: &EpisodeParams) -> TableEnv<'_> {
        assert!(
            params.tau_max <= self.tau_max,
            "episode tau_max exceeds the precomputed depth"
        );
        assert_eq!(
            params.m_max, self.m_max,
            "episode m_max differs from the precomputed one"
        );
        TableEnv {
            pre: self,
            taus: vec![0; self.n],
        }
    }
}

/// Convenience wrapper: precomputed states scored by an energy net.
pub fn precompute_states(
    scene: &SyntheticScene,
    pool: &HypothesisPool,
    net: &EnergyNet,
    settings: &AgentSettings,
) -> PrecomputedStates {
    PrecomputedStates::build(scene, pool, net, settings)
}

/// Episode environment that only looks values up in a [`PrecomputedStates`].
pub struct TableEnv<'a> {
    pre: &'a PrecomputedStates,
    taus: Vec<u32>,
}

impl TableEnv<'_> {
    pub fn reset(&mut self) {
        self.taus.iter_mut().for_each(|t| *t = 0);
    }

    pub fn taus(&self) -> &[u32] {
        &self.taus
    }

    pub fn table(&self) -> &PrecomputedStates {
        self.pre
    }
}

impl EpisodeEnv for TableEnv<'_> {
    fn pool_size(&self) -> usize {
        self.pre.n
    }

    #[inline]
    fn tau(&self, a: usize) -> u32 {
        self.taus[a]
    }

    #[inline]
    fn energies(&self, a: usize) -> (f64, f64) {
        self.pre.energies(a, self.taus[a])
    }

    fn refine(&mut self, a: usize, _m_max: u32) -> u32 {
        let steps = self.pre.steps(a, self.taus[a]);
        self.taus[a] += 1;
        steps
    }

    fn is_correct(&self, a: usize) -> bool {
        self.pre.is_correct(a, self.taus[a])
    }
}

//! LinUCB and its corruption-robust variants over a shared feature map.

/// Exploration width for the baseline LinUCB index.
#[derive(Debug, Clone, Copy)]
pub struct LinUcbConfig {
    pub alpha: f64,
    pub ridge: f64,
}

impl Default for LinUcbConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            ridge: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrLinUcbVariant {
    V1,
    V2,
    V3,
}

impl CrLinUcbVariant {
    pub fn name(&self) -> &'static str {
        match self {
            CrLinUcbVariant::V1 => "v1",
            CrLinUcbVariant::V2 => "v2",
            CrLinUcbVariant::V3 => "v3",
        }
    }
}

/// Budget bound C' per variant: v1 uses eps*B*H, v2 divides that by H,
/// v3 takes the geometric mean of the two.
#[derive(Debug, Clone, Copy)]
pub struct CrLinUcbConfig {
    pub budget_bound: f64,
    pub variant: CrLinUcbVariant,
}

impl CrLinUcbConfig {
    pub fn from_attack(epsilon: f64, budget: f64, horizon: usize, variant: CrLinUcbVariant) -> Self {
        let v1 = epsilon * budget * horizon as f64;
        let v2 = epsilon * budget;
        let bound = match variant {
            CrLinUcbVariant::V1 => v1,
            CrLinUcbVariant::V2 => v2,
            CrLinUcbVariant::V3 => (v1 * v2).sqrt(),
        };
        assert!(bound > 0.0);
        Self {
            budget_bound: bound,
            variant,
        }
    }
}

/// Ridge-regression state with an identity prior, shared by LinUCB and
/// CRLinUCB. The inverse design matrix is maintained by Sherman-Morrison
/// rank-one updates.
pub struct LinUcb {
    pub cfg: LinUcbConfig,
    /// Extra confidence width driven by the corruption budget; zero for
    /// plain LinUCB.
    pub corruption_width: f64,
    a_inv: Vec<Vec<f64>>,
    b: Vec<f64>,
    dim: usize,
}

impl LinUcb {
    pub fn new(dim: usize, cfg: LinUcbConfig) -> Self {
        let mut a_inv = vec![vec![0.0; dim]; dim];
        for (i, row) in a_inv.iter_mut().enumerate() {
            row[i] = 1.0 / cfg.ridge;
        }
        Self {
            cfg,
            corruption_width: 0.0,
            a_inv,
            b: vec![0.0; dim],
            dim,
        }
    }

    pub fn new_robust(dim: usize, cfg: LinUcbConfig, cr: CrLinUcbConfig) -> Self {
        let mut s = Self::new(dim, cfg);
        s.corruption_width = cr.budget_bound;
        s
    }

    fn theta(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.a_inv[i][j] * self.b[j]).sum())
            .collect()
    }

    fn mahalanobis(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                q += x[i] * self.a_inv[i][j] * x[j];
            }
        }
        q.max(0.0)
    }

    /// Upper-confidence index per action.
    pub fn scores(&self, features: &[Vec<f64>]) -> Vec<f64> {
        let theta = self.theta();
        let width = self.cfg.alpha + self.corruption_width;
        features
            .iter()
            .map(|x| {
                let est: f64 = theta.iter().zip(x).map(|(t, xi)| t * xi).sum();
                est + width * self.mahalanobis(x).sqrt()
            })
            .collect()
    }

    pub fn observe(&mut self, x: &[f64], reward: f64) {
        // Sherman-Morrison: (A + x x^T)^-1 = A^-1 - (A^-1 x x^T A^-1)/(1 + x^T A^-1 x)
        let ax: Vec<f64> = (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.a_inv[i][j] * x[j]).sum())
            .collect();
        let denom = 1.0 + x.iter().zip(&ax).map(|(xi, ai)| xi * ai).sum::<f64>();
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.a_inv[i][j] -= ax[i] * ax[j] / denom;
            }
        }
        for i in 0..self.dim {
            self.b[i] += reward * x[i];
        }
    }
}

/// Argmax of the variant's upper confidence index over actions.
pub fn select_action_linear(state: &LinUcb, features: &[Vec<f64>], _h: usize) -> usize {
    let scores = state.scores(features);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v3_budget_is_geometric_mean() {
        // v1 = 100, v2 = 1 -> v3 = 10
        let cfg = CrLinUcbConfig::from_attack(1.0, 1.0, 100, CrLinUcbVariant::V3);
        assert!((cfg.budget_bound - 10.0).abs() < 1e-12);
        let v1 = CrLinUcbConfig::from_attack(1.0, 1.0, 100, CrLinUcbVariant::V1);
        assert_eq!(v1.budget_bound, 100.0);
        let v2 = CrLinUcbConfig::from_attack(1.0, 1.0, 100, CrLinUcbVariant::V2);
        assert_eq!(v2.budget_bound, 1.0);
    }

    /// Closed-form ridge oracle on a degenerate d=1 problem: with one
    /// dominant action and noise-free rewards the dominant action is chosen
    /// for every h past initialization.
    #[test]
    fn degenerate_one_dimensional_problem() {
        let features = vec![vec![1.0], vec![0.2]];
        let rewards = [1.0, 0.2]; // reward = <omega, psi>, omega = 1
        let mut lin = LinUcb::new(1, LinUcbConfig::default());
        // play each arm once
        for (a, feats) in features.iter().enumerate() {
            lin.observe(feats, rewards[a]);
        }
        for h in 3..=100 {
            let a = select_action_linear(&lin, &features, h);
            assert_eq!(a, 0, "step {h}");
            lin.observe(&features[a], rewards[a]);

            // ridge oracle: theta_hat = (ridge + sum x^2)^-1 * sum x r
            let mut sxx = 1.0;
            let mut sxr = 0.0;
            sxx += 1.0 * (h - 1) as f64 + 0.04;
            sxr += 1.0 * (h - 1) as f64 + 0.04;
            let theta_oracle = sxr / sxx;
            let theta = lin.theta()[0];
            assert!((theta - theta_oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn sherman_morrison_matches_direct_inverse() {
        let mut lin = LinUcb::new(2, LinUcbConfig::default());
        let xs = [vec![0.3, -0.7], vec![1.1, 0.4], vec![-0.2, 0.9]];
        let mut a = [[1.0, 0.0], [0.0, 1.0]];
        for x in &xs {
            lin.observe(x, 0.5);
            for i in 0..2 {
                for j in 0..2 {
                    a[i][j] += x[i] * x[j];
                }
            }
        }
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((lin.a_inv[i][j] - inv[i][j]).abs() < 1e-10);
            }
        }
    }
}

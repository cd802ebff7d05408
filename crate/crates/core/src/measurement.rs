//! Item measurement models g_j(y | θ).
//!
//! Ordinal items follow P(Y = l | θ) = Φ(b_{l+1} + aθ) − Φ(b_l + aθ), which
//! is the law of the latent response Y* = −aθ + ε cut at the thresholds. With
//! a > 0 a higher θ therefore moves mass toward *lower* levels, the reverse of
//! the usual IRT orientation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ItemType, ResponseValue};
use crate::error::{LgpError, Result};
use crate::normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFactorItem {
    pub a: f64,
    pub b: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbitItem {
    pub a: f64,
    /// b_1 < … < b_n; levels run 0..=n.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Item {
    Linear(LinearFactorItem),
    Probit(ProbitItem),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub items: Vec<Item>,
}

impl LinearFactorItem {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite()) {
            return Err(LgpError::InvalidModel("non-finite linear item parameter".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(LgpError::InvalidModel(format!(
                "error variance must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    pub fn logdensity(&self, y: f64, theta: f64) -> f64 {
        let r = y - self.a * theta - self.b;
        -0.5 * (2.0 * std::f64::consts::PI * self.sigma2).ln() - 0.5 * r * r / self.sigma2
    }
}

impl ProbitItem {
    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() {
            return Err(LgpError::InvalidModel("non-finite probit loading".into()));
        }
        if self.thresholds.is_empty() {
            return Err(LgpError::InvalidModel("probit item needs at least one threshold".into()));
        }
        if self.thresholds.iter().any(|b| !b.is_finite()) {
            return Err(LgpError::InvalidModel("non-finite threshold".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LgpError::InvalidModel(format!(
                "thresholds must be strictly increasing: {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }

    pub fn max_level(&self) -> u32 {
        self.thresholds.len() as u32
    }

    /// (b_l, b_{l+1}) with b_0 = −∞ and b_{n+1} = +∞.
    pub fn bounds(&self, level: u32) -> (f64, f64) {
        let l = level as usize;
        let lo = if l == 0 {
            f64::NEG_INFINITY
        } else {
            self.thresholds[l - 1]
        };
        let hi = self.thresholds.get(l).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    pub fn ln_probability(&self, level: u32, theta: f64) -> f64 {
        let (lo, hi) = self.bounds(level);
        let s = self.a * theta;
        normal::ln_cdf_diff(lo + s, hi + s)
    }

    pub fn probability(&self, level: u32, theta: f64) -> f64 {
        self.ln_probability(level, theta).exp()
    }

    pub fn probabilities(&self, theta: f64) -> Vec<f64> {
        (0..=self.max_level())
            .map(|l| self.probability(l, theta))
            .collect()
    }

    pub fn level_of(&self, latent: f64) -> u32 {
        self.thresholds.iter().take_while(|&&b| b <= latent).count() as u32
    }
}

impl Item {
    pub fn validate(&self) -> Result<()> {
        match self {
            Item::Linear(i) => i.validate(),
            Item::Probit(i) => i.validate(),
        }
    }

    pub fn loading(&self) -> f64 {
        match self {
            Item::Linear(i) => i.a,
            Item::Probit(i) => i.a,
        }
    }

    pub fn item_type(&self) -> ItemType {
        match self {
            Item::Linear(_) => ItemType::Continuous,
            Item::Probit(p) => ItemType::Ordinal {
                max_level: p.max_level(),
            },
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Item::Linear(_))
    }
}

impl MeasurementSpec {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(LgpError::InvalidModel("measurement needs at least one item".into()));
        }
        self.items.iter().try_for_each(Item::validate)
    }

    pub fn all_linear(&self) -> bool {
        self.items.iter().all(Item::is_linear)
    }

    /// Joint log-density of one response vector at a single θ.
    pub fn logdensity(&self, ys: &[ResponseValue], theta: f64) -> Result<f64> {
        if ys.len() != self.items.len() {
            return Err(LgpError::DimensionMismatch {
                expected: self.items.len(),
                got: ys.len(),
            });
        }
        self.items
            .iter()
            .zip(ys)
            .enumerate()
            .map(|(j, (item, y))| item_logdensity_at(j, item, y, theta))
            .sum()
    }
}

fn item_logdensity_at(j: usize, item: &Item, y: &ResponseValue, theta: f64) -> Result<f64> {
    match (item, y) {
        (_, ResponseValue::Missing) => Ok(0.0),
        (Item::Linear(i), ResponseValue::Continuous(v)) => Ok(i.logdensity(*v, theta)),
        (Item::Probit(p), ResponseValue::Ordinal(l)) => {
            if *l > p.max_level() {
                return Err(LgpError::LevelOutOfRange {
                    item: j,
                    level: *l,
                    max: p.max_level(),
                });
            }
            Ok(p.ln_probability(*l, theta))
        }
        (Item::Linear(_), _) => Err(LgpError::ResponseMismatch {
            item: j,
            message: "linear item needs a continuous response".into(),
        }),
        (Item::Probit(_), _) => Err(LgpError::ResponseMismatch {
            item: j,
            message: "probit item needs an ordinal response".into(),
        }),
    }
}

pub fn item_logdensity(item: &Item, y: &ResponseValue, theta: f64) -> Result<f64> {
    item_logdensity_at(0, item, y, theta)
}

pub fn item_sample<R: Rng + ?Sized>(item: &Item, theta: f64, rng: &mut R) -> ResponseValue {
    let e: f64 = rng.sample(StandardNormal);
    match item {
        Item::Linear(i) => ResponseValue::Continuous(i.a * theta + i.b + i.sigma2.sqrt() * e),
        Item::Probit(p) => ResponseValue::Ordinal(p.level_of(-p.a * theta + e)),
    }
}

/// Truncation interval of the latent response for an observed level.
pub fn latent_response_interval(item: &ProbitItem, level: u32) -> Result<(f64, f64)> {
    if level > item.max_level() {
        return Err(LgpError::LevelOutOfRange {
            item: 0,
            level,
            max: item.max_level(),
        });
    }
    Ok(item.bounds(level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn study_item() -> ProbitItem {
        ProbitItem {
            a: 1.0,
            thresholds: vec![0.0, 1.84],
        }
    }

    #[test]
    fn symmetric_binary_case() {
        let item = Item::Probit(ProbitItem {
            a: 1.0,
            thresholds: vec![0.0],
        });
        let v = item_logdensity(&item, &ResponseValue::Ordinal(0), 0.0).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_linear() {
        let item = Item::Linear(LinearFactorItem {
            a: 1.0,
            b: 0.0,
            sigma2: 0.1,
        });
        let v = item_logdensity(&item, &ResponseValue::Continuous(0.7), 0.7).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI * 0.1).ln();
        assert!((v - want).abs() < 1e-14);
        assert_eq!(item_logdensity(&item, &ResponseValue::Missing, 0.7).unwrap(), 0.0);
        assert!(matches!(
            item_logdensity(&item, &ResponseValue::Ordinal(1), 0.0),
            Err(LgpError::ResponseMismatch { .. })
        ));
    }

    #[test]
    fn intervals_of_each_level() {
        let p = study_item();
        assert_eq!(latent_response_interval(&p, 0).unwrap(), (f64::NEG_INFINITY, 0.0));
        assert_eq!(latent_response_interval(&p, 1).unwrap(), (0.0, 1.84));
        assert_eq!(latent_response_interval(&p, 2).unwrap(), (1.84, f64::INFINITY));
        assert!(matches!(
            latent_response_interval(&p, 3),
            Err(LgpError::LevelOutOfRange { level: 3, max: 2, .. })
        ));
    }

    #[test]
    fn mass_function_sums_to_one() {
        let items = [
            study_item(),
            ProbitItem {
                a: 0.65,
                thresholds: vec![-0.25, 0.44],
            },
            ProbitItem {
                a: -1.3,
                thresholds: vec![-1.0, 0.2, 0.9, 2.5],
            },
        ];
        for item in &items {
            for k in 0..=120 {
                let theta = -6.0 + 0.1 * k as f64;
                let s: f64 = item.probabilities(theta).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_response_equivalence() {
        let p = ProbitItem {
            a: 0.62,
            thresholds: vec![-0.27, 1.37],
        };
        for &theta in &[-2.0, -0.3, 0.0, 0.9, 3.1] {
            for l in 0..=2 {
                let (lo, hi) = p.bounds(l);
                let c = -p.a * theta;
                let latent = normal::cdf(hi - c) - normal::cdf(lo - c);
                assert!((latent - p.probability(l, theta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampler_frequencies_match_mass_function() {
        let p = study_item();
        let item = Item::Probit(p.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match item_sample(&item, 0.7, &mut rng) {
                ResponseValue::Ordinal(l) => counts[l as usize] += 1,
                other => panic!("{other:?}"),
            }
        }
        for l in 0..3 {
            let pr = p.probability(l as u32, 0.7);
            let se = (pr * (1.0 - pr) / n as f64).sqrt();
            let f = counts[l] as f64 / n as f64;
            assert!((f - pr).abs() < 3.0 * se, "level {l}: {f} vs {pr}");
        }
    }

    #[test]
    fn both_paths_move_mass_the_same_way() {
        let p = study_item();
        let item = Item::Probit(p.clone());
        let mean_level = |theta: f64| -> (f64, f64) {
            let exact: f64 = p
                .probabilities(theta)
                .iter()
                .enumerate()
                .map(|(l, q)| l as f64 * q)
                .sum();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let n = 20_000;
            let mc: f64 = (0..n)
                .map(|_| match item_sample(&item, theta, &mut rng) {
                    ResponseValue::Ordinal(l) => l as f64,
                    _ => unreachable!(),
                })
                .sum::<f64>()
                / n as f64;
            (exact, mc)
        };
        let (lo_exact, lo_mc) = mean_level(-1.0);
        let (hi_exact, hi_mc) = mean_level(1.0);
        assert!((lo_exact - lo_mc).abs() < 0.03 && (hi_exact - hi_mc).abs() < 0.03);
        assert_eq!(lo_exact > hi_exact, lo_mc > hi_mc);
        // with a > 0 the printed mass function puts more weight on low levels as θ grows
        assert!(hi_exact < lo_exact);
    }

    #[test]
    fn degenerate_noise_and_determinism() {
        let item = Item::Linear(LinearFactorItem {
            a: 0.8,
            b: -0.2,
            sigma2: 1e-12,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match item_sample(&item, 1.5, &mut rng) {
            ResponseValue::Continuous(v) => assert!((v - 1.0).abs() < 1e-5),
            _ => unreachable!(),
        }
        let a = item_sample(&item, 1.5, &mut ChaCha8Rng::seed_from_u64(2));
        let b = item_sample(&item, 1.5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn joint_density_is_sum_of_items() {
        let spec = MeasurementSpec {
            items: vec![
                Item::Linear(LinearFactorItem {
                    a: 1.0,
                    b: 0.3,
                    sigma2: 0.2,
                }),
                Item::Probit(study_item()),
            ],
        };
        let ys = [ResponseValue::Continuous(0.1), ResponseValue::Ordinal(2)];
        let joint = spec.logdensity(&ys, 0.4).unwrap();
        let sum = item_logdensity(&spec.items[0], &ys[0], 0.4).unwrap()
            + item_logdensity(&spec.items[1], &ys[1], 0.4).unwrap();
        assert_eq!(joint, sum);
    }

    #[test]
    fn item_config_parses() {
        let s = r#"[{"kind":"linear","a":1.0,"b":0.0,"sigma2":0.1},
                    {"kind":"probit","a":0.65,"thresholds":[-0.25,0.44]}]"#;
        let items: Vec<Item> = serde_json::from_str(s).unwrap();
        assert!(items[0].is_linear());
        assert_eq!(items[1].item_type(), ItemType::Ordinal { max_level: 2 });
        assert!(serde_json::from_str::<Item>(r#"{"kind":"logit","a":1.0}"#).is_err());
    }
}

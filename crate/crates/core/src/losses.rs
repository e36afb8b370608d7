//! Task losses, regularizers and their unweighted sum.
//!
//! All functions append to a [`Graph`] and return the scalar loss node, so
//! the same code serves training (`f32`) and gradient checks (`f64`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Mean squared error between the normalized key frame and its recovery.
pub fn appearance_loss<T: Real>(g: &mut Graph<'_, T>, x1: Var, recovered: Var) -> Result<Var> {
    g.mse(x1, recovered)
}

pub fn categorization_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// `(1/(T−1)) Σ_t [MSE(m̂_t, m_t) + MSE(r̂_t, r_t)]` over the channel layout
/// `[m₂ (2), r₂ (C), m₃ (2), …]`.
pub fn motion_loss<T: Real>(g: &mut Graph<'_, T>, predicted: Var, target: Var, channels: usize) -> Result<Var> {
    let (ps, ts) = (g.value(predicted).shape().to_vec(), g.value(target).shape().to_vec());
    let group = 2 + channels;
    if ps != ts || ps.len() != 4 || ps[1] == 0 || ps[1] % group != 0 {
        return Err(Error::Dimension(format!(
            "motion loss needs equal [N, (T-1)(2+{channels}), H, W] shapes, got {ps:?} and {ts:?}"
        )));
    }
    let steps = ps[1] / group;
    let mut total: Option<Var> = None;
    for t in 0..steps {
        for (start, len) in [(t * group, 2), (t * group + 2, channels)] {
            let p = g.select_channels(predicted, start, len)?;
            let q = g.select_channels(target, start, len)?;
            let term = g.mse(p, q)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    g.scale(total.expect("at least one step"), 1.0 / steps as f64)
}

/// Regression targets of the least-squares adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLabels {
    pub real: f64,
    pub fake: f64,
}

impl AdversarialLabels {
    /// Real frames regress to 0 and synthetic ones to 1; `swap` gives the
    /// more common real→1, fake→0.
    pub fn new(swap: bool) -> Self {
        if swap {
            Self { real: 1.0, fake: 0.0 }
        } else {
            Self { real: 0.0, fake: 1.0 }
        }
    }
}

fn squared_distance_to<T: Real>(g: &mut Graph<'_, T>, x: Var, target: f64) -> Result<Var> {
    let d = g.add_scalar(x, -target)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Discriminator objective on score maps of real key frames and synthetic
/// frames; the synthetic scores must come from a detached input.
pub fn discriminator_loss<T: Real>(g: &mut Graph<'_, T>, real_scores: Var, fake_scores: Var, labels: AdversarialLabels) -> Result<Var> {
    let r = squared_distance_to(g, real_scores, labels.real)?;
    let f = squared_distance_to(g, fake_scores, labels.fake)?;
    g.add(r, f)
}

/// Generator-side adversarial term: synthetic scores pushed to the real label.
pub fn generator_adversarial_loss<T: Real>(g: &mut Graph<'_, T>, fake_scores: Var, labels: AdversarialLabels) -> Result<Var> {
    squared_distance_to(g, fake_scores, labels.real)
}

/// `(1/T) Σ_t mean_{n,c} (Ave(x_t) − Ave(x̂))²` where `frame_means[t]` holds
/// `Ave(x_t)` as `[N, C]`.
pub fn color_consistency_loss<T: Real>(g: &mut Graph<'_, T>, frame_means: &[Tensor<T>], synthetic: Var) -> Result<Var> {
    if frame_means.is_empty() {
        return Err(Error::Contract("colour loss needs at least one frame".into()));
    }
    let ave = g.mean_spatial(synthetic)?;
    let mut total: Option<Var> = None;
    for m in frame_means {
        let target = g.input(m.clone());
        let term = g.mse(target, ave)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    g.scale(total.expect("non-empty"), 1.0 / frame_means.len() as f64)
}

/// Which terms of the joint objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub app: bool,
    pub cat: bool,
    pub mot: bool,
    pub adv: bool,
    pub color: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossFlags {
    pub const ALL: Self = Self { app: true, cat: true, mot: true, adv: true, color: true };

    /// Builds flags from comma-separated task (`app,cat,mot`) and
    /// regularizer (`adv,color`) lists; `none` or an empty list disables all.
    pub fn parse(tasks: &str, regs: &str) -> Result<Self> {
        let mut f = Self { app: false, cat: false, mot: false, adv: false, color: false };
        for t in items(tasks) {
            match t {
                "app" => f.app = true,
                "cat" => f.cat = true,
                "mot" => f.mot = true,
                other => return Err(Error::Config(format!("unknown task `{other}` (expected app, cat, mot)"))),
            }
        }
        for r in items(regs) {
            match r {
                "adv" => f.adv = true,
                "color" => f.color = true,
                other => return Err(Error::Config(format!("unknown regularizer `{other}` (expected adv, color)"))),
            }
        }
        if !(f.app || f.cat || f.mot) {
            return Err(Error::Config("at least one task must be enabled".into()));
        }
        Ok(f)
    }

    pub fn tasks_string(&self) -> String {
        join([("app", self.app), ("cat", self.cat), ("mot", self.mot)])
    }

    pub fn regs_string(&self) -> String {
        join([("adv", self.adv), ("color", self.color)])
    }

    /// The seven non-empty task combinations, regularizers as given.
    pub fn task_ablations(adv: bool, color: bool) -> Vec<Self> {
        (1u8..8)
            .map(|bits| Self { app: bits & 1 != 0, cat: bits & 2 != 0, mot: bits & 4 != 0, adv, color })
            .collect()
    }
}

fn items(list: &str) -> impl Iterator<Item = &str> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none")
}

fn join<const N: usize>(parts: [(&str, bool); N]) -> String {
    let on: Vec<&str> = parts.iter().filter(|p| p.1).map(|p| p.0).collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join(",")
    }
}

/// Loss values of one step. Disabled terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_app: f64,
    pub l_cat: f64,
    pub l_mot: f64,
    pub r_adv_d: f64,
    pub r_adv_g: f64,
    pub r_color: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,l_app,l_cat,l_mot,r_adv_d,r_adv_g,r_color,total";

impl LossReport {
    /// Sum of the enabled terms; the discriminator's own loss never counts.
    pub fn total_of(&self, flags: LossFlags) -> f64 {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        pick(flags.app, self.l_app)
            + pick(flags.cat, self.l_cat)
            + pick(flags.mot, self.l_mot)
            + pick(flags.adv, self.r_adv_g)
            + pick(flags.color, self.r_color)
    }

    /// Zeroes disabled terms and recomputes the total.
    pub fn masked(mut self, flags: LossFlags) -> Self {
        if !flags.app {
            self.l_app = 0.0;
        }
        if !flags.cat {
            self.l_cat = 0.0;
        }
        if !flags.mot {
            self.l_mot = 0.0;
        }
        if !flags.adv {
            self.r_adv_g = 0.0;
            self.r_adv_d = 0.0;
        }
        if !flags.color {
            self.r_color = 0.0;
        }
        self.total = self.total_of(flags);
        self
    }

    pub fn csv_line(&self, step: u64, lr: f64) -> String {
        format!(
            "{step},{lr:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.l_app, self.l_cat, self.l_mot, self.r_adv_d, self.r_adv_g, self.r_color, self.total
        )
    }

    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_app", self.l_app),
            ("l_cat", self.l_cat),
            ("l_mot", self.l_mot),
            ("r_adv_d", self.r_adv_d),
            ("r_adv_g", self.r_adv_g),
            ("r_color", self.r_color),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// Running average helper: adds `other` scaled by `weight`.
    pub fn accumulate(&mut self, other: &LossReport, weight: f64) {
        self.l_app += weight * other.l_app;
        self.l_cat += weight * other.l_cat;
        self.l_mot += weight * other.l_mot;
        self.r_adv_d += weight * other.r_adv_d;
        self.r_adv_g += weight * other.r_adv_g;
        self.r_color += weight * other.r_color;
        self.total += weight * other.total;
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "app {:.4} cat {:.4} mot {:.4} adv_d {:.4} adv_g {:.4} color {:.4} total {:.4}",
            self.l_app, self.l_cat, self.l_mot, self.r_adv_d, self.r_adv_g, self.r_color, self.total
        )
    }
}

impl FromStr for LossFlags {
    type Err = Error;

    /// `tasks[/regs]`, e.g. `app,cat,mot/adv,color`.
    fn from_str(s: &str) -> Result<Self> {
        let (tasks, regs) = s.split_once('/').unwrap_or((s, ""));
        Self::parse(tasks, regs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<'_, f64>, shape: &[usize], v: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, v).unwrap(), true)
    }

    #[test]
    fn appearance_constant_offset_is_its_square() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[1, 1, 2, 2], vec![0.0; 4]);
        let b = leaf(&mut g, &[1, 1, 2, 2], vec![0.3; 4]);
        let l = appearance_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - 0.09).abs() < 1e-15);
        let l2 = appearance_loss(&mut g, b, a).unwrap();
        assert_eq!(g.value(l).item(), g.value(l2).item());
    }

    #[test]
    fn motion_loss_averages_over_steps() {
        let mut g = Graph::<f64>::new();
        // one step, C = 1: channels [dy, dx, r]
        let target = leaf(&mut g, &[1, 3, 1, 2], vec![0.0; 6]);
        let pred = leaf(&mut g, &[1, 3, 1, 2], vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0]);
        let l = motion_loss(&mut g, pred, target, 1).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
        let bad = leaf(&mut g, &[1, 4, 1, 2], vec![0.0; 8]);
        assert!(matches!(motion_loss(&mut g, bad, bad, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn adversarial_optimum_and_midpoint() {
        let labels = AdversarialLabels::new(false);
        let mut g = Graph::<f64>::new();
        let real = leaf(&mut g, &[2, 1, 1, 1], vec![0.0; 2]);
        let fake = leaf(&mut g, &[2, 1, 1, 1], vec![1.0; 2]);
        let d = discriminator_loss(&mut g, real, fake, labels).unwrap();
        let gen = generator_adversarial_loss(&mut g, fake, labels).unwrap();
        assert_eq!((g.value(d).item(), g.value(gen).item()), (0.0, 1.0));
        let half = leaf(&mut g, &[2, 1, 2, 2], vec![0.5; 8]);
        let d = discriminator_loss(&mut g, half, half, labels).unwrap();
        assert!((g.value(d).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn color_loss_of_constant_frames() {
        let mut g = Graph::<f64>::new();
        let xhat = leaf(&mut g, &[1, 3, 2, 2], vec![0.5; 12]);
        let means = vec![Tensor::full(&[1, 3], 0.2); 4];
        let l = color_consistency_loss(&mut g, &means, xhat).unwrap();
        assert!((g.value(l).item() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn flag_parsing_and_ablation_table() {
        let f = LossFlags::parse("cat,mot", "adv,color").unwrap();
        assert!(!f.app && f.cat && f.mot && f.adv && f.color);
        assert_eq!(f.tasks_string(), "cat,mot");
        assert!(LossFlags::parse("app,fly", "").is_err());
        assert!(LossFlags::parse("", "adv").is_err());
        let table = LossFlags::task_ablations(true, true);
        assert_eq!(table.len(), 7);
        let names: Vec<_> = table.iter().map(LossFlags::tasks_string).collect();
        for want in ["app", "cat", "mot", "app,cat", "app,mot", "cat,mot", "app,cat,mot"] {
            assert!(names.iter().any(|n| n == want), "{want}");
        }
    }

    #[test]
    fn total_counts_enabled_parts_only() {
        let r = LossReport { l_app: 1.0, l_cat: 1.0, l_mot: 1.0, r_adv_d: 1.0, r_adv_g: 1.0, r_color: 1.0, total: 0.0 };
        assert_eq!(r.total_of(LossFlags::ALL), 5.0);
        let mot = LossFlags { app: false, ..LossFlags::ALL };
        assert_eq!(r.masked(mot).total, 4.0);
        assert_eq!(r.masked(mot).l_app, 0.0);
    }
}
